fn main() {
    std::process::exit(zib_core::cli::cli_main(std::env::args_os()));
}
