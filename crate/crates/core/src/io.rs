//! Long-format CSV: one row per (subject, question).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{ClusteredDataset, SubjectRecord};
use crate::error::{Result, ZibError};

pub const INTERCEPT_NAME: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct LongSchema {
    pub outcome: String,
    pub id: String,
    pub question: String,
    pub covariates: Vec<String>,
    /// Product columns `a:b`.
    pub interactions: Vec<(String, String)>,
    pub intercept: bool,
}

impl LongSchema {
    pub fn new(outcome: &str, id: &str, question: &str, covariates: &[&str]) -> Self {
        LongSchema {
            outcome: outcome.into(),
            id: id.into(),
            question: question.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            interactions: Vec::new(),
            intercept: true,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push(INTERCEPT_NAME.to_string());
        }
        names.extend(self.covariates.iter().cloned());
        names.extend(self.interactions.iter().map(|(a, b)| format!("{a}:{b}")));
        names
    }
}

/// Parses `a:b,c:d` into column pairs.
pub fn parse_interactions(spec: &str) -> Result<Vec<(String, String)>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|term| match term.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(':') => {
                Ok((a.trim().to_string(), b.trim().to_string()))
            }
            _ => Err(ZibError::Config(format!("bad interaction term '{term}', expected colA:colB"))),
        })
        .collect()
}

pub fn read_long_csv(path: &Path, schema: &LongSchema) -> Result<ClusteredDataset> {
    let file = std::fs::File::open(path)?;
    read_long_csv_from(file, schema)
}

pub fn read_long_csv_from<R: Read>(reader: R, schema: &LongSchema) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ZibError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let q_col = col(&schema.question)?;
    let y_col = col(&schema.outcome)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let inter_cols = schema
        .interactions
        .iter()
        .map(|(a, b)| Ok((col(a)?, col(b)?)))
        .collect::<Result<Vec<_>>>()?;

    // subject id -> (question -> (y, design row)), in order of first appearance
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<u32, (u8, Vec<f64>)>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_err = |message: String| ZibError::Parse { line, message };
        let id = field(id_col).to_string();
        let question: u32 = field(q_col)
            .parse()
            .ok()
            .filter(|q| *q > 0)
            .ok_or_else(|| parse_err(format!("question '{}' is not a positive integer", field(q_col))))?;
        let y = match field(y_col) {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(parse_err(format!("outcome '{other}' is not 0 or 1"))),
        };
        let num = |i: usize, name: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| parse_err(format!("column '{name}': '{}' is not a number", field(i))))
        };
        let mut design = Vec::with_capacity(schema.column_names().len());
        if schema.intercept {
            design.push(1.0);
        }
        for (&c, name) in cov_cols.iter().zip(&schema.covariates) {
            design.push(num(c, name)?);
        }
        for (&(a, b), (na, nb)) in inter_cols.iter().zip(&schema.interactions) {
            design.push(num(a, na)? * num(b, nb)?);
        }
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if entry.insert(question, (y, design)).is_some() {
            return Err(ZibError::DuplicateQuestion { subject: id, question });
        }
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let qs = rows.remove(&id).unwrap_or_default();
            let (y, x): (Vec<u8>, Vec<Vec<f64>>) = qs.into_values().unzip();
            SubjectRecord::new(id, y, x)
        })
        .collect();
    ClusteredDataset::new(subjects, schema.column_names(), schema.intercept)
}

/// Writes `data` in long format with columns `id, question, y` followed by
/// the non-intercept design columns. Questions are numbered 1..J per subject.
pub fn write_long_csv<W: Write>(data: &ClusteredDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let skip = usize::from(data.has_intercept());
    let mut header = vec!["id".to_string(), "question".to_string(), "y".to_string()];
    header.extend(data.column_names()[skip..].iter().cloned());
    w.write_record(&header)?;
    for s in data.subjects() {
        for (q, (y, row)) in s.y.iter().zip(&s.x).enumerate() {
            let mut rec = vec![s.id.clone(), (q + 1).to_string(), y.to_string()];
            rec.extend(row[skip..].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Schema matching the output of [`write_long_csv`].
pub fn schema_for(data: &ClusteredDataset) -> LongSchema {
    let skip = usize::from(data.has_intercept());
    LongSchema {
        outcome: "y".into(),
        id: "id".into(),
        question: "question".into(),
        covariates: data.column_names()[skip..].to_vec(),
        interactions: Vec::new(),
        intercept: data.has_intercept(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "id,q,y,age,grp\nb,2,1,0.5,1\na,1,0,1.5,0\na,2,1,1.5,1\nb,1,0,0.5,0\n";

    #[test]
    fn reads_and_groups_rows() {
        let schema = LongSchema::new("y", "id", "q", &["age"]);
        let d = read_long_csv_from(SMALL.as_bytes(), &schema).unwrap();
        assert_eq!(d.n_subjects(), 2);
        assert_eq!(d.n_covariates(), 2);
        let b = &d.subjects()[0];
        assert_eq!(b.id, "b");
        assert_eq!(b.y, vec![0, 1]);
        assert_eq!(b.x[0], vec![1.0, 0.5]);
    }

    #[test]
    fn interaction_columns_are_products() {
        let mut schema = LongSchema::new("y", "id", "q", &["age", "grp"]);
        schema.interactions = parse_interactions("age:grp").unwrap();
        let d = read_long_csv_from(SMALL.as_bytes(), &schema).unwrap();
        assert_eq!(d.column_names().last().unwrap(), "age:grp");
        assert_eq!(d.subjects()[1].x[1], vec![1.0, 1.5, 1.0, 1.5]);
        assert!(parse_interactions("age").is_err());
    }

    #[test]
    fn bad_outcome_reports_line() {
        let text = "id,q,y,age\na,1,0,1\na,2,yes,1\n";
        let err = read_long_csv_from(text.as_bytes(), &LongSchema::new("y", "id", "q", &["age"])).unwrap_err();
        assert!(matches!(err, ZibError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn duplicate_question_names_pair() {
        let text = "id,q,y\na,1,0\na,1,1\n";
        let err = read_long_csv_from(text.as_bytes(), &LongSchema::new("y", "id", "q", &[])).unwrap_err();
        assert!(matches!(err, ZibError::DuplicateQuestion { ref subject, question: 1 } if subject == "a"));
    }

    #[test]
    fn missing_column() {
        let err = read_long_csv_from(SMALL.as_bytes(), &LongSchema::new("y", "id", "q", &["height"])).unwrap_err();
        assert!(matches!(err, ZibError::MissingColumn(ref c) if c == "height"));
    }

    #[test]
    fn write_then_read_is_identity() {
        let schema = LongSchema::new("y", "id", "q", &["age", "grp"]);
        let d = read_long_csv_from(SMALL.as_bytes(), &schema).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&d, &mut buf).unwrap();
        let back = read_long_csv_from(buf.as_slice(), &schema_for(&d)).unwrap();
        assert_eq!(back, d);
    }
}
