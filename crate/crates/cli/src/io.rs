//! CSV input and output. All files carry a header row.

use std::fs::File;
use std::path::Path;

use robfpca::{FunctionalDataset, Subject};

use crate::CliError;

pub const DATASET_HEADER: [&str; 3] = ["subject_id", "time", "value"];

fn input_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {msg}", path.display()))
}

/// Shortest representation that parses back to the same value.
pub fn num(x: f64) -> String {
    format!("{x}")
}

fn parse_field(path: &Path, line: u64, name: &str, raw: &str) -> Result<f64, CliError> {
    let x: f64 = raw.trim().parse().map_err(|_| input_err(path, format!("line {line}: {name} '{raw}' is not a number")))?;
    if !x.is_finite() {
        return Err(input_err(path, format!("line {line}: {name} is not finite")));
    }
    Ok(x)
}

/// Reads `subject_id,time,value` rows, grouping subjects by first appearance.
/// With `rescale_time` the observed time range is mapped onto `[0, 1]`.
pub fn load_dataset(path: &Path, rescale_time: bool) -> Result<FunctionalDataset, CliError> {
    let file = File::open(path).map_err(|e| input_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| input_err(path, e))?.clone();
    if header.is_empty() {
        return Err(input_err(path, "empty file"));
    }
    if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
        return Err(input_err(path, format!("line 1: expected header {}", DATASET_HEADER.join(","))));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut rows: Vec<(Vec<f64>, Vec<f64>, Vec<u64>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(input_err(path, format!("line {line}: expected 3 fields, found {}", rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(input_err(path, format!("line {line}: empty subject_id")));
        }
        let t = parse_field(path, line, "time", &rec[1])?;
        let x = parse_field(path, line, "value", &rec[2])?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            rows.push((Vec::new(), Vec::new(), Vec::new()));
            rows.len() - 1
        });
        rows[slot].0.push(t);
        rows[slot].1.push(x);
        rows[slot].2.push(line);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: {}", path.display(), robfpca::Error::EmptyDataset)));
    }
    if rescale_time {
        let (lo, hi) = rows
            .iter()
            .flat_map(|r| r.0.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
        if hi <= lo {
            return Err(input_err(path, "cannot rescale time: all observations share one time"));
        }
        for r in &mut rows {
            for t in &mut r.0 {
                *t = (*t - lo) / (hi - lo);
            }
        }
    } else {
        for r in &rows {
            if let Some(i) = r.0.iter().position(|t| !(0.0..=1.0).contains(t)) {
                return Err(input_err(
                    path,
                    format!("line {}: time {} outside [0, 1] (use --rescale-time)", r.2[i], r.0[i]),
                ));
            }
        }
    }
    let subjects = ids.into_iter().zip(rows).map(|(id, (t, x, _))| Subject::new(id, t, x)).collect();
    Ok(FunctionalDataset::new(subjects)?)
}

pub fn save_dataset(path: &Path, data: &FunctionalDataset) -> Result<(), CliError> {
    let mut w = Table::create(path, &DATASET_HEADER)?;
    for s in data.subjects() {
        for (t, x) in s.iter() {
            w.row([s.id.clone(), num(t), num(x)])?;
        }
    }
    w.finish()
}

/// A CSV file being written.
pub struct Table {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| input_err(path, e))?;
        writer.write_record(header).map_err(|e| input_err(path, e))?;
        Ok(Table { path: path.to_path_buf(), writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| input_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(|e| input_err(&self.path, e))
    }
}

/// Reads a headed numeric CSV, checking the header and returning all rows as text fields.
pub fn read_table(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>, CliError> {
    let file = File::open(path).map_err(|e| input_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found = reader.headers().map_err(|e| input_err(path, e))?.clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(input_err(path, format!("line 1: expected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(input_err(path, format!("line {line}: expected {} fields", header.len())));
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

pub fn field(path: &Path, line: u64, name: &str, raw: &str) -> Result<f64, CliError> {
    parse_field(path, line, name, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn groups_by_first_appearance() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "subject_id,time,value\nb,0.1,1\na,0.2,2\nb,0.3,3\n");
        let d = load_dataset(&p, false).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.counts(), vec![2, 1]);
        assert_eq!(d.subjects()[0].id, "b");
        assert_eq!(d.subjects()[0].values, vec![1.0, 3.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write(dir.path(), "bad.csv", "subject_id,time,value\na,0.1,1\na,x,2\n");
        let msg = load_dataset(&bad, false).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        let out = write(dir.path(), "out.csv", "subject_id,time,value\na,0.1,1\na,1.5,2\n");
        let msg = load_dataset(&out, false).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("outside"), "{msg}");
        let d = load_dataset(&out, true).unwrap();
        assert_eq!(d.subjects()[0].times, vec![0.0, 1.0]);
        let empty = write(dir.path(), "empty.csv", "");
        assert!(load_dataset(&empty, false).unwrap_err().to_string().contains("empty"));
        let header_only = write(dir.path(), "h.csv", "subject_id,time,value\n");
        assert!(load_dataset(&header_only, false).unwrap_err().to_string().contains("empty"));
        let wrong = write(dir.path(), "w.csv", "id,t,x\n1,0.5,1\n");
        assert!(load_dataset(&wrong, false).is_err());
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "subject_id,time,value\ns1,0.125,-1.5\ns1,0.75,2\ns2,0.3333333333333333,0.1\n");
        let d = load_dataset(&p, false).unwrap();
        let q = dir.path().join("e.csv");
        save_dataset(&q, &d).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), std::fs::read_to_string(&q).unwrap());
    }
}
