//! Tabular subject data and its canonical CSV form:
//! `subject_id,sex,age,site,f000..f{d-1}` with an optional trailing
//! `orig_site` column on harmonized output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numkit::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    fn schema(line: usize, detail: impl Into<String>) -> Self {
        DataError::Schema {
            line,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataTable {
    pub ids: Vec<String>,
    pub sex: Vec<u8>,
    pub age: Vec<f64>,
    pub site: Vec<usize>,
    /// Row-major `n x dim`.
    pub features: Vec<f64>,
    pub dim: usize,
    /// Site each row was acquired at, when `site` holds a harmonization target.
    pub orig_site: Option<Vec<usize>>,
}

impl DataTable {
    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            sex: Vec::new(),
            age: Vec::new(),
            site: Vec::new(),
            features: Vec::new(),
            dim,
            orig_site: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, id: String, sex: u8, age: f64, site: usize, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "feature width");
        self.ids.push(id);
        self.sex.push(sex);
        self.age.push(age);
        self.site.push(site);
        self.features.extend_from_slice(x);
    }

    /// Number of sites implied by the largest site id.
    pub fn n_sites(&self) -> usize {
        self.site.iter().max().map_or(0, |m| m + 1)
    }

    pub fn site_counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &s in &self.site {
            if s < k {
                c[s] += 1;
            }
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut t = DataTable::empty(self.dim);
        for &i in idx {
            t.push(self.ids[i].clone(), self.sex[i], self.age[i], self.site[i], self.row(i));
        }
        t.orig_site = self.orig_site.as_ref().map(|o| idx.iter().map(|&i| o[i]).collect());
        t
    }

    pub fn rows_at_site(&self, site: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.site[i] == site).collect()
    }

    pub fn feature_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.features.clone()).expect("table shape")
    }

    /// Column `j` of the feature matrix.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.features[i * self.dim + j]).collect()
    }

    pub fn read_csv(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(BufReader::new(f))
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || cols[..4] != ["subject_id", "sex", "age", "site"] {
            return Err(DataError::schema(1, "header must start with subject_id,sex,age,site"));
        }
        let has_orig = cols.last() == Some(&"orig_site");
        let feat_cols = &cols[4..cols.len() - usize::from(has_orig)];
        for (j, name) in feat_cols.iter().enumerate() {
            if *name != feature_name(j) {
                return Err(DataError::schema(1, format!("expected column {}, found {name}", feature_name(j))));
            }
        }
        let dim = feat_cols.len();
        let mut table = DataTable::empty(dim);
        let mut orig = Vec::new();
        let mut x = vec![0.0; dim];
        for (r, rec) in rdr.records().enumerate() {
            let line = r + 2;
            let rec = rec?;
            if rec.len() != cols.len() {
                return Err(DataError::schema(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
            }
            let sex: u8 = rec[1]
                .parse()
                .ok()
                .filter(|s| *s <= 1)
                .ok_or_else(|| DataError::schema(line, format!("sex must be 0 or 1, found {:?}", &rec[1])))?;
            let age: f64 = parse_finite(&rec[2], line, "age")?;
            let site: usize = rec[3]
                .parse()
                .map_err(|_| DataError::schema(line, format!("site must be a non-negative integer, found {:?}", &rec[3])))?;
            for (j, v) in x.iter_mut().enumerate() {
                *v = parse_finite(&rec[4 + j], line, feat_cols[j])?;
            }
            if has_orig {
                orig.push(
                    rec[cols.len() - 1]
                        .parse()
                        .map_err(|_| DataError::schema(line, "orig_site must be a non-negative integer"))?,
                );
            }
            table.push(rec[0].to_string(), sex, age, site, &x);
        }
        if has_orig {
            table.orig_site = Some(orig);
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let f = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(f);
        self.to_writer(&mut w)?;
        w.flush().map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "sex".into(), "age".into(), "site".into()];
        header.extend((0..self.dim).map(feature_name));
        if self.orig_site.is_some() {
            header.push("orig_site".into());
        }
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            rec.clear();
            rec.push(self.ids[i].clone());
            rec.push(self.sex[i].to_string());
            rec.push(self.age[i].to_string());
            rec.push(self.site[i].to_string());
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            if let Some(o) = &self.orig_site {
                rec.push(o[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }
}

pub fn feature_name(j: usize) -> String {
    format!("f{j:03}")
}

fn parse_finite(s: &str, line: usize, col: &str) -> Result<f64, DataError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::schema(line, format!("{col} must be a finite number, found {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DataTable {
        let mut t = DataTable::empty(2);
        t.push("a-1".into(), 0, 71.25, 1, &[0.1, -3.0e-7]);
        t.push("b,2".into(), 1, 64.0, 0, &[1.0 / 3.0, 12345.678]);
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,sex,age,site,f000,f001\n"));
        let back = DataTable::from_reader(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn provenance_column_round_trips() {
        let mut t = sample();
        t.orig_site = Some(vec![1, 0]);
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        assert_eq!(DataTable::from_reader(&buf[..]).unwrap(), t);
    }

    #[test]
    fn schema_errors_name_the_line() {
        let bad = "subject_id,sex,age,site,f000\nx,2,60,0,1.0\n";
        let err = DataTable::from_reader(bad.as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Schema { line: 2, .. }), "{err}");
        let bad = "subject_id,sex,age,site,f001\n";
        assert!(DataTable::from_reader(bad.as_bytes()).is_err());
        let bad = "subject_id,sex,age,site,f000\nx,1,60,0,nan\n";
        assert!(DataTable::from_reader(bad.as_bytes()).is_err());
    }
}
