//! Datasets and their CSV form.
//!
//! The CSV header is `id,feat_0,...,feat_{d-1},label`. Features (and real
//! labels) are written with 17 significant digits so a read/write cycle is
//! byte-identical; class labels are written as integers.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};

/// Regression target or class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Real(f64),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> LabelKind {
        match self {
            Labels::Real(_) => LabelKind::Real,
            Labels::Class(_) => LabelKind::Class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    Real,
    Class,
}

/// Borrowed view of one example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub y: Target,
}

/// Row-major feature matrix with labels and unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Labels,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Labels, ids: Vec<u64>) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::input("dataset must contain at least one example"));
        }
        if dim == 0 {
            return Err(Error::input("feature dimension must be positive"));
        }
        if features.len() != n * dim {
            return Err(Error::input(format!(
                "expected {} feature values for {n} rows of dimension {dim}, got {}",
                n * dim,
                features.len()
            )));
        }
        if labels.len() != n {
            return Err(Error::input(format!("{} labels for {n} examples", labels.len())));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::input(format!("duplicate example id {dup}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("features must be finite"));
        }
        if let Labels::Real(y) = &labels {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("labels must be finite"));
            }
        }
        Ok(Self { features, dim, labels, ids })
    }

    /// Builds a dataset from rows, numbering ids from `first_id`.
    pub fn from_rows(rows: &[Vec<f64>], labels: Labels, first_id: u64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("rows have differing dimensions"));
        }
        let features = rows.concat();
        let ids = (first_id..first_id + rows.len() as u64).collect();
        Self::new(features, dim, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> Target {
        match &self.labels {
            Labels::Real(y) => Target::Real(y[i]),
            Labels::Class(y) => Target::Class(y[i]),
        }
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example { x: self.row(i), y: self.target(i) }
    }

    pub fn examples(&self) -> impl Iterator<Item = Example<'_>> + '_ {
        (0..self.len()).map(|i| self.example(i))
    }

    /// Largest class index plus one, or `None` for real labels.
    pub fn class_count(&self) -> Option<usize> {
        match &self.labels {
            Labels::Class(y) => y.iter().max().map(|m| m + 1),
            Labels::Real(_) => None,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::input("cannot select an empty subset"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!("row {i} out of range for {} rows", self.len())));
            }
            features.extend_from_slice(self.row(i));
            ids.push(self.ids[i]);
        }
        let labels = match &self.labels {
            Labels::Real(y) => Labels::Real(indices.iter().map(|&i| y[i]).collect()),
            Labels::Class(y) => Labels::Class(indices.iter().map(|&i| y[i]).collect()),
        };
        Self::new(features, self.dim, labels, ids)
    }

    /// All rows except those at `indices`.
    pub fn without(&self, indices: &[usize]) -> Result<Self> {
        let drop: HashSet<usize> = indices.iter().copied().collect();
        let keep: Vec<usize> = (0..self.len()).filter(|i| !drop.contains(i)).collect();
        self.select(&keep)
    }

    /// Concatenates two datasets with matching dimension and label kind.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::input("cannot concatenate datasets of different dimension"));
        }
        let labels = match (&self.labels, &other.labels) {
            (Labels::Real(a), Labels::Real(b)) => Labels::Real([a.as_slice(), b].concat()),
            (Labels::Class(a), Labels::Class(b)) => Labels::Class([a.as_slice(), b].concat()),
            _ => return Err(Error::input("cannot concatenate real and class labels")),
        };
        let features = [self.features.as_slice(), &other.features].concat();
        let ids = [self.ids.as_slice(), &other.ids].concat();
        Self::new(features, self.dim, labels, ids)
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id");
        for j in 0..self.dim {
            let _ = write!(out, ",feat_{j}");
        }
        out.push_str(",label\n");
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.ids[i]);
            for v in self.row(i) {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            match &self.labels {
                Labels::Real(y) => {
                    out.push(',');
                    out.push_str(&fmt_f64(y[i]));
                }
                Labels::Class(y) => {
                    let _ = write!(out, ",{}", y[i]);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str, kind: LabelKind) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "id" || cols[cols.len() - 1] != "label" {
            return Err(Error::Format(format!("bad dataset header `{header}`")));
        }
        let dim = cols.len() - 2;
        for (j, c) in cols[1..=dim].iter().enumerate() {
            if *c != format!("feat_{j}") {
                return Err(Error::Format(format!("expected column feat_{j}, found `{c}`")));
            }
        }
        let mut features = Vec::new();
        let mut ids = Vec::new();
        let mut real = Vec::new();
        let mut class = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(Error::Format(format!(
                    "row {} has {} fields, expected {}",
                    lineno + 1,
                    fields.len(),
                    dim + 2
                )));
            }
            let bad = |what: &str, v: &str| Error::Format(format!("row {}: bad {what} `{v}`", lineno + 1));
            ids.push(fields[0].parse::<u64>().map_err(|_| bad("id", fields[0]))?);
            for f in &fields[1..=dim] {
                features.push(f.parse::<f64>().map_err(|_| bad("feature", f))?);
            }
            let label = fields[dim + 1];
            match kind {
                LabelKind::Real => real.push(label.parse::<f64>().map_err(|_| bad("label", label))?),
                LabelKind::Class => class.push(label.parse::<usize>().map_err(|_| bad("class label", label))?),
            }
        }
        let labels = match kind {
            LabelKind::Real => Labels::Real(real),
            LabelKind::Class => Labels::Class(class),
        };
        Self::new(features, dim, labels, ids)
    }

    pub fn read_csv(path: &Path, kind: LabelKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_csv_str(&text, kind)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            Labels::Class(vec![0, 1, 1]),
            0,
        )
        .unwrap()
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = Dataset::new(vec![1.0, 2.0], 1, Labels::Real(vec![0.0, 0.0]), vec![4, 4]);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn rejects_ragged_rows() {
        let err = Dataset::from_rows(&[vec![1.0], vec![1.0, 2.0]], Labels::Real(vec![0.0, 1.0]), 0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_empty() {
        assert!(Dataset::new(vec![], 2, Labels::Real(vec![]), vec![]).is_err());
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let ds = Dataset::from_rows(
            &[vec![0.1, -2.5e-17], vec![1.0 / 3.0, 7.0]],
            Labels::Real(vec![std::f64::consts::PI, -0.0]),
            10,
        )
        .unwrap();
        let text = ds.to_csv_string();
        let back = Dataset::from_csv_str(&text, LabelKind::Real).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn class_csv_uses_integer_labels() {
        let text = tiny().to_csv_string();
        assert!(text.starts_with("id,feat_0,feat_1,label\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(",0"));
        let back = Dataset::from_csv_str(&text, LabelKind::Class).unwrap();
        assert_eq!(back, tiny());
    }

    #[test]
    fn bad_header_is_a_format_error() {
        let err = Dataset::from_csv_str("id,x,label\n0,1,1\n", LabelKind::Class);
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn select_and_without() {
        let ds = tiny();
        let sub = ds.select(&[2, 0]).unwrap();
        assert_eq!(sub.ids(), &[2, 0]);
        assert_eq!(sub.row(0), &[1.0, 1.0]);
        let rest = ds.without(&[1]).unwrap();
        assert_eq!(rest.ids(), &[0, 2]);
        assert!(ds.select(&[]).is_err());
    }

    #[test]
    fn concat_keeps_order() {
        let a = tiny();
        let b = Dataset::from_rows(&[vec![2.0, 2.0]], Labels::Class(vec![0]), 100).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.ids(), &[0, 1, 2, 100]);
        assert!(a.concat(&a).is_err());
    }
}
