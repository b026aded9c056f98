use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AccessMode;
use crate::curvature::SecondOrderKind;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_artifact, write_atomic, ByteReader};

const MAGIC: &[u8; 8] = b"DAUNLOSS";

/// `K x (n_train + n_query)` per-example losses; row `k` is member `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    values: Vec<Vec<f64>>,
    column_ids: Vec<u64>,
    n_train: usize,
    member_seeds: Vec<u64>,
}

/// Sidecar metadata written next to a loss matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMatrixMeta {
    pub k: usize,
    pub r: f64,
    pub kind: SecondOrderKind,
    pub access: AccessMode,
    pub use_logits_form: bool,
    pub master_seed: u64,
    pub n_train: usize,
    pub spec_digest: String,
    pub dataset_digest: String,
    pub config_digest: String,
    /// SHA-256 of the CSV bytes.
    pub digest: String,
}

impl LossMatrix {
    pub fn new(values: Vec<Vec<f64>>, column_ids: Vec<u64>, n_train: usize, member_seeds: Vec<u64>) -> Result<Self> {
        let cols = column_ids.len();
        if values.iter().any(|row| row.len() != cols) {
            return Err(Error::input("every loss row must cover every column"));
        }
        if member_seeds.len() != values.len() {
            return Err(Error::input("one seed per member is required"));
        }
        if n_train > cols {
            return Err(Error::input("n_train exceeds the column count"));
        }
        let mut seen = HashSet::with_capacity(cols);
        if let Some(id) = column_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::input(format!("duplicate column id {id}")));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("loss matrix has non-finite entries"));
        }
        Ok(Self { values, column_ids, n_train, member_seeds })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_query(&self) -> usize {
        self.column_ids.len() - self.n_train
    }

    pub fn num_columns(&self) -> usize {
        self.column_ids.len()
    }

    pub fn column_ids(&self) -> &[u64] {
        &self.column_ids
    }

    pub fn train_ids(&self) -> &[u64] {
        &self.column_ids[..self.n_train]
    }

    pub fn query_ids(&self) -> &[u64] {
        &self.column_ids[self.n_train..]
    }

    pub fn member_seeds(&self) -> &[u64] {
        &self.member_seeds
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[c]).collect()
    }

    /// The first `k` members.
    pub fn head(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::input(format!("cannot take {k} of {} members", self.k())));
        }
        Self::new(self.values[..k].to_vec(), self.column_ids.clone(), self.n_train, self.member_seeds[..k].to_vec())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("member,seed");
        for id in &self.column_ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
        for (k, row) in self.values.iter().enumerate() {
            let _ = write!(out, "{},{}", k + 1, self.member_seeds[k]);
            for v in row {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str, n_train: usize) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty loss matrix".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "member" || cols[1] != "seed" {
            return Err(Error::Format("loss matrix header must start with member,seed".into()));
        }
        let ids = cols[2..]
            .iter()
            .map(|c| c.parse::<u64>().map_err(|_| Error::Format(format!("bad column id `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::new();
        let mut seeds = Vec::new();
        for (k, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ids.len() + 2 {
                return Err(Error::Format(format!("loss row {} has {} fields", k + 1, fields.len())));
            }
            if fields[0].parse::<usize>().ok() != Some(k + 1) {
                return Err(Error::Format(format!("loss row {} is out of order", k + 1)));
            }
            seeds.push(fields[1].parse::<u64>().map_err(|_| Error::Format("bad member seed".into()))?);
            values.push(
                fields[2..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad loss `{v}`"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(values, ids, n_train, seeds)
    }

    /// Binary form: magic, `K`, columns, `n_train` (u64 LE), column ids, member
    /// seeds, then row-major f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [self.k(), self.num_columns(), self.n_train] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for id in &self.column_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for s in &self.member_seeds {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(8)? != MAGIC {
            return Err(Error::Format("not a loss matrix file".into()));
        }
        let k = rd.u64()? as usize;
        let cols = rd.u64()? as usize;
        let n_train = rd.u64()? as usize;
        let ids = (0..cols).map(|_| rd.u64()).collect::<Result<Vec<_>>>()?;
        let seeds = (0..k).map(|_| rd.u64()).collect::<Result<Vec<_>>>()?;
        let values = (0..k)
            .map(|_| (0..cols).map(|_| rd.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        rd.finish()?;
        Self::new(values, ids, n_train, seeds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn read_csv(path: &Path, n_train: usize) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("loss matrix is not UTF-8".into()))?;
        Self::from_csv_str(&text, n_train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LossMatrix {
        LossMatrix::new(vec![vec![0.5, 1.0 / 3.0, 2.0], vec![0.25, 1e-20, 7.0]], vec![0, 1, 100], 2, vec![11, 12]).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let lm = sample();
        let text = lm.to_csv_string();
        assert!(text.starts_with("member,seed,0,1,100\n1,11,"));
        let back = LossMatrix::from_csv_str(&text, 2).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn binary_round_trip() {
        let lm = sample();
        assert_eq!(LossMatrix::from_bytes(&lm.to_bytes()).unwrap(), lm);
        assert!(LossMatrix::from_bytes(b"DAUNCURV").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(LossMatrix::new(vec![vec![1.0]], vec![1, 1], 1, vec![0]).is_err());
        assert!(LossMatrix::new(vec![vec![f64::NAN]], vec![1], 1, vec![0]).is_err());
        assert!(LossMatrix::new(vec![vec![1.0, 2.0]], vec![1, 2], 1, vec![]).is_err());
    }

    #[test]
    fn head_keeps_prefix() {
        let lm = sample();
        let h = lm.head(1).unwrap();
        assert_eq!(h.k(), 1);
        assert_eq!(h.member_seeds(), &[11]);
        assert!(lm.head(3).is_err());
        assert_eq!(lm.train_ids(), &[0, 1]);
        assert_eq!(lm.query_ids(), &[100]);
    }
}
