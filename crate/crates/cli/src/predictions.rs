//! Per-scan probability files.
//!
//! One row per scan: `scan_id,label,p_mild,p_moderate,p_severe,p_critical,config_hash`.
//! Probabilities are written in shortest round-trip form, so reading a file
//! back gives the exact `f64` values that produced the report next to it.

use std::path::Path;

use anyhow::{bail, Context, Result};
use covsev_core::dataset::{SeverityLabel, NUM_CLASSES};
use covsev_core::volume::write_atomic;
use ndarray::Array2;

const HEADER: [&str; 7] = [
    "scan_id",
    "label",
    "p_mild",
    "p_moderate",
    "p_severe",
    "p_critical",
    "config_hash",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub scan_ids: Vec<String>,
    pub labels: Vec<SeverityLabel>,
    pub probs: Array2<f64>,
    pub config_hash: String,
}

impl Predictions {
    pub fn new(
        scan_ids: Vec<String>,
        labels: Vec<SeverityLabel>,
        probs: Array2<f64>,
        config_hash: &str,
    ) -> Result<Self> {
        if scan_ids.len() != labels.len() || probs.dim() != (scan_ids.len(), NUM_CLASSES) {
            bail!(
                "{} scans, {} labels and a {:?} probability matrix",
                scan_ids.len(),
                labels.len(),
                probs.dim()
            );
        }
        Ok(Self {
            scan_ids,
            labels,
            probs,
            config_hash: config_hash.to_string(),
        })
    }

    /// Zero-based class indices.
    pub fn y_true(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for (i, id) in self.scan_ids.iter().enumerate() {
            let mut row = vec![id.clone(), self.labels[i].value().to_string()];
            row.extend(self.probs.row(i).iter().map(|p| p.to_string()));
            row.push(self.config_hash.clone());
            w.write_record(&row)?;
        }
        Ok(w.into_inner().context("flushing predictions")?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
        if rdr.headers()?.iter().ne(HEADER) {
            bail!("{}: unexpected header {:?}", path.display(), rdr.headers()?);
        }
        let (mut ids, mut labels, mut values, mut hash) = (Vec::new(), Vec::new(), Vec::new(), None::<String>);
        for (n, row) in rdr.records().enumerate() {
            let row = row.with_context(|| format!("{} row {}", path.display(), n + 1))?;
            let field = |i: usize| row.get(i).unwrap_or_default();
            ids.push(field(0).to_string());
            let value: i64 = field(1)
                .parse()
                .with_context(|| format!("{} row {}: bad label", path.display(), n + 1))?;
            labels.push(SeverityLabel::from_value(value)?);
            for i in 2..2 + NUM_CLASSES {
                values.push(
                    field(i)
                        .parse::<f64>()
                        .with_context(|| format!("{} row {}: bad probability '{}'", path.display(), n + 1, field(i)))?,
                );
            }
            match &hash {
                None => hash = Some(field(6).to_string()),
                Some(h) if h != field(6) => bail!("{} mixes config hashes {h} and {}", path.display(), field(6)),
                Some(_) => {}
            }
        }
        let probs = Array2::from_shape_vec((ids.len(), NUM_CLASSES), values).expect("rows of four");
        Self::new(ids, labels, probs, &hash.unwrap_or_default())
    }

    /// Rejects a file produced under another configuration.
    pub fn expect_hash(&self, hash: &str, path: &Path) -> Result<()> {
        if self.config_hash != hash {
            bail!(
                "{} was produced by config {}, the current config is {hash}; re-run the earlier stages",
                path.display(),
                self.config_hash
            );
        }
        Ok(())
    }

    /// Rows of several files concatenated in order.
    pub fn concat(parts: &[Predictions]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!("no predictions to combine");
        };
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for p in parts {
            if p.config_hash != first.config_hash {
                bail!(
                    "cannot combine predictions of configs {} and {}",
                    first.config_hash,
                    p.config_hash
                );
            }
            ids.extend(p.scan_ids.iter().cloned());
            labels.extend(p.labels.iter().copied());
            values.extend(p.probs.iter().copied());
        }
        let probs = Array2::from_shape_vec((ids.len(), NUM_CLASSES), values).expect("rows of four");
        Self::new(ids, labels, probs, &first.config_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let probs = ndarray::array![[0.1, 0.2, 0.3, 0.4], [1.0 / 3.0, 1.0 / 6.0, 0.25, 0.25]];
        let p = Predictions::new(
            vec!["a".into(), "b".into()],
            vec![SeverityLabel::Critical, SeverityLabel::Mild],
            probs,
            "h1",
        )
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("p.csv");
        p.write(&path).unwrap();
        let back = Predictions::read(&path).unwrap();
        assert_eq!(back, p);
        assert!(back.expect_hash("h2", &path).is_err());
    }
}
