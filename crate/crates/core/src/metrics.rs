//! Counting errors and lifelong aggregates.
//!
//! `e[t][i]` is the test MAE on domain `i` after training through domain `t`
//! (both 1-based). Normalized backward transfer is
//! `nBwT_t = mean_{i<t} (e[t][i] - e[i][i]) / e[i][i]`. Every term is at
//! least -1, so the value is bounded below by -1, reached when the latest
//! model predicts every earlier domain perfectly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{validation, Error, Result};

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(validation!("error metric needs at least one sample"));
    }
    if pred.len() != truth.len() {
        return Err(validation!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        ));
    }
    Ok(())
}

pub fn mae(pred_counts: &[f64], true_counts: &[f64]) -> Result<f64> {
    check_pair(pred_counts, true_counts)?;
    let s: f64 = pred_counts
        .iter()
        .zip(true_counts)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(s / pred_counts.len() as f64)
}

pub fn rmse(pred_counts: &[f64], true_counts: &[f64]) -> Result<f64> {
    check_pair(pred_counts, true_counts)?;
    let s: f64 = pred_counts
        .iter()
        .zip(true_counts)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((s / pred_counts.len() as f64).sqrt())
}

fn mean_row(row: &[f64], what: &str) -> Result<f64> {
    if row.is_empty() {
        return Err(validation!("{what} needs at least one domain"));
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean of per-domain MAE values.
pub fn mmae(mae_row: &[f64]) -> Result<f64> {
    mean_row(mae_row, "mMAE")
}

/// Mean of per-domain RMSE values.
pub fn mrmse(rmse_row: &[f64]) -> Result<f64> {
    mean_row(rmse_row, "mRMSE")
}

/// Per-step evaluation results; row `t` holds the domains seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix {
    pub domain_names: Vec<String>,
    pub mae: Vec<Vec<Option<f64>>>,
    pub rmse: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Mae,
    Rmse,
}

impl EvalMatrix {
    pub fn new(domain_names: Vec<String>) -> Self {
        Self {
            domain_names,
            mae: Vec::new(),
            rmse: Vec::new(),
        }
    }

    /// Builds a matrix from dense lower-triangular MAE rows (RMSE left equal).
    pub fn from_mae_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let names = (1..=n).map(|i| format!("d{i}")).collect();
        let mut m = Self::new(names);
        for row in rows {
            m.push_row(row, row)?;
        }
        Ok(m)
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.mae.len()
    }

    /// Appends a row whose first `values.len()` cells are defined.
    pub fn push_row(&mut self, mae: &[f64], rmse: &[f64]) -> Result<()> {
        let n = self.n_domains();
        if mae.len() != rmse.len() || mae.is_empty() || mae.len() > n {
            return Err(validation!(
                "row with {} MAE and {} RMSE values does not fit {n} domains",
                mae.len(),
                rmse.len()
            ));
        }
        if let Some(v) = mae
            .iter()
            .chain(rmse)
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(validation!(
                "evaluation entries must be finite and non-negative, got {v}"
            ));
        }
        let pad = |v: &[f64]| {
            let mut row: Vec<Option<f64>> = v.iter().copied().map(Some).collect();
            row.resize(n, None);
            row
        };
        self.mae.push(pad(mae));
        self.rmse.push(pad(rmse));
        Ok(())
    }

    fn table(&self, m: Measure) -> &[Vec<Option<f64>>] {
        match m {
            Measure::Mae => &self.mae,
            Measure::Rmse => &self.rmse,
        }
    }

    /// Entry after step `t` on domain `i`, both 1-based.
    pub fn entry(&self, m: Measure, t: usize, i: usize) -> Option<f64> {
        self.table(m)
            .get(t.checked_sub(1)?)?
            .get(i.checked_sub(1)?)
            .copied()
            .flatten()
    }

    /// Defined values of row `t` (1-based).
    pub fn row_values(&self, m: Measure, t: usize) -> Vec<f64> {
        self.table(m)
            .get(t.wrapping_sub(1))
            .map(|r| r.iter().flatten().copied().collect())
            .unwrap_or_default()
    }

    /// True when row `t` defines exactly the columns `1..=t`.
    pub fn is_lower_triangular(&self) -> bool {
        let triangular = |table: &[Vec<Option<f64>>]| {
            table
                .iter()
                .enumerate()
                .all(|(t, row)| row.iter().enumerate().all(|(i, v)| v.is_some() == (i <= t)))
        };
        triangular(&self.mae) && triangular(&self.rmse)
    }

    pub fn to_csv(&self, m: Measure) -> String {
        let mut out = String::from("step");
        for name in &self.domain_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, row) in self.table(m).iter().enumerate() {
            write!(out, "{}", t + 1).unwrap();
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    write!(out, "{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the MAE and RMSE tables written by [`EvalMatrix::to_csv`].
    pub fn load(mae_path: &Path, rmse_path: &Path) -> Result<Self> {
        let (names, mae) = parse_csv(mae_path)?;
        let (names_r, rmse) = parse_csv(rmse_path)?;
        if names != names_r || mae.len() != rmse.len() {
            return Err(Error::parse(
                rmse_path,
                "RMSE table does not match the MAE table",
            ));
        }
        Ok(Self {
            domain_names: names,
            mae,
            rmse,
        })
    }
}

type CsvTable = (Vec<String>, Vec<Vec<Option<f64>>>);

fn parse_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() + 1 {
            return Err(Error::parse(
                path,
                format!("row {} has {} cells", k + 1, cells.len()),
            ));
        }
        let row = cells[1..]
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::parse(path, format!("row {}: {e}", k + 1)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((names, rows))
}

fn backward_transfer(e: &EvalMatrix, t: usize, m: Measure) -> Result<f64> {
    if t < 2 {
        return Err(Error::Domain("nBwT undefined for the first domain".into()));
    }
    if t > e.n_rows() {
        return Err(Error::Domain(format!(
            "nBwT_{t} requested but only {} steps are evaluated",
            e.n_rows()
        )));
    }
    let mut acc = 0.0;
    for i in 1..t {
        let diag = e
            .entry(m, i, i)
            .ok_or_else(|| Error::Domain(format!("e[{i}][{i}] is missing")))?;
        let later = e
            .entry(m, t, i)
            .ok_or_else(|| Error::Domain(format!("e[{t}][{i}] is missing")))?;
        if diag <= 0.0 {
            return Err(Error::Domain(format!(
                "e[{i}][{i}] = {diag}; nBwT needs a positive diagonal"
            )));
        }
        acc += (later - diag) / diag;
    }
    Ok(acc / (t - 1) as f64)
}

/// Normalized backward transfer after step `t` (1-based, `t >= 2`).
pub fn nbwt(e: &EvalMatrix, t: usize) -> Result<f64> {
    backward_transfer(e, t, Measure::Mae)
}

/// The same ratio computed on RMSE entries. Not part of the standard report.
pub fn nbwt_rmse(e: &EvalMatrix, t: usize) -> Result<f64> {
    backward_transfer(e, t, Measure::Rmse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[3.0], &[7.0]).unwrap(), 4.0);
        assert_eq!(rmse(&[3.0], &[7.0]).unwrap(), 4.0);
        assert_eq!(mae(&[0.0, 10.0], &[4.0, 4.0]).unwrap(), 5.0);
        assert!((rmse(&[0.0, 10.0], &[4.0, 4.0]).unwrap() - 26f64.sqrt()).abs() < 1e-12);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert!((mmae(&[68.8, 84.3, 7.8, 76.6]).unwrap() - 59.4).abs() <= 0.05 + 1e-9);
        assert!((mrmse(&[113.9, 160.1, 12.2, 364.2]).unwrap() - 162.6).abs() <= 0.05 + 1e-9);
        assert_eq!(mmae(&[42.0]).unwrap(), 42.0);
        assert_eq!(mmae(&[3.5; 6]).unwrap(), 3.5);
        assert!(mmae(&[]).is_err());
    }

    #[test]
    fn nbwt_examples() {
        let e = EvalMatrix::from_mae_rows(&[vec![10.0], vec![10.0, 4.0]]).unwrap();
        assert_eq!(nbwt(&e, 2).unwrap(), 0.0);
        let e = EvalMatrix::from_mae_rows(&[vec![10.0], vec![12.0, 4.0]]).unwrap();
        assert!((nbwt(&e, 2).unwrap() - 0.2).abs() < 1e-15);
        // A fully forgotten row bottoms out at -1 whatever t is; -1/(t-1) only at t = 2.
        let e = EvalMatrix::from_mae_rows(&[vec![5.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(nbwt(&e, 2).unwrap(), -1.0);
        let e =
            EvalMatrix::from_mae_rows(&[vec![5.0], vec![6.0, 2.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(nbwt(&e, 3).unwrap(), -1.0);
        let e =
            EvalMatrix::from_mae_rows(&[vec![5.0], vec![6.0, 2.0], vec![0.0, 2.0, 1.0]]).unwrap();
        assert_eq!(nbwt(&e, 3).unwrap(), -0.5);
    }

    #[test]
    fn nbwt_guards() {
        let e = EvalMatrix::from_mae_rows(&[vec![10.0], vec![12.0, 4.0]]).unwrap();
        assert!(matches!(nbwt(&e, 1), Err(Error::Domain(_))));
        assert!(matches!(nbwt(&e, 3), Err(Error::Domain(_))));
        let z = EvalMatrix::from_mae_rows(&[vec![0.0], vec![1.0, 4.0]]).unwrap();
        assert!(matches!(nbwt(&z, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn rmse_variant_reads_rmse_table() {
        let mut e = EvalMatrix::new(vec!["a".into(), "b".into()]);
        e.push_row(&[10.0], &[20.0]).unwrap();
        e.push_row(&[10.0, 1.0], &[30.0, 1.0]).unwrap();
        assert_eq!(nbwt(&e, 2).unwrap(), 0.0);
        assert_eq!(nbwt_rmse(&e, 2).unwrap(), 0.5);
    }

    #[test]
    fn csv_round_trip_keeps_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = EvalMatrix::new(vec!["a".into(), "b".into(), "c".into()]);
        e.push_row(&[1.5], &[2.5]).unwrap();
        e.push_row(&[1.25, 0.1], &[3.0, 0.2]).unwrap();
        assert!(e.is_lower_triangular());
        let csv = e.to_csv(Measure::Mae);
        assert_eq!(csv, "step,a,b,c\n1,1.5,,\n2,1.25,0.1,\n");
        let (pm, pr) = (dir.path().join("m.csv"), dir.path().join("r.csv"));
        fs::write(&pm, csv).unwrap();
        fs::write(&pr, e.to_csv(Measure::Rmse)).unwrap();
        assert_eq!(EvalMatrix::load(&pm, &pr).unwrap(), e);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            (1..=n)
                .map(|t| prop::collection::vec(0.01f64..100.0, t))
                .collect::<Vec<_>>()
                .prop_map(|mut rows| {
                    for (i, row) in rows.iter_mut().enumerate() {
                        row[i] += 0.5;
                    }
                    rows
                })
        }

        proptest! {
            #[test]
            fn scale_equivariance(rows in matrix(5), c in 0.01f64..100.0) {
                let e = EvalMatrix::from_mae_rows(&rows).unwrap();
                let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
                let s = EvalMatrix::from_mae_rows(&scaled).unwrap();
                for t in 2..=5 {
                    prop_assert!((nbwt(&e, t).unwrap() - nbwt(&s, t).unwrap()).abs() <= 1e-12);
                }
            }

            #[test]
            fn lower_bound(rows in matrix(6)) {
                let e = EvalMatrix::from_mae_rows(&rows).unwrap();
                prop_assert!(nbwt(&e, 2).unwrap() >= -1.0);
                for t in 3..=6 {
                    prop_assert!(nbwt(&e, t).unwrap() >= -1.0 - 1e-15);
                }
            }

            #[test]
            fn monotone_in_entries(rows in matrix(4), i in 1usize..4, bump in 0.1f64..10.0) {
                let e = EvalMatrix::from_mae_rows(&rows).unwrap();
                let base = nbwt(&e, 4).unwrap();
                let mut later = rows.clone();
                later[3][i - 1] += bump;
                prop_assert!(nbwt(&EvalMatrix::from_mae_rows(&later).unwrap(), 4).unwrap() > base);
                let mut diag = rows.clone();
                diag[i - 1][i - 1] += bump;
                prop_assert!(nbwt(&EvalMatrix::from_mae_rows(&diag).unwrap(), 4).unwrap() < base);
            }
        }
    }
}
