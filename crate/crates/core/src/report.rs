//! Summaries of finished runs: metrics.json, a fixed-width table, forgetting
//! curves and run-to-run comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifelong::{DomainScore, Mode};
use crate::metrics::{mmae, mrmse, nbwt, EvalMatrix, Measure};
use crate::run::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mae: f64,
    pub rmse: f64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub domains: Vec<String>,
    /// nBwT_2 … nBwT_N; empty for single-domain and joint runs.
    pub nbwt_per_step: Vec<f64>,
    pub final_mmae: f64,
    pub final_mrmse: f64,
    pub per_domain_final: BTreeMap<String, Score>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unseen: Option<DomainScore>,
}

impl RunReport {
    pub fn final_nbwt(&self) -> Option<f64> {
        self.nbwt_per_step.last().copied()
    }
}

/// Checks that every expected row is present and correctly shaped.
fn check_complete(mode: Mode, e: &EvalMatrix) -> Result<()> {
    let n = e.n_domains();
    let rows = if mode == Mode::Joint { 1 } else { n };
    for t in 1..=rows {
        let width = if mode == Mode::Joint { n } else { t };
        let row = e.mae.get(t - 1).zip(e.rmse.get(t - 1));
        let ok = row.is_some_and(|(m, r)| {
            (0..n).all(|i| m[i].is_some() == (i < width) && r[i].is_some() == (i < width))
        });
        if !ok {
            return Err(Error::State(format!(
                "evaluation matrix is missing row {t} (after domain {t})"
            )));
        }
    }
    if e.n_rows() > rows {
        return Err(Error::State(format!(
            "evaluation matrix has {} rows, expected {rows}",
            e.n_rows()
        )));
    }
    Ok(())
}

/// Aggregates a complete matrix.
pub fn summarize(mode: Mode, e: &EvalMatrix, unseen: Option<DomainScore>) -> Result<RunReport> {
    check_complete(mode, e)?;
    let last = e.n_rows();
    let mae = e.row_values(Measure::Mae, last);
    let rmse = e.row_values(Measure::Rmse, last);
    let nbwt_per_step = if mode == Mode::Joint {
        Vec::new()
    } else {
        (2..=last).map(|t| nbwt(e, t)).collect::<Result<_>>()?
    };
    Ok(RunReport {
        mode,
        domains: e.domain_names.clone(),
        nbwt_per_step,
        final_mmae: mmae(&mae)?,
        final_mrmse: mrmse(&rmse)?,
        per_domain_final: e
            .domain_names
            .iter()
            .zip(mae.iter().zip(&rmse))
            .map(|(n, (&mae, &rmse))| (n.clone(), Score { mae, rmse }))
            .collect(),
        unseen,
    })
}

/// Domains × {MAE, RMSE} plus the aggregates, one decimal place.
pub fn summary_table(r: &RunReport) -> String {
    let width = r.domains.iter().map(String::len).max().unwrap_or(0).max(8);
    let mut out = String::new();
    writeln!(out, "mode: {}", r.mode.as_str()).unwrap();
    writeln!(out, "{:<width$} {:>9} {:>9}", "domain", "MAE", "RMSE").unwrap();
    for name in &r.domains {
        let s = r.per_domain_final[name];
        writeln!(out, "{name:<width$} {:>9.1} {:>9.1}", s.mae, s.rmse).unwrap();
    }
    writeln!(
        out,
        "{:<width$} {:>9.1} {:>9.1}",
        "mean", r.final_mmae, r.final_mrmse
    )
    .unwrap();
    if let Some(v) = r.final_nbwt() {
        writeln!(out, "{:<width$} {:>9.3}", "nBwT", v).unwrap();
    }
    if let Some(u) = &r.unseen {
        writeln!(
            out,
            "{:<width$} {:>9.1} {:>9.1}",
            format!("{} (unseen)", u.name),
            u.mae,
            u.rmse
        )
        .unwrap();
    }
    out
}

/// Long-format `domain,step,mae,rmse` rows tracing each domain over time.
pub fn forgetting_curves(e: &EvalMatrix) -> String {
    let mut out = String::from("domain,step,mae,rmse\n");
    for (i, name) in e.domain_names.iter().enumerate() {
        for t in 1..=e.n_rows() {
            if let (Some(m), Some(r)) = (
                e.entry(Measure::Mae, t, i + 1),
                e.entry(Measure::Rmse, t, i + 1),
            ) {
                writeln!(out, "{name},{t},{m},{r}").unwrap();
            }
        }
    }
    out
}

/// Side-by-side table of `a` against `b` with `a − b` deltas.
pub fn compare_table(a: &RunReport, b: &RunReport) -> Result<String> {
    if a.domains != b.domains {
        return Err(Error::Config(format!(
            "runs cover different domains: {:?} vs {:?}",
            a.domains, b.domains
        )));
    }
    let (na, nb) = (a.mode.as_str(), b.mode.as_str());
    let width = a.domains.iter().map(String::len).max().unwrap_or(0).max(8);
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$} {:>11} {:>11} {:>9}",
        "metric", na, nb, "delta"
    )
    .unwrap();
    let mut line = |label: String, x: f64, y: f64, prec: usize| {
        writeln!(
            out,
            "{label:<width$} {x:>11.prec$} {y:>11.prec$} {:>+9.prec$}",
            x - y
        )
        .unwrap();
    };
    for name in &a.domains {
        let (x, y) = (a.per_domain_final[name], b.per_domain_final[name]);
        line(format!("{name} MAE"), x.mae, y.mae, 1);
        line(format!("{name} RMSE"), x.rmse, y.rmse, 1);
    }
    line("mMAE".into(), a.final_mmae, b.final_mmae, 1);
    line("mRMSE".into(), a.final_mrmse, b.final_mrmse, 1);
    if let (Some(x), Some(y)) = (a.final_nbwt(), b.final_nbwt()) {
        line("nBwT".into(), x, y, 3);
    }
    Ok(out)
}

fn read_unseen(dir: &Path) -> Result<Option<DomainScore>> {
    let path = dir.join("unseen.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::parse(&path, e))
}

/// Loads and summarizes a run directory.
pub fn load_report(dir: &Path) -> Result<RunReport> {
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    let e = EvalMatrix::load(
        &dir.join("e_matrix_mae.csv"),
        &dir.join("e_matrix_rmse.csv"),
    )?;
    summarize(cfg.mode, &e, read_unseen(dir)?)
}

/// Writes metrics.json, summary.txt, forgetting_curves.csv and, with a
/// comparison run, compare.txt into `dir`. Returns the printable summary.
pub fn write_report(dir: &Path, compare: Option<&Path>) -> Result<String> {
    let report = load_report(dir)?;
    let e = EvalMatrix::load(
        &dir.join("e_matrix_mae.csv"),
        &dir.join("e_matrix_rmse.csv"),
    )?;
    let put = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put(
        "metrics.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut text = summary_table(&report);
    put("summary.txt", &text)?;
    put("forgetting_curves.csv", &forgetting_curves(&e))?;
    if let Some(other) = compare {
        let table = compare_table(&report, &load_report(other)?)?;
        put("compare.txt", &table)?;
        text.push('\n');
        text.push_str(&table);
    }
    Ok(text)
}
