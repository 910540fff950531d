//! Run directory files: `steps.csv`, `snapshot_<k>.json` and `report.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditions::ConditionsReport;
use crate::diagnostics::{BoundRow, RunMeta, StepDiagnostics};
use crate::error::{IsphError, Result};
use crate::floats::{cell, parse_cell};
use crate::schemes::Trajectory;
use crate::state::ParticleState;

pub const STEPS_FILE: &str = "steps.csv";
pub const REPORT_FILE: &str = "report.json";

/// Column order of `steps.csv`. Empty cells mean "not measured".
pub const STEPS_COLUMNS: [&str; 24] = [
    "k",
    "t",
    "dt_k",
    "u_l2",
    "u_h1",
    "u_l2_sq",
    "prediction_iters",
    "poisson_iters",
    "connectivity_ok",
    "semireg_s",
    "dt_limit",
    "dt_admissible",
    "f_hm1_sq",
    "f_l2_sq",
    "bound_c",
    "bound_lhs",
    "bound_rhs",
    "bound_ok",
    "bound_vacuous",
    "bound_proven",
    "out_of_bounds",
    "volume_solve_ok",
    "min_volume",
    "semireg_residual",
];

fn opt_f(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

fn opt_b(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

fn cells(r: &StepDiagnostics) -> Vec<String> {
    let b = r.bound.as_ref();
    vec![
        r.k.to_string(),
        cell(r.t),
        cell(r.dt),
        cell(r.u_l2),
        cell(r.u_h1),
        cell(r.u_l2_sq),
        r.prediction_iters.to_string(),
        r.poisson_iters.to_string(),
        opt_b(r.connectivity_ok),
        opt_f(r.semireg_s),
        opt_f(r.dt_limit),
        opt_f(r.dt_admissible),
        opt_f(r.f_hm1_sq),
        opt_f(r.f_l2_sq),
        opt_f(b.map(|b| b.c)),
        opt_f(b.map(|b| b.lhs)),
        opt_f(b.map(|b| b.rhs)),
        opt_b(b.map(|b| b.ok)),
        opt_b(b.map(|b| b.vacuous)),
        opt_b(b.map(|b| b.proven)),
        r.out_of_bounds.to_string(),
        opt_b(r.volume_solve_ok),
        cell(r.min_volume),
        opt_f(r.semireg_residual),
    ]
}

/// Streams rows of `steps.csv`.
pub struct StepsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl StepsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> StepsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(STEPS_COLUMNS)?;
        Ok(StepsWriter { inner })
    }

    pub fn write(&mut self, row: &StepDiagnostics) -> Result<()> {
        self.inner.write_record(cells(row))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| IsphError::Io(std::io::Error::other(e.to_string())))
    }
}

/// `steps.csv` as a string.
pub fn steps_to_string(rows: &[StepDiagnostics]) -> Result<String> {
    let mut w = StepsWriter::new(Vec::new())?;
    for r in rows {
        w.write(r)?;
    }
    String::from_utf8(w.into_inner()?).map_err(|e| IsphError::Numeric(e.to_string()))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IsphError::Usage(format!("steps.csv has no column {name:?}")))
}

/// The bound-relevant columns of a `steps.csv`.
pub fn read_bound_rows(path: &Path) -> Result<Vec<BoundRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let idx = |n| column(&headers, n);
    let (k, dt, u, s, lim, fh, fl) = (
        idx("k")?,
        idx("dt_k")?,
        idx("u_l2_sq")?,
        idx("semireg_s")?,
        idx("dt_limit")?,
        idx("f_hm1_sq")?,
        idx("f_l2_sq")?,
    );
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| -> Result<Option<f64>> {
            parse_cell(rec.get(c).unwrap_or("")).map_err(|e| IsphError::Usage(format!("row {line}: {e}")))
        };
        let need = |c: usize, name: &str| -> Result<f64> {
            get(c)?.ok_or_else(|| IsphError::Usage(format!("row {line}: empty {name}")))
        };
        rows.push(BoundRow {
            k: rec
                .get(k)
                .unwrap_or("")
                .parse()
                .map_err(|e| IsphError::Usage(format!("row {line}: bad k: {e}")))?,
            dt: need(dt, "dt_k")?,
            u_l2_sq: need(u, "u_l2_sq")?,
            semireg_s: get(s)?,
            dt_limit: get(lim)?,
            f_hm1_sq: get(fh)?,
            f_l2_sq: get(fl)?,
        });
    }
    Ok(rows)
}

pub fn snapshot_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("snapshot_{k}.json"))
}

pub fn write_snapshot(dir: &Path, state: &ParticleState) -> Result<()> {
    let file = BufWriter::new(File::create(snapshot_path(dir, state.step))?);
    serde_json::to_writer_pretty(file, &state.to_record())?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<ParticleState> {
    let text = std::fs::read_to_string(path)?;
    ParticleState::from_record(&serde_json::from_str(&text)?)
}

/// Counts of per-step flags over a run; `None` entries are not counted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub checked: usize,
    pub failed: Vec<usize>,
}

impl FlagSummary {
    fn add(&mut self, k: usize, flag: Option<bool>) {
        if let Some(ok) = flag {
            self.checked += 1;
            if !ok {
                self.failed.push(k);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: usize,
    pub message: String,
    pub report: Option<ConditionsReport>,
}

/// Final summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: RunMeta,
    pub completed: bool,
    pub steps: usize,
    pub final_time: f64,
    pub final_u_l2: f64,
    pub max_out_of_bounds: usize,
    pub bound: FlagSummary,
    pub vacuous_steps: usize,
    pub correction_growth: FlagSummary,
    pub prediction_energy: FlagSummary,
    pub laplacian_bound: FlagSummary,
    pub failure: Option<RunFailure>,
}

impl RunReport {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let mut bound = FlagSummary::default();
        let mut growth = FlagSummary::default();
        let mut energy = FlagSummary::default();
        let mut lap = FlagSummary::default();
        for r in &t.rows {
            bound.add(r.k, r.bound.as_ref().map(|b| b.ok));
            if let Some(c) = r.chain {
                growth.add(r.k, Some(c.correction_growth_ok));
                energy.add(r.k, c.prediction_energy_ok);
                lap.add(r.k, c.laplacian_margin.map(|m| m <= 1e-10));
            }
        }
        let failure = t.error.as_ref().map(|e| {
            let (step, inner) = match e {
                IsphError::AtStep { step, source } => (*step, source.as_ref()),
                other => (t.final_state.step, other),
            };
            RunFailure {
                step,
                message: e.to_string(),
                report: match inner {
                    IsphError::StepRejected { report, .. } => Some((**report).clone()),
                    _ => None,
                },
            }
        });
        let last = t.rows.last();
        RunReport {
            meta: t.meta.clone(),
            completed: t.error.is_none(),
            steps: t.rows.len().saturating_sub(1),
            final_time: t.final_state.time,
            final_u_l2: last.map_or(0.0, |r| r.u_l2),
            max_out_of_bounds: t.rows.iter().map(|r| r.out_of_bounds).max().unwrap_or(0),
            bound,
            vacuous_steps: t.rows.iter().filter(|r| r.bound.as_ref().is_some_and(|b| b.vacuous)).count(),
            correction_growth: growth,
            prediction_energy: energy,
            laplacian_bound: lap,
            failure,
        }
    }
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let file = BufWriter::new(File::create(dir.join(REPORT_FILE))?);
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{BoundCheck, BoundInputs, Theorem};

    fn row(k: usize) -> StepDiagnostics {
        StepDiagnostics {
            k,
            t: k as f64 * 0.1,
            dt: if k == 0 { 0.0 } else { 0.1 },
            u_l2: 1.0,
            u_h1: 2.0,
            u_l2_sq: 1.0,
            prediction_iters: 3,
            poisson_iters: 4,
            connectivity_ok: (k > 0).then_some(true),
            semireg_s: (k > 0).then_some(2.01),
            dt_limit: (k > 0).then_some(f64::INFINITY),
            dt_admissible: None,
            f_hm1_sq: (k > 0).then_some(0.5),
            f_l2_sq: (k > 0).then_some(0.25),
            inputs: BoundInputs::default(),
            bound: (k > 0).then_some(BoundCheck {
                theorem: Theorem::Two,
                c: 5.0,
                lhs: 1.0,
                rhs: 6.0,
                ok: true,
                vacuous: false,
                proven: true,
            }),
            out_of_bounds: 0,
            volume_solve_ok: None,
            min_volume: 0.01,
            semireg_residual: None,
            chain: None,
            report: None,
        }
    }

    #[test]
    fn steps_round_trip_through_bound_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(STEPS_FILE);
        std::fs::write(&path, steps_to_string(&[row(0), row(1), row(2)]).unwrap()).unwrap();
        let rows = read_bound_rows(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].semireg_s, None);
        assert_eq!(rows[1].semireg_s, Some(2.01));
        assert_eq!(rows[2].dt_limit, Some(f64::INFINITY));
        assert_eq!(rows[2].f_l2_sq, Some(0.25));
    }

    #[test]
    fn header_matches_cells() {
        assert_eq!(cells(&row(1)).len(), STEPS_COLUMNS.len());
        let text = steps_to_string(&[row(0)]).unwrap();
        assert!(text.starts_with("k,t,dt_k,u_l2,u_h1"));
    }
}
