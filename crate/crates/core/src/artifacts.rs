//! On-disk layout of inputs and results.
//!
//! Every artifact is a directory of tab-separated matrices plus, where a
//! record of configuration is needed, a `manifest.json`. Traces hold one
//! sample per line; a sample's matrix is flattened row by row and the header
//! names each column, e.g. `l_3_1` for row 3, factor 1 of `L`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cavi::{CaviRun, ElboPoint, VariationalState};
use crate::error::{Error, Result};
use crate::gibbs::{ChainConfig, ChainInit, FixedBlocks, SampleChain};
use crate::io::{format_f64, read_matrix, read_table, write_bool_matrix, write_json, write_matrix, write_rows};
use crate::model::ModelState;
use crate::relabel::Relabelling;
use crate::simulate::SimulationSpec;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn read_column(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Dimension(format!("{} should have one column, found {}", path.display(), m.ncols())));
    }
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// Write a model state as `l.tsv`, `f.tsv`, `z.tsv`, `tau.tsv` and `alpha.tsv`.
pub fn save_state(dir: impl AsRef<Path>, s: &ModelState) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_matrix(dir.join("l.tsv"), &s.l)?;
    write_matrix(dir.join("f.tsv"), &s.f)?;
    write_bool_matrix(dir.join("z.tsv"), &s.z)?;
    write_matrix(dir.join("tau.tsv"), &column(&s.tau))?;
    write_matrix(dir.join("alpha.tsv"), &column(&s.alpha))
}

pub fn load_state(dir: impl AsRef<Path>) -> Result<ModelState> {
    let dir = dir.as_ref();
    let s = ModelState {
        l: read_matrix(dir.join("l.tsv"))?,
        f: read_matrix(dir.join("f.tsv"))?,
        z: read_matrix(dir.join("z.tsv"))?.map(|v| v != 0.0),
        tau: read_column(&dir.join("tau.tsv"))?,
        alpha: read_column(&dir.join("alpha.tsv"))?,
    };
    s.check_shapes()?;
    s.check_spike()?;
    Ok(s)
}

/// A simulated truth plus the spec that generated it.
pub fn save_truth(dir: impl AsRef<Path>, truth: &ModelState, spec: &SimulationSpec) -> Result<()> {
    let dir = dir.as_ref();
    save_state(dir, truth)?;
    write_json(dir.join("spec.json"), spec)
}

fn names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| format!("{prefix}_{r}_{c}"))).collect()
}

fn flatten(m: &DMatrix<f64>) -> Vec<String> {
    (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| format_f64(m[(r, c)]))).collect()
}

/// Write `samples` as a trace with one flattened matrix per line.
pub fn write_trace(path: impl AsRef<Path>, prefix: &str, samples: &[DMatrix<f64>]) -> Result<()> {
    let (r, c) = samples.first().map_or((0, 0), |m| m.shape());
    write_rows(path, Some(&names(prefix, r, c)), samples.iter().map(flatten))
}

/// Read a trace written by [`write_trace`] back into `rows × cols` matrices.
pub fn read_trace(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<Vec<DMatrix<f64>>> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    if m.ncols() != rows * cols {
        return Err(Error::Dimension(format!(
            "{} has {} columns, expected {rows}×{cols}",
            path.display(),
            m.ncols()
        )));
    }
    Ok((0..m.nrows()).map(|s| DMatrix::from_row_iterator(rows, cols, m.row(s).iter().copied())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub fixed: FixedBlocks,
    /// `"prior"` or `"supplied"`.
    pub init: String,
    pub features: usize,
    pub factors: usize,
    pub samples: usize,
    pub kept: usize,
    pub runtime_seconds: f64,
    pub log_joint: Vec<f64>,
    pub elapsed: Vec<f64>,
}

/// Write a chain as `l.tsv`, `f.tsv`, `z.tsv`, `tau.tsv`, `alpha.tsv` traces
/// and a `manifest.json` with the configuration and per-sample log joints.
pub fn save_chain(dir: impl AsRef<Path>, chain: &SampleChain) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let Some(first) = chain.samples.first() else {
        return Err(Error::InvalidData("cannot save an empty chain".into()));
    };
    let (g, k, n) = (first.n_features(), first.n_factors(), first.n_samples());
    let pick = |f: &dyn Fn(&ModelState) -> DMatrix<f64>| chain.samples.iter().map(f).collect::<Vec<_>>();
    write_trace(dir.join("l.tsv"), "l", &pick(&|s| s.l.clone()))?;
    write_trace(dir.join("f.tsv"), "f", &pick(&|s| s.f.clone()))?;
    write_trace(dir.join("z.tsv"), "z", &pick(&|s| s.z.map(|z| if z { 1.0 } else { 0.0 })))?;
    write_trace(dir.join("tau.tsv"), "tau", &pick(&|s| DMatrix::from_row_slice(1, s.tau.len(), s.tau.as_slice())))?;
    write_trace(dir.join("alpha.tsv"), "alpha", &pick(&|s| DMatrix::from_row_slice(1, s.alpha.len(), s.alpha.as_slice())))?;
    let c = &chain.config;
    let manifest = ChainManifest {
        iterations: c.iterations,
        burn_in: c.burn_in,
        thin: c.thin,
        seed: c.seed,
        fixed: c.fixed,
        init: match c.init {
            ChainInit::PriorDraw => "prior".into(),
            ChainInit::Supplied(_) => "supplied".into(),
        },
        features: g,
        factors: k,
        samples: n,
        kept: chain.len(),
        runtime_seconds: chain.runtime,
        log_joint: chain.log_joint.clone(),
        elapsed: chain.elapsed.clone(),
    };
    write_json(dir.join("manifest.json"), &manifest)
}

/// Read a chain written by [`save_chain`]. A supplied initial state is not
/// stored, so such chains come back with `ChainInit::PriorDraw`.
pub fn load_chain(dir: impl AsRef<Path>) -> Result<SampleChain> {
    let dir = dir.as_ref();
    let m: ChainManifest = crate::io::read_json(dir.join("manifest.json"))?;
    let (g, k, n) = (m.features, m.factors, m.samples);
    let l = read_trace(dir.join("l.tsv"), g, k)?;
    let f = read_trace(dir.join("f.tsv"), k, n)?;
    let z = read_trace(dir.join("z.tsv"), g, k)?;
    let tau = read_trace(dir.join("tau.tsv"), 1, g)?;
    let alpha = read_trace(dir.join("alpha.tsv"), 1, k)?;
    let lens = [l.len(), f.len(), z.len(), tau.len(), alpha.len(), m.log_joint.len(), m.elapsed.len()];
    if lens.iter().any(|&len| len != m.kept) {
        return Err(Error::InvalidData(format!("{}: traces disagree in length", dir.display())));
    }
    let mut samples = Vec::with_capacity(m.kept);
    for s in 0..m.kept {
        let state = ModelState {
            l: l[s].clone(),
            f: f[s].clone(),
            z: z[s].map(|v| v != 0.0),
            tau: DVector::from_row_slice(tau[s].as_slice()),
            alpha: DVector::from_row_slice(alpha[s].as_slice()),
        };
        state.check_shapes()?;
        samples.push(state);
    }
    Ok(SampleChain {
        samples,
        log_joint: m.log_joint,
        elapsed: m.elapsed,
        runtime: m.runtime_seconds,
        config: ChainConfig {
            iterations: m.iterations,
            burn_in: m.burn_in,
            thin: m.thin,
            seed: m.seed,
            init: ChainInit::PriorDraw,
            fixed: m.fixed,
        },
    })
}

/// One line per sample: chain, sample index, `σ(0..K)`, then `ν(0..K)`.
pub fn write_relabelling_log(path: impl AsRef<Path>, per_chain: &[Vec<Relabelling>]) -> Result<()> {
    let k = per_chain.iter().find_map(|rs| rs.first()).map_or(0, Relabelling::len);
    let mut header = vec!["chain".to_string(), "sample".to_string()];
    header.extend((0..k).map(|i| format!("sigma_{i}")));
    header.extend((0..k).map(|i| format!("nu_{i}")));
    let rows = per_chain.iter().enumerate().flat_map(|(c, rs)| {
        rs.iter().enumerate().map(move |(s, r)| {
            let mut row = vec![c.to_string(), s.to_string()];
            row.extend(r.sigma.iter().map(|x| x.to_string()));
            row.extend(r.nu.iter().map(|x| x.to_string()));
            row
        })
    });
    write_rows(path, Some(&header), rows)
}

/// Held-out `(row, column)` pairs, one per line under a `row, col` header.
pub fn write_heldout(path: impl AsRef<Path>, heldout: &[(usize, usize)]) -> Result<()> {
    let header = ["row", "col"].map(String::from);
    write_rows(path, Some(&header), heldout.iter().map(|&(i, j)| vec![i.to_string(), j.to_string()]))
}

pub fn read_heldout(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let path = path.as_ref();
    let table = read_table(path)?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(line, row)| match row.as_slice() {
            [Some(i), Some(j)] if i.fract() == 0.0 && j.fract() == 0.0 && *i >= 0.0 && *j >= 0.0 => {
                Ok((*i as usize, *j as usize))
            }
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line: line + 1 + usize::from(table.header.is_some()),
                message: "expected two non-negative integer indices".into(),
            }),
        })
        .collect()
}

/// Rows of `row, col, observed, predicted, residual` as produced by
/// [`crate::evaluate::residual_table`].
pub fn write_residuals(path: impl AsRef<Path>, rows: &[[f64; 5]]) -> Result<()> {
    let header = ["row", "col", "observed", "predicted", "residual"].map(String::from);
    write_rows(
        path,
        Some(&header),
        rows.iter().map(|r| {
            let mut cells = vec![(r[0] as usize).to_string(), (r[1] as usize).to_string()];
            cells.extend(r[2..].iter().map(|&x| format_f64(x)));
            cells
        }),
    )
}

/// Write the variational parameters. `tau.tsv` and `alpha.tsv` hold the
/// gamma shape and rate side by side.
pub fn save_variational(dir: impl AsRef<Path>, v: &VariationalState) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_matrix(dir.join("eta.tsv"), &v.eta)?;
    write_matrix(dir.join("mu_l.tsv"), &v.mu_l)?;
    write_matrix(dir.join("var_l.tsv"), &v.var_l)?;
    write_matrix(dir.join("mu_f.tsv"), &v.mu_f)?;
    write_matrix(dir.join("var_f.tsv"), &v.var_f)?;
    let pair = |a: &DVector<f64>, b: &DVector<f64>| DMatrix::from_columns(&[a.clone(), b.clone()]);
    write_matrix(dir.join("tau.tsv"), &pair(&v.a_tau, &v.b_tau))?;
    write_matrix(dir.join("alpha.tsv"), &pair(&v.a_alpha, &v.b_alpha))
}

pub fn load_variational(dir: impl AsRef<Path>) -> Result<VariationalState> {
    let dir = dir.as_ref();
    let tau = read_matrix(dir.join("tau.tsv"))?;
    let alpha = read_matrix(dir.join("alpha.tsv"))?;
    if tau.ncols() != 2 || alpha.ncols() != 2 {
        return Err(Error::Dimension("tau.tsv and alpha.tsv need shape and rate columns".into()));
    }
    let v = VariationalState {
        eta: read_matrix(dir.join("eta.tsv"))?,
        mu_l: read_matrix(dir.join("mu_l.tsv"))?,
        var_l: read_matrix(dir.join("var_l.tsv"))?,
        mu_f: read_matrix(dir.join("mu_f.tsv"))?,
        var_f: read_matrix(dir.join("var_f.tsv"))?,
        a_tau: tau.column(0).into_owned(),
        b_tau: tau.column(1).into_owned(),
        a_alpha: alpha.column(0).into_owned(),
        b_alpha: alpha.column(1).into_owned(),
    };
    v.validate()?;
    Ok(v)
}

/// `sweep`, `elapsed`, `elbo` per line, with a header.
pub fn write_elbo_trace(path: impl AsRef<Path>, trace: &[ElboPoint]) -> Result<()> {
    let header = ["sweep", "elapsed", "elbo"].map(String::from);
    write_rows(
        path,
        Some(&header),
        trace.iter().map(|p| vec![p.sweep.to_string(), format_f64(p.elapsed), format_f64(p.elbo)]),
    )
}

pub fn read_elbo_trace(path: impl AsRef<Path>) -> Result<Vec<ElboPoint>> {
    let path = path.as_ref();
    let table = read_table(path)?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(line, r)| match r.as_slice() {
            [Some(s), Some(t), Some(e)] => Ok(ElboPoint {
                sweep: *s as usize,
                elapsed: *t,
                elbo: *e,
            }),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                message: "expected sweep, elapsed and elbo".into(),
            }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub sweeps: usize,
    pub converged: bool,
    pub final_elbo: Option<f64>,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub best: usize,
    pub early_stop_sweeps: Option<usize>,
    pub trials: Vec<TrialRecord>,
}

/// Write one `trial_<t>/elbo.tsv` per run, the best run's parameters under
/// `best/` and the selection record as `manifest.json`.
pub fn save_trials(dir: impl AsRef<Path>, runs: &[CaviRun], best: usize, early_stop: Option<usize>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    for (t, run) in runs.iter().enumerate() {
        let td = dir.join(format!("trial_{t}"));
        create_dir(&td)?;
        write_elbo_trace(td.join("elbo.tsv"), &run.trace)?;
    }
    let best_run = runs
        .get(best)
        .ok_or_else(|| Error::InvalidParameter(format!("best trial {best} out of range")))?;
    save_variational(dir.join("best"), &best_run.state)?;
    let selection = SelectionRecord {
        best,
        early_stop_sweeps: early_stop,
        trials: runs
            .iter()
            .enumerate()
            .map(|(t, r)| TrialRecord {
                trial: t,
                seed: r.seed,
                sweeps: r.sweeps,
                converged: r.converged,
                final_elbo: r.final_elbo(),
                elapsed_seconds: r.elapsed(),
            })
            .collect(),
    };
    write_json(dir.join("manifest.json"), &selection)
}
