use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::sweep::{run_sweep, SweepResult};
use crate::error::{Result, RhmError};
use crate::grammar::RhmParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: u64,
    pub mean_error: f64,
    pub median_error: f64,
    /// Replicas with a finite test error.
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PStarEstimate {
    pub params: RhmParams,
    /// `n_c m^L`.
    pub predicted: f64,
    /// Absolute error threshold, `threshold · ε_rand`.
    pub target_error: f64,
    pub curve: Vec<CurvePoint>,
    /// `None` when no grid size reaches the target.
    pub p_star: Option<f64>,
    /// The target was already met at the smallest size.
    pub at_lower_edge: bool,
    /// The requested bracket reached `P_max` and was cut.
    pub truncated: bool,
}

impl PStarEstimate {
    pub fn ratio(&self) -> Option<f64> {
        self.p_star.map(|p| p / self.predicted)
    }
}

/// Smallest `P` at which the curve drops below `target`, linear in `log P`
/// between the straddling points. Returns the crossing and whether it was
/// already below at the first point.
pub fn interpolate_crossing(curve: &[(f64, f64)], target: f64) -> Option<(f64, bool)> {
    let i = curve.iter().position(|&(_, e)| e < target)?;
    if i == 0 {
        return Some((curve[0].0, true));
    }
    let (p0, e0) = curve[i - 1];
    let (p1, e1) = curve[i];
    let t = if e0.is_finite() { (e0 - target) / (e0 - e1) } else { 1.0 };
    Some(((p0.ln() + t * (p1.ln() - p0.ln())).exp(), false))
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Averages replicas and reads off `P*` per grid point.
pub fn summarize(cfg: &ExperimentConfig, sweep: &SweepResult) -> Result<Vec<PStarEstimate>> {
    let mode = sweep.mode;
    if !mode.trains() {
        return Err(RhmError::Config(format!("mode {mode:?} has no test errors")));
    }
    let mut out = Vec::new();
    for (gi, params) in cfg.grid.points()?.into_iter().enumerate() {
        let grid = cfg.p_grid.resolve(&params)?;
        let mut curve = Vec::with_capacity(grid.values.len());
        for &p in &grid.values {
            let errors: Vec<f64> = sweep
                .rows
                .iter()
                .filter(|r| r.cell.grid_index == gi && r.cell.p == p)
                .filter_map(|r| r.value(mode, "test_error"))
                .filter(|e| e.is_finite())
                .collect();
            let mean = if errors.is_empty() {
                f64::NAN
            } else {
                errors.iter().sum::<f64>() / errors.len() as f64
            };
            curve.push(CurvePoint {
                p,
                mean_error: mean,
                median_error: median(errors.clone()),
                replicas: errors.len(),
            });
        }
        let target = cfg.threshold * params.eps_rand();
        let points: Vec<(f64, f64)> = curve.iter().map(|c| (c.p as f64, c.mean_error)).collect();
        let crossing = interpolate_crossing(&points, target);
        out.push(PStarEstimate {
            params,
            predicted: params.p_star(),
            target_error: target,
            curve,
            p_star: crossing.map(|c| c.0),
            at_lower_edge: crossing.is_some_and(|c| c.1),
            truncated: grid.truncated,
        });
    }
    Ok(out)
}

/// Trains over the `P` bracket of every grid point and returns the measured
/// sample complexities.
pub fn measure_sample_complexity(cfg: &ExperimentConfig, resume: bool) -> Result<(SweepResult, Vec<PStarEstimate>)> {
    if !cfg.mode.trains() {
        return Err(RhmError::Config(format!(
            "sample complexity needs a training mode, not {:?}",
            cfg.mode
        )));
    }
    let cfg = ExperimentConfig {
        mode: if cfg.mode == Mode::TrainSweep { Mode::Pstar } else { cfg.mode },
        ..cfg.clone()
    };
    let sweep = run_sweep(&cfg, resume)?;
    let estimates = summarize(&cfg, &sweep)?;
    Ok((sweep, estimates))
}
