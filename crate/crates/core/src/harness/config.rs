use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::grammar::RhmParams;
use crate::nn::{ArchKind, ArchSpec, TrainConfig, TEST_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Train networks and record test errors (optionally `S_{2,1}`).
    TrainSweep,
    /// Like `train-sweep`, then read off the sample complexity per grid point.
    Pstar,
    /// Predicted signal and noise against a measured frequency variance.
    Stats,
    /// Synonym / non-synonym distances of one-step representations.
    Onestep,
    /// Layerwise one-step plus clustering learner.
    Cluster,
    /// `train-sweep` on uncorrelated grammars.
    Uncorrelated,
}

impl Mode {
    pub fn trains(self) -> bool {
        matches!(self, Mode::TrainSweep | Mode::Pstar | Mode::Uncorrelated)
    }
}

/// Parameter lists; the grid is their Cartesian product. Empty `m` or `n_c`
/// lists mean "equal to `v`"; `maximal` sets `n_c = v`, `m = v^(s-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub v: Vec<usize>,
    pub m: Vec<usize>,
    pub n_c: Vec<usize>,
    pub s: Vec<usize>,
    #[serde(rename = "L")]
    pub depth: Vec<usize>,
    pub maximal: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            v: vec![],
            m: vec![],
            n_c: vec![],
            s: vec![2],
            depth: vec![2],
            maximal: false,
        }
    }
}

impl GridConfig {
    pub fn points(&self) -> Result<Vec<RhmParams>> {
        if self.v.is_empty() || self.s.is_empty() || self.depth.is_empty() {
            return Err(RhmError::Config("empty parameter grid".into()));
        }
        let mut out = Vec::new();
        for &v in &self.v {
            for &s in &self.s {
                for &l in &self.depth {
                    let ms = if self.maximal {
                        vec![v.pow(s as u32 - 1)]
                    } else if self.m.is_empty() {
                        vec![v]
                    } else {
                        self.m.clone()
                    };
                    let ncs = if self.maximal || self.n_c.is_empty() {
                        vec![v]
                    } else {
                        self.n_c.clone()
                    };
                    for &m in &ms {
                        for &n_c in &ncs {
                            let p = RhmParams::new(v, m, n_c, s, l);
                            p.validate().map_err(|e| RhmError::Config(format!("grid point {p:?}: {e}")))?;
                            out.push(p);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relative {
    Absolute,
    /// Multiples of `n_c m^L`.
    Pstar,
    /// Fractions of `P_max`.
    Pmax,
}

/// Training-set sizes, either explicit `values` or `points` log-spaced values
/// between `min` and `max`, in units set by `relative`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PGrid {
    pub relative: Relative,
    pub values: Vec<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub points: usize,
}

impl Default for PGrid {
    /// The sample-complexity bracket `[1/8, 8] · n_c m^L`.
    fn default() -> Self {
        Self {
            relative: Relative::Pstar,
            values: vec![],
            min: Some(0.125),
            max: Some(8.0),
            points: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedGrid {
    pub values: Vec<u64>,
    /// Some requested sizes reached `P_max` and were dropped.
    pub truncated: bool,
}

impl PGrid {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            match (self.min, self.max) {
                (Some(lo), Some(hi)) if lo > 0.0 && hi >= lo && self.points >= 1 => Ok(()),
                _ => Err(RhmError::Config("P grid needs values, or min, max and points".into())),
            }
        } else if self.values.iter().any(|&x| !(x > 0.0)) {
            Err(RhmError::Config("P grid values must be positive".into()))
        } else {
            Ok(())
        }
    }

    fn raw(&self) -> Vec<f64> {
        if !self.values.is_empty() {
            return self.values.clone();
        }
        let (lo, hi) = (self.min.unwrap_or(1.0), self.max.unwrap_or(1.0));
        if self.points == 1 {
            return vec![lo];
        }
        let step = (hi / lo).ln() / (self.points - 1) as f64;
        (0..self.points).map(|i| lo * (step * i as f64).exp()).collect()
    }

    /// Sizes for one grid point, sorted and deduplicated. Sizes at or above
    /// `P_max` leave no held-out data; they are dropped and replaced by a
    /// single size `⌊7 P_max / 8⌋` when that exceeds the largest kept one.
    pub fn resolve(&self, params: &RhmParams) -> Result<ResolvedGrid> {
        let p_max = params.p_max()?;
        let unit = match self.relative {
            Relative::Absolute => 1.0,
            Relative::Pstar => params.p_star(),
            Relative::Pmax => p_max as f64,
        };
        let mut values: Vec<u64> = self.raw().iter().map(|x| ((x * unit).round() as u64).max(1)).collect();
        values.sort_unstable();
        values.dedup();
        let before = values.len();
        values.retain(|&p| p < p_max);
        let truncated = values.len() < before;
        if truncated {
            let edge = p_max - p_max / 8;
            if values.last().is_none_or(|&last| edge > last) && edge > 0 {
                values.push(edge);
            }
        }
        if values.is_empty() {
            return Err(RhmError::Config(format!("no training-set size below P_max = {p_max}")));
        }
        Ok(ResolvedGrid { values, truncated })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Linear layers including the readout; 0 picks `L+1` for CNNs and 2 for fc.
    pub depth: usize,
    /// Hidden width; 0 picks `8 v^s`.
    pub width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ArchKind::Cnn,
            depth: 0,
            width: 0,
        }
    }
}

impl ArchConfig {
    pub fn spec(&self, params: &RhmParams) -> ArchSpec {
        let width = if self.width == 0 {
            ArchSpec::default_width(params)
        } else {
            self.width
        };
        match self.kind {
            ArchKind::Cnn => ArchSpec::cnn(params, width),
            ArchKind::Fc => ArchSpec::fc(params, if self.depth == 0 { 2 } else { self.depth }, width),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Master seed; every cell seed derives from it.
    pub seed: u64,
    pub replicas: usize,
    pub output: PathBuf,
    pub workers: usize,
    /// Wall-clock budget per cell, in seconds.
    pub cell_budget_secs: f64,
    /// Error threshold for `P*` as a fraction of `ε_rand`.
    pub threshold: f64,
    /// Also record `S_{2,1}` of trained networks.
    pub sensitivity: bool,
    pub whiten: bool,
    pub test_cap: u64,
    pub grid: GridConfig,
    pub p_grid: PGrid,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TrainSweep,
            seed: 0,
            replicas: 10,
            output: PathBuf::from("sweep.csv"),
            workers: 1,
            cell_budget_secs: 600.0,
            threshold: 0.1,
            sensitivity: false,
            whiten: true,
            test_cap: TEST_CAP,
            grid: GridConfig::default(),
            p_grid: PGrid::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RhmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RhmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(RhmError::Config("replicas must be at least 1".into()));
        }
        if !(self.cell_budget_secs > 0.0) {
            return Err(RhmError::Config("cell_budget_secs must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(RhmError::Config("threshold must lie in (0, 1)".into()));
        }
        self.p_grid.validate()?;
        self.train.validate()?;
        for p in self.grid.points()? {
            if self.mode.trains() {
                self.arch.spec(&p).validate()?;
            }
            self.p_grid.resolve(&p)?;
        }
        Ok(())
    }

    pub fn cell_budget(&self) -> Duration {
        Duration::from_secs_f64(self.cell_budget_secs)
    }
}
