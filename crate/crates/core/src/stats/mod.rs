//! Correlation statistics of RHM instances.
//!
//! Closed-form moments of single composition rules and of the numerator `U`
//! and denominator `D` of the conditional class frequency, exact and
//! empirical occurrence counts, and the signal/noise estimate of the sample
//! size at which correlations become detectable.

mod counts;
mod sample;

pub use counts::{exact_counts, rule_occurrences, FrequencyTable, Granularity, Patch, Provenance, EXACT_GUARD};
pub use sample::{sample_covariance, SampleStats};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grammar::RhmParams;

/// Moments of `N_i(μ_1; μ_2)` over random composition rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleMoments {
    pub mean_n: f64,
    pub var_n: f64,
    /// Two different children of the same parent.
    pub cov_same_parent: f64,
    /// The same child under two different parents.
    pub cov_same_child: f64,
    /// Different child, different parent.
    pub cov_disjoint: f64,
    /// `m / v^(s-1)`.
    pub density: f64,
}

pub fn rule_moments(params: &RhmParams) -> Result<RuleMoments> {
    params.validate()?;
    let v = params.vocab_size as f64;
    let m = params.multiplicity as f64;
    let vs = params.num_tuples()? as f64;
    let mean = m / v;
    let var_n = mean * ((v - 1.0) / v) * ((vs - m) / (vs - 1.0));
    let cov_same_child = -mean * mean * (v - 1.0) / (vs - 1.0);
    Ok(RuleMoments {
        mean_n: mean,
        var_n,
        cov_same_parent: -var_n / (v - 1.0),
        cov_same_child,
        cov_disjoint: -cov_same_child / (v - 1.0),
        density: m * v / vs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdLevel {
    pub level: usize,
    pub mean_u: f64,
    pub var_u: f64,
    pub cov_u: f64,
    pub mean_d: f64,
    pub var_d: f64,
    pub cov_d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdMoments {
    /// Entry `ℓ - 1` describes a chain of `ℓ` rules.
    pub levels: Vec<UdLevel>,
    /// `var_U(L) - var_D(L)/n_c²` from the iterated product.
    pub signal_difference: f64,
}

impl UdMoments {
    pub fn top(&self) -> &UdLevel {
        self.levels.last().expect("at least one level")
    }
}

/// One step of the level recursion shared by `U` and `D`: prepends a rule to
/// a chain with the given mean and variance.
pub fn ud_step(rm: &RuleMoments, vocab_size: usize, mean_prev: f64, var_prev: f64) -> (f64, f64) {
    let v = vocab_size as f64;
    let mean = v * rm.mean_n * mean_prev;
    let var = v * var_prev * (rm.var_n - rm.cov_same_child)
        + v * mean_prev * mean_prev * (rm.var_n + (v - 1.0) * rm.cov_same_child);
    (mean, var)
}

pub fn ud_moments(params: &RhmParams) -> Result<UdMoments> {
    let rm = rule_moments(params)?;
    let v = params.vocab_size;
    let vf = v as f64;
    let nc = params.num_classes as f64;
    let (mut mean_u, mut var_u) = (rm.mean_n, rm.var_n);
    let (mut mean_d, mut var_d) = (nc * rm.mean_n, nc * rm.var_n + nc * (nc - 1.0) * rm.cov_same_child);
    let base_difference = var_u - var_d / (nc * nc);
    let mut levels = Vec::with_capacity(params.depth);
    for level in 1..=params.depth {
        if level > 1 {
            (mean_u, var_u) = ud_step(&rm, v, mean_u, var_u);
            (mean_d, var_d) = ud_step(&rm, v, mean_d, var_d);
        }
        levels.push(UdLevel {
            level,
            mean_u,
            var_u,
            cov_u: -var_u / (vf - 1.0),
            mean_d,
            var_d,
            cov_d: -var_d / (vf - 1.0),
        });
    }
    let factor = vf * (rm.var_n - rm.cov_same_child);
    Ok(UdMoments {
        levels,
        signal_difference: factor.powi(params.depth as i32 - 1) * base_difference,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalNoiseReport {
    /// Variance over realizations of `f_j(α|μ)` from the exact recursions.
    pub signal_var_exact: f64,
    /// Large-`m`, large-`n_c` limit `v / (n_c² m^L)`.
    pub signal_var_asymptotic: f64,
    pub num_points: f64,
    /// `v / n_c`: the noise variance is this over `P`.
    pub noise_coefficient: f64,
    /// Sampling variance of the empirical frequency at `num_points`.
    pub noise_var: f64,
    /// `n_c m^L`.
    pub pc: f64,
    pub pstar_prediction: f64,
    /// Size at which the exact signal equals the noise.
    pub pc_exact: f64,
    /// `sqrt(n_c) m^L`, the threshold for clustering-based learning.
    pub clustering_threshold: f64,
}

impl SignalNoiseReport {
    pub fn noise_var_at(&self, p: f64) -> f64 {
        self.noise_coefficient / p
    }
}

pub fn signal_noise_prediction(params: &RhmParams, p: f64) -> Result<SignalNoiseReport> {
    let ud = ud_moments(params)?;
    let v = params.vocab_size as f64;
    let nc = params.num_classes as f64;
    let ml = (params.multiplicity as f64).powi(params.depth as i32);
    let scale = v / (nc * ml);
    let signal_var_exact = scale * scale * ud.signal_difference;
    let v_over_nc = v / nc;
    Ok(SignalNoiseReport {
        signal_var_exact,
        signal_var_asymptotic: v / (nc * nc * ml),
        num_points: p,
        noise_coefficient: v_over_nc,
        noise_var: v_over_nc / p,
        pc: nc * ml,
        pstar_prediction: params.p_star(),
        pc_exact: v_over_nc / signal_var_exact,
        clustering_threshold: nc.sqrt() * ml,
    })
}
