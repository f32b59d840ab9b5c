use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rhm_core::clustering::{layerwise_learn, LayerwiseConfig};
use rhm_core::grammar::{sample_dataset, sample_split, DatasetMeta};
use rhm_core::harness::{measure_sample_complexity, run_sweep, ArchConfig, ExperimentConfig};
use rhm_core::nn::{build_network, read_weights, train, write_weights, ArchKind, LrScaling, TrainConfig, TEST_CAP};
use rhm_core::onestep::{one_step_gradient_check, one_step_representation, OneStepConfig};
use rhm_core::seed::derive_seed;
use rhm_core::sensitivity::{effective_dimension, layer_points, sensitivity_report, SENSITIVITY_TEST_SIZE};
use rhm_core::stats::{
    exact_counts, rule_moments, rule_occurrences, sample_covariance, signal_noise_prediction, ud_moments,
    FrequencyTable, Granularity, Patch, SampleStats,
};
use rhm_core::{sample_grammar, sample_uncorrelated_grammar, GrammarInstance, RhmError, RhmParams};

#[derive(Parser)]
#[command(name = "rhm", version, about = "Random Hierarchy Model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct ParamArgs {
    /// Vocabulary size.
    #[arg(long)]
    v: usize,
    /// Synonyms per feature (defaults to v).
    #[arg(long)]
    m: Option<usize>,
    /// Number of classes (defaults to v).
    #[arg(long)]
    nc: Option<usize>,
    /// Tuple size.
    #[arg(long, default_value_t = 2)]
    s: usize,
    /// Depth.
    #[arg(long = "L", default_value_t = 2)]
    num_levels: usize,
    /// Grammar seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use uncorrelated rules.
    #[arg(long)]
    uncorrelated: bool,
}

impl ParamArgs {
    fn params(&self) -> RhmParams {
        RhmParams::new(
            self.v,
            self.m.unwrap_or(self.v),
            self.nc.unwrap_or(self.v),
            self.s,
            self.num_levels,
        )
        .with_seed(self.seed)
    }

    fn grammar(&self) -> Result<GrammarInstance> {
        let params = self.params();
        Ok(if self.uncorrelated {
            sample_uncorrelated_grammar(&params)?
        } else {
            sample_grammar(&params)?
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsMode {
    Moments,
    Ud,
    Signal,
    Counts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Fc,
    Cnn,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset and write it as CSV with a JSON sidecar.
    Generate {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long = "P")]
        p: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_whiten: bool,
    },
    /// Rule moments, U/D recursions, signal and noise, or occurrence counts.
    Stats {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, value_enum)]
        mode: StatsMode,
        /// Sampled grammars for Monte-Carlo checks (moments mode).
        #[arg(long, default_value_t = 0)]
        mc_realizations: u64,
        /// Training-set size; counts are exact when omitted.
        #[arg(long = "P")]
        p: Option<u64>,
        /// Patch index, or -1 to pool over patches.
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        patch: i64,
        /// Count single features instead of s-tuples.
        #[arg(long)]
        features: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write its learning curve.
    Train {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, value_enum, default_value_t = Arch::Cnn)]
        arch: Arch,
        /// Linear layers including the readout (0: L+1 for cnn, 2 for fc).
        #[arg(long, default_value_t = 0)]
        depth: usize,
        /// Hidden width (0: 8 v^s).
        #[arg(long, default_value_t = 0)]
        width: usize,
        #[arg(long = "P")]
        p: u64,
        /// Seed for data, initialization and batches.
        #[arg(long = "train-seed", default_value_t = 0)]
        train_seed: u64,
        #[arg(long, default_value_t = 1.0)]
        lr_init: f64,
        #[arg(long, default_value_t = 0.1)]
        lr_final: f64,
        #[arg(long, default_value_t = 300)]
        max_epochs: usize,
        #[arg(long, default_value_t = TEST_CAP)]
        test_cap: u64,
        #[arg(long)]
        no_whiten: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the trained weights here.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// One-gradient-step representation of the first patch.
    Onestep {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long = "P")]
        p: u64,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
        /// Compare against a literal network gradient.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Layerwise clustering learner.
    Cluster {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long = "P")]
        p: u64,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
        /// Report only the lowest this many levels.
        #[arg(long)]
        levels: Option<usize>,
        /// Cluster the pooled table of all patches.
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synonymic sensitivity of every layer of a trained network.
    Sensitivity {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        /// Number of probe points.
        #[arg(long = "P", default_value_t = SENSITIVITY_TEST_SIZE as u64)]
        p: u64,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
        #[arg(long)]
        no_whiten: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective dimension of one layer's representation.
    Dim {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        layer: usize,
        /// Probe sizes; the largest is the number of points drawn.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512, 1024, 2048])]
        probe_sizes: Vec<usize>,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
        #[arg(long)]
        no_whiten: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a configured sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Measure P* for every grid point of a training sweep.
    Pstar {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        resume: bool,
        /// Summary CSV (defaults to the sweep output with a .pstar.csv suffix).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for a sweep with cells that ran out of time.
const EXIT_BUDGET: u8 = 3;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = matches!(
                e.downcast_ref::<RhmError>(),
                Some(
                    RhmError::Config(_)
                        | RhmError::InvalidParams(_)
                        | RhmError::Capacity { .. }
                        | RhmError::Divisibility(_)
                        | RhmError::TooManyPoints { .. }
                        | RhmError::LayerOutOfRange { .. }
                )
            );
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn f(x: f64) -> String {
    format!("{x:e}")
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Generate { params, p, out, no_whiten } => {
            let g = params.grammar()?;
            let sample_seed = derive_seed(params.seed, 1);
            let ds = sample_dataset(&g, p, sample_seed, !no_whiten)?;
            let meta = DatasetMeta {
                params: *g.params(),
                kind: g.kind(),
                sample_seed,
                whitened: !no_whiten,
                num_points: ds.len(),
            };
            ds.write_csv(&out, &meta)?;
        }
        Command::Stats {
            params,
            mode,
            mc_realizations,
            p,
            patch,
            features,
            out,
        } => stats(params, mode, mc_realizations, p, patch, features, &out)?,
        Command::Train {
            params,
            arch,
            depth,
            width,
            p,
            train_seed,
            lr_init,
            lr_final,
            max_epochs,
            test_cap,
            no_whiten,
            out,
            weights,
        } => {
            let g = params.grammar()?;
            let arch = ArchConfig {
                kind: match arch {
                    Arch::Fc => ArchKind::Fc,
                    Arch::Cnn => ArchKind::Cnn,
                },
                depth,
                width,
            }
            .spec(g.params());
            if arch.kind == ArchKind::Cnn && depth != 0 && depth != arch.depth {
                return Err(RhmError::Config(format!("a cnn on depth-{} data has {} layers", params.num_levels, arch.depth)).into());
            }
            let (tr, te) = sample_split(&g, p, test_cap, derive_seed(train_seed, 1), !no_whiten)?;
            let mut net = build_network(&arch, derive_seed(train_seed, 2))?;
            let cfg = TrainConfig {
                lr_init,
                lr_final,
                max_epochs,
                lr_scaling: LrScaling::Width,
                seed: derive_seed(train_seed, 3),
                ..TrainConfig::default()
            };
            let report = train(&mut net, &tr, (!te.is_empty()).then_some(&te), &cfg)?;
            let mut w = writer(&out)?;
            w.write_record(["epoch", "lr", "train_loss", "train_err", "test_err"])?;
            for r in &report.history {
                w.write_record([
                    r.epoch.to_string(),
                    f(r.lr),
                    f(r.train_loss),
                    f(r.train_err),
                    r.test_err.map(f).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            if let Some(path) = weights {
                write_weights(&net, path)?;
            }
            println!(
                "P={p} epochs={} converged={} test_error={} eps_rand={}",
                report.epochs, report.converged, report.test_error, report.eps_rand
            );
        }
        Command::Onestep {
            params,
            p,
            data_seed,
            check,
            out,
        } => {
            let g = params.grammar()?;
            let cfg = OneStepConfig {
                seed: data_seed,
                ..OneStepConfig::default()
            };
            let table = one_step_representation(&g, p, &cfg)?;
            let mut w = writer(&out)?;
            let mut header = vec!["tuple".to_string(), "parent".to_string(), "observed".to_string()];
            header.extend((0..table.num_classes).map(|a| format!("g_{a}")));
            w.write_record(&header)?;
            for mu in 0..table.num_symbols() {
                let mut rec = vec![
                    mu.to_string(),
                    g.parent_of(1, mu as u32).map(|(q, _)| q.to_string()).unwrap_or_default(),
                    table.observed(mu).to_string(),
                ];
                rec.extend(table.row(mu).iter().map(|&x| f(x)));
                w.write_record(&rec)?;
            }
            w.flush()?;
            if check {
                let c = one_step_gradient_check(&g, p, &cfg)?;
                println!(
                    "max relative deviation {:e}, initial output {:e}",
                    c.max_relative_deviation, c.initial_output
                );
            }
        }
        Command::Cluster {
            params,
            p,
            data_seed,
            levels,
            pooled,
            out,
        } => {
            let g = params.grammar()?;
            let cfg = LayerwiseConfig {
                seed: data_seed,
                pooled,
                ..LayerwiseConfig::default()
            };
            let r = layerwise_learn(&g, p, &cfg)?;
            let mut w = writer(&out)?;
            w.write_record(["level", "purity", "inertia"])?;
            for l in r.levels.iter().take(levels.unwrap_or(usize::MAX)) {
                w.write_record([l.level.to_string(), f(l.purity), f(l.inertia)])?;
            }
            w.write_record(["test_error", &f(r.test_error), ""])?;
            w.flush()?;
            if r.evaluated_on_train {
                eprintln!("note: no held-out data at P = P_max; error measured on the training set");
            }
        }
        Command::Sensitivity {
            weights,
            params,
            p,
            data_seed,
            no_whiten,
            out,
        } => {
            let g = params.grammar()?;
            let net = read_weights(&weights)?;
            let n = p.min(g.params().p_max()?);
            let probe = sample_dataset(&g, n, data_seed, false)?;
            let layers: Vec<usize> = (1..=net.depth()).collect();
            let levels: Vec<usize> = (1..=params.num_levels).collect();
            let r = sensitivity_report(&net, &g, &probe.data, &layers, &levels, !no_whiten, derive_seed(data_seed, 1))?;
            let mut w = writer(&out)?;
            w.write_record(["k", "l", "S", "n_pairs"])?;
            for v in &r.values {
                w.write_record([v.layer.to_string(), v.level.to_string(), f(v.s), v.num_pairs.to_string()])?;
            }
            w.flush()?;
        }
        Command::Dim {
            weights,
            params,
            layer,
            probe_sizes,
            data_seed,
            no_whiten,
            out,
        } => {
            let g = params.grammar()?;
            let net = read_weights(&weights)?;
            let n = probe_sizes.iter().copied().max().unwrap_or(0) as u64;
            let data = sample_dataset(&g, n.min(g.params().p_max()?), data_seed, false)?;
            let points = layer_points(&net, &g, &data.data, layer, !no_whiten)?;
            let r = effective_dimension(&points, &probe_sizes, derive_seed(data_seed, 1))?;
            let mut w = writer(&out)?;
            w.write_record(["P", "delta", "normalized"])?;
            for ((p, d), nd) in r.probe_sizes.iter().zip(&r.delta).zip(&r.normalized) {
                w.write_record([p.to_string(), f(*d), f(*nd)])?;
            }
            w.flush()?;
            println!("layer {layer}: d_eff = {:.3} (excluded pairs {})", r.d_eff, r.excluded);
        }
        Command::Sweep { config, workers, resume } => {
            let cfg = load_config(&config, workers)?;
            let r = run_sweep(&cfg, resume)?;
            println!(
                "{} rows written to {} ({} resumed, {} over budget)",
                r.rows.len(),
                r.output.display(),
                r.resumed,
                r.budget_exceeded
            );
            if r.budget_exceeded > 0 {
                return Ok(EXIT_BUDGET);
            }
        }
        Command::Pstar {
            config,
            workers,
            resume,
            out,
        } => {
            let cfg = load_config(&config, workers)?;
            let (sweep, estimates) = measure_sample_complexity(&cfg, resume)?;
            let out = out.unwrap_or_else(|| {
                let mut s = sweep.output.clone().into_os_string();
                s.push(".pstar.csv");
                PathBuf::from(s)
            });
            let mut w = writer(&out)?;
            w.write_record(["v", "m", "n_c", "s", "L", "predicted", "p_star", "ratio", "at_lower_edge", "truncated"])?;
            for e in &estimates {
                let q = e.params;
                w.write_record([
                    q.vocab_size.to_string(),
                    q.multiplicity.to_string(),
                    q.num_classes.to_string(),
                    q.branching.to_string(),
                    q.depth.to_string(),
                    f(e.predicted),
                    e.p_star.map(f).unwrap_or_default(),
                    e.ratio().map(f).unwrap_or_default(),
                    e.at_lower_edge.to_string(),
                    e.truncated.to_string(),
                ])?;
                println!(
                    "v={} m={} n_c={} L={}: P* = {} (n_c m^L = {})",
                    q.vocab_size,
                    q.multiplicity,
                    q.num_classes,
                    q.depth,
                    e.p_star.map_or("not reached".into(), |p| format!("{p:.1}")),
                    e.predicted
                );
            }
            w.flush()?;
            if sweep.budget_exceeded > 0 {
                return Ok(EXIT_BUDGET);
            }
        }
    }
    Ok(0)
}

fn load_config(path: &Path, workers: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(n) = workers {
        cfg.workers = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stats(
    args: ParamArgs,
    mode: StatsMode,
    mc: u64,
    p: Option<u64>,
    patch: i64,
    features: bool,
    out: &Path,
) -> Result<()> {
    let params = args.params();
    let mut w = writer(out)?;
    match mode {
        StatsMode::Moments => {
            let rm = rule_moments(&params)?;
            w.write_record(["quantity", "predicted", "measured", "se"])?;
            let predicted = [
                ("mean_n", rm.mean_n),
                ("var_n", rm.var_n),
                ("cov_same_parent", rm.cov_same_parent),
                ("cov_same_child", rm.cov_same_child),
                ("cov_disjoint", rm.cov_disjoint),
            ];
            let measured = if mc > 0 && params.parents_at(1) >= 2 && params.vocab_size >= 2 {
                let mut cols = vec![Vec::new(); 4];
                for r in 0..mc {
                    let g = sample_grammar(&params.with_seed(derive_seed(args.seed, r)))?;
                    let n = rule_occurrences(&g, 1, 0);
                    for (c, x) in cols.iter_mut().zip([n[0][0], n[0][1], n[1][0], n[1][1]]) {
                        c.push(x as f64);
                    }
                }
                let st = SampleStats::from_slice(&cols[0]);
                let covs: Vec<(f64, f64)> = cols[1..].iter().map(|c| sample_covariance(&cols[0], c)).collect();
                vec![(st.mean, st.se_mean), (st.var, st.se_var), covs[0], covs[1], covs[2]]
            } else {
                Vec::new()
            };
            for (i, (name, value)) in predicted.iter().enumerate() {
                let (m, se) = measured
                    .get(i)
                    .map_or((String::new(), String::new()), |&(m, se)| (f(m), f(se)));
                w.write_record([name.to_string(), f(*value), m, se])?;
            }
        }
        StatsMode::Ud => {
            let ud = ud_moments(&params)?;
            w.write_record(["level", "mean_u", "var_u", "cov_u", "mean_d", "var_d", "cov_d"])?;
            for l in &ud.levels {
                w.write_record([
                    l.level.to_string(),
                    f(l.mean_u),
                    f(l.var_u),
                    f(l.cov_u),
                    f(l.mean_d),
                    f(l.var_d),
                    f(l.cov_d),
                ])?;
            }
        }
        StatsMode::Signal => {
            let n = p.ok_or_else(|| RhmError::Config("signal mode needs --P".into()))?;
            let r = signal_noise_prediction(&params, n as f64)?;
            w.write_record([
                "P",
                "signal_var_exact",
                "signal_var_asymptotic",
                "noise_var",
                "pc",
                "pc_exact",
                "clustering_threshold",
            ])?;
            w.write_record([
                n.to_string(),
                f(r.signal_var_exact),
                f(r.signal_var_asymptotic),
                f(r.noise_var),
                f(r.pc),
                f(r.pc_exact),
                f(r.clustering_threshold),
            ])?;
        }
        StatsMode::Counts => {
            let g = args.grammar()?;
            let patch = if patch < 0 { Patch::Pooled } else { Patch::At(patch as usize) };
            let gran = if features { Granularity::Feature } else { Granularity::Tuple };
            let table = match p {
                None => exact_counts(&g, patch, gran)?,
                Some(n) => {
                    let data = sample_dataset(&g, n, derive_seed(args.seed, 1), false)?;
                    FrequencyTable::from_dataset(&params, &data, patch, gran)?
                }
            };
            w.write_record(["symbol", "class", "count", "frequency"])?;
            for mu in 0..table.num_symbols {
                for a in 0..table.num_classes {
                    w.write_record([
                        mu.to_string(),
                        a.to_string(),
                        table.count(mu, a).to_string(),
                        table.frequency(a, mu).map(f).unwrap_or_default(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
