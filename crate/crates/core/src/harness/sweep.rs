use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::clustering::{layerwise_learn, LayerwiseConfig};
use crate::error::{Result, RhmError};
use crate::grammar::{sample_dataset, sample_grammar, sample_split, sample_uncorrelated_grammar, GrammarInstance, RhmParams};
use crate::nn::{build_network, train, TrainConfig};
use crate::onestep::{one_step_representation, pair_distances, table_sensitivity, OneStepConfig};
use crate::seed::{derive_seed, derived_rng};
use crate::sensitivity::{synonymic_sensitivity, SENSITIVITY_TEST_SIZE};
use crate::stats::{signal_noise_prediction, FrequencyTable, Granularity, Patch};

pub const SCHEMA_VERSION: u32 = 1;

/// One unit of work: a grid point, a training-set size and a replica.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub grid_index: usize,
    pub params: RhmParams,
    pub p: u64,
    pub replica: usize,
    /// Shared by all sizes of one replica, so curves in `P` are paired.
    pub grammar_seed: u64,
    pub cell_seed: u64,
}

impl Cell {
    fn key(&self) -> Vec<String> {
        let p = &self.params;
        vec![
            self.index.to_string(),
            p.vocab_size.to_string(),
            p.multiplicity.to_string(),
            p.num_classes.to_string(),
            p.branching.to_string(),
            p.depth.to_string(),
            self.p.to_string(),
            (self.p as f64 / p.p_star()).to_string(),
            self.replica.to_string(),
            self.grammar_seed.to_string(),
            self.cell_seed.to_string(),
        ]
    }
}

const KEY_COLUMNS: [&str; 11] = [
    "cell", "v", "m", "n_c", "s", "L", "P", "P_over_pstar", "replica", "grammar_seed", "cell_seed",
];

pub fn value_columns(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::TrainSweep | Mode::Pstar | Mode::Uncorrelated => {
            &["status", "test_error", "train_error", "epochs", "S_2_1"]
        }
        Mode::Stats => &["status", "signal_exact", "signal_asymptotic", "noise", "measured_var"],
        Mode::Onestep => &["status", "synonym_distance", "other_distance", "S_1_1"],
        Mode::Cluster => &["status", "test_error", "purities"],
    }
}

pub fn columns(mode: Mode) -> Vec<&'static str> {
    KEY_COLUMNS.iter().chain(value_columns(mode)).copied().collect()
}

pub fn header_comment(mode: Mode) -> String {
    let name = serde_json::to_string(&mode).expect("mode serializes");
    format!("# rhm-sweep v{SCHEMA_VERSION} mode={}", name.trim_matches('"'))
}

/// Enumerates cells in output order: grid point, then size, then replica.
pub fn cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for (gi, params) in cfg.grid.points()?.into_iter().enumerate() {
        let sizes = cfg.p_grid.resolve(&params)?.values;
        for &p in &sizes {
            for replica in 0..cfg.replicas {
                let index = out.len();
                out.push(Cell {
                    index,
                    grid_index: gi,
                    params,
                    p,
                    replica,
                    grammar_seed: derive_seed(cfg.seed, (1 << 40) | ((gi as u64) << 20) | replica as u64),
                    cell_seed: derive_seed(cfg.seed, index as u64),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: Cell,
    pub status: String,
    pub values: Vec<String>,
}

impl SweepRow {
    pub fn budget_exceeded(&self) -> bool {
        self.status == "budget-exceeded"
    }

    /// Parsed value column `name`, if numeric.
    pub fn value(&self, mode: Mode, name: &str) -> Option<f64> {
        let i = value_columns(mode).iter().position(|c| *c == name)?;
        if i == 0 {
            return None;
        }
        self.values.get(i - 1)?.parse().ok()
    }

    fn line(&self) -> String {
        let mut fields = self.cell.key();
        fields.push(self.status.clone());
        fields.extend(self.values.iter().cloned());
        fields.join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: Mode,
    /// All rows in cell order, including those found on resume.
    pub rows: Vec<SweepRow>,
    pub resumed: usize,
    pub budget_exceeded: usize,
    pub output: PathBuf,
}

fn grammar_for(mode: Mode, cell: &Cell) -> Result<GrammarInstance> {
    let params = cell.params.with_seed(cell.grammar_seed);
    if mode == Mode::Uncorrelated {
        sample_uncorrelated_grammar(&params)
    } else {
        sample_grammar(&params)
    }
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

/// Runs one cell. Seeds: grammar from `grammar_seed`; data split, network
/// initialization and minibatch order from `cell_seed`.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<SweepRow> {
    let g = grammar_for(cfg.mode, cell)?;
    let data_seed = derive_seed(cell.cell_seed, 1);
    let init_seed = derive_seed(cell.cell_seed, 2);
    let train_seed = derive_seed(cell.cell_seed, 3);
    let (status, values) = match cfg.mode {
        Mode::TrainSweep | Mode::Pstar | Mode::Uncorrelated => {
            let (tr, te) = sample_split(&g, cell.p, cfg.test_cap, data_seed, cfg.whiten)?;
            let mut net = build_network(&cfg.arch.spec(&cell.params), init_seed)?;
            let tcfg = TrainConfig {
                seed: train_seed,
                time_budget: Some(cfg.cell_budget()),
                ..cfg.train.clone()
            };
            match train(&mut net, &tr, (!te.is_empty()).then_some(&te), &tcfg) {
                Ok(report) => {
                    let s21 = if cfg.sensitivity && cell.params.multiplicity > 1 && net.depth() >= 2 {
                        let probe = if te.is_empty() { &tr.data } else { &te.data };
                        let probe = &probe[..probe.len().min(SENSITIVITY_TEST_SIZE)];
                        match synonymic_sensitivity(&net, &g, probe, 2, 1, cfg.whiten, derive_seed(cell.cell_seed, 4)) {
                            Ok(v) => fmt(v.s),
                            Err(RhmError::ConstantRepresentation) => String::new(),
                            Err(e) => return Err(e),
                        }
                    } else {
                        String::new()
                    };
                    let status = if report.budget_exceeded { "budget-exceeded" } else { "ok" };
                    (
                        status.to_string(),
                        vec![
                            fmt(report.test_error),
                            fmt(report.train_error.unwrap_or(f64::NAN)),
                            report.epochs.to_string(),
                            s21,
                        ],
                    )
                }
                Err(RhmError::Diverged { .. }) => ("diverged".to_string(), vec![String::new(); 4]),
                Err(e) => return Err(e),
            }
        }
        Mode::Stats => {
            let pred = signal_noise_prediction(&cell.params, cell.p as f64)?;
            let data = sample_dataset(&g, cell.p, data_seed, false)?;
            let counts = FrequencyTable::from_dataset(&cell.params, &data, Patch::At(0), Granularity::Feature)?;
            let inv = 1.0 / cell.params.num_classes as f64;
            let mut sum = 0.0;
            let mut n = 0usize;
            for mu in 0..counts.num_symbols {
                for a in 0..counts.num_classes {
                    if let Some(f) = counts.frequency(a, mu) {
                        sum += (f - inv).powi(2);
                        n += 1;
                    }
                }
            }
            (
                "ok".to_string(),
                vec![
                    fmt(pred.signal_var_exact),
                    fmt(pred.signal_var_asymptotic),
                    fmt(pred.noise_var),
                    fmt(if n > 0 { sum / n as f64 } else { f64::NAN }),
                ],
            )
        }
        Mode::Onestep => {
            let ocfg = OneStepConfig {
                seed: data_seed,
                ..OneStepConfig::default()
            };
            let table = one_step_representation(&g, cell.p, &ocfg)?;
            let (syn, other) = pair_distances(&table, &g);
            let test = sample_dataset(&g, cell.params.p_max()?.min(SENSITIVITY_TEST_SIZE as u64), derive_seed(cell.cell_seed, 5), false)?;
            let s = match table_sensitivity(&table, &g, &test.data, &mut derived_rng(cell.cell_seed, 6)) {
                Ok(s) => fmt(s),
                Err(RhmError::ConstantRepresentation) => String::new(),
                Err(e) => return Err(e),
            };
            ("ok".to_string(), vec![fmt(syn), fmt(other), s])
        }
        Mode::Cluster => {
            let lcfg = LayerwiseConfig {
                seed: data_seed,
                test_cap: cfg.test_cap,
                ..LayerwiseConfig::default()
            };
            match layerwise_learn(&g, cell.p, &lcfg) {
                Ok(r) => {
                    let purities: Vec<String> = r.levels.iter().map(|l| l.purity.to_string()).collect();
                    ("ok".to_string(), vec![fmt(r.test_error), purities.join(";")])
                }
                Err(RhmError::TooFewPoints { .. }) => ("too-few-tuples".to_string(), vec![String::new(); 2]),
                Err(e) => return Err(e),
            }
        }
    };
    Ok(SweepRow {
        cell: *cell,
        status,
        values,
    })
}

/// Reads the rows of an existing output, checking them against `cells`.
/// Lines that are cut short, malformed or inconsistent with the
/// configuration are reported by 1-based line number.
pub fn read_existing(path: &Path, mode: Mode, cells: &[Cell]) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path)?;
    let cols = columns(mode);
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    let mut lines = text.split_inclusive('\n').enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == header_comment(mode) => {}
        Some(_) => return Err(RhmError::Config(format!("{} was written by another mode or version", path.display()))),
        None => return Ok(rows),
    }
    match lines.next() {
        Some((_, l)) if l.trim_end() == cols.join(",") => {}
        Some((i, _)) => return Err(RhmError::CorruptRows(vec![i + 1])),
        None => return Ok(rows),
    }
    for (i, line) in lines {
        let complete = line.ends_with('\n');
        let fields: Vec<&str> = line.trim_end_matches('\n').split(',').collect();
        let parsed = (|| {
            if !complete || fields.len() != cols.len() {
                return None;
            }
            let index: usize = fields[0].parse().ok()?;
            let cell = cells.get(index)?;
            if cell.key() != fields[..KEY_COLUMNS.len()] {
                return None;
            }
            Some(SweepRow {
                cell: *cell,
                status: fields[KEY_COLUMNS.len()].to_string(),
                values: fields[KEY_COLUMNS.len() + 1..].iter().map(|s| s.to_string()).collect(),
            })
        })();
        match parsed {
            Some(row) if rows.iter().all(|r: &SweepRow| r.cell.index != row.cell.index) => rows.push(row),
            _ => bad.push(i + 1),
        }
    }
    if !bad.is_empty() {
        return Err(RhmError::CorruptRows(bad));
    }
    Ok(rows)
}

fn timing_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".timing.csv");
    PathBuf::from(s)
}

/// Runs every cell of `cfg` not already present in the output (when
/// `resume`), writing rows in cell order through a single sink. Per-cell wall
/// times go to `<output>.timing.csv` so the main file is reproducible.
pub fn run_sweep(cfg: &ExperimentConfig, resume: bool) -> Result<SweepResult> {
    cfg.validate()?;
    let all = cells(cfg)?;
    let output = cfg.output.clone();
    let existing = if resume && output.exists() {
        read_existing(&output, cfg.mode, &all)?
    } else {
        Vec::new()
    };
    let done: std::collections::HashSet<usize> = existing.iter().map(|r| r.cell.index).collect();
    let todo: Vec<Cell> = all.iter().filter(|c| !done.contains(&c.index)).copied().collect();

    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = if existing.is_empty() && !(resume && output.exists() && std::fs::metadata(&output)?.len() > 0) {
        let mut f = File::create(&output)?;
        writeln!(f, "{}", header_comment(cfg.mode))?;
        writeln!(f, "{}", columns(cfg.mode).join(","))?;
        f.flush()?;
        f
    } else {
        OpenOptions::new().append(true).open(&output)?
    };
    let mut timing = OpenOptions::new().create(true).append(true).open(timing_path(&output))?;

    let workers = cfg.workers.max(1).min(todo.len().max(1));
    let next = AtomicUsize::new(0);
    let mut fresh: Vec<SweepRow> = Vec::with_capacity(todo.len());
    let mut first_error: Option<RhmError> = None;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel::<(usize, Result<SweepRow>, f64)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, todo) = (&next, &todo);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= todo.len() {
                    break;
                }
                let start = Instant::now();
                let row = run_cell(cfg, &todo[i]);
                if tx.send((i, row, start.elapsed().as_secs_f64())).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // emit strictly in order so the file does not depend on scheduling
        let mut pending: BTreeMap<usize, (Result<SweepRow>, f64)> = BTreeMap::new();
        let mut emit = 0usize;
        for (i, row, secs) in rx {
            pending.insert(i, (row, secs));
            while let Some((row, secs)) = pending.remove(&emit) {
                match row {
                    Ok(row) if first_error.is_none() => {
                        out.write_all(format!("{}\n", row.line()).as_bytes())?;
                        out.flush()?;
                        writeln!(timing, "{},{secs}", row.cell.index)?;
                        fresh.push(row);
                    }
                    Ok(_) => {}
                    Err(e) => {
                        if first_error.is_none() {
                            first_error = Some(e);
                            next.store(todo.len(), Ordering::SeqCst);
                        }
                    }
                }
                emit += 1;
            }
        }
        Ok(())
    })?;
    if let Some(e) = first_error {
        return Err(e);
    }
    let resumed = existing.len();
    let mut rows = existing;
    rows.extend(fresh);
    rows.sort_by_key(|r| r.cell.index);
    let budget_exceeded = rows.iter().filter(|r| r.budget_exceeded()).count();
    Ok(SweepResult {
        mode: cfg.mode,
        rows,
        resumed,
        budget_exceeded,
        output,
    })
}
