use std::path::Path;

use rhm_core::grammar::RhmParams;
use rhm_core::harness::{
    cells, measure_sample_complexity, run_sweep, ExperimentConfig, GridConfig, Mode, PGrid, Relative,
};
use rhm_core::nn::TrainConfig;
use rhm_core::RhmError;

fn base(mode: Mode, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        seed: 17,
        replicas: 3,
        output: out.to_path_buf(),
        grid: GridConfig {
            v: vec![3, 4],
            ..GridConfig::default()
        },
        p_grid: PGrid {
            relative: Relative::Pstar,
            values: vec![0.5, 1.0, 2.0],
            ..PGrid::default()
        },
        ..ExperimentConfig::default()
    }
}

fn small_training(mode: Mode, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        arch: rhm_core::harness::ArchConfig {
            width: 16,
            ..Default::default()
        },
        train: TrainConfig {
            lr_init: 1.0,
            lr_final: 0.1,
            max_epochs: 20,
            ..TrainConfig::default()
        },
        replicas: 2,
        sensitivity: true,
        ..base(mode, out)
    }
}

fn body(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn empty_grid_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(Mode::Stats, &dir.path().join("x.csv"));
    cfg.grid.v.clear();
    assert!(matches!(run_sweep(&cfg, false), Err(RhmError::Config(_))));
    let mut cfg = base(Mode::Stats, &dir.path().join("x.csv"));
    cfg.replicas = 0;
    assert!(matches!(cfg.validate(), Err(RhmError::Config(_))));
}

#[test]
fn toml_round_trip_and_unknown_keys() {
    let text = r#"
mode = "pstar"
seed = 3
replicas = 2
output = "out/fig2.csv"
threshold = 0.1

[grid]
v = [4, 6]
s = [2]
L = [2]

[p_grid]
relative = "pstar"
min = 0.125
max = 8.0
points = 13

[arch]
kind = "cnn"

[train]
lr_init = 1.0
lr_final = 0.1
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(cfg.mode, Mode::Pstar);
    assert_eq!(cfg.grid.points().unwrap().len(), 2);
    assert_eq!(cfg.train.lr_init, 1.0);
    assert_eq!(cfg.train.batch_size, 128);
    let again = ExperimentConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(again, cfg);
    assert!(ExperimentConfig::from_toml("mode = \"stats\"\n[grid]\nv = [2]\nbogus = 1\n").is_err());
}

#[test]
fn bracket_is_truncated_below_full_data() {
    let grid = PGrid::default().resolve(&RhmParams::new(4, 4, 4, 2, 2)).unwrap();
    assert!(grid.truncated);
    assert_eq!(grid.values.first(), Some(&8));
    assert_eq!(grid.values.last(), Some(&224));
    assert!(grid.values.len() >= 6);
    let grid = PGrid::default().resolve(&RhmParams::new(8, 8, 8, 2, 2)).unwrap();
    assert!(grid.truncated);
    assert_eq!((grid.values[0], *grid.values.last().unwrap()), (64, 3584));
    let grid = PGrid::default().resolve(&RhmParams::new(8, 8, 8, 2, 3)).unwrap();
    assert!(!grid.truncated);
    assert_eq!((grid.values[0], *grid.values.last().unwrap()), (512, 32768));
    assert_eq!(grid.values.len(), 13);
}

#[test]
fn rerun_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::Stats, Mode::Onestep, Mode::TrainSweep] {
        let a = dir.path().join(format!("{mode:?}-a.csv"));
        let b = dir.path().join(format!("{mode:?}-b.csv"));
        let mut cfg = small_training(mode, &a);
        run_sweep(&cfg, false).unwrap();
        cfg.output = b.clone();
        cfg.workers = 3;
        let r = run_sweep(&cfg, false).unwrap();
        assert_eq!(body(&a), body(&b), "{mode:?}");
        assert_eq!(r.rows.len(), cells(&cfg).unwrap().len());
        assert!(body(&a).starts_with("# rhm-sweep v1"));
    }
}

#[test]
fn resume_completes_an_interrupted_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.csv");
    let part = dir.path().join("part.csv");
    let cfg = small_training(Mode::TrainSweep, &full);
    run_sweep(&cfg, false).unwrap();
    let text = body(&full);
    let lines: Vec<&str> = text.lines().collect();
    let keep = 2 + 5;
    std::fs::write(&part, lines[..keep].join("\n") + "\n").unwrap();
    let cfg_part = ExperimentConfig {
        output: part.clone(),
        ..cfg.clone()
    };
    let r = run_sweep(&cfg_part, true).unwrap();
    assert_eq!(r.resumed, 5);
    assert_eq!(body(&part), text);
    // nothing left to do
    let r = run_sweep(&cfg_part, true).unwrap();
    assert_eq!(r.resumed, r.rows.len());
    assert_eq!(body(&part), text);
}

#[test]
fn resume_reports_corrupt_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let cfg = base(Mode::Stats, &path);
    run_sweep(&cfg, false).unwrap();
    let text = body(&path);
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = lines[4].replace(',', ";");
    let cut = &lines[6][..lines[6].len() / 2];
    let broken = format!("{}\n{}", lines[..6].join("\n"), cut);
    std::fs::write(&path, broken).unwrap();
    match run_sweep(&cfg, true) {
        Err(RhmError::CorruptRows(rows)) => assert_eq!(rows, vec![5, 7]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn budget_exceeded_cells_are_marked() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_training(Mode::TrainSweep, &dir.path().join("b.csv"));
    cfg.cell_budget_secs = 1e-9;
    cfg.train.max_epochs = 50;
    let r = run_sweep(&cfg, false).unwrap();
    assert_eq!(r.budget_exceeded, r.rows.len());
    assert!(r.rows.iter().all(|row| row.status == "budget-exceeded"));
}

#[test]
fn paired_grammar_seeds_across_sizes() {
    let cfg = base(Mode::Stats, Path::new("unused.csv"));
    let cells = cells(&cfg).unwrap();
    assert_eq!(cells.len(), 2 * 3 * 3);
    for a in &cells {
        for b in &cells {
            let same = a.grid_index == b.grid_index && a.replica == b.replica;
            assert_eq!(a.grammar_seed == b.grammar_seed, same);
            assert_eq!(a.cell_seed == b.cell_seed, a.index == b.index);
        }
    }
}

#[test]
fn sample_complexity_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_training(Mode::TrainSweep, &dir.path().join("p.csv"));
    cfg.grid.v = vec![3];
    cfg.p_grid = PGrid {
        relative: Relative::Pstar,
        values: vec![0.25, 1.0, 4.0],
        ..PGrid::default()
    };
    cfg.train.max_epochs = 300;
    let (sweep, est) = measure_sample_complexity(&cfg, false).unwrap();
    assert_eq!(sweep.mode, Mode::Pstar);
    assert_eq!(est.len(), 1);
    let e = &est[0];
    assert_eq!(e.curve.len(), 3);
    assert!(e.curve.iter().all(|c| c.replicas == 2));
    assert!((e.target_error - 0.1 * 2.0 / 3.0).abs() < 1e-15);
    if let Some(p) = e.p_star {
        assert!(p >= e.curve[0].p as f64 && p <= e.curve[2].p as f64);
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(!cells(&cfg).unwrap().is_empty());
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
