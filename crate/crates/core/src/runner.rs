//! Experiment orchestration: trains every cell of a config (reusing
//! checkpoints when the config is unchanged), evaluates, and writes the
//! output directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! config.toml          resolved config, enough to reproduce the run
//! results.csv          every measurement
//! results.svg          test measurements (or validation curves)
//! validation.svg       validation curves
//! checkpoints/*.viab   one per (method, phi_dim, seed)
//! gradcheck.txt        gradcheck experiment only
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{self, Cell, EvalProtocol, ResultRow, SAMPLE_SWEEP_KS, SHOT_SWEEP_KS};
use crate::gradcheck::{self, Check};
use crate::report;
use crate::trainer::{train_from, Learner, TrainState};

pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub rows: Vec<ResultRow>,
    pub checks: Vec<Check>,
}

/// Cells in output order: method, then context width, then seed.
pub fn cells(config: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for &method in &config.methods {
        for &phi_dim in &config.phi_dims {
            let learner = Learner::new(config.method_spec(method, phi_dim))?;
            for &seed in &config.seeds {
                out.push(Cell {
                    learner: learner.clone(),
                    train: config.train_config(seed),
                    eval_seed: config.eval_seed_for(seed),
                });
            }
        }
    }
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!(
        "{}_phi{}_seed{}.viab",
        cell.method(),
        cell.phi_dim(),
        cell.train.seed
    ))
}

fn usable(path: &Path, cell: &Cell) -> Option<TrainState> {
    let ckpt = Checkpoint::load(path).ok()?;
    (ckpt.spec == cell.learner.spec && ckpt.state.seed == cell.train.seed && ckpt.state.iteration <= cell.train.iters)
        .then_some(ckpt.state)
}

/// Trains `cell`, resuming from the checkpoint at `path` when `reuse` is
/// set and the checkpoint matches. The checkpoint is rewritten at every
/// validation point and at the end, after which `progress` sees the state.
pub fn train_cached(
    cell: &Cell,
    path: &Path,
    reuse: bool,
    mut progress: impl FnMut(&TrainState),
) -> Result<TrainState> {
    let start = reuse
        .then(|| usable(path, cell))
        .flatten()
        .unwrap_or_else(|| TrainState::new(&cell.learner, cell.train.seed));
    if start.iteration == cell.train.iters && !start.history.is_empty() {
        return Ok(start);
    }
    let spec = &cell.learner.spec;
    let save = |state: &TrainState| {
        Checkpoint {
            spec: spec.clone(),
            state: state.clone(),
        }
        .save(path)
    };
    let state = train_from(start, &cell.learner, &cell.train, |s| {
        save(s)?;
        progress(s);
        Ok(())
    })?;
    save(&state)?;
    Ok(state)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gradcheck_report(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<14} {:<28} {:>10.3e} < {:.0e}  {status}",
            c.suite, c.name, c.error, c.tolerance
        );
    }
    out
}

fn rows_for(config: &ExperimentConfig, cells: &[Cell], trainer: &eval::Trainer<'_>) -> Result<Vec<ResultRow>> {
    let (protocol, workers) = (&config.eval, config.workers);
    match config.experiment {
        Experiment::SineContextSweep => eval::run_vary_context_params(cells, protocol, trainer, workers),
        Experiment::SineSampleSweep => eval::run_vary_sample_points(cells, protocol, trainer, workers),
        Experiment::ClassShotGen => eval::run_shot_generalization(cells, protocol, trainer, workers),
        Experiment::SineSingle => {
            let mut rows = Vec::new();
            for cell in cells {
                let state = trainer(cell)?;
                rows.extend(eval::history_rows(cell, &state));
                rows.extend(eval::pre_post_rows(cell, &state, protocol, &[protocol.points], workers)?);
            }
            Ok(rows)
        }
        Experiment::Gradcheck => Ok(Vec::new()),
    }
}

/// Runs an experiment into `config.output`. Rerunning an unchanged config
/// reuses finished checkpoints and rewrites identical files.
pub fn run(config: &ExperimentConfig) -> Result<Outcome> {
    let dir = &config.output;
    create_dir(dir)?;
    let echo = config.to_toml();
    let echo_path = dir.join(CONFIG_FILE);
    let reuse = fs::read_to_string(&echo_path).is_ok_and(|old| old == echo);
    write(&echo_path, &echo)?;

    if config.experiment == Experiment::Gradcheck {
        let checks = gradcheck::run_all()?;
        write(&dir.join("gradcheck.txt"), &gradcheck_report(&checks))?;
        let failed = checks.iter().filter(|c| !c.passed()).count();
        if failed > 0 {
            return Err(Error::Invariant(format!("{failed} finite-difference checks failed")));
        }
        return Ok(Outcome {
            rows: Vec::new(),
            checks,
        });
    }

    create_dir(&dir.join(CHECKPOINT_DIR))?;
    let cells = cells(config)?;
    let trainer = |cell: &Cell| train_cached(cell, &checkpoint_path(dir, cell), reuse, |_| {});
    let rows = rows_for(config, &cells, &trainer)?;
    report::emit_csv(&rows, &dir.join(RESULTS_FILE))?;
    report::emit_svg(&rows, &dir.join("results.svg"))?;
    let validation: Vec<ResultRow> = rows.iter().filter(|r| r.split == "validation").cloned().collect();
    report::emit_svg(&validation, &dir.join("validation.svg"))?;
    Ok(Outcome {
        rows,
        checks: Vec::new(),
    })
}

/// Test rows for a saved checkpoint under `config`'s evaluation protocol
/// and adaptation sizes.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let seed = ckpt.state.seed;
    let cell = Cell {
        learner: Learner::new(ckpt.spec.clone())?,
        train: config.train_config(seed),
        eval_seed: config.eval_seed_for(seed),
    };
    let protocol: &EvalProtocol = &config.eval;
    let ks: Vec<usize> = match config.experiment {
        Experiment::SineSampleSweep => SAMPLE_SWEEP_KS.to_vec(),
        Experiment::ClassShotGen => SHOT_SWEEP_KS.collect(),
        _ => vec![protocol.points],
    };
    eval::sweep_points(&cell, &ckpt.state, protocol, &ks, config.workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny(dir: &Path, extra: &str) -> ExperimentConfig {
        let text = format!(
            "experiment = \"sine_single\"\nmethods = [\"cavia\", \"rel_viable\"]\nseeds = [3]\noutput = {:?}\n\
             [train]\niters = 6\nval_every = 3\nmeta_batch = 2\nval_tasks = 2\n\
             [model]\nphi_dim = 2\nhidden = [8]\nloss_hidden = [4]\n\
             [eval]\nn_tasks = 5\npoints = 4\ngrid = 10\n{extra}",
            dir.display().to_string()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn run_writes_every_artifact_and_is_repeatable() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("fresh/out");
        let config = tiny(&dir, "");
        let first = run(&config).unwrap();
        for f in [CONFIG_FILE, RESULTS_FILE, "results.svg", "validation.svg"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let csv = fs::read(dir.join(RESULTS_FILE)).unwrap();
        let ckpts: Vec<_> = cells(&config).unwrap().iter().map(|c| checkpoint_path(&dir, c)).collect();
        assert_eq!(ckpts.len(), 2);
        let bytes: Vec<Vec<u8>> = ckpts.iter().map(|p| fs::read(p).unwrap()).collect();

        let second = run(&config).unwrap();
        assert_eq!(first.rows, second.rows);
        assert_eq!(csv, fs::read(dir.join(RESULTS_FILE)).unwrap());
        for (p, b) in ckpts.iter().zip(&bytes) {
            assert_eq!(&fs::read(p).unwrap(), b);
        }

        let other = tmp.path().join("other");
        run(&tiny(&other, "")).unwrap();
        assert_eq!(csv.len(), fs::read(other.join(RESULTS_FILE)).unwrap().len());
        assert_eq!(csv, fs::read(other.join(RESULTS_FILE)).unwrap());
    }

    #[test]
    fn partial_checkpoint_resumes_to_the_same_result() {
        let tmp = tempfile::tempdir().unwrap();
        let whole = tmp.path().join("whole");
        let full = run(&tiny(&whole, "")).unwrap();

        let part = tmp.path().join("part");
        let mut short = tiny(&part, "");
        short.iters = 3;
        run(&short).unwrap();
        // Pretend the short run was the full config so its 3-iteration
        // checkpoints are picked up and continued.
        let config = tiny(&part, "");
        write(&part.join(CONFIG_FILE), &config.to_toml()).unwrap();
        let resumed = run(&config).unwrap();
        assert_eq!(full.rows, resumed.rows);
    }

    #[test]
    fn changed_config_ignores_old_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let a = run(&tiny(&dir, "")).unwrap();
        let b = run(&tiny(&dir, "[schedule]\nlr = 0.01\n")).unwrap();
        assert_ne!(a.rows, b.rows);
    }

    #[test]
    fn checkpoint_evaluation_matches_the_run() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let config = tiny(&dir, "");
        let outcome = run(&config).unwrap();
        let cell = &cells(&config).unwrap()[1];
        let ckpt = Checkpoint::load(&checkpoint_path(&dir, cell)).unwrap();
        let rows = evaluate_checkpoint(&ckpt, &config).unwrap();
        assert_eq!(rows.len(), 1);
        let expected = outcome
            .rows
            .iter()
            .find(|r| r.method == cell.method() && r.metric == "mse" && r.split == "test")
            .unwrap();
        assert_eq!(rows[0], *expected);
    }

    #[test]
    fn report_marks_failures() {
        let checks = [Check {
            suite: "first_order",
            name: "x".into(),
            error: 1.0,
            tolerance: 1e-6,
        }];
        assert!(gradcheck_report(&checks).contains("FAIL"));
    }
}
