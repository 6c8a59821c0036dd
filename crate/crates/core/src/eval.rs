//! Test-time evaluation and the experiment grids.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Block;
use crate::tasks::{argmax_rows, linspace_eval_grid, sample_sine_task, ClassTask, Episode, KPolicy, TaskFamily};
use crate::trainer::{stream_rng, Learner, Method, MetaParams, Stream, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Accuracy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn for_family(family: &TaskFamily) -> Self {
        match family {
            TaskFamily::Sine { .. } => Metric::Mse,
            TaskFamily::Classification(_) => Metric::Accuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub n_tasks: usize,
    /// Adaptation points (sine) or samples per class (classification).
    pub points: usize,
    /// Evaluation grid size (sine) or held-out samples per class
    /// (classification).
    pub grid: usize,
    pub metric: Metric,
}

impl EvalProtocol {
    pub fn sine() -> Self {
        Self {
            n_tasks: 1000,
            points: 10,
            grid: 100,
            metric: Metric::Mse,
        }
    }

    pub fn classification(shots: usize, queries: usize) -> Self {
        Self {
            n_tasks: 1000,
            points: shots,
            grid: queries,
            metric: Metric::Accuracy,
        }
    }

    pub fn with_points(self, points: usize) -> Self {
        Self { points, ..self }
    }
}

/// One emitted measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub phi_dim: usize,
    /// Adaptation points the measurement used.
    pub k_train: usize,
    pub seed: u64,
    pub split: String,
    pub iteration: u64,
    pub metric: String,
    pub value: f64,
    pub ci95: f64,
}

/// Mean and 95% confidence half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Summary {
    /// `1.96 * stderr`, with the half-width of a single value taken as 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        };
        Self { mean, ci95, n }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }
}

/// A test episode: `points` random adaptation samples and the fixed
/// evaluation grid (sine) or `grid` held-out samples per class.
pub fn protocol_episode<R: Rng + ?Sized>(family: &TaskFamily, rng: &mut R, points: usize, grid: usize) -> Result<Episode> {
    match family {
        TaskFamily::Sine { amplitude } => {
            let task = sample_sine_task(rng, *amplitude);
            let (lo, hi) = crate::tasks::SINE_DOMAIN;
            let xs: Vec<f64> = (0..points).map(|_| rng.random_range(lo..=hi)).collect();
            Ok(Episode {
                train: task.batch(&xs),
                test: task.batch(&linspace_eval_grid(grid)?),
            })
        }
        TaskFamily::Classification(c) => {
            if grid == 0 {
                return Err(Error::Spec("classification evaluation needs held-out samples".into()));
            }
            Ok(ClassTask::random(rng, c).episode(points, grid, rng))
        }
    }
}

/// Evaluation task `index` of a run. Tasks depend only on `seed` and the
/// index, so every method and every `points` setting sees the same tasks.
pub fn evaluation_episode(family: &TaskFamily, protocol: &EvalProtocol, seed: u64, index: usize) -> Result<Episode> {
    let mut rng = stream_rng(seed, Stream::Evaluation, index as u64);
    protocol_episode(family, &mut rng, protocol.points, protocol.grid)
}

fn score(metric: Metric, pred: &Block, target: &Block) -> f64 {
    match metric {
        Metric::Mse => {
            pred.values
                .iter()
                .zip(&target.values)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / pred.values.len() as f64
        }
        Metric::Accuracy => {
            let hits = argmax_rows(pred)
                .iter()
                .zip(argmax_rows(target))
                .filter(|(a, b)| **a == *b)
                .count();
            hits as f64 / pred.rows as f64
        }
    }
}

/// Metric before and after adapting on one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrePost {
    pub pre: f64,
    pub post: f64,
}

pub fn pre_post(learner: &Learner, params: &MetaParams, episode: &Episode, metric: Metric) -> Result<PrePost> {
    let before = learner.predict_values(&learner.unadapted(params), &episode.test.x)?;
    let adapted = learner.adapt_at_test(params, &episode.train)?;
    let after = learner.predict_values(&adapted, &episode.test.x)?;
    Ok(PrePost {
        pre: score(metric, &before, &episode.test.y),
        post: score(metric, &after, &episode.test.y),
    })
}

fn map_tasks<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Spec(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Per-task pre/post metric over the protocol's evaluation tasks, in task
/// order.
pub fn evaluate_tasks(
    learner: &Learner,
    params: &MetaParams,
    family: &TaskFamily,
    protocol: &EvalProtocol,
    seed: u64,
    workers: usize,
) -> Result<Vec<PrePost>> {
    if protocol.n_tasks == 0 {
        return Err(Error::Spec("evaluation needs at least one task".into()));
    }
    map_tasks(protocol.n_tasks, workers, |i| {
        let episode = evaluation_episode(family, protocol, seed, i)?;
        pre_post(learner, params, &episode, protocol.metric)
    })
}

/// Post-adaptation metric, mean and ci95 across tasks.
pub fn evaluate(
    learner: &Learner,
    params: &MetaParams,
    family: &TaskFamily,
    protocol: &EvalProtocol,
    seed: u64,
    workers: usize,
) -> Result<Summary> {
    let scores = evaluate_tasks(learner, params, family, protocol, seed, workers)?;
    let post: Vec<f64> = scores.iter().map(|s| s.post).collect();
    let summary = Summary::of(&post);
    if !summary.mean.is_finite() {
        return Err(Error::Invariant(format!("{} evaluation is not finite", learner.method())));
    }
    Ok(summary)
}

/// Pre- and post-update loss on each of `n` evaluation tasks.
pub fn emit_loss_trajectory(
    learner: &Learner,
    params: &MetaParams,
    episodes: &[Episode],
) -> Result<Vec<PrePost>> {
    episodes
        .iter()
        .map(|e| pre_post(learner, params, e, Metric::Mse))
        .collect()
}

/// One training configuration of an experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub learner: Learner,
    pub train: TrainConfig,
    /// Seed of the evaluation tasks.
    pub eval_seed: u64,
}

impl Cell {
    pub fn method(&self) -> Method {
        self.learner.method()
    }

    pub fn phi_dim(&self) -> usize {
        self.learner.spec.phi_dim
    }

    fn row(&self, state: &TrainState, protocol: &EvalProtocol, metric: &str, s: Summary) -> ResultRow {
        ResultRow {
            method: self.method(),
            phi_dim: self.phi_dim(),
            k_train: protocol.points,
            seed: self.train.seed,
            split: "test".into(),
            iteration: state.best.as_ref().map_or(state.iteration, |b| b.iteration),
            metric: metric.into(),
            value: s.mean,
            ci95: s.ci95,
        }
    }
}

/// Trains a cell. Callers may cache or resume; the default is
/// [`crate::trainer::train`].
pub type Trainer<'a> = dyn Fn(&Cell) -> Result<TrainState> + 'a;

/// Validation history rows of a trained cell.
pub fn history_rows(cell: &Cell, state: &TrainState) -> Vec<ResultRow> {
    let metric = Metric::for_family(&cell.train.family);
    state
        .history
        .iter()
        .map(|h| ResultRow {
            method: cell.method(),
            phi_dim: cell.phi_dim(),
            k_train: cell.train.val_points,
            seed: cell.train.seed,
            split: "validation".into(),
            iteration: h.iteration,
            metric: match metric {
                Metric::Mse => "mse".into(),
                Metric::Accuracy => "cross_entropy".into(),
            },
            value: h.score,
            ci95: 0.0,
        })
        .collect()
}

/// Evaluates a trained cell at each adaptation size in `ks`.
pub fn sweep_points(
    cell: &Cell,
    state: &TrainState,
    protocol: &EvalProtocol,
    ks: &[usize],
    workers: usize,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let p = protocol.with_points(k);
        let s = evaluate(&cell.learner, state.best_params(), &cell.train.family, &p, cell.eval_seed, workers)?;
        rows.push(cell.row(state, &p, p.metric.as_str(), s));
    }
    Ok(rows)
}

/// Trains every (method, phi_dim) cell on fixed-size sine episodes and
/// reports test MSE at the protocol's adaptation size.
pub fn run_vary_context_params(
    cells: &[Cell],
    protocol: &EvalProtocol,
    trainer: &Trainer<'_>,
    workers: usize,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for cell in cells {
        let state = trainer(cell)?;
        rows.extend(history_rows(cell, &state));
        rows.extend(sweep_points(cell, &state, protocol, &[protocol.points], workers)?);
    }
    Ok(rows)
}

/// Evaluation sizes of the sample-point sweep.
pub const SAMPLE_SWEEP_KS: [usize; 7] = [0, 1, 2, 3, 4, 10, 20];

/// Training sizes of the sample-point sweep.
pub const SAMPLE_SWEEP_TRAIN: KPolicy = KPolicy::Uniform { lo: 0, hi: 20 };

/// Trains on a random number of adaptation points per task and reports
/// test MSE and pre-update MSE at every size in [`SAMPLE_SWEEP_KS`].
pub fn run_vary_sample_points(
    cells: &[Cell],
    protocol: &EvalProtocol,
    trainer: &Trainer<'_>,
    workers: usize,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for cell in cells {
        let state = trainer(cell)?;
        rows.extend(history_rows(cell, &state));
        rows.extend(pre_post_rows(cell, &state, protocol, &SAMPLE_SWEEP_KS, workers)?);
    }
    Ok(rows)
}

/// Pre-update (`pre_mse`) and post-update (`mse`) rows at each adaptation
/// size in `ks`.
pub fn pre_post_rows(
    cell: &Cell,
    state: &TrainState,
    protocol: &EvalProtocol,
    ks: &[usize],
    workers: usize,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let p = protocol.with_points(k);
        let scores = evaluate_tasks(&cell.learner, state.best_params(), &cell.train.family, &p, cell.eval_seed, workers)?;
        let pre: Vec<f64> = scores.iter().map(|s| s.pre).collect();
        let post: Vec<f64> = scores.iter().map(|s| s.post).collect();
        rows.push(cell.row(state, &p, "pre_mse", Summary::of(&pre)));
        rows.push(cell.row(state, &p, "mse", Summary::of(&post)));
    }
    Ok(rows)
}

/// Adaptation sizes of the shot-generalization sweep.
pub const SHOT_SWEEP_KS: std::ops::RangeInclusive<usize> = 1..=9;

/// Trains on the synthetic classification family and reports accuracy for
/// 1 to 9 adaptation samples per class.
pub fn run_shot_generalization(
    cells: &[Cell],
    protocol: &EvalProtocol,
    trainer: &Trainer<'_>,
    workers: usize,
) -> Result<Vec<ResultRow>> {
    let ks: Vec<usize> = SHOT_SWEEP_KS.collect();
    let mut rows = Vec::new();
    for cell in cells {
        let state = trainer(cell)?;
        rows.extend(history_rows(cell, &state));
        rows.extend(sweep_points(cell, &state, protocol, &ks, workers)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::AmplitudeRange;
    use crate::trainer::MethodSpec;

    fn zero_learner() -> (Learner, MetaParams) {
        let learner = Learner::new(MethodSpec::sine(Method::Cavia, 2)).unwrap();
        let mut params = learner.init_params(&mut stream_rng(0, Stream::Init, 0));
        for b in params.theta.blocks_mut() {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        (learner, params)
    }

    #[test]
    fn summary_of_one_value_has_zero_interval() {
        let s = Summary::of(&[3.5]);
        assert_eq!((s.mean, s.ci95), (3.5, 0.0));
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.ci95 - 1.96 * (2.0f64 / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let b = Block::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(score(Metric::Mse, &b, &b), 0.0);
        let y = Block::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(score(Metric::Accuracy, &y, &y), 1.0);
    }

    #[test]
    fn zero_predictor_matches_half_second_moment() {
        let (learner, params) = zero_learner();
        let family = TaskFamily::Sine {
            amplitude: AmplitudeRange::Standard,
        };
        let protocol = EvalProtocol {
            n_tasks: 4000,
            ..EvalProtocol::sine()
        };
        let s = evaluate(&learner, &params, &family, &protocol, 7, 1).unwrap();
        // E[A^2] / 2 for A ~ U[0.1, 5] is (5^3 - 0.1^3) / (3 * 4.9) / 2.
        let expected = (125.0 - 0.001) / (3.0 * 4.9) / 2.0;
        assert!((s.mean - expected).abs() < 3.0 * s.ci95, "{} vs {expected}", s.mean);
    }

    #[test]
    fn evaluation_is_repeatable_and_paired() {
        let learner = Learner::new(MethodSpec::sine(Method::Cavia, 2)).unwrap();
        let params = learner.init_params(&mut stream_rng(3, Stream::Init, 0));
        let family = TaskFamily::Sine {
            amplitude: AmplitudeRange::Standard,
        };
        let protocol = EvalProtocol {
            n_tasks: 20,
            ..EvalProtocol::sine()
        };
        let a = evaluate_tasks(&learner, &params, &family, &protocol, 1, 1).unwrap();
        let b = evaluate_tasks(&learner, &params, &family, &protocol, 1, 1).unwrap();
        assert_eq!(a, b);
        let c = evaluate_tasks(&learner, &params, &family, &protocol.with_points(3), 1, 1).unwrap();
        let pre_a: Vec<f64> = a.iter().map(|s| s.pre).collect();
        let pre_c: Vec<f64> = c.iter().map(|s| s.pre).collect();
        assert_eq!(pre_a, pre_c);
    }

    #[test]
    fn no_points_means_no_change() {
        let learner = Learner::new(MethodSpec::sine(Method::Cavia, 2)).unwrap();
        let params = learner.init_params(&mut stream_rng(3, Stream::Init, 0));
        let family = TaskFamily::Sine {
            amplitude: AmplitudeRange::Standard,
        };
        let protocol = EvalProtocol {
            n_tasks: 10,
            ..EvalProtocol::sine()
        }
        .with_points(0);
        for s in evaluate_tasks(&learner, &params, &family, &protocol, 0, 1).unwrap() {
            assert_eq!(s.pre, s.post);
        }
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let learner = Learner::new(MethodSpec::sine(Method::RelViable, 2)).unwrap();
        let params = learner.init_params(&mut stream_rng(3, Stream::Init, 0));
        let family = TaskFamily::Sine {
            amplitude: AmplitudeRange::Standard,
        };
        let protocol = EvalProtocol {
            n_tasks: 12,
            ..EvalProtocol::sine()
        };
        let a = evaluate_tasks(&learner, &params, &family, &protocol, 0, 1).unwrap();
        let b = evaluate_tasks(&learner, &params, &family, &protocol, 0, 3).unwrap();
        assert_eq!(a, b);
    }
}
