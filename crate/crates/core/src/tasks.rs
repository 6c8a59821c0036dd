//! Task distributions and episode sampling.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use viable_autodiff::{Graph, NodeRef};

use crate::error::{Error, Result};
use crate::nn::Block;

/// Inputs of sine tasks are drawn from, and evaluated on, this interval.
pub const SINE_DOMAIN: (f64, f64) = (-5.0, 5.0);

/// Amplitude interval of the sine task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AmplitudeRange {
    /// `[0.1, 5.0]`, the range of the standard sine benchmark.
    #[default]
    Standard,
    /// `[0.1, 0.5]`.
    Narrow,
}

impl AmplitudeRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            AmplitudeRange::Standard => (0.1, 5.0),
            AmplitudeRange::Narrow => (0.1, 0.5),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AmplitudeRange::Standard => "standard",
            AmplitudeRange::Narrow => "narrow",
        }
    }
}

/// `y(x) = amplitude * sin(x - phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }

    /// Inputs and targets for the given points, as column blocks.
    pub fn batch(&self, xs: &[f64]) -> Batch {
        let ys = xs.iter().map(|&x| self.eval(x)).collect();
        Batch {
            x: Block {
                rows: xs.len(),
                cols: 1,
                values: xs.to_vec(),
            },
            y: Block {
                rows: xs.len(),
                cols: 1,
                values: ys,
            },
        }
    }
}

pub fn sample_sine_task<R: Rng + ?Sized>(rng: &mut R, range: AmplitudeRange) -> SineTask {
    let (lo, hi) = range.bounds();
    let amplitude = rng.random_range(lo..=hi);
    let phase = rng.random_range(0.0..=PI);
    SineTask { amplitude, phase }
}

/// Row-aligned inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Block,
    pub y: Block,
}

impl Batch {
    pub fn empty(x_dim: usize, y_dim: usize) -> Self {
        Self {
            x: Block::zeros(0, x_dim),
            y: Block::zeros(0, y_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    /// Every row repeated twice, kept adjacent.
    pub fn duplicated(&self) -> Self {
        let rows: Vec<usize> = (0..self.len()).flat_map(|r| [r, r]).collect();
        Self {
            x: self.x.select_rows(rows.iter().copied()),
            y: self.y.select_rows(rows.iter().copied()),
        }
    }

    /// The first `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            x: self.x.select_rows(0..n),
            y: self.y.select_rows(0..n),
        }
    }
}

/// One task's adaptation set and evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub train: Batch,
    pub test: Batch,
}

fn uniform_points<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let (lo, hi) = SINE_DOMAIN;
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Draws `k_train` adaptation points and `k_test` evaluation points
/// independently and uniformly from the sine domain. Targets are noiseless.
pub fn sample_episode<R: Rng + ?Sized>(task: &SineTask, k_train: usize, k_test: usize, rng: &mut R) -> Episode {
    let train = uniform_points(rng, k_train);
    let test = uniform_points(rng, k_test);
    Episode {
        train: task.batch(&train),
        test: task.batch(&test),
    }
}

/// `n` equally spaced points covering the sine domain, endpoints included.
pub fn linspace_eval_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Spec(format!("evaluation grid needs at least 2 points, got {n}")));
    }
    let (lo, hi) = SINE_DOMAIN;
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect())
}

/// The pre-defined per-sample loss of a task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    /// Squared error, averaged over output columns.
    Mse,
    /// Softmax cross-entropy against one-hot targets.
    CrossEntropy,
}

impl TaskLoss {
    /// Per-sample losses as an `M x 1` column.
    pub fn per_sample(self, g: &mut Graph, pred: NodeRef, target: NodeRef) -> Result<NodeRef> {
        if pred.shape() != target.shape() {
            return Err(Error::Rows(format!(
                "predictions {:?} vs targets {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        match self {
            TaskLoss::Mse => {
                let d = g.sub(pred, target)?;
                let sq = g.square(d)?;
                if pred.cols() == 1 {
                    Ok(sq)
                } else {
                    let s = g.row_sum(sq)?;
                    Ok(g.scale(s, 1.0 / pred.cols() as f64)?)
                }
            }
            TaskLoss::CrossEntropy => Ok(g.softmax_cross_entropy(pred, target)?),
        }
    }

    /// Mean of the per-sample losses.
    pub fn mean(self, g: &mut Graph, pred: NodeRef, target: NodeRef) -> Result<NodeRef> {
        if pred.rows() == 0 {
            return Err(Error::EmptyEpisode);
        }
        let l = self.per_sample(g, pred, target)?;
        Ok(g.mean(l)?)
    }
}

/// Per-sample squared errors and their mean.
pub fn mse_loss(g: &mut Graph, pred: NodeRef, target: NodeRef) -> Result<(NodeRef, NodeRef)> {
    let per = TaskLoss::Mse.per_sample(g, pred, target)?;
    if per.rows() == 0 {
        return Err(Error::EmptyEpisode);
    }
    let mean = g.mean(per)?;
    Ok((per, mean))
}

/// Shape of the synthetic few-shot classification family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub dim: usize,
    pub sigma: f64,
}

impl Default for ClassConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 5,
            queries: 5,
            dim: 16,
            sigma: 0.1,
        }
    }
}

/// `ways` class prototypes in `R^dim`; samples are prototype plus isotropic
/// Gaussian noise of scale `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTask {
    pub prototypes: Block,
    pub sigma: f64,
}

impl ClassTask {
    /// Prototypes drawn from a standard normal.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, config: &ClassConfig) -> Self {
        let values = (0..config.ways * config.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            prototypes: Block {
                rows: config.ways,
                cols: config.dim,
                values,
            },
            sigma: config.sigma,
        }
    }

    pub fn ways(&self) -> usize {
        self.prototypes.rows
    }

    fn draw<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Batch {
        let (n, d) = (self.prototypes.rows, self.prototypes.cols);
        let mut x = Vec::with_capacity(n * per_class * d);
        let mut y = Vec::with_capacity(n * per_class * n);
        for c in 0..n {
            for _ in 0..per_class {
                for &p in self.prototypes.row(c) {
                    let noise: f64 = rng.sample(StandardNormal);
                    x.push(p + self.sigma * noise);
                }
                y.extend((0..n).map(|j| if j == c { 1.0 } else { 0.0 }));
            }
        }
        Batch {
            x: Block {
                rows: n * per_class,
                cols: d,
                values: x,
            },
            y: Block {
                rows: n * per_class,
                cols: n,
                values: y,
            },
        }
    }

    /// A fresh episode with `shots` adaptation and `queries` evaluation
    /// samples per class.
    pub fn episode<R: Rng + ?Sized>(&self, shots: usize, queries: usize, rng: &mut R) -> Episode {
        let train = self.draw(shots, rng);
        let test = self.draw(queries, rng);
        Episode { train, test }
    }
}

pub fn sample_class_task<R: Rng + ?Sized>(rng: &mut R, config: &ClassConfig) -> Result<(ClassTask, Episode)> {
    if config.ways < 2 {
        return Err(Error::Spec(format!("need at least 2 classes, got {}", config.ways)));
    }
    if config.shots < 1 || config.queries < 1 || config.dim < 1 {
        return Err(Error::Spec("shots, queries and dim must be positive".into()));
    }
    let task = ClassTask::random(rng, config);
    let episode = task.episode(config.shots, config.queries, rng);
    Ok((task, episode))
}

/// Index of the largest entry of each row.
pub fn argmax_rows(block: &Block) -> Vec<usize> {
    (0..block.rows)
        .map(|r| {
            let row = block.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy of classifying each evaluation sample by the nearest class mean
/// of the adaptation samples.
pub fn nearest_prototype_accuracy(episode: &Episode) -> f64 {
    let train = &episode.train;
    let (d, n) = (train.x.cols, train.y.cols);
    let labels = argmax_rows(&train.y);
    let mut means = vec![0.0; n * d];
    let mut counts = vec![0usize; n];
    for (r, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (m, &v) in means[c * d..(c + 1) * d].iter_mut().zip(train.x.row(r)) {
            *m += v;
        }
    }
    for c in 0..n {
        if counts[c] > 0 {
            means[c * d..(c + 1) * d]
                .iter_mut()
                .for_each(|m| *m /= counts[c] as f64);
        }
    }
    let truth = argmax_rows(&episode.test.y);
    let correct = truth
        .iter()
        .enumerate()
        .filter(|&(r, &c)| {
            let x = episode.test.x.row(r);
            let dist = |k: usize| -> f64 {
                if counts[k] == 0 {
                    return f64::INFINITY;
                }
                x.iter()
                    .zip(&means[k * d..(k + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let best = (0..n)
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .unwrap();
            best == c
        })
        .count();
    correct as f64 / truth.len().max(1) as f64
}

/// How many adaptation samples each training task gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KPolicy {
    Fixed(usize),
    /// Uniform over `lo..=hi`, drawn per task.
    Uniform { lo: usize, hi: usize },
}

impl KPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            KPolicy::Fixed(k) => k,
            KPolicy::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

/// A task distribution together with the shape of its data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskFamily {
    Sine { amplitude: AmplitudeRange },
    Classification(ClassConfig),
}

impl TaskFamily {
    pub fn x_dim(&self) -> usize {
        match self {
            TaskFamily::Sine { .. } => 1,
            TaskFamily::Classification(c) => c.dim,
        }
    }

    pub fn y_dim(&self) -> usize {
        match self {
            TaskFamily::Sine { .. } => 1,
            TaskFamily::Classification(c) => c.ways,
        }
    }

    pub fn task_loss(&self) -> TaskLoss {
        match self {
            TaskFamily::Sine { .. } => TaskLoss::Mse,
            TaskFamily::Classification(_) => TaskLoss::CrossEntropy,
        }
    }

    /// A fresh task and episode. For sine tasks `k_train`/`k_test` count
    /// points; for classification they count samples per class.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k_train: usize, k_test: usize) -> Result<Episode> {
        match self {
            TaskFamily::Sine { amplitude } => {
                let task = sample_sine_task(rng, *amplitude);
                Ok(sample_episode(&task, k_train, k_test, rng))
            }
            TaskFamily::Classification(c) => {
                if c.ways < 2 || c.dim < 1 || k_test < 1 {
                    return Err(Error::Spec("classification needs ways >= 2, dim >= 1, queries >= 1".into()));
                }
                let task = ClassTask::random(rng, c);
                Ok(task.episode(k_train, k_test, rng))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_sampling_is_seeded() {
        let a = sample_sine_task(&mut ChaCha8Rng::seed_from_u64(4), AmplitudeRange::Standard);
        let b = sample_sine_task(&mut ChaCha8Rng::seed_from_u64(4), AmplitudeRange::Standard);
        assert_eq!(a, b);
    }

    #[test]
    fn amplitude_mean_and_phase_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let t = sample_sine_task(&mut rng, AmplitudeRange::Standard);
            assert!((0.0..=PI).contains(&t.phase));
            assert!((0.1..=5.0).contains(&t.amplitude));
            total += t.amplitude;
        }
        // U[0.1, 5.0] has mean 2.55 and standard error 1.41/sqrt(n) ~ 0.0045.
        assert!((total / n as f64 - 2.55).abs() < 0.02);

        let narrow = sample_sine_task(&mut rng, AmplitudeRange::Narrow);
        assert!((0.1..=0.5).contains(&narrow.amplitude));
    }

    #[test]
    fn episodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = sample_sine_task(&mut rng, AmplitudeRange::Standard);
        let ep = sample_episode(&task, 0, 7, &mut rng);
        assert!(ep.train.is_empty());
        assert_eq!(ep.test.len(), 7);
        let ep = sample_episode(&task, 25, 25, &mut rng);
        for b in [&ep.train, &ep.test] {
            for r in 0..b.len() {
                let x = b.x.values[r];
                assert!((-5.0..=5.0).contains(&x));
                assert_eq!(b.y.values[r] - task.amplitude * (x - task.phase).sin(), 0.0);
            }
        }
        assert_eq!(task.eval(task.phase), 0.0);
    }

    #[test]
    fn episode_is_reproducible() {
        let task = SineTask {
            amplitude: 1.0,
            phase: 0.5,
        };
        let a = sample_episode(&task, 5, 5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_episode(&task, 5, 5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn grids() {
        let g = linspace_eval_grid(100).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[99], 5.0);
        assert!((g[1] - g[0] - 10.0 / 99.0).abs() < 1e-12);
        assert_eq!(linspace_eval_grid(2).unwrap(), vec![-5.0, 5.0]);
        assert_eq!(linspace_eval_grid(3).unwrap(), vec![-5.0, 0.0, 5.0]);
        assert!(linspace_eval_grid(1).is_err());
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut g = Graph::new();
        let p = g.variable(vec![0.0, 0.0], 2, 1).unwrap();
        let y = g.constant(vec![1.0, 3.0], 2, 1).unwrap();
        let (_, mean) = mse_loss(&mut g, p, y).unwrap();
        assert_eq!(g.scalar_value(mean), 5.0);
        let (_, same) = mse_loss(&mut g, y, y).unwrap();
        assert_eq!(g.scalar_value(same), 0.0);

        let pv = [0.4, -1.2, 2.5];
        let yv = [1.0, 0.5, 2.0];
        let p = g.variable(pv.to_vec(), 3, 1).unwrap();
        let y = g.constant(yv.to_vec(), 3, 1).unwrap();
        let (_, mean) = mse_loss(&mut g, p, y).unwrap();
        let d = g.grad(mean, &[p], false).unwrap().of(p);
        for i in 0..3 {
            let closed = 2.0 * (pv[i] - yv[i]) / 3.0;
            assert!((g.value(d)[i] - closed).abs() < 1e-15);
        }
        let bad = g.zeros(2, 1);
        assert!(mse_loss(&mut g, p, bad).is_err());
    }

    #[test]
    fn class_episodes() {
        let cfg = ClassConfig {
            sigma: 0.0,
            ..ClassConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (task, ep) = sample_class_task(&mut rng, &cfg).unwrap();
        assert_eq!(ep.train.len(), cfg.ways * cfg.shots);
        assert_eq!(ep.test.len(), cfg.ways * cfg.queries);
        for c in 0..cfg.ways {
            for s in 0..cfg.shots {
                assert_eq!(ep.train.x.row(c * cfg.shots + s), task.prototypes.row(c));
            }
        }
        assert!(sample_class_task(&mut rng, &ClassConfig { ways: 1, ..cfg }).is_err());
    }

    #[test]
    fn nearest_prototype_oracle_is_near_perfect_at_low_noise() {
        let cfg = ClassConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 200;
        let acc: f64 = (0..trials)
            .map(|_| nearest_prototype_accuracy(&sample_class_task(&mut rng, &cfg).unwrap().1))
            .sum::<f64>()
            / trials as f64;
        assert!(acc > 0.99, "oracle accuracy {acc}");
    }
}
