//! Inner-loop adaptation and outer-loop meta-training for CAVIA, MAML and
//! the two learned-loss variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use viable_autodiff::{Graph, NodeRef};

use crate::error::{Error, Result};
use crate::models::{LossNet, PredictionModel, RelationLossNet, SimpleLossNet};
use crate::nn::{Activation, AdamConfig, AdamState, Block, LrSchedule, ParamSet};
use crate::tasks::{Batch, Episode, KPolicy, TaskFamily, TaskLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Cavia,
    Maml,
    SimViable,
    RelViable,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cavia, Method::Maml, Method::SimViable, Method::RelViable];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cavia => "cavia",
            Method::Maml => "maml",
            Method::SimViable => "sim_viable",
            Method::RelViable => "rel_viable",
        }
    }

    pub fn uses_loss_net(self) -> bool {
        matches!(self, Method::SimViable | Method::RelViable)
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Method::Cavia => 0,
            Method::Maml => 1,
            Method::SimViable => 2,
            Method::RelViable => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Everything that defines a meta-learner's architecture and update rules.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Drives the outer learning rate of both the prediction and the loss
    /// network.
    pub schedule: LrSchedule,
    pub phi_dim: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub hidden: Vec<usize>,
    /// Hidden widths of the loss network; empty for CAVIA and MAML.
    pub loss_hidden: Vec<usize>,
    pub activation: Activation,
    pub task_loss: TaskLoss,
}

impl MethodSpec {
    /// Sine-regression defaults: 2x40 prediction network, 3x32 loss network,
    /// one inner step with learning rate 1.0 (0.01 for MAML, which adapts
    /// every weight).
    pub fn sine(method: Method, phi_dim: usize) -> Self {
        Self {
            method,
            inner_steps: 1,
            inner_lr: if method == Method::Maml { 0.01 } else { 1.0 },
            schedule: LrSchedule::default(),
            phi_dim,
            x_dim: 1,
            y_dim: 1,
            hidden: vec![40, 40],
            loss_hidden: if method.uses_loss_net() {
                vec![32, 32, 32]
            } else {
                Vec::new()
            },
            activation: Activation::Relu,
            task_loss: TaskLoss::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.inner_lr.is_finite() || self.inner_lr < 0.0 {
            return Err(Error::Spec(format!("inner learning rate {} must be >= 0", self.inner_lr)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Spec("at least one inner step is required".into()));
        }
        if self.method.uses_loss_net() == self.loss_hidden.is_empty() {
            return Err(Error::Spec(format!(
                "{} {} a loss network",
                self.method,
                if self.method.uses_loss_net() { "requires" } else { "does not take" }
            )));
        }
        if self.method != Method::Maml && self.phi_dim == 0 {
            return Err(Error::Spec(format!("{} needs at least one context parameter", self.method)));
        }
        Ok(())
    }
}

/// The outer-loop parameters: prediction network and, for learned-loss
/// methods, the loss network.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub theta: ParamSet,
    pub psi: Option<ParamSet>,
}

/// Adapted parameters as graph nodes. They stay connected to the outer
/// parameters they were computed from.
#[derive(Clone, Debug)]
pub struct InnerResult {
    pub theta: Vec<NodeRef>,
    pub phi: Option<NodeRef>,
}

/// Adapted parameter values read out of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedValues {
    pub theta: Vec<Block>,
    pub phi: Block,
}

/// Gradient descent on `objective` starting from `start`, recorded in the
/// graph when `create_graph` is set.
pub(crate) fn descend(
    g: &mut Graph,
    start: Vec<NodeRef>,
    lr: f64,
    steps: usize,
    create_graph: bool,
    mut objective: impl FnMut(&mut Graph, &[NodeRef]) -> Result<NodeRef>,
) -> Result<Vec<NodeRef>> {
    let mut current = start;
    for _ in 0..steps {
        let loss = objective(g, &current)?;
        let grads = g.grad(loss, &current, create_graph)?;
        let mut next = Vec::with_capacity(current.len());
        for (p, d) in current.iter().zip(grads.in_order()) {
            let step = g.scale(d, lr)?;
            next.push(g.sub(*p, step)?);
        }
        current = next;
    }
    Ok(current)
}

/// Context start value `phi_0 = 0` as a `1 x phi_dim` leaf.
fn context_origin(g: &mut Graph, model: &PredictionModel) -> Option<NodeRef> {
    (model.phi_dim > 0).then(|| g.zeros(1, model.phi_dim))
}

struct BoundBatch {
    x: NodeRef,
    y: NodeRef,
}

fn bind_batch(g: &mut Graph, batch: &Batch) -> BoundBatch {
    BoundBatch {
        x: batch.x.bind(g),
        y: batch.y.bind(g),
    }
}

/// CAVIA inner loop: gradient descent on the mean task loss over the
/// context parameters only. An empty adaptation set leaves `phi = 0`.
pub fn inner_update_cavia(
    g: &mut Graph,
    model: &PredictionModel,
    task_loss: TaskLoss,
    theta: &[NodeRef],
    train: &Batch,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<InnerResult> {
    let phi0 = context_origin(g, model);
    let Some(phi0) = phi0.filter(|_| !train.is_empty()) else {
        return Ok(InnerResult {
            theta: theta.to_vec(),
            phi: phi0,
        });
    };
    let data = bind_batch(g, train);
    let out = descend(g, vec![phi0], lr, steps, create_graph, |g, cur| {
        let pred = model.predict(g, theta, Some(cur[0]), data.x)?;
        task_loss.mean(g, pred, data.y)
    })?;
    Ok(InnerResult {
        theta: theta.to_vec(),
        phi: Some(out[0]),
    })
}

/// MAML inner loop: every network weight (and the context input, if any)
/// takes the gradient step.
pub fn inner_update_maml(
    g: &mut Graph,
    model: &PredictionModel,
    task_loss: TaskLoss,
    theta: &[NodeRef],
    train: &Batch,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<InnerResult> {
    let phi0 = context_origin(g, model);
    if train.is_empty() {
        return Ok(InnerResult {
            theta: theta.to_vec(),
            phi: phi0,
        });
    }
    let data = bind_batch(g, train);
    let mut start = theta.to_vec();
    start.extend(phi0);
    let n = theta.len();
    let out = descend(g, start, lr, steps, create_graph, |g, cur| {
        let pred = model.predict(g, &cur[..n], cur.get(n).copied(), data.x)?;
        task_loss.mean(g, pred, data.y)
    })?;
    Ok(InnerResult {
        theta: out[..n].to_vec(),
        phi: out.get(n).copied(),
    })
}

fn inner_update_learned(
    g: &mut Graph,
    model: &PredictionModel,
    net: &LossNet,
    task_loss: TaskLoss,
    theta: &[NodeRef],
    psi: &[NodeRef],
    train: &Batch,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<InnerResult> {
    let phi0 = context_origin(g, model);
    let Some(phi0) = phi0.filter(|_| !train.is_empty()) else {
        return Ok(InnerResult {
            theta: theta.to_vec(),
            phi: phi0,
        });
    };
    let data = bind_batch(g, train);
    // psi is read, never stepped: the same nodes serve every inner step.
    let out = descend(g, vec![phi0], lr, steps, create_graph, |g, cur| {
        let pred = model.predict(g, theta, Some(cur[0]), data.x)?;
        let per_sample = task_loss.per_sample(g, pred, data.y)?;
        net.evaluate(g, psi, per_sample, data.x, pred, data.y)
    })?;
    Ok(InnerResult {
        theta: theta.to_vec(),
        phi: Some(out[0]),
    })
}

/// Context adaptation driven by the per-sample loss network.
pub fn inner_update_simviable(
    g: &mut Graph,
    model: &PredictionModel,
    net: &SimpleLossNet,
    task_loss: TaskLoss,
    theta: &[NodeRef],
    psi: &[NodeRef],
    train: &Batch,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<InnerResult> {
    let net = LossNet::Simple(net.clone());
    inner_update_learned(g, model, &net, task_loss, theta, psi, train, lr, steps, create_graph)
}

/// Context adaptation driven by the pairwise relation loss network.
pub fn inner_update_relviable(
    g: &mut Graph,
    model: &PredictionModel,
    net: &RelationLossNet,
    task_loss: TaskLoss,
    theta: &[NodeRef],
    psi: &[NodeRef],
    train: &Batch,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<InnerResult> {
    let net = LossNet::Relation(net.clone());
    inner_update_learned(g, model, &net, task_loss, theta, psi, train, lr, steps, create_graph)
}

/// Outer loss and gradients for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    pub loss: f64,
    pub theta: Vec<Block>,
    pub psi: Option<Vec<Block>>,
}

/// A [`MethodSpec`] with its networks instantiated.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub spec: MethodSpec,
    pub model: PredictionModel,
    pub loss_net: Option<LossNet>,
}

impl Learner {
    pub fn new(spec: MethodSpec) -> Result<Self> {
        spec.validate()?;
        let model = PredictionModel::new(spec.x_dim, spec.phi_dim, &spec.hidden, spec.y_dim, spec.activation)?;
        let loss_net = match spec.method {
            Method::SimViable => Some(LossNet::Simple(SimpleLossNet::new(
                spec.y_dim,
                spec.y_dim,
                &spec.loss_hidden,
                spec.activation,
            )?)),
            Method::RelViable => Some(LossNet::Relation(RelationLossNet::new(
                spec.x_dim,
                spec.y_dim,
                spec.y_dim,
                &spec.loss_hidden,
                spec.activation,
            )?)),
            Method::Cavia | Method::Maml => None,
        };
        Ok(Self { spec, model, loss_net })
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> MetaParams {
        let theta = self.model.init(rng);
        let psi = self.loss_net.as_ref().map(|n| n.init(rng));
        MetaParams { theta, psi }
    }

    /// Runs this method's inner loop on `train`.
    pub fn adapt(
        &self,
        g: &mut Graph,
        theta: &[NodeRef],
        psi: Option<&[NodeRef]>,
        train: &Batch,
        create_graph: bool,
    ) -> Result<InnerResult> {
        let spec = &self.spec;
        let (lr, steps, loss) = (spec.inner_lr, spec.inner_steps, spec.task_loss);
        match (spec.method, &self.loss_net, psi) {
            (Method::Cavia, _, _) => inner_update_cavia(g, &self.model, loss, theta, train, lr, steps, create_graph),
            (Method::Maml, _, _) => inner_update_maml(g, &self.model, loss, theta, train, lr, steps, create_graph),
            (_, Some(net), Some(psi)) => {
                inner_update_learned(g, &self.model, net, loss, theta, psi, train, lr, steps, create_graph)
            }
            _ => Err(Error::Spec(format!("{} needs loss-network parameters", spec.method))),
        }
    }

    pub fn predict(&self, g: &mut Graph, adapted: &InnerResult, x: NodeRef) -> Result<NodeRef> {
        self.model.predict(g, &adapted.theta, adapted.phi, x)
    }

    fn bind(&self, g: &mut Graph, params: &MetaParams) -> (Vec<NodeRef>, Option<Vec<NodeRef>>) {
        let theta = params.theta.bind(g);
        let psi = params.psi.as_ref().map(|p| p.bind(g));
        (theta, psi)
    }

    /// Post-adaptation task loss on the evaluation set and its gradients
    /// with respect to the outer parameters, differentiated through the
    /// inner loop.
    pub fn meta_gradient(&self, params: &MetaParams, episode: &Episode) -> Result<TaskGradient> {
        let mut g = Graph::new();
        let (theta, psi) = self.bind(&mut g, params);
        let adapted = self.adapt(&mut g, &theta, psi.as_deref(), &episode.train, true)?;
        let test = bind_batch(&mut g, &episode.test);
        let pred = self.predict(&mut g, &adapted, test.x)?;
        let loss = self.spec.task_loss.mean(&mut g, pred, test.y)?;

        let mut wrt = theta.clone();
        wrt.extend(psi.iter().flatten());
        let grads = g.grad(loss, &wrt, false)?.in_order();
        let blocks: Vec<Block> = grads.iter().map(|&n| Block::read(&g, n)).collect();
        let (theta_grads, psi_grads) = blocks.split_at(theta.len());
        Ok(TaskGradient {
            loss: g.scalar_value(loss),
            theta: theta_grads.to_vec(),
            psi: psi.map(|_| psi_grads.to_vec()),
        })
    }

    /// Test-time adaptation: the outer parameters are only read.
    pub fn adapt_at_test(&self, params: &MetaParams, train: &Batch) -> Result<AdaptedValues> {
        let mut g = Graph::new();
        let (theta, psi) = self.bind(&mut g, params);
        let adapted = self.adapt(&mut g, &theta, psi.as_deref(), train, false)?;
        Ok(AdaptedValues {
            theta: adapted.theta.iter().map(|&n| Block::read(&g, n)).collect(),
            phi: adapted
                .phi
                .map_or_else(|| Block::zeros(1, 0), |n| Block::read(&g, n)),
        })
    }

    /// Predictions of adapted parameter values.
    pub fn predict_values(&self, adapted: &AdaptedValues, x: &Block) -> Result<Block> {
        let mut g = Graph::new();
        let theta: Vec<NodeRef> = adapted.theta.iter().map(|b| b.bind(&mut g)).collect();
        let phi = (self.model.phi_dim > 0).then(|| adapted.phi.bind(&mut g));
        let x = x.bind(&mut g);
        let y = self.model.predict(&mut g, &theta, phi, x)?;
        Ok(Block::read(&g, y))
    }

    /// Mean task loss of `params` adapted on `train`, evaluated on `test`.
    pub fn adapted_loss(&self, adapted: &AdaptedValues, test: &Batch) -> Result<f64> {
        let pred = self.predict_values(adapted, &test.x)?;
        let mut g = Graph::new();
        let p = pred.bind(&mut g);
        let y = test.y.bind(&mut g);
        let l = self.spec.task_loss.mean(&mut g, p, y)?;
        Ok(g.scalar_value(l))
    }

    /// The inner-loop objective (task loss for CAVIA/MAML, loss-network
    /// output otherwise) at the given adapted parameters, on `train`.
    pub fn inner_objective(&self, params: &MetaParams, adapted: &AdaptedValues, train: &Batch) -> Result<f64> {
        if train.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let theta: Vec<NodeRef> = adapted.theta.iter().map(|b| b.bind(&mut g)).collect();
        let phi = (self.model.phi_dim > 0).then(|| adapted.phi.bind(&mut g));
        let data = bind_batch(&mut g, train);
        let pred = self.model.predict(&mut g, &theta, phi, data.x)?;
        let out = match (&self.loss_net, &params.psi) {
            (Some(net), Some(psi)) => {
                let psi = psi.bind(&mut g);
                let per = self.spec.task_loss.per_sample(&mut g, pred, data.y)?;
                net.evaluate(&mut g, &psi, per, data.x, pred, data.y)?
            }
            _ => self.spec.task_loss.mean(&mut g, pred, data.y)?,
        };
        Ok(g.scalar_value(out))
    }

    /// The unadapted starting point (`phi = 0`, weights as given).
    pub fn unadapted(&self, params: &MetaParams) -> AdaptedValues {
        AdaptedValues {
            theta: params.theta.blocks().cloned().collect(),
            phi: Block::zeros(1, self.model.phi_dim),
        }
    }
}

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Validation = 3,
    Evaluation = 4,
}

/// A generator for one purpose and index of a run, e.g. task `i` of
/// iteration `t`. Streams never overlap, so changing how one is consumed
/// never perturbs another.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Stream index of task `task` in meta-iteration `iteration`.
pub(crate) fn task_index(iteration: u64, task: usize) -> u64 {
    (iteration << 20) | task as u64
}

/// Outer-loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub family: TaskFamily,
    pub iters: u64,
    pub val_every: u64,
    pub meta_batch: usize,
    pub k_train: KPolicy,
    pub k_test: usize,
    pub val_tasks: usize,
    /// Adaptation samples shown per validation task.
    pub val_points: usize,
    /// Evaluation points per validation task (grid size for sine tasks).
    pub val_grid: usize,
    pub seed: u64,
    pub workers: usize,
}

impl TrainConfig {
    pub fn sine(seed: u64) -> Self {
        Self {
            family: TaskFamily::Sine {
                amplitude: Default::default(),
            },
            iters: 20_000,
            val_every: 500,
            meta_batch: 25,
            k_train: KPolicy::Fixed(10),
            k_test: 10,
            val_tasks: 100,
            val_points: 10,
            val_grid: 100,
            seed,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.val_every == 0 || self.meta_batch == 0 || self.val_tasks == 0 || self.k_test == 0 {
            return Err(Error::Spec(
                "val_every, meta_batch, val_tasks and k_test must be positive".into(),
            ));
        }
        if self.meta_batch >= 1 << 20 {
            return Err(Error::Spec("meta_batch is too large".into()));
        }
        Ok(())
    }
}

/// One validation measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryPoint {
    pub iteration: u64,
    pub score: f64,
}

/// Best validation snapshot so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub params: MetaParams,
    pub score: f64,
    pub iteration: u64,
}

/// Complete outer-loop state; enough to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: MetaParams,
    pub adam_theta: AdamState,
    pub adam_psi: Option<AdamState>,
    pub iteration: u64,
    pub seed: u64,
    pub best: Option<Snapshot>,
    pub history: Vec<HistoryPoint>,
}

impl TrainState {
    pub fn new(learner: &Learner, seed: u64) -> Self {
        let params = learner.init_params(&mut stream_rng(seed, Stream::Init, 0));
        let adam_theta = AdamState::new(&params.theta, AdamConfig::default());
        let adam_psi = params.psi.as_ref().map(|p| AdamState::new(p, AdamConfig::default()));
        Self {
            params,
            adam_theta,
            adam_psi,
            iteration: 0,
            seed,
            best: None,
            history: Vec::new(),
        }
    }

    /// Parameters of the best validation snapshot, or the current ones.
    pub fn best_params(&self) -> &MetaParams {
        self.best.as_ref().map_or(&self.params, |s| &s.params)
    }
}

fn pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Spec(format!("cannot start {workers} workers: {e}")))
}

/// Per-task meta-gradients, in task order.
fn task_gradients(
    learner: &Learner,
    params: &MetaParams,
    episodes: &[Episode],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<TaskGradient>> {
    match pool {
        Some(pool) => pool.install(|| {
            episodes
                .par_iter()
                .map(|e| learner.meta_gradient(params, e))
                .collect()
        }),
        None => episodes.iter().map(|e| learner.meta_gradient(params, e)).collect(),
    }
}

/// Mean of per-task gradients, summed in task order.
pub fn batch_gradient(per_task: &[TaskGradient]) -> TaskGradient {
    let n = per_task.len() as f64;
    let mean = |blocks: Vec<&Vec<Block>>| -> Vec<Block> {
        let mut acc: Vec<Block> = blocks[0].iter().map(|b| Block::zeros(b.rows, b.cols)).collect();
        for task in blocks {
            for (a, b) in acc.iter_mut().zip(task) {
                for (x, y) in a.values.iter_mut().zip(&b.values) {
                    *x += y;
                }
            }
        }
        for a in &mut acc {
            a.values.iter_mut().for_each(|v| *v /= n);
        }
        acc
    };
    TaskGradient {
        loss: per_task.iter().map(|t| t.loss).sum::<f64>() / n,
        theta: mean(per_task.iter().map(|t| &t.theta).collect()),
        psi: per_task[0]
            .psi
            .as_ref()
            .map(|_| mean(per_task.iter().map(|t| t.psi.as_ref().unwrap()).collect())),
    }
}

/// One outer update from a meta-batch of episodes. Returns the mean
/// post-adaptation loss of the batch before the update.
pub fn meta_train_step(state: &mut TrainState, learner: &Learner, episodes: &[Episode]) -> Result<f64> {
    meta_train_step_with(state, learner, episodes, None)
}

fn meta_train_step_with(
    state: &mut TrainState,
    learner: &Learner,
    episodes: &[Episode],
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Spec("a meta-batch needs at least one task".into()));
    }
    let per_task = task_gradients(learner, &state.params, episodes, pool)?;
    let batch = batch_gradient(&per_task);
    let lr = learner.spec.schedule.lr_at(state.iteration);
    state.adam_theta.step(&mut state.params.theta, &batch.theta, lr)?;
    if let (Some(psi), Some(adam), Some(grads)) = (&mut state.params.psi, &mut state.adam_psi, &batch.psi) {
        adam.step(psi, grads, lr)?;
    }
    state.iteration += 1;
    Ok(batch.loss)
}

/// The meta-batch of iteration `iteration`.
pub fn training_batch(config: &TrainConfig, iteration: u64) -> Result<Vec<Episode>> {
    (0..config.meta_batch)
        .map(|i| {
            let mut rng = stream_rng(config.seed, Stream::Train, task_index(iteration, i));
            let k = config.k_train.draw(&mut rng);
            config.family.sample(&mut rng, k, config.k_test)
        })
        .collect()
}

/// The fixed validation tasks of a run. Sine tasks are evaluated on the
/// regular grid.
pub fn validation_set(config: &TrainConfig) -> Result<Vec<Episode>> {
    (0..config.val_tasks)
        .map(|i| {
            let mut rng = stream_rng(config.seed, Stream::Validation, i as u64);
            crate::eval::protocol_episode(&config.family, &mut rng, config.val_points, config.val_grid)
        })
        .collect()
}

/// Mean post-adaptation task loss over `episodes`.
pub fn validation_score(learner: &Learner, params: &MetaParams, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for e in episodes {
        let adapted = learner.adapt_at_test(params, &e.train)?;
        total += learner.adapted_loss(&adapted, &e.test)?;
    }
    Ok(total / episodes.len() as f64)
}

fn record_validation(state: &mut TrainState, learner: &Learner, val: &[Episode]) -> Result<()> {
    let score = validation_score(learner, &state.params, val)?;
    if !score.is_finite() {
        return Err(Error::Invariant(format!(
            "validation score became {score} at iteration {}",
            state.iteration
        )));
    }
    state.history.push(HistoryPoint {
        iteration: state.iteration,
        score,
    });
    if state.best.as_ref().is_none_or(|b| score < b.score) {
        state.best = Some(Snapshot {
            params: state.params.clone(),
            score,
            iteration: state.iteration,
        });
    }
    Ok(())
}

/// Trains from `state` until `config.iters` iterations have run,
/// validating every `config.val_every` iterations (and at iteration 0).
/// `on_validation` is called after each validation with the state.
pub fn train_from(
    mut state: TrainState,
    learner: &Learner,
    config: &TrainConfig,
    mut on_validation: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if state.seed != config.seed {
        return Err(Error::Spec(format!(
            "state was created with seed {} but the config uses {}",
            state.seed, config.seed
        )));
    }
    let val = validation_set(config)?;
    let pool = pool(config.workers)?;
    let due = |s: &TrainState| {
        s.iteration.is_multiple_of(config.val_every) && s.history.last().is_none_or(|h| h.iteration != s.iteration)
    };
    loop {
        if due(&state) {
            record_validation(&mut state, learner, &val)?;
            on_validation(&state)?;
        }
        if state.iteration >= config.iters {
            break;
        }
        let batch = training_batch(config, state.iteration)?;
        meta_train_step_with(&mut state, learner, &batch, pool.as_ref())?;
    }
    Ok(state)
}

/// Full training run from a fresh initialization.
pub fn train(learner: &Learner, config: &TrainConfig) -> Result<TrainState> {
    train_from(TrainState::new(learner, config.seed), learner, config, |_| Ok(()))
}
