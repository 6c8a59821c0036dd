//! Multilayer perceptrons, parameter sets, Adam and the step-decay schedule.

use indexmap::IndexMap;
use rand::Rng;
use viable_autodiff::{Graph, NodeRef};

use crate::error::{Error, Result};

/// A dense row-major value block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Block {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Spec(format!(
                "block of {} values cannot have shape {rows}x{cols}",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Inserts the block into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> NodeRef {
        g.variable(self.values.clone(), self.rows, self.cols)
            .expect("block shape is validated on construction")
    }

    /// Copies a node's value out of a graph.
    pub fn read(g: &Graph, node: NodeRef) -> Self {
        Self {
            rows: node.rows(),
            cols: node.cols(),
            values: g.value(node).to_vec(),
        }
    }

    /// Rows `rows` of this block, in the given order.
    pub fn select_rows(&self, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut values = Vec::new();
        let mut n = 0;
        for r in rows {
            values.extend_from_slice(self.row(r));
            n += 1;
        }
        Self {
            rows: n,
            cols: self.cols,
            values,
        }
    }
}

/// Which part of the meta-learner a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Task-agnostic prediction-network weights, updated in the outer loop.
    TaskAgnostic,
    /// Per-task context parameters, updated in the inner loop.
    Context,
    /// Loss-network weights, updated in the outer loop only.
    LossNet,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::TaskAgnostic => "theta",
            Role::Context => "phi",
            Role::LossNet => "psi",
        }
    }
}

/// Named, shaped, ordered trainable values with a role tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    role: Role,
    entries: IndexMap<String, Block>,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            entries: IndexMap::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn insert(&mut self, name: impl Into<String>, block: Block) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Spec(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, block);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Block)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.entries.values()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.entries.values_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Block::len).sum()
    }

    /// Inserts every block as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeRef> {
        self.entries.values().map(|b| b.bind(g)).collect()
    }

    /// Overwrites all values from `blocks` (same order and shapes).
    pub fn assign(&mut self, blocks: &[Block]) -> Result<()> {
        self.check_shapes(blocks.iter().map(Block::shape))?;
        for (dst, src) in self.entries.values_mut().zip(blocks) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, shapes: impl ExactSizeIterator<Item = (usize, usize)>) -> Result<()> {
        if shapes.len() != self.entries.len() {
            return Err(Error::Spec(format!(
                "{} blocks supplied for {} parameters",
                shapes.len(),
                self.entries.len()
            )));
        }
        for ((name, block), shape) in self.entries.iter().zip(shapes) {
            if block.shape() != shape {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: block.shape(),
                    got: shape,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeRef) -> Result<NodeRef> {
        Ok(match self {
            Activation::Relu => g.relu(x)?,
            Activation::Tanh => g.tanh(x)?,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Fully connected network shape. The output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Spec(format!(
                "an MLP needs at least an input and an output width, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Spec(format!("layer widths must be positive, got {layer_sizes:?}")));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
///
/// Layer `i` contributes `layer{i}.weight` (fan_in x fan_out) and
/// `layer{i}.bias` (1 x fan_out).
pub fn mlp_init<R: Rng + ?Sized>(spec: &MlpSpec, role: Role, rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new(role);
    for (i, w) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params
            .insert(format!("layer{i}.weight"), Block {
                rows: fan_in,
                cols: fan_out,
                values: weights,
            })
            .expect("layer names are unique");
        params
            .insert(format!("layer{i}.bias"), Block::zeros(1, fan_out))
            .expect("layer names are unique");
    }
    params
}

/// Adds a `1 x n` bias to every row of `h` (as `ones * bias`).
pub(crate) fn add_bias(g: &mut Graph, h: NodeRef, bias: NodeRef) -> Result<NodeRef> {
    let ones = g.ones(h.rows(), 1);
    let b = g.matmul(ones, bias)?;
    Ok(g.add(h, b)?)
}

fn check_params(spec: &MlpSpec, params: &[NodeRef]) -> Result<()> {
    if params.len() != 2 * spec.num_layers() {
        return Err(Error::Spec(format!(
            "expected {} parameter nodes, got {}",
            2 * spec.num_layers(),
            params.len()
        )));
    }
    for (i, w) in spec.layer_sizes.windows(2).enumerate() {
        for (k, expected) in [(2 * i, (w[0], w[1])), (2 * i + 1, (1, w[1]))] {
            if params[k].shape() != expected {
                return Err(Error::ParamShape {
                    name: format!("layer{i}.{}", if k % 2 == 0 { "weight" } else { "bias" }),
                    expected,
                    got: params[k].shape(),
                });
            }
        }
    }
    Ok(())
}

/// Batched forward pass. `params` holds `[w0, b0, w1, b1, ...]` as bound by
/// [`ParamSet::bind`]; rows of `input` are independent samples.
pub fn mlp_forward(g: &mut Graph, spec: &MlpSpec, params: &[NodeRef], input: NodeRef) -> Result<NodeRef> {
    check_params(spec, params)?;
    if input.cols() != spec.input_width() {
        return Err(Error::ParamShape {
            name: "input".into(),
            expected: (input.rows(), spec.input_width()),
            got: input.shape(),
        });
    }
    let h = g.matmul(input, params[0])?;
    let h = add_bias(g, h, params[1])?;
    forward_from_preactivation(g, spec, params, h)
}

/// Continues a forward pass from the first layer's pre-activation.
pub(crate) fn forward_from_preactivation(
    g: &mut Graph,
    spec: &MlpSpec,
    params: &[NodeRef],
    first_pre: NodeRef,
) -> Result<NodeRef> {
    let mut h = first_pre;
    for layer in 1..spec.num_layers() {
        h = spec.activation.apply(g, h)?;
        h = g.matmul(h, params[2 * layer])?;
        h = add_bias(g, h, params[2 * layer + 1])?;
    }
    Ok(h)
}

/// Fixed hyperparameters of Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.blocks().map(|b| vec![0.0; b.len()]).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update. An all-zero gradient carries no
    /// information: the step counter advances and nothing else changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Block], lr: f64) -> Result<()> {
        params.check_shapes(grads.iter().map(Block::shape))?;
        if self.first.len() != grads.len() {
            return Err(Error::Spec("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        if grads.iter().all(|g| g.values.iter().all(|&v| v == 0.0)) {
            return Ok(());
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((block, grad), m), v) in params
            .blocks_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in block
                .values
                .iter_mut()
                .zip(&grad.values)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Staircase decay: `base * factor^floor(step / period)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub period: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.001,
            factor: 0.9,
            period: 5000,
        }
    }
}

impl LrSchedule {
    pub fn new(base: f64, factor: f64, period: u64) -> Result<Self> {
        if !(base > 0.0) || !(factor > 0.0 && factor <= 1.0) || period == 0 {
            return Err(Error::Spec(format!(
                "invalid schedule base={base} factor={factor} period={period}"
            )));
        }
        Ok(Self {
            base,
            factor,
            period,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = (step / self.period).min(i32::MAX as u64) as i32;
        self.base * self.factor.powi(decays)
    }
}
