//! Central finite-difference oracles for checking reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, NodeRef, Result};

/// Step of the central differences.
pub const H: f64 = 1e-5;

/// A scalar-valued function of graph leaves.
pub type Build<'a> = dyn Fn(&mut Graph, &[NodeRef]) -> Result<NodeRef> + 'a;

/// A dense input block.
#[derive(Clone, Debug, PartialEq)]
pub struct Input {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Input {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Self {
        Self { values, rows, cols }
    }

    /// Entries uniform in `lo..hi`.
    pub fn random(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Self {
        Self::new((0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(), rows, cols)
    }
}

/// A named primitive check.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Input>,
    pub build: Box<Build<'static>>,
}

/// `|a - b| / max(|a|, |b|)`, with the denominator clamped at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn leaves(g: &mut Graph, inputs: &[Input]) -> Result<Vec<NodeRef>> {
    inputs.iter().map(|i| g.variable(i.values.clone(), i.rows, i.cols)).collect()
}

fn eval(inputs: &[Input], f: &Build<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let leaves = leaves(&mut g, inputs)?;
    let out = f(&mut g, &leaves)?;
    Ok(g.scalar_value(out))
}

fn central(inputs: &[Input], k: usize, j: usize, f: &Build<'_>) -> Result<f64> {
    let mut moved = inputs.to_vec();
    moved[k].values[j] = inputs[k].values[j] + H;
    let up = eval(&moved, f)?;
    moved[k].values[j] = inputs[k].values[j] - H;
    let down = eval(&moved, f)?;
    Ok((up - down) / (2.0 * H))
}

/// Max relative error between reverse mode and central differences over
/// every input entry.
pub fn first_order_error(inputs: &[Input], f: &Build<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let leaves = leaves(&mut g, inputs)?;
    let out = f(&mut g, &leaves)?;
    let grads = g.grad(out, &leaves, false)?;
    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = g.value(grads.of(*leaf)).to_vec();
        for (j, a) in analytic.into_iter().enumerate() {
            worst = worst.max(relative_error(a, central(inputs, k, j, f)?));
        }
    }
    Ok(worst)
}

/// Second-order check: differentiates `sum(v * grad f)` for random probes
/// `v` through the recorded backward pass and compares with central
/// differences of that quantity.
pub fn second_order_error(inputs: &[Input], f: &Build<'_>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<Vec<f64>> = inputs
        .iter()
        .map(|i| (0..i.values.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let probed = |g: &mut Graph, leaves: &[NodeRef], create: bool| -> Result<NodeRef> {
        let out = f(g, leaves)?;
        let grads = g.grad(out, leaves, create)?;
        let mut total = g.scalar(0.0);
        for (leaf, probe) in leaves.iter().zip(&probes) {
            let v = g.constant(probe.clone(), leaf.rows(), leaf.cols())?;
            let prod = g.mul(grads.of(*leaf), v)?;
            let s = g.sum(prod)?;
            total = g.add(total, s)?;
        }
        Ok(total)
    };
    let forward = |g: &mut Graph, leaves: &[NodeRef]| probed(g, leaves, false);

    let mut g = Graph::new();
    let nodes = leaves(&mut g, inputs)?;
    let out = probed(&mut g, &nodes, true)?;
    let grads = g.grad(out, &nodes, false)?;
    let mut worst = 0.0f64;
    for (k, leaf) in nodes.iter().enumerate() {
        let analytic = g.value(grads.of(*leaf)).to_vec();
        for (j, a) in analytic.into_iter().enumerate() {
            worst = worst.max(relative_error(a, central(inputs, k, j, &forward)?));
        }
    }
    Ok(worst)
}

/// Reduces any output to a scalar with fixed random weights so that every
/// entry of the Jacobian is exercised.
pub fn weighted(f: impl Fn(&mut Graph, &[NodeRef]) -> Result<NodeRef> + 'static) -> Box<Build<'static>> {
    Box::new(move |g: &mut Graph, leaves: &[NodeRef]| {
        let y = f(g, leaves)?;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w: Vec<f64> = (0..y.len()).map(|_| rng.random_range(0.5..1.5)).collect();
        let wn = g.constant(w, y.rows(), y.cols())?;
        // A smooth nonlinearity on top keeps second derivatives non-trivial.
        let p = g.mul(y, wn)?;
        let t = g.tanh(p)?;
        g.sum(t)
    })
}

/// One case per primitive, including the internal ops that backward
/// passes emit.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let case = |name, inputs, build| Case { name, inputs, build };
    vec![
        case(
            "add",
            vec![Input::random(rng, 2, 3, -1.0, 1.0), Input::random(rng, 2, 3, -1.0, 1.0)],
            weighted(|g, x| g.add(x[0], x[1])),
        ),
        case(
            "add_scalar",
            vec![Input::random(rng, 1, 1, -1.0, 1.0), Input::random(rng, 2, 3, -1.0, 1.0)],
            weighted(|g, x| g.add(x[0], x[1])),
        ),
        case(
            "sub",
            vec![Input::random(rng, 3, 2, -1.0, 1.0), Input::random(rng, 1, 1, -1.0, 1.0)],
            weighted(|g, x| g.sub(x[0], x[1])),
        ),
        case(
            "mul",
            vec![Input::random(rng, 2, 3, -1.0, 1.0), Input::random(rng, 2, 3, -1.0, 1.0)],
            weighted(|g, x| g.mul(x[0], x[1])),
        ),
        case(
            "mul_scalar",
            vec![Input::random(rng, 2, 2, -1.0, 1.0), Input::random(rng, 1, 1, -1.0, 1.0)],
            weighted(|g, x| g.mul(x[0], x[1])),
        ),
        case(
            "scalar_mul",
            vec![Input::random(rng, 2, 3, -1.0, 1.0)],
            weighted(|g, x| g.scale(x[0], -1.7)),
        ),
        case(
            "matmul",
            vec![Input::random(rng, 3, 4, -1.0, 1.0), Input::random(rng, 4, 2, -1.0, 1.0)],
            weighted(|g, x| g.matmul(x[0], x[1])),
        ),
        case(
            "transpose",
            vec![Input::random(rng, 3, 2, -1.0, 1.0)],
            weighted(|g, x| g.transpose(x[0])),
        ),
        case(
            "concat_rows",
            vec![Input::random(rng, 2, 3, -1.0, 1.0), Input::random(rng, 1, 3, -1.0, 1.0)],
            weighted(|g, x| g.concat_rows(&[x[0], x[1]])),
        ),
        case(
            "concat_cols",
            vec![Input::random(rng, 2, 3, -1.0, 1.0), Input::random(rng, 2, 1, -1.0, 1.0)],
            weighted(|g, x| g.concat_cols(&[x[0], x[1]])),
        ),
        case(
            "slice",
            vec![Input::random(rng, 4, 3, -1.0, 1.0)],
            weighted(|g, x| g.slice(x[0], 1, 1, 2, 2)),
        ),
        case(
            "embed",
            vec![Input::random(rng, 2, 2, -1.0, 1.0)],
            weighted(|g, x| g.embed(x[0], 1, 0, 3, 3)),
        ),
        case(
            "gather_rows",
            vec![Input::random(rng, 3, 2, -1.0, 1.0)],
            weighted(|g, x| g.gather_rows(x[0], &[2, 0, 2, 1, 2])),
        ),
        case(
            "scatter_rows",
            vec![Input::random(rng, 4, 2, -1.0, 1.0)],
            weighted(|g, x| g.scatter_rows(x[0], &[1, 0, 1, 2], 3)),
        ),
        case(
            "broadcast",
            vec![Input::random(rng, 1, 1, -1.0, 1.0)],
            weighted(|g, x| g.broadcast(x[0], 2, 3)),
        ),
        case(
            "row_sum",
            vec![Input::random(rng, 3, 4, -1.0, 1.0)],
            weighted(|g, x| g.row_sum(x[0])),
        ),
        case(
            "col_broadcast",
            vec![Input::random(rng, 3, 1, -1.0, 1.0)],
            weighted(|g, x| g.col_broadcast(x[0], 4)),
        ),
        case(
            "relu",
            // Kept away from the kink so differences stay on one side.
            vec![Input::new(vec![0.7, -0.4, 1.3, -1.1, 0.2, -0.9], 2, 3)],
            weighted(|g, x| g.relu(x[0])),
        ),
        case(
            "tanh",
            vec![Input::random(rng, 2, 3, -2.0, 2.0)],
            weighted(|g, x| g.tanh(x[0])),
        ),
        case(
            "square",
            vec![Input::random(rng, 2, 3, -1.0, 1.0)],
            weighted(|g, x| g.square(x[0])),
        ),
        case(
            "exp",
            vec![Input::random(rng, 2, 3, -1.0, 1.0)],
            weighted(|g, x| g.exp(x[0])),
        ),
        case(
            "log",
            vec![Input::random(rng, 2, 3, 0.5, 2.0)],
            weighted(|g, x| g.log(x[0])),
        ),
        case(
            "recip",
            vec![Input::random(rng, 2, 3, 0.5, 2.0)],
            weighted(|g, x| g.recip(x[0])),
        ),
        case(
            "sum",
            vec![Input::random(rng, 3, 3, -1.0, 1.0)],
            weighted(|g, x| g.sum(x[0])),
        ),
        case(
            "mean",
            vec![Input::random(rng, 3, 3, -1.0, 1.0)],
            weighted(|g, x| g.mean(x[0])),
        ),
        case(
            "softmax",
            vec![Input::random(rng, 3, 4, -2.0, 2.0)],
            weighted(|g, x| g.softmax(x[0])),
        ),
        case(
            "log_softmax",
            vec![Input::random(rng, 3, 4, -2.0, 2.0)],
            weighted(|g, x| g.log_softmax(x[0])),
        ),
        case(
            "softmax_cross_entropy",
            vec![Input::random(rng, 3, 4, -2.0, 2.0), Input::random(rng, 3, 4, 0.1, 1.0)],
            weighted(|g, x| g.softmax_cross_entropy(x[0], x[1])),
        ),
    ]
}

