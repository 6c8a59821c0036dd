//! Finite-difference suites: every autodiff primitive to first and second
//! order, and the outer gradient of every method through its inner loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viable_autodiff::check::{first_order_error, primitive_cases, second_order_error, H};

use crate::error::Result;
use crate::nn::Activation;
use crate::tasks::{sample_episode, sample_sine_task, AmplitudeRange, Episode};
use crate::trainer::{stream_rng, Learner, Method, MetaParams, MethodSpec, Stream};

pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-5;
pub const META_TOL: f64 = 1e-4;
/// Gradient magnitude below which the meta check compares absolute error.
pub const META_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// A small tanh network for `method`: at most 20 outer parameters, one
/// inner step.
pub fn toy_spec(method: Method) -> MethodSpec {
    MethodSpec {
        hidden: vec![2],
        loss_hidden: match method {
            Method::SimViable => vec![2],
            Method::RelViable => vec![1],
            Method::Cavia | Method::Maml => Vec::new(),
        },
        activation: Activation::Tanh,
        inner_lr: 0.3,
        ..MethodSpec::sine(method, 1)
    }
}

pub fn toy_episode(seed: u64, k_train: usize, k_test: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = sample_sine_task(&mut rng, AmplitudeRange::Standard);
    sample_episode(&task, k_train, k_test, &mut rng)
}

/// Loss after adaptation as a plain function of the outer parameters.
fn outer_loss(learner: &Learner, params: &MetaParams, ep: &Episode) -> Result<f64> {
    let adapted = learner.adapt_at_test(params, &ep.train)?;
    learner.adapted_loss(&adapted, &ep.test)
}

/// Worst relative error of the outer gradient with respect to the
/// prediction weights and, if present, the loss-network weights.
pub fn meta_gradient_error(learner: &Learner, params: &MetaParams, ep: &Episode) -> Result<(f64, Option<f64>)> {
    let grad = learner.meta_gradient(params, ep)?;
    let shifted = |psi: bool, block: usize, index: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        let set = if psi { p.psi.as_mut().expect("loss-network parameters") } else { &mut p.theta };
        set.blocks_mut().nth(block).expect("block index").values[index] += delta;
        outer_loss(learner, &p, ep)
    };
    let mut worst = [0.0f64; 2];
    for (psi, blocks) in [(false, Some(&grad.theta)), (true, grad.psi.as_ref())] {
        for (bi, b) in blocks.into_iter().flatten().enumerate() {
            for (vi, &a) in b.values.iter().enumerate() {
                let fd = (shifted(psi, bi, vi, H)? - shifted(psi, bi, vi, -H)?) / (2.0 * H);
                worst[psi as usize] = worst[psi as usize].max((a - fd).abs() / a.abs().max(fd.abs()).max(META_FLOOR));
            }
        }
    }
    Ok((worst[0], grad.psi.map(|_| worst[1])))
}

pub fn primitive_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for case in primitive_cases(7) {
        out.push(Check {
            suite: "first_order",
            name: case.name.into(),
            error: first_order_error(&case.inputs, case.build.as_ref())?,
            tolerance: FIRST_ORDER_TOL,
        });
    }
    for (i, case) in primitive_cases(11).into_iter().enumerate() {
        out.push(Check {
            suite: "second_order",
            name: case.name.into(),
            error: second_order_error(&case.inputs, case.build.as_ref(), i as u64)?,
            tolerance: SECOND_ORDER_TOL,
        });
    }
    Ok(out)
}

/// Outer-gradient checks for every method on a few toy episodes.
pub fn meta_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for method in Method::ALL {
        let learner = Learner::new(toy_spec(method))?;
        let (mut theta, mut psi) = (0.0f64, None::<f64>);
        for seed in 0..3 {
            let params = learner.init_params(&mut stream_rng(seed, Stream::Init, 0));
            let ep = toy_episode(100 + seed, 3 + seed as usize, 6);
            let (t, p) = meta_gradient_error(&learner, &params, &ep)?;
            theta = theta.max(t);
            psi = p.map(|p| psi.unwrap_or(0.0).max(p));
        }
        out.push(Check {
            suite: "meta_gradient",
            name: format!("{method} theta"),
            error: theta,
            tolerance: META_TOL,
        });
        if let Some(psi) = psi {
            out.push(Check {
                suite: "meta_gradient",
                name: format!("{method} psi"),
                error: psi,
                tolerance: META_TOL,
            });
        }
    }
    Ok(out)
}

pub fn run_all() -> Result<Vec<Check>> {
    let mut out = primitive_checks()?;
    out.extend(meta_checks()?);
    Ok(out)
}
