//! Finite-difference oracles for every primitive, first and second order.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viable_autodiff::check::{first_order_error, primitive_cases, relative_error as rel_err, second_order_error, Build, Input, H};
use viable_autodiff::{Graph, NodeRef, Result};

#[test]
fn every_primitive_matches_central_differences() {
    for case in primitive_cases(7) {
        let (name, inputs, f) = (case.name, case.inputs, case.build);
        let err = first_order_error(&inputs, f.as_ref()).unwrap();
        assert!(err < 1e-6, "{name}: first-order relative error {err:e}");
    }
}

#[test]
fn every_primitive_has_a_differentiable_backward_pass() {
    for (i, case) in primitive_cases(11).into_iter().enumerate() {
        let (name, inputs, f) = (case.name, case.inputs, case.build);
        let err = second_order_error(&inputs, f.as_ref(), i as u64).unwrap();
        assert!(err < 1e-5, "{name}: second-order relative error {err:e}");
    }
}

#[test]
fn two_layer_tanh_mlp_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        Input::random(&mut rng, 5, 3, -1.0, 1.0), // batch
        Input::random(&mut rng, 3, 4, -1.0, 1.0), // w1
        Input::random(&mut rng, 1, 4, -0.5, 0.5), // b1
        Input::random(&mut rng, 4, 1, -1.0, 1.0), // w2
        Input::random(&mut rng, 5, 1, -1.0, 1.0), // targets
    ];
    let f: Box<Build> = Box::new(|g, x| {
        let ones = g.ones(5, 1);
        let h = g.matmul(x[0], x[1])?;
        let bias = g.matmul(ones, x[2])?;
        let h = g.add(h, bias)?;
        let h = g.tanh(h)?;
        let out = g.matmul(h, x[3])?;
        let diff = g.sub(out, x[4])?;
        let sq = g.square(diff)?;
        g.mean(sq)
    });
    let err = first_order_error(&inputs, f.as_ref()).unwrap();
    assert!(err < 1e-5, "relative error {err:e}");
}

/// Closed-form test loss after one inner step of a five-parameter toy:
/// prediction `a * tanh(b x + phi)`, inner loss
/// `p0 (yh - y)^2 + p1 yh y + p2 tanh(yh)`.
fn toy_post_update_loss(theta: [f64; 2], psi: [f64; 3], train: &[(f64, f64)], test: &[(f64, f64)], alpha: f64) -> f64 {
    let [a, b] = theta;
    let [p0, p1, p2] = psi;
    let dphi: f64 = train
        .iter()
        .map(|&(x, y)| {
            let t = (b * x).tanh();
            let yh = a * t;
            let dl = 2.0 * p0 * (yh - y) + p1 * y + p2 * (1.0 - yh.tanh().powi(2));
            dl * a * (1.0 - t * t)
        })
        .sum::<f64>()
        / train.len() as f64;
    let phi = -alpha * dphi;
    test.iter()
        .map(|&(x, y)| (a * (b * x + phi).tanh() - y).powi(2))
        .sum::<f64>()
        / test.len() as f64
}

#[test]
fn nested_gradient_through_an_inner_step() {
    let train = [(0.3, 0.5), (-1.2, -0.4), (0.8, 0.9)];
    let test = [(0.1, 0.2), (-0.7, -0.3), (1.5, 0.7), (-0.2, 0.0)];
    let theta = [0.9, 1.1];
    let psi = [0.8, -0.3, 0.4];
    let alpha = 0.7;

    let mut g = Graph::new();
    let a = g.variable(vec![theta[0]], 1, 1).unwrap();
    let b = g.variable(vec![theta[1]], 1, 1).unwrap();
    let p: Vec<NodeRef> = psi.iter().map(|&v| g.variable(vec![v], 1, 1).unwrap()).collect();

    let predict = |g: &mut Graph, xs: &[f64], phi: NodeRef| -> NodeRef {
        let x = g.constant(xs.to_vec(), xs.len(), 1).unwrap();
        let bx = g.mul(b, x).unwrap();
        let z = g.add(bx, phi).unwrap();
        let t = g.tanh(z).unwrap();
        g.mul(a, t).unwrap()
    };
    let xs: Vec<f64> = train.iter().map(|t| t.0).collect();
    let ys: Vec<f64> = train.iter().map(|t| t.1).collect();
    let phi0 = g.variable(vec![0.0], 1, 1).unwrap();
    let yh = predict(&mut g, &xs, phi0);
    let y = g.constant(ys, xs.len(), 1).unwrap();
    let diff = g.sub(yh, y).unwrap();
    let sq = g.square(diff).unwrap();
    let l0 = g.mul(p[0], sq).unwrap();
    let yhy = g.mul(yh, y).unwrap();
    let l1 = g.mul(p[1], yhy).unwrap();
    let th = g.tanh(yh).unwrap();
    let l2 = g.mul(p[2], th).unwrap();
    let l = g.add(l0, l1).unwrap();
    let l = g.add(l, l2).unwrap();
    let inner = g.mean(l).unwrap();
    let dphi = g.grad(inner, &[phi0], true).unwrap().of(phi0);
    let step = g.scale(dphi, -alpha).unwrap();
    let phi1 = g.add(phi0, step).unwrap();

    let txs: Vec<f64> = test.iter().map(|t| t.0).collect();
    let tys: Vec<f64> = test.iter().map(|t| t.1).collect();
    let yh_test = predict(&mut g, &txs, phi1);
    let yt = g.constant(tys, txs.len(), 1).unwrap();
    let d = g.sub(yh_test, yt).unwrap();
    let d = g.square(d).unwrap();
    let outer = g.mean(d).unwrap();
    let expected = toy_post_update_loss(theta, psi, &train, &test, alpha);
    assert!((g.scalar_value(outer) - expected).abs() < 1e-12);

    let wrt = [a, b, p[0], p[1], p[2]];
    let grads = g.grad(outer, &wrt, false).unwrap();
    let mut params = [theta[0], theta[1], psi[0], psi[1], psi[2]];
    for (k, w) in wrt.iter().enumerate() {
        let f = |params: &[f64; 5]| {
            toy_post_update_loss(
                [params[0], params[1]],
                [params[2], params[3], params[4]],
                &train,
                &test,
                alpha,
            )
        };
        let orig = params[k];
        params[k] = orig + H;
        let up = f(&params);
        params[k] = orig - H;
        let down = f(&params);
        params[k] = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = g.scalar_value(grads.of(*w));
        assert!(
            rel_err(analytic, numeric) < 1e-4,
            "param {k}: analytic {analytic} numeric {numeric}"
        );
    }
}

fn composite(g: &mut Graph, x: NodeRef, which: bool) -> Result<NodeRef> {
    if which {
        let t = g.tanh(x)?;
        let s = g.square(t)?;
        g.sum(s)
    } else {
        let e = g.exp(x)?;
        let m = g.mul(e, x)?;
        g.mean(m)
    }
}

proptest! {
    #[test]
    fn gradient_is_linear(values in prop::collection::vec(-2.0f64..2.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut g = Graph::new();
        let x = g.variable(values, 2, 3).unwrap();
        let f = composite(&mut g, x, true).unwrap();
        let h = composite(&mut g, x, false).unwrap();
        let af = g.scale(f, a).unwrap();
        let bh = g.scale(h, b).unwrap();
        let combo = g.add(af, bh).unwrap();
        let dc = g.grad(combo, &[x], false).unwrap().of(x);
        let df = g.grad(f, &[x], false).unwrap().of(x);
        let dh = g.grad(h, &[x], false).unwrap().of(x);
        for i in 0..6 {
            let expected = a * g.value(df)[i] + b * g.value(dh)[i];
            prop_assert!((g.value(dc)[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn identical_graphs_give_bitwise_identical_gradients(values in prop::collection::vec(-2.0f64..2.0, 6)) {
        let run = |values: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.variable(values, 3, 2).unwrap();
            let w = g.constant(vec![0.3, -0.2, 0.5, 0.9], 2, 2).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.tanh(h).unwrap();
            let hh = g.mul(h, x).unwrap();
            let s = g.sum(hh).unwrap();
            let d = g.grad(s, &[x], true).unwrap().of(x);
            let d2 = g.sum(d).unwrap();
            let dd = g.grad(d2, &[x], false).unwrap().of(x);
            g.value(dd).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(values.clone()), run(values));
    }
}
