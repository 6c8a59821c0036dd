//! The context-conditioned prediction network and the two learned loss
//! networks.

use rand::Rng;
use viable_autodiff::{Graph, NodeRef};

use crate::error::{Error, Result};
use crate::nn::{add_bias, forward_from_preactivation, mlp_forward, mlp_init, Activation, MlpSpec, ParamSet, Role};

/// `f(x; phi, theta)`: an MLP over `[x || phi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionModel {
    pub spec: MlpSpec,
    pub x_dim: usize,
    pub phi_dim: usize,
}

impl PredictionModel {
    pub fn new(x_dim: usize, phi_dim: usize, hidden: &[usize], out_dim: usize, activation: Activation) -> Result<Self> {
        let mut sizes = vec![x_dim + phi_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(out_dim);
        Ok(Self {
            spec: MlpSpec::new(sizes, activation)?,
            x_dim,
            phi_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.spec.output_width()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        mlp_init(&self.spec, Role::TaskAgnostic, rng)
    }

    /// Predictions for every row of `x`. `phi` is a `1 x phi_dim` node and
    /// may be omitted only when `phi_dim == 0`.
    pub fn predict(&self, g: &mut Graph, theta: &[NodeRef], phi: Option<NodeRef>, x: NodeRef) -> Result<NodeRef> {
        if x.cols() != self.x_dim {
            return Err(Error::ParamShape {
                name: "x".into(),
                expected: (x.rows(), self.x_dim),
                got: x.shape(),
            });
        }
        let input = match (phi, self.phi_dim) {
            (None, 0) => x,
            (Some(phi), d) if phi.shape() == (1, d) => {
                if d == 0 {
                    x
                } else {
                    let ones = g.ones(x.rows(), 1);
                    let tiled = g.matmul(ones, phi)?;
                    g.concat_cols(&[x, tiled])?
                }
            }
            (phi, d) => {
                return Err(Error::ParamShape {
                    name: "phi".into(),
                    expected: (1, d),
                    got: phi.map_or((0, 0), |p| p.shape()),
                })
            }
        };
        mlp_forward(g, &self.spec, theta, input)
    }
}

/// Per-sample loss network over `[L(yhat, y) || yhat || y]`, averaged over
/// the samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleLossNet {
    pub spec: MlpSpec,
    pub pred_dim: usize,
    pub target_dim: usize,
}

impl SimpleLossNet {
    pub fn new(pred_dim: usize, target_dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let mut sizes = vec![1 + pred_dim + target_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            spec: MlpSpec::new(sizes, activation)?,
            pred_dim,
            target_dim,
        })
    }

    pub fn evaluate(
        &self,
        g: &mut Graph,
        psi: &[NodeRef],
        task_loss: NodeRef,
        pred: NodeRef,
        target: NodeRef,
    ) -> Result<NodeRef> {
        let m = task_loss.rows();
        if pred.rows() != m || target.rows() != m {
            return Err(Error::Rows(format!(
                "loss {m}, predictions {}, targets {}",
                pred.rows(),
                target.rows()
            )));
        }
        if m == 0 {
            return Err(Error::EmptyEpisode);
        }
        let input = g.concat_cols(&[task_loss, pred, target])?;
        let out = mlp_forward(g, &self.spec, psi, input)?;
        Ok(g.mean(out)?)
    }
}

/// Loss network over every ordered pair `(j, k)` of samples, self-pairs
/// included, each sample described by `[L || x || yhat || y]`. The output
/// is the mean over all `M^2` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationLossNet {
    pub spec: MlpSpec,
    pub x_dim: usize,
    pub pred_dim: usize,
    pub target_dim: usize,
}

impl RelationLossNet {
    pub fn new(
        x_dim: usize,
        pred_dim: usize,
        target_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let mut sizes = vec![2 * (1 + x_dim + pred_dim + target_dim)];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            spec: MlpSpec::new(sizes, activation)?,
            x_dim,
            pred_dim,
            target_dim,
        })
    }

    /// Width of one sample's feature row.
    pub fn feature_width(&self) -> usize {
        1 + self.x_dim + self.pred_dim + self.target_dim
    }

    pub fn evaluate(
        &self,
        g: &mut Graph,
        psi: &[NodeRef],
        task_loss: NodeRef,
        x: NodeRef,
        pred: NodeRef,
        target: NodeRef,
    ) -> Result<NodeRef> {
        let m = task_loss.rows();
        if x.rows() != m || pred.rows() != m || target.rows() != m {
            return Err(Error::Rows(format!(
                "loss {m}, inputs {}, predictions {}, targets {}",
                x.rows(),
                pred.rows(),
                target.rows()
            )));
        }
        if m == 0 {
            return Err(Error::EmptyEpisode);
        }
        if psi.len() != 2 * self.spec.num_layers() {
            return Err(Error::Spec(format!(
                "expected {} loss-network parameters, got {}",
                2 * self.spec.num_layers(),
                psi.len()
            )));
        }
        let w = self.feature_width();
        let features = g.concat_cols(&[task_loss, x, pred, target])?;
        if features.cols() != w || psi[0].shape() != (2 * w, self.spec.layer_sizes[1]) {
            return Err(Error::ParamShape {
                name: "layer0.weight".into(),
                expected: (2 * w, self.spec.layer_sizes[1]),
                got: psi[0].shape(),
            });
        }
        // The first layer acting on [a_j || a_k] splits into a_j W_top + a_k W_bottom,
        // so each half is computed once per sample and gathered per pair.
        let hidden = self.spec.layer_sizes[1];
        let w_top = g.slice(psi[0], 0, 0, w, hidden)?;
        let w_bottom = g.slice(psi[0], w, 0, w, hidden)?;
        let left = g.matmul(features, w_top)?;
        let right = g.matmul(features, w_bottom)?;
        let (js, ks): (Vec<usize>, Vec<usize>) = (0..m).flat_map(|j| (0..m).map(move |k| (j, k))).unzip();
        let left = g.gather_rows(left, &js)?;
        let right = g.gather_rows(right, &ks)?;
        let pre = g.add(left, right)?;
        let pre = add_bias(g, pre, psi[1])?;
        let out = forward_from_preactivation(g, &self.spec, psi, pre)?;
        Ok(g.mean(out)?)
    }
}

/// A learned inner-loop loss.
#[derive(Clone, Debug, PartialEq)]
pub enum LossNet {
    Simple(SimpleLossNet),
    Relation(RelationLossNet),
}

impl LossNet {
    pub fn spec(&self) -> &MlpSpec {
        match self {
            LossNet::Simple(n) => &n.spec,
            LossNet::Relation(n) => &n.spec,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        mlp_init(self.spec(), Role::LossNet, rng)
    }

    pub fn evaluate(
        &self,
        g: &mut Graph,
        psi: &[NodeRef],
        task_loss: NodeRef,
        x: NodeRef,
        pred: NodeRef,
        target: NodeRef,
    ) -> Result<NodeRef> {
        match self {
            LossNet::Simple(n) => n.evaluate(g, psi, task_loss, pred, target),
            LossNet::Relation(n) => n.evaluate(g, psi, task_loss, x, pred, target),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(p: &mut ParamSet) {
        for b in p.blocks_mut() {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_context_width_is_a_plain_mlp() {
        let model = PredictionModel::new(1, 0, &[8, 8], 1, Activation::Relu).unwrap();
        let theta = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let nodes = theta.bind(&mut g);
        let x = g.variable(vec![0.5, -1.0, 2.0], 3, 1).unwrap();
        let a = model.predict(&mut g, &nodes, None, x).unwrap();
        let b = mlp_forward(&mut g, &model.spec, &nodes, x).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn zero_weights_predict_zero() {
        let model = PredictionModel::new(1, 3, &[8], 1, Activation::Relu).unwrap();
        let mut theta = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        zero_params(&mut theta);
        let mut g = Graph::new();
        let nodes = theta.bind(&mut g);
        let x = g.variable(vec![0.5, -1.0], 2, 1).unwrap();
        let phi = g.variable(vec![1.0, -2.0, 3.0], 1, 3).unwrap();
        let y = model.predict(&mut g, &nodes, Some(phi), x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn context_changes_predictions() {
        let model = PredictionModel::new(1, 2, &[16], 1, Activation::Tanh).unwrap();
        let theta = model.init(&mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let nodes = theta.bind(&mut g);
        let x = g.variable(vec![0.5], 1, 1).unwrap();
        let p1 = g.variable(vec![0.0, 0.0], 1, 2).unwrap();
        let p2 = g.variable(vec![0.3, 0.0], 1, 2).unwrap();
        let p3 = g.variable(vec![0.0, 0.0], 1, 2).unwrap();
        let y1 = model.predict(&mut g, &nodes, Some(p1), x).unwrap();
        let y2 = model.predict(&mut g, &nodes, Some(p2), x).unwrap();
        let y3 = model.predict(&mut g, &nodes, Some(p3), x).unwrap();
        assert_ne!(g.value(y1), g.value(y2));
        assert_eq!(g.value(y1), g.value(y3));
    }

    #[test]
    fn predict_checks_dimensions() {
        let model = PredictionModel::new(1, 2, &[4], 1, Activation::Relu).unwrap();
        let theta = model.init(&mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let nodes = theta.bind(&mut g);
        let x = g.zeros(3, 1);
        let bad_phi = g.zeros(1, 3);
        assert!(model.predict(&mut g, &nodes, Some(bad_phi), x).is_err());
        assert!(model.predict(&mut g, &nodes, None, x).is_err());
        let bad_x = g.zeros(3, 2);
        let phi = g.zeros(1, 2);
        assert!(model.predict(&mut g, &nodes, Some(phi), bad_x).is_err());
    }

    #[test]
    fn loss_nets_with_zero_weights_output_zero() {
        let simple = SimpleLossNet::new(1, 1, &[32, 32, 32], Activation::Relu).unwrap();
        let relation = RelationLossNet::new(1, 1, 1, &[32, 32, 32], Activation::Relu).unwrap();
        assert_eq!(simple.spec.input_width(), 3);
        assert_eq!(relation.spec.input_width(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = mlp_init(&simple.spec, Role::LossNet, &mut rng);
        let mut pr = mlp_init(&relation.spec, Role::LossNet, &mut rng);
        zero_params(&mut ps);
        zero_params(&mut pr);
        let mut g = Graph::new();
        let l = g.variable(vec![1.0, 2.0], 2, 1).unwrap();
        let x = g.variable(vec![0.1, 0.2], 2, 1).unwrap();
        let yh = g.variable(vec![0.5, 0.7], 2, 1).unwrap();
        let y = g.variable(vec![1.5, 2.7], 2, 1).unwrap();
        let psi_s = ps.bind(&mut g);
        let psi_r = pr.bind(&mut g);
        let s = simple.evaluate(&mut g, &psi_s, l, yh, y).unwrap();
        let r = relation.evaluate(&mut g, &psi_r, l, x, yh, y).unwrap();
        assert_eq!(g.scalar_value(s), 0.0);
        assert_eq!(g.scalar_value(r), 0.0);
    }

    #[test]
    fn loss_nets_reject_bad_rows() {
        let simple = SimpleLossNet::new(1, 1, &[4], Activation::Relu).unwrap();
        let relation = RelationLossNet::new(1, 1, 1, &[4], Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = mlp_init(&simple.spec, Role::LossNet, &mut rng);
        let pr = mlp_init(&relation.spec, Role::LossNet, &mut rng);
        let mut g = Graph::new();
        let psi_s = ps.bind(&mut g);
        let psi_r = pr.bind(&mut g);
        let a = g.zeros(2, 1);
        let b = g.zeros(3, 1);
        assert!(matches!(simple.evaluate(&mut g, &psi_s, a, a, b), Err(Error::Rows(_))));
        let e = g.zeros(0, 1);
        assert!(matches!(
            relation.evaluate(&mut g, &psi_r, e, e, e, e),
            Err(Error::EmptyEpisode)
        ));
    }
}
