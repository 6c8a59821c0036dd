use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeRef, Op};

/// Gradients of one scalar output, keyed by the nodes they were requested for.
///
/// Every entry lives in the same graph as the output, so when it was built
/// with `create_graph` it can be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: HashMap<usize, NodeRef>,
    order: Vec<NodeRef>,
}

impl GradientMap {
    /// Gradient node for `wrt`; `None` if it was not requested.
    pub fn get(&self, wrt: NodeRef) -> Option<NodeRef> {
        self.entries.get(&wrt.index()).copied()
    }

    /// Like [`GradientMap::get`] but panics on a node that was not requested.
    pub fn of(&self, wrt: NodeRef) -> NodeRef {
        self.get(wrt)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", wrt.index()))
    }

    /// Gradient nodes in request order.
    pub fn in_order(&self) -> Vec<NodeRef> {
        self.order.iter().map(|w| self.entries[&w.index()]).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Graph {
    /// Reverse-mode gradient of the 1x1 `output` with respect to each node in
    /// `wrt`.
    ///
    /// With `create_graph` set, the backward pass is recorded as ordinary
    /// graph operations and the returned gradients can be differentiated
    /// again. Otherwise the entries are constants. Contributions reaching a
    /// node along several paths are summed in decreasing consumer index.
    pub fn grad(&mut self, output: NodeRef, wrt: &[NodeRef], create_graph: bool) -> Result<GradientMap> {
        self.check(output)?;
        if !output.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(output.shape()));
        }
        for w in wrt {
            self.check(*w)?;
        }

        let n = output.index() + 1;
        // Nodes downstream of some requested input; everything else carries
        // no gradient toward `wrt`.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.index() < n {
                relevant[w.index()] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].parents.iter().any(|&p| relevant[p]) {
                relevant[i] = true;
            }
        }

        let prev = self.detached;
        self.detached = prev || !create_graph;
        let result = self.backward(output, &relevant);
        self.detached = prev;
        let adjoint = result?;

        let mut map = GradientMap::default();
        for w in wrt {
            if map.entries.contains_key(&w.index()) {
                continue;
            }
            let g = match adjoint.get(w.index()).copied().flatten() {
                Some(g) => g,
                None => self.detached(|g| g.zeros(w.rows(), w.cols())),
            };
            map.entries.insert(w.index(), g);
            map.order.push(*w);
        }
        Ok(map)
    }

    fn backward(&mut self, output: NodeRef, relevant: &[bool]) -> Result<Vec<Option<NodeRef>>> {
        let n = relevant.len();
        let mut adjoint: Vec<Option<NodeRef>> = vec![None; n];
        if !relevant[output.index()] {
            return Ok(adjoint);
        }
        adjoint[output.index()] = Some(self.ones(1, 1));
        for i in (0..n).rev() {
            let Some(upstream) = adjoint[i] else { continue };
            if !relevant[i] || self.nodes[i].parents.is_empty() {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            for (slot, &p) in parents.iter().enumerate() {
                if !relevant[p] {
                    continue;
                }
                let Some(contrib) = self.vjp(i, slot, upstream)? else {
                    continue;
                };
                adjoint[p] = Some(match adjoint[p] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }
        Ok(adjoint)
    }

    /// Vector-Jacobian product of node `i` toward its parent in `slot`,
    /// given upstream gradient `g`. `None` means the parent receives no
    /// gradient through this edge.
    fn vjp(&mut self, i: usize, slot: usize, g: NodeRef) -> Result<Option<NodeRef>> {
        let node_ref = self.node_ref(i);
        let op = self.nodes[i].op.clone();
        let parents: Vec<NodeRef> = self.nodes[i]
            .parents
            .iter()
            .map(|&p| self.node_ref(p))
            .collect();
        let parent = parents[slot];

        // Reduces a gradient shaped like the output onto a broadcast 1x1 parent.
        let fit = |graph: &mut Graph, grad: NodeRef| -> Result<NodeRef> {
            if parent.shape() == grad.shape() {
                Ok(grad)
            } else {
                graph.sum(grad)
            }
        };

        let out = match op {
            Op::Leaf => return Ok(None),
            Op::Add => fit(self, g)?,
            Op::Sub => {
                let d = if slot == 0 { g } else { self.neg(g)? };
                fit(self, d)?
            }
            Op::Mul => {
                let other = parents[1 - slot];
                let d = self.mul(g, other)?;
                fit(self, d)?
            }
            Op::Scale(c) => self.scale(g, c)?,
            Op::MatMul => {
                let (a, b) = (parents[0], parents[1]);
                if slot == 0 {
                    let bt = self.transpose(b)?;
                    self.matmul(g, bt)?
                } else {
                    let at = self.transpose(a)?;
                    self.matmul(at, g)?
                }
            }
            Op::Transpose => self.transpose(g)?,
            Op::ConcatRows => {
                let offset: usize = parents[..slot].iter().map(|p| p.rows()).sum();
                self.slice(g, offset, 0, parent.rows(), parent.cols())?
            }
            Op::ConcatCols => {
                let offset: usize = parents[..slot].iter().map(|p| p.cols()).sum();
                self.slice(g, 0, offset, parent.rows(), parent.cols())?
            }
            Op::Slice { row, col } => self.embed(g, row, col, parent.rows(), parent.cols())?,
            Op::Embed { row, col } => self.slice(g, row, col, parent.rows(), parent.cols())?,
            Op::GatherRows(idx) => self.scatter_rows(g, &idx, parent.rows())?,
            Op::ScatterRows(idx) => self.gather_rows(g, &idx)?,
            Op::Broadcast => self.sum(g)?,
            Op::RowSum => self.col_broadcast(g, parent.cols())?,
            Op::ColBroadcast => self.row_sum(g)?,
            Op::Relu => self.step_mul(parent, g)?,
            Op::StepMul => {
                if slot == 0 {
                    return Ok(None);
                }
                self.step_mul(parents[0], g)?
            }
            Op::Tanh => {
                let t2 = self.square(node_ref)?;
                let one = self.scalar(1.0);
                let d = self.sub(one, t2)?;
                self.mul(g, d)?
            }
            Op::Square => {
                let d = self.mul(g, parent)?;
                self.scale(d, 2.0)?
            }
            Op::Exp => self.mul(g, node_ref)?,
            Op::Log => {
                let r = self.recip(parent)?;
                self.mul(g, r)?
            }
            Op::Recip => {
                let r2 = self.square(node_ref)?;
                let d = self.mul(g, r2)?;
                self.neg(d)?
            }
            Op::Sum => self.broadcast(g, parent.rows(), parent.cols())?,
            Op::Mean => {
                let b = self.broadcast(g, parent.rows(), parent.cols())?;
                self.scale(b, 1.0 / parent.len() as f64)?
            }
            Op::Softmax => {
                // s * (g - rowsum(g * s))
                let gs = self.mul(g, node_ref)?;
                let rs = self.row_sum(gs)?;
                let rb = self.col_broadcast(rs, parent.cols())?;
                let centered = self.sub(g, rb)?;
                self.mul(node_ref, centered)?
            }
            Op::LogSoftmax => {
                // g - softmax * rowsum(g)
                let s = self.softmax(parent)?;
                let rs = self.row_sum(g)?;
                let rb = self.col_broadcast(rs, parent.cols())?;
                let t = self.mul(s, rb)?;
                self.sub(g, t)?
            }
            Op::SoftmaxCrossEntropy => {
                let (logits, labels) = (parents[0], parents[1]);
                let gb = self.col_broadcast(g, logits.cols())?;
                if slot == 0 {
                    // (softmax(z) * rowsum(y) - y) * g
                    let s = self.softmax(logits)?;
                    let ys = self.row_sum(labels)?;
                    let yb = self.col_broadcast(ys, logits.cols())?;
                    let sy = self.mul(s, yb)?;
                    let d = self.sub(sy, labels)?;
                    self.mul(d, gb)?
                } else {
                    // -log_softmax(z) * g
                    let ls = self.log_softmax(logits)?;
                    let d = self.mul(ls, gb)?;
                    self.neg(d)?
                }
            }
        };
        debug_assert_eq!(out.shape(), parent.shape());
        Ok(Some(out))
    }
}
