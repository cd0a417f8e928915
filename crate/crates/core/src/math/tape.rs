//! Explicit tape of primitive operations for reverse-mode gradients.
//!
//! Every node holds its forward value. `backward` walks the nodes in exact
//! reverse of recording order, so one correctness argument per primitive
//! covers every head built from them.

use super::kernels::{self, LayerNormCache};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
        cols: usize,
    },
    Outer {
        u: NodeId,
        v: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LayerNormCache,
    },
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Vector times a length-1 node.
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    /// Mean of the entries of one node, producing a length-1 node.
    Mean(NodeId),
    /// Mean over samples of `(pred_k - target_k)^2`; every pred is length 1.
    Mse {
        preds: Vec<NodeId>,
        targets: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive operations with cached forward values.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.len())
            .ok_or_else(|| Error::State(format!("node {} is not on this tape", id.0)))
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// `W x + b`, with `w` a row-major `rows x cols` node.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let (nx, nw, nb) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if nx != cols || nw != rows * cols || nb != rows {
            return Err(Error::config(format!(
                "linear shape mismatch: W is {rows}x{cols} ({nw} entries), x has {nx}, b has {nb}"
            )));
        }
        let y = kernels::linear(self.value(x), self.value(w), rows, cols, self.value(b));
        Ok(self.push(y, Op::Linear { x, w, b, rows, cols }))
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let (nu, nv) = (self.check(u)?, self.check(v)?);
        if nu != nv {
            return Err(Error::config(format!(
                "outer product needs equal lengths, got {nu} and {nv}"
            )));
        }
        let y = kernels::outer(self.value(u), self.value(v));
        Ok(self.push(y, Op::Outer { u, v }))
    }

    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (nx, ng, nb) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        if ng != nx || nb != nx {
            return Err(Error::config(format!(
                "layernorm shape mismatch: x has {nx}, gamma {ng}, beta {nb}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::config(format!("layernorm eps must be positive, got {eps}")));
        }
        let (y, cache) =
            kernels::layernorm(self.value(x), self.value(gamma), self.value(beta), eps);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::config("concat of an empty list"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let y = parts
            .iter()
            .flat_map(|&p| self.value(p).iter().copied())
            .collect();
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na != nb {
            return Err(Error::config(format!("{what} needs equal lengths, got {na} and {nb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "add")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "sub")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.check(a)?;
        let y = self.value(a).iter().map(|x| x * k).collect();
        Ok(self.push(y, Op::Scale(a, k)))
    }

    /// `s * x` where `s` is a length-1 node (a learned scalar).
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(x)?;
        if self.check(s)? != 1 {
            return Err(Error::config("mul_scalar needs a length-1 scalar node"));
        }
        let k = self.scalar(s);
        let y = self.value(x).iter().map(|v| v * k).collect();
        Ok(self.push(y, Op::MulScalar { x, s }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.check(a)?;
        let m = self.value(a).iter().sum::<f64>() / n as f64;
        Ok(self.push(vec![m], Op::Mean(a)))
    }

    /// Mean squared error of scalar predictions against fixed targets.
    pub fn mse(&mut self, preds: &[NodeId], targets: &[f64]) -> Result<NodeId> {
        if preds.is_empty() || preds.len() != targets.len() {
            return Err(Error::config(format!(
                "mse needs matching non-empty inputs, got {} predictions and {} targets",
                preds.len(),
                targets.len()
            )));
        }
        for &p in preds {
            if self.check(p)? != 1 {
                return Err(Error::config("mse predictions must be scalars"));
            }
        }
        let n = preds.len() as f64;
        let l = preds
            .iter()
            .zip(targets)
            .map(|(&p, t)| {
                let r = self.scalar(p) - t;
                r * r
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            vec![l],
            Op::Mse {
                preds: preds.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Propagates `seed * d(output)` back through every recorded operation.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.check(output)? != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar output, node {} has length {}",
                output.0,
                self.value(output).len()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[output.0][0] = seed;

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|v| *v == 0.0) {
                grads[idx] = g;
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b, rows, cols } => {
                    let (gx, gw, gb) =
                        kernels::linear_backward(self.value(*x), self.value(*w), *rows, *cols, &g);
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[w.0], &gw);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Outer { u, v } => {
                    let (gu, gv) = kernels::outer_backward(self.value(*u), self.value(*v), &g);
                    accumulate(&mut grads[u.0], &gu);
                    accumulate(&mut grads[v.0], &gv);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gx, ggamma, gbeta) =
                        kernels::layernorm_backward(&g, self.value(*gamma), cache);
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[gamma.0], &ggamma);
                    accumulate(&mut grads[beta.0], &gbeta);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut grads[p.0], &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::MulScalar { x, s } => {
                    let k = self.scalar(*s);
                    let xv = self.value(*x);
                    let gx: Vec<f64> = g.iter().map(|v| v * k).collect();
                    let gs: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[x.0], &gx);
                    grads[s.0][0] += gs;
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let share = g[0] / n as f64;
                    grads[a.0].iter_mut().for_each(|v| *v += share);
                }
                Op::Mse { preds, targets } => {
                    let n = preds.len() as f64;
                    for (p, t) in preds.iter().zip(targets) {
                        grads[p.0][0] += g[0] * 2.0 * (self.scalar(*p) - t) / n;
                    }
                }
            }
            grads[idx] = g;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient of the backward seed output with respect to every recorded node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if the node did not influence the output.
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_hand_example() {
        // loss = (w * x)^2 at w = 3, x = 2 => dloss/dw = 2 * 6 * 2 = 24
        let mut t = GradTape::new();
        let w = t.leaf(vec![3.0]);
        let x = t.leaf(vec![2.0]);
        let wx = t.mul_scalar(x, w).unwrap();
        let zero = t.leaf(vec![0.0]);
        let loss = t.mse(&[wx], &[0.0]).unwrap();
        let g = t.backward(loss, 1.0).unwrap();
        assert_eq!(t.scalar(loss), 36.0);
        assert_eq!(g.get(w), &[24.0]);
        assert_eq!(g.get(x), &[36.0]);
        assert_eq!(g.get(zero), &[0.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = GradTape::new();
        let p = t.leaf(vec![1.0, 2.0]);
        let x = t.leaf(vec![3.0, 4.0]);
        let m = t.mean(x).unwrap();
        let g = t.backward(m, 1.0).unwrap();
        assert_eq!(g.get(p), &[0.0, 0.0]);
        assert_eq!(g.get(x), &[0.5, 0.5]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let t = GradTape::new();
        let err = t.backward(NodeId(0), 1.0).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut t = GradTape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        assert!(matches!(t.backward(x, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut t = GradTape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        let w = t.leaf(vec![1.0; 6]);
        let b = t.leaf(vec![0.0; 2]);
        assert!(matches!(t.linear(x, w, b, 2, 3), Err(Error::Config(_))));
        let y = t.leaf(vec![1.0]);
        assert!(matches!(t.sub(x, y), Err(Error::Config(_))));
    }
}
