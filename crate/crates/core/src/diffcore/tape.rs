//! Reverse-mode automatic differentiation over vector-valued nodes.
//!
//! A `Tape` records primitive operations during a forward pass and replays
//! them in reverse to accumulate gradients. With recording disabled the same
//! code paths compute plain forward values, so simulation-time and
//! training-time forwards cannot drift apart.

use super::params::{GradStore, ParamId, ParameterSet};
use crate::error::{CoreError, Result};

pub type NodeId = usize;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone)]
enum Op {
    Const,
    ParamVec(ParamId),
    /// y = W x, W stored row-major with `rows` rows.
    MatVec {
        w: ParamId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    AddParamVec {
        x: NodeId,
        b: ParamId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    /// Natural log; inputs must be strictly positive.
    Log(NodeId),
    ClampMin(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    Dot(NodeId, NodeId),
    /// y = bias + Σ c_i · v_i (all v_i the same length); the bias only
    /// affects the stored value, so the op records just the terms.
    Affine {
        terms: Vec<(f64, NodeId)>,
    },
    /// Masked diagonal-Gaussian log density, scalar output.
    GaussLogPdf {
        x: NodeId,
        mean: NodeId,
        var: NodeId,
        mask: Option<Vec<f64>>,
    },
    /// y = mean + sqrt(var) ⊙ noise.
    Reparam {
        mean: NodeId,
        var: NodeId,
        noise: Vec<f64>,
    },
    LogSumExp(NodeId),
    Softmax(NodeId),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Tape {
    pub fn new(recording: bool) -> Self {
        Self {
            nodes: Vec::new(),
            recording,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes; ids from before the call are invalidated.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        let id = self.nodes.len();
        let op = if self.recording { op } else { Op::Const };
        self.nodes.push(Node { value, op });
        id
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Const,
        });
        id
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(vec![v])
    }

    /// Materializes a parameter vector on the tape (used for small learnable
    /// vectors consumed elementwise, e.g. an initial-state mean).
    pub fn param_vec(&mut self, params: &ParameterSet, p: ParamId) -> NodeId {
        self.push(params.data(p).to_vec(), Op::ParamVec(p))
    }

    pub fn matvec(&mut self, params: &ParameterSet, w: ParamId, x: NodeId) -> NodeId {
        let shape = params.shape(w);
        debug_assert_eq!(shape.len(), 2);
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(
            cols,
            self.nodes[x].value.len(),
            "matvec: weight cols vs input length"
        );
        let wd = params.data(w);
        let xv = &self.nodes[x].value;
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                acc += row[c] * xv[c];
            }
            y[r] = acc;
        }
        self.push(y, Op::MatVec { w, x, rows, cols })
    }

    pub fn add_param_vec(&mut self, params: &ParameterSet, x: NodeId, b: ParamId) -> NodeId {
        let bd = params.data(b);
        assert_eq!(bd.len(), self.nodes[x].value.len());
        let y = self.nodes[x]
            .value
            .iter()
            .zip(bd)
            .map(|(a, b)| a + b)
            .collect();
        self.push(y, Op::AddParamVec { x, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.nodes[a].value.iter().map(|x| x * c).collect();
        self.push(y, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        self.push(y, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let y = self
            .nodes[a]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(y, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a].value.iter().map(|x| x.tanh()).collect();
        self.push(y, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a].value.iter().map(|x| x.exp()).collect();
        self.push(y, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a].value.iter().map(|x| x.ln()).collect();
        self.push(y, Op::Log(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let y = self.nodes[a].value.iter().map(|x| x.max(lo)).collect();
        self.push(y, Op::ClampMin(a, lo))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut y = Vec::new();
        for &p in parts {
            y.extend_from_slice(&self.nodes[p].value);
        }
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.nodes[src].value[start..start + len].to_vec();
        self.push(y, Op::Slice { src, start, len })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s: f64 = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn affine(&mut self, terms: &[(f64, NodeId)], bias: f64) -> NodeId {
        assert!(!terms.is_empty());
        let n = self.nodes[terms[0].1].value.len();
        let mut y = vec![bias; n];
        for &(c, id) in terms {
            assert_eq!(self.nodes[id].value.len(), n);
            for (yi, vi) in y.iter_mut().zip(&self.nodes[id].value) {
                *yi += c * vi;
            }
        }
        self.push(
            y,
            Op::Affine {
                terms: terms.to_vec(),
            },
        )
    }

    /// Σ over unmasked dims of the univariate Gaussian log density.
    /// Masked dims contribute exactly zero value and zero gradient.
    pub fn gauss_log_pdf(
        &mut self,
        x: NodeId,
        mean: NodeId,
        var: NodeId,
        mask: Option<&[f64]>,
    ) -> Result<NodeId> {
        let n = self.nodes[x].value.len();
        if self.nodes[mean].value.len() != n {
            return Err(CoreError::ShapeMismatch {
                context: "gauss_log_pdf mean",
                expected: n,
                got: self.nodes[mean].value.len(),
            });
        }
        if self.nodes[var].value.len() != n {
            return Err(CoreError::ShapeMismatch {
                context: "gauss_log_pdf var",
                expected: n,
                got: self.nodes[var].value.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(CoreError::ShapeMismatch {
                    context: "gauss_log_pdf mask",
                    expected: n,
                    got: m.len(),
                });
            }
        }
        let mut lp = 0.0;
        for d in 0..n {
            let m = mask.map_or(1.0, |mk| mk[d]);
            if m == 0.0 {
                continue;
            }
            let v = self.nodes[var].value[d];
            if v <= 0.0 {
                return Err(CoreError::NonPositiveVariance(v));
            }
            let r = self.nodes[x].value[d] - self.nodes[mean].value[d];
            lp += -0.5 * (LN_2PI + v.ln() + r * r / v);
        }
        Ok(self.push(
            vec![lp],
            Op::GaussLogPdf {
                x,
                mean,
                var,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    pub fn reparam(&mut self, mean: NodeId, var: NodeId, noise: &[f64]) -> Result<NodeId> {
        let n = self.nodes[mean].value.len();
        if noise.len() != n {
            return Err(CoreError::ShapeMismatch {
                context: "reparam noise",
                expected: n,
                got: noise.len(),
            });
        }
        let y = (0..n)
            .map(|d| self.nodes[mean].value[d] + self.nodes[var].value[d].sqrt() * noise[d])
            .collect();
        Ok(self.push(
            y,
            Op::Reparam {
                mean,
                var,
                noise: noise.to_vec(),
            },
        ))
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = if m.is_finite() {
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        } else {
            m
        };
        self.push(vec![s], Op::LogSumExp(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let y = e.iter().map(|x| x / z).collect();
        self.push(y, Op::Softmax(a))
    }

    /// Exact reverse-mode gradients of a scalar `loss` node with respect to
    /// every parameter reachable from it, accumulated into `store`.
    pub fn backward(
        &self,
        loss: NodeId,
        params: &ParameterSet,
        store: &mut GradStore,
    ) -> Result<()> {
        if self.nodes[loss].value.len() != 1 {
            return Err(CoreError::NonScalarLoss(self.nodes[loss].value.len()));
        }
        assert!(self.recording, "backward on a non-recording tape");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::ParamVec(p) => {
                    for (gi, go) in store.grads[*p].iter_mut().zip(&g) {
                        *gi += go;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let wd = params.data(*w);
                    let xv = &self.nodes[*x].value;
                    let gw = &mut store.grads[*w];
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &mut gw[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            row[c] += gr * xv[c];
                        }
                    }
                    let gx = acc(&mut grads, *x, *cols);
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &wd[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            gx[c] += gr * row[c];
                        }
                    }
                }
                Op::AddParamVec { x, b } => {
                    for (gi, go) in store.grads[*b].iter_mut().zip(&g) {
                        *gi += go;
                    }
                    add_into(&mut grads, *x, &g);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &g);
                    add_into(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*b].value)
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(gi, av)| gi * av)
                        .collect();
                    add_into(&mut grads, *a, &ga);
                    add_into(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(gi, av)| if *av > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value)
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value)
                        .map(|(gi, y)| gi * y)
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(gi, av)| gi / av)
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::ClampMin(a, lo) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(gi, av)| if *av > *lo { *gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        add_into(&mut grads, p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice { src, start, len } => {
                    let n = self.nodes[*src].value.len();
                    let gs = acc(&mut grads, *src, n);
                    for i in 0..*len {
                        gs[start + i] += g[i];
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    let ga = vec![g[0]; n];
                    add_into(&mut grads, *a, &ga);
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = self.nodes[*b].value.iter().map(|x| g[0] * x).collect();
                    let gb: Vec<f64> = self.nodes[*a].value.iter().map(|x| g[0] * x).collect();
                    add_into(&mut grads, *a, &ga);
                    add_into(&mut grads, *b, &gb);
                }
                Op::Affine { terms } => {
                    for &(c, t) in terms {
                        let gt: Vec<f64> = g.iter().map(|x| x * c).collect();
                        add_into(&mut grads, t, &gt);
                    }
                }
                Op::GaussLogPdf { x, mean, var, mask } => {
                    let n = self.nodes[*x].value.len();
                    let g0 = g[0];
                    let mut gx = vec![0.0; n];
                    let mut gm = vec![0.0; n];
                    let mut gv = vec![0.0; n];
                    for d in 0..n {
                        let mkd = mask.as_ref().map_or(1.0, |m| m[d]);
                        if mkd == 0.0 {
                            continue;
                        }
                        let v = self.nodes[*var].value[d];
                        let r = self.nodes[*x].value[d] - self.nodes[*mean].value[d];
                        gx[d] = -g0 * r / v;
                        gm[d] = g0 * r / v;
                        gv[d] = g0 * (-0.5 / v + 0.5 * r * r / (v * v));
                    }
                    add_into(&mut grads, *x, &gx);
                    add_into(&mut grads, *mean, &gm);
                    add_into(&mut grads, *var, &gv);
                }
                Op::Reparam { mean, var, noise } => {
                    add_into(&mut grads, *mean, &g);
                    let gv: Vec<f64> = g
                        .iter()
                        .zip(noise)
                        .zip(&self.nodes[*var].value)
                        .map(|((gi, nz), v)| gi * nz * 0.5 / v.sqrt())
                        .collect();
                    add_into(&mut grads, *var, &gv);
                }
                Op::LogSumExp(a) => {
                    let lse = self.nodes[id].value[0];
                    let ga: Vec<f64> = self.nodes[*a]
                        .value
                        .iter()
                        .map(|x| g[0] * (x - lse).exp())
                        .collect();
                    add_into(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let s = &self.nodes[id].value;
                    let dot: f64 = s.iter().zip(&g).map(|(si, gi)| si * gi).sum();
                    let ga: Vec<f64> = s.iter().zip(&g).map(|(si, gi)| si * (gi - dot)).collect();
                    add_into(&mut grads, *a, &ga);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &'a mut Vec<f64> {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; n]);
    }
    grads[id].as_mut().unwrap()
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    let slot = acc(grads, id, g.len());
    for (a, b) in slot.iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::TensorValue;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut params = ParameterSet::new();
        let p = params.register("p", TensorValue::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut tape = Tape::new(true);
        let v = tape.param_vec(&params, p);
        let loss = tape.sum(v);
        let mut store = GradStore::zeros_like(&params);
        tape.backward(loss, &params, &mut store).unwrap();
        assert_eq!(store.grads[0], vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_norm_squared_gradient_is_p() {
        let mut params = ParameterSet::new();
        let p = params.register("p", TensorValue::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut tape = Tape::new(true);
        let v = tape.param_vec(&params, p);
        let d = tape.dot(v, v);
        let loss = tape.scale(d, 0.5);
        let mut store = GradStore::zeros_like(&params);
        tape.backward(loss, &params, &mut store).unwrap();
        assert_eq!(store.grads[0], vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let mut params = ParameterSet::new();
        let p = params.register("p", TensorValue::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new(true);
        let v = tape.param_vec(&params, p);
        let mut store = GradStore::zeros_like(&params);
        assert!(matches!(
            tape.backward(v, &params, &mut store),
            Err(CoreError::NonScalarLoss(2))
        ));
    }

    #[test]
    fn non_recording_tape_computes_same_values() {
        let mut params = ParameterSet::new();
        let w = params.register(
            "w",
            TensorValue::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let run = |rec: bool, params: &ParameterSet| {
            let mut tape = Tape::new(rec);
            let x = tape.constant(vec![0.5, -1.5]);
            let y = tape.matvec(params, w, x);
            let z = tape.tanh(y);
            tape.value(z).to_vec()
        };
        assert_eq!(run(true, &params), run(false, &params));
    }
}
