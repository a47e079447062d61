use super::init::orthogonal_init;
use super::params::{ParamId, ParameterSet};
use super::tape::{NodeId, Tape};
use super::tensor::TensorValue;
use crate::error::{CoreError, Result};
use rand::Rng;

/// Lower bound on every variance head output.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Fully connected layer. Weights are orthogonally initialized, biases zero.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut ParameterSet,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
    ) -> Self {
        let w = params.register(format!("{name}.w"), orthogonal_init(out_dim, in_dim, rng));
        let b = params.register(format!("{name}.b"), TensorValue::zeros(vec![out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: NodeId) -> Result<NodeId> {
        let got = tape.value(x).len();
        if got != self.in_dim {
            return Err(CoreError::ShapeMismatch {
                context: "dense_forward input",
                expected: self.in_dim,
                got,
            });
        }
        let y = tape.matvec(params, self.w, x);
        let y = tape.add_param_vec(params, y, self.b);
        Ok(match self.act {
            Activation::Relu => tape.relu(y),
            Activation::None => y,
        })
    }
}

/// Stack of fully connected layers applied in order.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng>(
        params: &mut ParameterSet,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        act: Activation,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, rng, &format!("{name}.{i}"), w[0], w[1], act))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, params, h)?;
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Diagonal-Gaussian output: two separate linear layers for mean and
/// log-variance; the variance is exponentiated and floored at `VAR_FLOOR`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub mean: Dense,
    pub logvar: Dense,
}

impl GaussianHead {
    pub fn new<R: Rng>(
        params: &mut ParameterSet,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            mean: Dense::new(params, rng, &format!("{name}.mean"), in_dim, out_dim, Activation::None),
            logvar: Dense::new(
                params,
                rng,
                &format!("{name}.logvar"),
                in_dim,
                out_dim,
                Activation::None,
            ),
        }
    }

    /// Returns (mean, var) nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let m = self.mean.forward(tape, params, x)?;
        let lv = self.logvar.forward(tape, params, x)?;
        let v = tape.exp(lv);
        let v = tape.clamp_min(v, VAR_FLOOR);
        Ok((m, v))
    }

    pub fn out_dim(&self) -> usize {
        self.mean.out_dim
    }
}

/// Gated recurrent unit cell.
///
/// r = σ(W_r x + U_r h + b_r)
/// u = σ(W_u x + U_u h + b_u)
/// n = tanh(W_n x + U_n (r⊙h) + b_n)
/// h' = u⊙h + (1−u)⊙n
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_u: ParamId,
    u_u: ParamId,
    b_u: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
}

impl GruCell {
    pub fn new<R: Rng>(
        params: &mut ParameterSet,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let mat = |params: &mut ParameterSet, rng: &mut R, suffix: &str, cols: usize| {
            params.register(
                format!("{name}.{suffix}"),
                orthogonal_init(hidden_dim, cols, rng),
            )
        };
        let w_r = mat(params, rng, "w_r", input_dim);
        let u_r = mat(params, rng, "u_r", hidden_dim);
        let w_u = mat(params, rng, "w_u", input_dim);
        let u_u = mat(params, rng, "u_u", hidden_dim);
        let w_n = mat(params, rng, "w_n", input_dim);
        let u_n = mat(params, rng, "u_n", hidden_dim);
        let b_r = params.register(format!("{name}.b_r"), TensorValue::zeros(vec![hidden_dim]));
        let b_u = params.register(format!("{name}.b_u"), TensorValue::zeros(vec![hidden_dim]));
        let b_n = params.register(format!("{name}.b_n"), TensorValue::zeros(vec![hidden_dim]));
        Self {
            input_dim,
            hidden_dim,
            w_r,
            u_r,
            b_r,
            w_u,
            u_u,
            b_u,
            w_n,
            u_n,
            b_n,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        h_prev: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        if tape.value(h_prev).len() != self.hidden_dim {
            return Err(CoreError::ShapeMismatch {
                context: "gru_step hidden",
                expected: self.hidden_dim,
                got: tape.value(h_prev).len(),
            });
        }
        if tape.value(x).len() != self.input_dim {
            return Err(CoreError::ShapeMismatch {
                context: "gru_step input",
                expected: self.input_dim,
                got: tape.value(x).len(),
            });
        }
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, h: NodeId| {
            let a = tape.matvec(params, w, x);
            let c = tape.matvec(params, u, h);
            let s = tape.add(a, c);
            tape.add_param_vec(params, s, b)
        };
        let r = gate(tape, self.w_r, self.u_r, self.b_r, h_prev);
        let r = tape.sigmoid(r);
        let u = gate(tape, self.w_u, self.u_u, self.b_u, h_prev);
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, h_prev);
        let n = gate(tape, self.w_n, self.u_n, self.b_n, rh);
        let n = tape.tanh(n);
        // h' = u⊙h + (1-u)⊙n = n + u⊙(h - n)
        let hm = tape.sub(h_prev, n);
        let uh = tape.mul(u, hm);
        Ok(tape.add(n, uh))
    }
}
