//! Dense encoder/decoder networks with plain and taped forward passes.


use crate::diff::tape::{Tape, VarId};
use crate::linalg::Mat;
use crate::rng::SeqRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// out × in.
    pub w: Mat,
    /// out × 1.
    pub b: Mat,
    pub activation: Activation,
    pub layer_norm: bool,
}

/// A stack of dense layers operating on T×features matrices row-wise.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

impl DenseNet {
    /// Hidden layers use `hidden_act` (+ optional layer norm); the final layer
    /// is linear.
    pub fn new(
        dims: &[usize],
        hidden_act: Activation,
        layer_norm: bool,
        rng: &mut SeqRng,
    ) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Mat::from_fn(fan_out, fan_in, |_, _| rng.normal() * scale);
            let b = Mat::zeros(fan_out, 1);
            let last = i == dims.len() - 2;
            layers.push(Layer {
                w,
                b,
                activation: if last { Activation::Identity } else { hidden_act },
                layer_norm: layer_norm && !last,
            });
        }
        DenseNet { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    /// Plain forward on a T×in matrix.
    pub fn forward(&self, x: &Mat) -> Mat {
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = &h * layer.w.transpose();
            for i in 0..out.nrows() {
                for j in 0..out.ncols() {
                    out[(i, j)] = act(layer.activation, out[(i, j)] + layer.b[(j, 0)]);
                }
            }
            if layer.layer_norm {
                let cols = out.ncols();
                for i in 0..out.nrows() {
                    let mean = out.row(i).sum() / cols as f64;
                    let var = out
                        .row(i)
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>()
                        / cols as f64;
                    let denom = (var + LN_EPS).sqrt();
                    for j in 0..cols {
                        out[(i, j)] = (out[(i, j)] - mean) / denom;
                    }
                }
            }
            h = out;
        }
        h
    }

    /// Register the weights as tape leaves, in layer order.
    pub fn make_leaves(&self, tape: &mut Tape) -> Vec<(VarId, VarId)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect()
    }

    /// Taped forward using previously registered weight leaves.
    pub fn taped_forward(&self, tape: &mut Tape, x: VarId, leaves: &[(VarId, VarId)]) -> VarId {
        let t_rows = tape.value(x).nrows();
        let mut h = x;
        for (layer, (w, b)) in self.layers.iter().zip(leaves) {
            let wt = tape.transpose(*w);
            let lin = tape.matmul(h, wt);
            let bt = tape.transpose(*b);
            let bb = tape.broadcast_rows(bt, t_rows);
            let pre = tape.add(lin, bb);
            let mut out = match layer.activation {
                Activation::Gelu => tape.gelu(pre),
                Activation::Tanh => tape.tanh(pre),
                Activation::Identity => pre,
            };
            if layer.layer_norm {
                let cols = layer.w.nrows();
                let sums = tape.row_sums(out);
                let mean = tape.scale(sums, 1.0 / cols as f64);
                let mean_b = tape.broadcast_cols(mean, cols);
                let centered = tape.sub(out, mean_b);
                let sq = tape.mul(centered, centered);
                let var_sums = tape.row_sums(sq);
                let var = tape.scale(var_sums, 1.0 / cols as f64);
                let var_eps = tape.offset(var, LN_EPS);
                let denom = tape.sqrt(var_eps);
                let denom_b = tape.broadcast_cols(denom, cols);
                out = tape.div(centered, denom_b);
            }
            h = out;
        }
        h
    }
}
