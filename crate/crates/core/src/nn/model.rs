//! Allocator network: single-layer LSTM, dense head, softmax over two assets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lstm::{self, LstmShape};
use super::tape::{NodeId, Tape};
use super::tensor::{self, Tensor};
use crate::data::{FeatureWindow, FEATURE_COLUMNS};
use crate::portfolio::Pair;

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("window has {got} values, expected {rows}x{cols}")]
    Window {
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("parameter `{name}` is {got:?}, expected {want:?}")]
    Param {
        name: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("empty batch")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: usize,
    pub hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input: FEATURE_COLUMNS,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl ModelSpec {
    pub fn with_hidden(hidden: usize) -> Self {
        Self {
            hidden,
            ..Self::default()
        }
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn layout(&self) -> [(&'static str, (usize, usize)); 5] {
        let (i, h) = (self.input, self.hidden);
        [
            ("lstm.w_ih", (i, 4 * h)),
            ("lstm.w_hh", (h, 4 * h)),
            ("lstm.bias", (1, 4 * h)),
            ("head.w", (h, 2)),
            ("head.b", (1, 2)),
        ]
    }
}

/// All trainable tensors. Gate blocks along the `4H` axis are
/// `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub spec: ModelSpec,
    pub seed: u64,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Params {
    pub fn zeros(spec: ModelSpec, seed: u64) -> Self {
        let [a, b, c, d, e] = spec.layout().map(|(_, (r, c))| Tensor::zeros(r, c));
        Self {
            spec,
            seed,
            w_ih: a,
            w_hh: b,
            bias: c,
            head_w: d,
            head_b: e,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.w_ih,
            &self.w_hh,
            &self.bias,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        for ((name, want), t) in self.spec.layout().iter().zip(self.tensors()) {
            if t.shape() != *want {
                return Err(ShapeError::Param {
                    name: name.to_string(),
                    got: t.shape(),
                    want: *want,
                });
            }
        }
        Ok(())
    }

    /// Flattened view over all parameters, in checkpoint order.
    pub fn flat_get(&self, mut k: usize) -> f64 {
        for t in self.tensors() {
            if k < t.len() {
                return t.data[k];
            }
            k -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn flat_set(&mut self, mut k: usize, v: f64) {
        for t in self.tensors_mut() {
            if k < t.len() {
                t.data[k] = v;
                return;
            }
            k -= t.len();
        }
        panic!("parameter index out of range");
    }
}

/// Uniform `±1/√H` for every entry, forget-gate biases shifted by +1.
pub fn init_params(spec: ModelSpec, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (spec.hidden as f64).sqrt();
    let mut p = Params::zeros(spec, seed);
    for t in p.tensors_mut() {
        for x in &mut t.data {
            *x = rng.random_range(-bound..bound);
        }
    }
    let h = spec.hidden;
    for x in &mut p.bias.data[h..2 * h] {
        *x += 1.0;
    }
    p
}

/// Step-major LSTM input for a batch of windows, each `steps x input`
/// stored oldest row first.
pub fn step_major(windows: &[&[f64]], steps: usize, input: usize) -> Vec<f64> {
    let b = windows.len();
    let mut x = vec![0.0; steps * b * input];
    for (r, w) in windows.iter().enumerate() {
        for t in 0..steps {
            let dst = (t * b + r) * input;
            x[dst..dst + input].copy_from_slice(&w[t * input..(t + 1) * input]);
        }
    }
    x
}

fn softmax_pair(z: [f64; 2]) -> Pair {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Allocations for a batch of windows (`steps x input` each, oldest first).
pub fn predict(params: &Params, windows: &[&[f64]], steps: usize) -> Result<Vec<Pair>, ShapeError> {
    let spec = params.spec;
    if windows.is_empty() {
        return Err(ShapeError::Empty);
    }
    for w in windows {
        if w.len() != steps * spec.input || steps == 0 {
            return Err(ShapeError::Window {
                rows: steps,
                cols: spec.input,
                got: w.len(),
            });
        }
    }
    params.validate()?;
    let b = windows.len();
    let shape = LstmShape {
        batch: b,
        steps,
        input: spec.input,
        hidden: spec.hidden,
    };
    let x = step_major(windows, steps, spec.input);
    let h = lstm::forward(
        &shape,
        &x,
        &params.w_ih.data,
        &params.w_hh.data,
        &params.bias.data,
        None,
    );
    let mut z = tensor::matmul(&Tensor::from_vec(b, spec.hidden, h), &params.head_w);
    for row in z.data.chunks_exact_mut(2) {
        row[0] += params.head_b.data[0];
        row[1] += params.head_b.data[1];
    }
    Ok(z.data
        .chunks_exact(2)
        .map(|r| softmax_pair([r[0], r[1]]))
        .collect())
}

/// Allocation for a single window.
pub fn forward(params: &Params, window: &FeatureWindow) -> Result<Pair, ShapeError> {
    if window.data.len() != window.rows * params.spec.input {
        return Err(ShapeError::Window {
            rows: window.rows,
            cols: params.spec.input,
            got: window.data.len(),
        });
    }
    Ok(predict(params, &[&window.data], window.rows)?[0])
}

/// Tape handles for the parameters, in checkpoint order.
#[derive(Debug, Clone, Copy)]
pub struct ParamIds(pub [NodeId; 5]);

pub fn param_leaves(tape: &mut Tape, params: &Params) -> ParamIds {
    ParamIds(params.tensors().map(|t| tape.leaf(t.clone())))
}

/// Differentiable forward for a step-major batch; returns a `B x 2` node of
/// allocations.
pub fn forward_tape(
    tape: &mut Tape,
    ids: ParamIds,
    x: Vec<f64>,
    batch: usize,
    steps: usize,
) -> NodeId {
    let [w_ih, w_hh, bias, head_w, head_b] = ids.0;
    let h = tape.lstm(x, batch, steps, w_ih, w_hh, bias);
    let z = tape.matmul(h, head_w);
    let z = tape.add_row(z, head_b);
    tape.softmax_rows(z)
}
