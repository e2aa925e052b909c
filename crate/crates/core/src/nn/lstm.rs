//! Fused single-layer LSTM kernel used by the tape and by inference.
//!
//! Gate layout along the `4H` axis is `[input, forget, cell, output]`:
//!
//! ```text
//! pre = x_t W_ih + h_{t-1} W_hh + b
//! i = σ(pre_i)  f = σ(pre_f)  g = tanh(pre_g)  o = σ(pre_o)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```
//!
//! Input is step-major: rows `[t*B, (t+1)*B)` of `x` hold step `t` for every
//! sequence in the batch, oldest step first. State starts at zero.

use super::tensor::gemm;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LstmCache {
    /// `steps x B x 4H` activated gates.
    gates: Vec<f64>,
    /// `(steps + 1) x B x H`, slot 0 is the zero initial state.
    cells: Vec<f64>,
    hiddens: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmShape {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Runs the sequence and returns the final hidden state `B x H`.
pub fn forward(
    shape: &LstmShape,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    mut cache: Option<&mut LstmCache>,
) -> Vec<f64> {
    let LstmShape {
        batch: b,
        steps,
        input,
        hidden: h,
    } = *shape;
    let g4 = 4 * h;
    assert_eq!(x.len(), steps * b * input, "lstm input size");
    assert_eq!(w_ih.len(), input * g4);
    assert_eq!(w_hh.len(), h * g4);
    assert_eq!(bias.len(), g4);

    let mut hprev = vec![0.0; b * h];
    let mut cprev = vec![0.0; b * h];
    let mut pre = vec![0.0; b * g4];
    if let Some(c) = cache.as_deref_mut() {
        c.gates.clear();
        c.gates.reserve(steps * b * g4);
        c.cells = vec![0.0; b * h];
        c.hiddens = vec![0.0; b * h];
        c.cells.reserve(steps * b * h);
        c.hiddens.reserve(steps * b * h);
    }
    for t in 0..steps {
        for row in pre.chunks_exact_mut(g4) {
            row.copy_from_slice(bias);
        }
        let xt = &x[t * b * input..(t + 1) * b * input];
        gemm(b, input, g4, 1.0, xt, false, w_ih, false, 1.0, &mut pre);
        gemm(b, h, g4, 1.0, &hprev, false, w_hh, false, 1.0, &mut pre);
        for r in 0..b {
            let p = &mut pre[r * g4..(r + 1) * g4];
            for j in 0..h {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[h + j]);
                let g = p[2 * h + j].tanh();
                let o = sigmoid(p[3 * h + j]);
                let c = f * cprev[r * h + j] + i * g;
                p[j] = i;
                p[h + j] = f;
                p[2 * h + j] = g;
                p[3 * h + j] = o;
                cprev[r * h + j] = c;
                hprev[r * h + j] = o * c.tanh();
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.gates.extend_from_slice(&pre);
            c.cells.extend_from_slice(&cprev);
            c.hiddens.extend_from_slice(&hprev);
        }
    }
    hprev
}

/// Gradients of the kernel's parameters.
pub struct LstmGrads {
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backpropagation through time from `d_hidden` (`B x H`, the adjoint of the
/// final hidden state).
pub fn backward(
    shape: &LstmShape,
    x: &[f64],
    w_hh: &[f64],
    cache: &LstmCache,
    d_hidden: &[f64],
) -> LstmGrads {
    let LstmShape {
        batch: b,
        steps,
        input,
        hidden: h,
    } = *shape;
    let g4 = 4 * h;
    let bh = b * h;
    let mut grads = LstmGrads {
        w_ih: vec![0.0; input * g4],
        w_hh: vec![0.0; h * g4],
        bias: vec![0.0; g4],
    };
    let mut dh = d_hidden.to_vec();
    let mut dc = vec![0.0; bh];
    let mut dpre = vec![0.0; b * g4];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t * b * g4..(t + 1) * b * g4];
        let c_prev = &cache.cells[t * bh..(t + 1) * bh];
        let c_cur = &cache.cells[(t + 1) * bh..(t + 2) * bh];
        for r in 0..b {
            let gr = &gates[r * g4..(r + 1) * g4];
            let dp = &mut dpre[r * g4..(r + 1) * g4];
            for j in 0..h {
                let k = r * h + j;
                let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let tc = c_cur[k].tanh();
                let d_o = dh[k] * tc;
                let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
                dp[j] = dct * g * i * (1.0 - i);
                dp[h + j] = dct * c_prev[k] * f * (1.0 - f);
                dp[2 * h + j] = dct * i * (1.0 - g * g);
                dp[3 * h + j] = d_o * o * (1.0 - o);
                dc[k] = dct * f;
            }
        }
        let xt = &x[t * b * input..(t + 1) * b * input];
        let h_prev = &cache.hiddens[t * bh..(t + 1) * bh];
        gemm(
            input,
            b,
            g4,
            1.0,
            xt,
            true,
            &dpre,
            false,
            1.0,
            &mut grads.w_ih,
        );
        gemm(
            h,
            b,
            g4,
            1.0,
            h_prev,
            true,
            &dpre,
            false,
            1.0,
            &mut grads.w_hh,
        );
        for row in dpre.chunks_exact(g4) {
            for (acc, v) in grads.bias.iter_mut().zip(row) {
                *acc += v;
            }
        }
        gemm(b, g4, h, 1.0, &dpre, false, w_hh, true, 0.0, &mut dh);
    }
    grads
}
