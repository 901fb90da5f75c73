//! Single-layer LSTM with full-sequence backpropagation through time.
//!
//! Gate layout along the `4·hidden` axis is `[input, forget, cell, output]`.

use rand::Rng;

use super::tensor::{axpy, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::{Grads, ParamId, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    /// `input × 4h`
    pub w_ih: ParamId,
    /// `h × 4h`
    pub w_hh: ParamId,
    /// `1 × 4h`
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: params.add_uniform(format!("{prefix}.w_ih"), input, 4 * hidden, bound, rng),
            w_hh: params.add_uniform(format!("{prefix}.w_hh"), hidden, 4 * hidden, bound, rng),
            bias: params.add_uniform(format!("{prefix}.bias"), 1, 4 * hidden, bound, rng),
            hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fwd: LstmParams::new(params, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: LstmParams::new(params, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            fwd: self.bwd,
            bwd: self.fwd,
        }
    }
}

/// Per-position activations, indexed by sentence position (not processing step).
pub struct LstmCache {
    gates: Tensor,
    c: Tensor,
    tanh_c: Tensor,
    pub h: Tensor,
    reverse: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn order(n: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

pub fn forward(params: &Params, p: &LstmParams, x: &Tensor, reverse: bool) -> LstmCache {
    let n = x.rows;
    let h = p.hidden;
    let w_ih = params.get(p.w_ih);
    let w_hh = params.get(p.w_hh);
    let bias = params.get(p.bias);
    assert_eq!(w_ih.rows, x.cols, "lstm input width mismatch");

    let mut gates = Tensor::zeros(n, 4 * h);
    for t in 0..n {
        gates.row_mut(t).copy_from_slice(&bias.data);
    }
    matmul_acc(&x.data, &w_ih.data, &mut gates.data, n, x.cols, 4 * h);

    let mut c = Tensor::zeros(n, h);
    let mut tanh_c = Tensor::zeros(n, h);
    let mut hs = Tensor::zeros(n, h);
    let mut prev: Option<usize> = None;
    for t in order(n, reverse) {
        if let Some(pt) = prev {
            let (h_prev, z) = (hs.row(pt).to_vec(), gates.row_mut(t));
            matmul_acc(&h_prev, &w_hh.data, z, 1, h, 4 * h);
        }
        let z = gates.row_mut(t);
        for j in 0..h {
            z[j] = sigmoid(z[j]);
            z[h + j] = sigmoid(z[h + j]);
            z[2 * h + j] = z[2 * h + j].tanh();
            z[3 * h + j] = sigmoid(z[3 * h + j]);
        }
        for j in 0..h {
            let c_prev = prev.map_or(0.0, |pt| c.data[pt * h + j]);
            let z = gates.row(t);
            let ct = z[h + j] * c_prev + z[j] * z[2 * h + j];
            let tc = ct.tanh();
            c.data[t * h + j] = ct;
            tanh_c.data[t * h + j] = tc;
            hs.data[t * h + j] = z[3 * h + j] * tc;
        }
        prev = Some(t);
    }
    LstmCache {
        gates,
        c,
        tanh_c,
        h: hs,
        reverse,
    }
}

/// Accumulates parameter gradients into `grads` and the input gradient into `dx`.
pub fn backward(
    params: &Params,
    p: &LstmParams,
    x: &Tensor,
    cache: &LstmCache,
    dh_out: &Tensor,
    dx: &mut Tensor,
    grads: &mut Grads,
) {
    let n = x.rows;
    let h = p.hidden;
    let w_ih = params.get(p.w_ih);
    let w_hh = params.get(p.w_hh);
    let steps: Vec<usize> = order(n, cache.reverse).collect();

    let mut dz = Tensor::zeros(n, 4 * h);
    // previous hidden state seen at each position (zero for the first step)
    let mut h_prev = Tensor::zeros(n, h);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for (k, &t) in steps.iter().enumerate().rev() {
        let prev = if k > 0 { Some(steps[k - 1]) } else { None };
        if let Some(pt) = prev {
            h_prev.row_mut(t).copy_from_slice(cache.h.row(pt));
        }
        let z = cache.gates.row(t);
        let dzt = dz.row_mut(t);
        for j in 0..h {
            let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            let tc = cache.tanh_c.data[t * h + j];
            let c_prev = prev.map_or(0.0, |pt| cache.c.data[pt * h + j]);
            let dh = dh_out.data[t * h + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dzt[j] = dc * g * i * (1.0 - i);
            dzt[h + j] = dc * c_prev * f * (1.0 - f);
            dzt[2 * h + j] = dc * i * (1.0 - g * g);
            dzt[3 * h + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if prev.is_some() {
            matmul_a_bt_acc(dz.row(t), &w_hh.data, &mut dh_next, 1, 4 * h, h);
        }
    }

    if let Some(slot) = grads.slot(params, p.w_ih) {
        matmul_at_b_acc(&x.data, &dz.data, slot, n, x.cols, 4 * h);
    }
    if let Some(slot) = grads.slot(params, p.w_hh) {
        matmul_at_b_acc(&h_prev.data, &dz.data, slot, n, h, 4 * h);
    }
    if let Some(slot) = grads.slot(params, p.bias) {
        for t in 0..n {
            axpy(1.0, dz.row(t), slot);
        }
    }
    matmul_a_bt_acc(&dz.data, &w_ih.data, &mut dx.data, n, 4 * h, x.cols);
}
