//! Reverse-mode differentiation over a per-sentence tape.
//!
//! Every node owns its forward value. Parameters are not nodes: ops that read a parameter
//! accumulate its gradient straight into a [`Grads`] buffer during [`Graph::backward`].

use rand::Rng;

use super::lstm::{self, BiLstmParams, LstmCache};
use super::tensor::{axpy, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::{Grads, ParamId, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    Rows {
        src: NodeId,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    BiLstm {
        x: NodeId,
        params: BiLstmParams,
        caches: Box<[LstmCache; 2]>,
    },
    CharCnn {
        chars: NodeId,
        w: ParamId,
        b: ParamId,
        window: usize,
        /// Per output cell, the first char row of the winning window.
        argmax: Vec<usize>,
    },
    ColMax {
        src: NodeId,
        argmax: Vec<usize>,
    },
    Mask {
        src: NodeId,
        mask: Vec<f64>,
    },
    SoftmaxNll {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
        eps: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        src: NodeId,
        factor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Embedding lookup: one row of `table` per id.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.params.get(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects (and possibly repeats) rows of a node.
    pub fn rows(&mut self, src: NodeId, ids: &[usize]) -> NodeId {
        let s = self.value(src);
        let mut out = Tensor::zeros(ids.len(), s.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(id));
        }
        self.push(
            out,
            Op::Rows {
                src,
                ids: ids.to_vec(),
            },
        )
    }

    /// Repeats a single-row node `n` times.
    pub fn broadcast_rows(&mut self, src: NodeId, n: usize) -> NodeId {
        debug_assert_eq!(self.value(src).rows, 1);
        self.rows(src, &vec![0; n])
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// `x · w + b` with `w: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xv = self.value(x);
        let wv = self.params.get(w);
        let bv = self.params.get(b);
        assert_eq!(xv.cols, wv.rows, "linear input width mismatch");
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&bv.data);
        }
        matmul_acc(&xv.data, &wv.data, &mut out.data, xv.rows, xv.cols, wv.cols);
        self.push(out, Op::Linear { x, w, b })
    }

    /// Bidirectional LSTM; output row `t` is `[forward_t; backward_t]`.
    pub fn bilstm(&mut self, x: NodeId, params: &BiLstmParams) -> NodeId {
        let xv = self.value(x);
        let fwd = lstm::forward(self.params, &params.fwd, xv, false);
        let bwd = lstm::forward(self.params, &params.bwd, xv, true);
        let h = params.fwd.hidden;
        let mut out = Tensor::zeros(xv.rows, 2 * h);
        for t in 0..xv.rows {
            out.row_mut(t)[..h].copy_from_slice(fwd.h.row(t));
            out.row_mut(t)[h..].copy_from_slice(bwd.h.row(t));
        }
        self.push(
            out,
            Op::BiLstm {
                x,
                params: *params,
                caches: Box::new([fwd, bwd]),
            },
        )
    }

    /// Convolution over each token's character rows followed by max-pooling over positions.
    /// `segments[k] = (first_row, len)` with `len >= window`.
    pub fn char_cnn(
        &mut self,
        chars: NodeId,
        segments: &[(usize, usize)],
        w: ParamId,
        b: ParamId,
        window: usize,
    ) -> NodeId {
        let cv = self.value(chars);
        let wv = self.params.get(w);
        let bv = self.params.get(b);
        let dim = cv.cols;
        assert_eq!(wv.rows, window * dim, "char conv weight shape");
        let filters = wv.cols;
        let mut out = Tensor::zeros(segments.len(), filters);
        let mut argmax = vec![0; segments.len() * filters];
        let mut conv = vec![0.0; filters];
        for (k, &(first, len)) in segments.iter().enumerate() {
            assert!(len >= window, "character segment shorter than the window");
            let best = out.row_mut(k);
            best.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
            for p in first..=first + len - window {
                conv.copy_from_slice(&bv.data);
                let span = &cv.data[p * dim..(p + window) * dim];
                matmul_acc(span, &wv.data, &mut conv, 1, window * dim, filters);
                for f in 0..filters {
                    if conv[f] > best[f] {
                        best[f] = conv[f];
                        argmax[k * filters + f] = p;
                    }
                }
            }
        }
        self.push(
            out,
            Op::CharCnn {
                chars,
                w,
                b,
                window,
                argmax,
            },
        )
    }

    /// Column-wise max over all rows; ties keep the first row.
    pub fn col_max(&mut self, src: NodeId) -> NodeId {
        let s = self.value(src);
        let mut out = Tensor::from_vec(1, s.cols, s.row(0).to_vec());
        let mut argmax = vec![0; s.cols];
        for r in 1..s.rows {
            for (c, &x) in s.row(r).iter().enumerate() {
                if x > out.data[c] {
                    out.data[c] = x;
                    argmax[c] = r;
                }
            }
        }
        self.push(out, Op::ColMax { src, argmax })
    }

    /// Inverted dropout. A zero rate returns `src` unchanged.
    pub fn dropout<R: Rng>(&mut self, src: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate <= 0.0 {
            return src;
        }
        let keep = 1.0 - rate;
        let s = self.value(src);
        let mask: Vec<f64> = (0..s.data.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = s.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(s.rows, s.cols, data);
        self.push(out, Op::Mask { src, mask })
    }

    /// Mean over rows of `-ln(max(softmax(row)[target], eps))`, as a 1×1 node.
    pub fn softmax_nll(&mut self, logits: NodeId, targets: &[usize], eps: f64) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per row");
        let probs = softmax_rows(l);
        let n = targets.len().max(1) as f64;
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs.row(r)[y].max(eps).ln())
            .sum::<f64>()
            / n;
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SoftmaxNll {
                logits,
                targets: targets.to_vec(),
                probs,
                eps,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn scale(&mut self, src: NodeId, factor: f64) -> NodeId {
        let s = self.value(src);
        let data = s.data.iter().map(|x| x * factor).collect();
        let out = Tensor::from_vec(s.rows, s.cols, data);
        self.push(out, Op::Scale { src, factor })
    }

    /// Accumulates d(root)/d(param) into `grads`. `root` must be a 1×1 node.
    pub fn backward(&self, root: NodeId, grads: &mut Grads) {
        assert_eq!(self.value(root).data.len(), 1, "backward from a non-scalar");
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_op(&node.op, &node.value, &g, &mut adj, grads);
        }
    }

    fn acc<'a>(&self, adj: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
        let (r, c) = self.value(id).shape();
        adj[id.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backward_op(
        &self,
        op: &Op,
        value: &Tensor,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        grads: &mut Grads,
    ) {
        let params = self.params;
        match op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let cols = value.cols;
                if let Some(slot) = grads.slot(params, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), &mut slot[id * cols..(id + 1) * cols]);
                    }
                }
            }
            Op::Rows { src, ids } => {
                let a = self.acc(adj, *src);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, g.row(r), a.row_mut(id));
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let a = self.acc(adj, p);
                    let w = a.cols;
                    for r in 0..g.rows {
                        axpy(1.0, &g.row(r)[offset..offset + w], a.row_mut(r));
                    }
                    offset += w;
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = params.get(*w);
                let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                if let Some(slot) = grads.slot(params, *w) {
                    matmul_at_b_acc(&xv.data, &g.data, slot, m, k, n);
                }
                if let Some(slot) = grads.slot(params, *b) {
                    for r in 0..m {
                        axpy(1.0, g.row(r), slot);
                    }
                }
                let a = self.acc(adj, *x);
                matmul_a_bt_acc(&g.data, &wv.data, &mut a.data, m, n, k);
            }
            Op::BiLstm { x, params: p, caches } => {
                let xv = self.value(*x);
                let h = p.fwd.hidden;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let mut dh = Tensor::zeros(xv.rows, h);
                for (dir, lp) in [(0usize, &p.fwd), (1, &p.bwd)] {
                    for t in 0..xv.rows {
                        dh.row_mut(t).copy_from_slice(&g.row(t)[dir * h..(dir + 1) * h]);
                    }
                    lstm::backward(params, lp, xv, &caches[dir], &dh, &mut dx, grads);
                }
                self.acc(adj, *x).add_assign(&dx);
            }
            Op::CharCnn {
                chars,
                w,
                b,
                window,
                argmax,
            } => {
                let cv = self.value(*chars);
                let wv = params.get(*w);
                let dim = cv.cols;
                let filters = wv.cols;
                if let Some(slot) = grads.slot(params, *b) {
                    for k in 0..g.rows {
                        axpy(1.0, g.row(k), slot);
                    }
                }
                if let Some(slot) = grads.slot(params, *w) {
                    for k in 0..g.rows {
                        for f in 0..filters {
                            let gf = g.row(k)[f];
                            let p = argmax[k * filters + f];
                            let span = &cv.data[p * dim..(p + window) * dim];
                            for (q, &x) in span.iter().enumerate() {
                                slot[q * filters + f] += gf * x;
                            }
                        }
                    }
                }
                let a = self.acc(adj, *chars);
                for k in 0..g.rows {
                    for f in 0..filters {
                        let gf = g.row(k)[f];
                        let p = argmax[k * filters + f];
                        for q in 0..window * dim {
                            a.data[p * dim + q] += gf * wv.data[q * filters + f];
                        }
                    }
                }
            }
            Op::ColMax { src, argmax } => {
                let a = self.acc(adj, *src);
                let cols = a.cols;
                for (c, &r) in argmax.iter().enumerate() {
                    a.data[r * cols + c] += g.data[c];
                }
            }
            Op::Mask { src, mask } => {
                let a = self.acc(adj, *src);
                for ((ai, gi), m) in a.data.iter_mut().zip(&g.data).zip(mask) {
                    *ai += gi * m;
                }
            }
            Op::SoftmaxNll {
                logits,
                targets,
                probs,
                eps,
            } => {
                let upstream = g.scalar() / targets.len().max(1) as f64;
                let a = self.acc(adj, *logits);
                for (r, &y) in targets.iter().enumerate() {
                    let p = probs.row(r);
                    // the clamp is flat below eps
                    if p[y] <= *eps {
                        continue;
                    }
                    let row = a.row_mut(r);
                    for (k, pk) in p.iter().enumerate() {
                        let onehot = if k == y { 1.0 } else { 0.0 };
                        row[k] += upstream * (pk - onehot);
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc(adj, *a).add_assign(g);
                self.acc(adj, *b).add_assign(g);
            }
            Op::Scale { src, factor } => {
                let a = self.acc(adj, *src);
                axpy(*factor, &g.data, &mut a.data);
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}
