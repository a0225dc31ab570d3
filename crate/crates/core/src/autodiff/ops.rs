use std::sync::Arc;

use rand::Rng;

use super::tape::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::tensor::Tensor;

/// Per-feature batch statistics from a train-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Dot product with four running sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    /// `x · w + b` for `x: [N × d_in]`, `w: [d_in × d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, d_in) = xt.dims2();
        if wt.shape().len() != 2 || wt.shape()[0] != d_in || xt.shape().len() != 2 {
            return Err(shape_err("linear", xt, wt));
        }
        let d_out = wt.shape()[1];
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != d_out {
                return Err(shape_err("linear bias", wt, bt));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bt.data());
            }
        }
        let (xd, wd) = (xt.data(), wt.data());
        for i in 0..n {
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            for k in 0..d_in {
                let a = xd[i * d_in + k];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wd[k * d_out..(k + 1) * d_out];
                for (o, w) in orow.iter_mut().zip(wrow) {
                    *o += a * w;
                }
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        self.push(value, Op::Linear { x, w, b }, "linear")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Relu { x }, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("add", at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b }, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("mul", at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, "mul")
    }

    /// Adds `b: [d]` to every row of `x: [N × d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        let (_, d) = xt.dims2();
        if bt.len() != d {
            return Err(shape_err("add_bias", xt, bt));
        }
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, bt.data());
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::AddBias { x, b }, "add_bias")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Batch norm over the row axis using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xt = self.value(x);
        let (n, d) = xt.dims2();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.len() != d || bt.len() != d {
            return Err(shape_err("batch_norm", xt, gt));
        }
        let xd = xt.data();
        let mut mean = vec![0.0; d];
        for row in xd.chunks(d) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in xd.chunks(d) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = normalize(xd, d, &mean, &inv_std, gt.data(), bt.data());
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm_train",
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (_, d) = xt.dims2();
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.len() != d || bt.len() != d || running_mean.len() != d || running_var.len() != d {
            return Err(shape_err("batch_norm", xt, gt));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = normalize(xt.data(), d, running_mean, &inv_std, gt.data(), bt.data());
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm_eval",
        )
    }

    /// Inverted dropout. Survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let xt = self.value(x);
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xt.len())
            .map(|_| if p > 0.0 && rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, c) = lt.dims2();
        if targets.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: lt.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some((index, &label)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let probs = softmax_rows(lt.data(), c);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lt.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
        }
        loss /= n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean over incoming edges of `Θ_e · X_src(e)`, with `theta: [E × d_out·d_in]`
    /// holding one row-major `d_out × d_in` matrix per edge.
    pub fn edge_aggregate(&mut self, theta: Var, x: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let (tt, xt) = (self.value(theta), self.value(x));
        let (n, d_in) = xt.dims2();
        let (e, width) = tt.dims2();
        check_adjacency(adj, n, e)?;
        if width % d_in != 0 {
            return Err(shape_err("edge_aggregate", tt, xt));
        }
        let d_out = width / d_in;
        let (td, xd) = (tt.data(), xt.data());
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            let range = adj.edge_range(i);
            let inv_deg = 1.0 / range.len() as f64;
            for eid in range {
                let xj = &xd[adj.sources[eid] * d_in..][..d_in];
                let th = &td[eid * width..][..width];
                for (o, trow) in orow.iter_mut().zip(th.chunks(d_in)) {
                    *o += dot(trow, xj) * inv_deg;
                }
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        self.push(
            value,
            Op::EdgeAggregate {
                theta,
                x,
                adj: Arc::clone(adj),
                d_in,
                d_out,
            },
            "edge_aggregate",
        )
    }

    /// Same result as `edge_aggregate(linear(hidden, w_last, b_last), x)` without
    /// materialising one weight matrix per edge.
    ///
    /// With `Θ_e = Σ_m h_e[m]·W_m + B`, the message `Θ_e·X_j` equals
    /// `Σ_m h_e[m]·(W_m·X_j) + B·X_j`, so the products `W_m·X_j` are computed
    /// once per source node and each edge only mixes them.
    pub fn factored_edge_conv(
        &mut self,
        hidden: Var,
        w_last: Var,
        b_last: Var,
        x: Var,
        adj: &Arc<Adjacency>,
        d_out: usize,
    ) -> Result<Var> {
        let (ht, wt, bt, xt) = (
            self.value(hidden),
            self.value(w_last),
            self.value(b_last),
            self.value(x),
        );
        let (n, d_in) = xt.dims2();
        let (e, m) = ht.dims2();
        check_adjacency(adj, n, e)?;
        let width = d_out * d_in;
        if wt.shape() != [m, width] || bt.len() != width {
            return Err(shape_err("factored_edge_conv", ht, wt));
        }
        let basis = m + 1;
        let responses = basis_responses(wt.data(), bt.data(), xt.data(), n, m, d_in, d_out);
        let hd = ht.data();
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            let range = adj.edge_range(i);
            let inv_deg = 1.0 / range.len() as f64;
            for eid in range {
                let resp = &responses[adj.sources[eid] * basis * d_out..][..basis * d_out];
                let h = &hd[eid * m..][..m];
                for (k, r) in resp.chunks(d_out).enumerate() {
                    let coef = if k < m { h[k] } else { 1.0 } * inv_deg;
                    if coef == 0.0 {
                        continue;
                    }
                    for (o, v) in orow.iter_mut().zip(r) {
                        *o += coef * v;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        self.push(
            value,
            Op::FactoredEdgeConv {
                hidden,
                w_last,
                b_last,
                x,
                adj: Arc::clone(adj),
                d_in,
                d_out,
                responses,
            },
            "factored_edge_conv",
        )
    }

    /// Per-segment elementwise maximum. `assignment[i]` is the segment of
    /// row `i`; ties keep the lowest row index.
    pub fn segment_max(&mut self, x: Var, assignment: &[usize], segments: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = xt.dims2();
        check_assignment(assignment, n, segments)?;
        let mut out = vec![f64::NEG_INFINITY; segments * d];
        let mut argmax = vec![usize::MAX; segments * d];
        for (i, &s) in assignment.iter().enumerate() {
            for f in 0..d {
                let v = xt.data()[i * d + f];
                let slot = s * d + f;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = i;
                }
            }
        }
        let value = Tensor::new(vec![segments, d], out)?;
        self.push(
            value,
            Op::SegmentMax {
                x,
                argmax,
                cols: d,
            },
            "segment_max",
        )
    }

    /// Per-segment mean of rows.
    pub fn segment_mean(
        &mut self,
        x: Var,
        assignment: &Arc<Vec<usize>>,
        segments: usize,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = xt.dims2();
        check_assignment(assignment, n, segments)?;
        let mut counts = vec![0usize; segments];
        let mut out = vec![0.0; segments * d];
        for (i, &s) in assignment.iter().enumerate() {
            counts[s] += 1;
            add_into(&mut out[s * d..(s + 1) * d], xt.row(i));
        }
        for (s, row) in out.chunks_mut(d).enumerate() {
            let c = counts[s] as f64;
            row.iter_mut().for_each(|v| *v /= c);
        }
        let value = Tensor::new(vec![segments, d], out)?;
        self.push(
            value,
            Op::SegmentMean {
                x,
                assignment: Arc::clone(assignment),
                counts,
            },
            "segment_mean",
        )
    }

    pub(crate) fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, d_in) = xt.dims2();
                let d_out = wt.shape()[1];
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        let grow = &g[i * d_out..(i + 1) * d_out];
                        for k in 0..d_in {
                            let wrow = &wt.data()[k * d_out..(k + 1) * d_out];
                            gx[i * d_in + k] += dot(grow, wrow);
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..n {
                        let grow = &g[i * d_out..(i + 1) * d_out];
                        for k in 0..d_in {
                            let a = xt.data()[i * d_in + k];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, gv) in gw[k * d_out..(k + 1) * d_out].iter_mut().zip(grow) {
                                *o += a * gv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for grow in g.chunks(d_out) {
                            add_into(gb, grow);
                        }
                    });
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, &v), gv) in gx.iter_mut().zip(xd).zip(g) {
                        if v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddBias { x, b } => {
                let d = self.value(*b).len();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Sum { x } => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let n = xhat.len() / d;
                let mut sum_dy = vec![0.0; d];
                let mut sum_dy_xhat = vec![0.0; d];
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for f in 0..d {
                        sum_dy[f] += grow[f];
                        sum_dy_xhat[f] += grow[f] * hrow[f];
                    }
                }
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for ((gxrow, grow), hrow) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)) {
                        for f in 0..d {
                            gxrow[f] += gam[f] * inv_std[f] / nf
                                * (nf * grow[f] - sum_dy[f] - hrow[f] * sum_dy_xhat[f]);
                        }
                    }
                });
                acc(*gamma, &mut |gg| add_into(gg, &sum_dy_xhat));
                acc(*beta, &mut |gb| add_into(gb, &sum_dy));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                acc(*x, &mut |gx| {
                    for (gxrow, grow) in gx.chunks_mut(d).zip(g.chunks(d)) {
                        for f in 0..d {
                            gxrow[f] += grow[f] * gam[f] * inv_std[f];
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for f in 0..d {
                            gg[f] += grow[f] * hrow[f];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| {
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            gl[i * c + k] += scale * (probs[i * c + k] - onehot);
                        }
                    }
                });
            }
            Op::EdgeAggregate {
                theta,
                x,
                adj,
                d_in,
                d_out,
            } => {
                let (d_in, d_out) = (*d_in, *d_out);
                let width = d_in * d_out;
                let (td, xd) = (self.value(*theta).data(), self.value(*x).data());
                let n = adj.num_nodes();
                acc(*theta, &mut |gt| {
                    for i in 0..n {
                        let range = adj.edge_range(i);
                        let inv_deg = 1.0 / range.len() as f64;
                        let gi = &g[i * d_out..(i + 1) * d_out];
                        for eid in range {
                            let xj = &xd[adj.sources[eid] * d_in..][..d_in];
                            let gth = &mut gt[eid * width..][..width];
                            for (o, row) in gth.chunks_mut(d_in).enumerate() {
                                let go = gi[o] * inv_deg;
                                for (r, xv) in row.iter_mut().zip(xj) {
                                    *r += go * xv;
                                }
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        let range = adj.edge_range(i);
                        let inv_deg = 1.0 / range.len() as f64;
                        let gi = &g[i * d_out..(i + 1) * d_out];
                        for eid in range {
                            let j = adj.sources[eid];
                            let th = &td[eid * width..][..width];
                            let gxj = &mut gx[j * d_in..(j + 1) * d_in];
                            for (o, row) in th.chunks(d_in).enumerate() {
                                let go = gi[o] * inv_deg;
                                for (r, tv) in gxj.iter_mut().zip(row) {
                                    *r += go * tv;
                                }
                            }
                        }
                    }
                });
            }
            Op::FactoredEdgeConv {
                hidden,
                w_last,
                b_last,
                x,
                adj,
                d_in,
                d_out,
                responses,
            } => {
                let (d_in, d_out) = (*d_in, *d_out);
                let hd = self.value(*hidden).data();
                let (e, m) = self.value(*hidden).dims2();
                let basis = m + 1;
                let n = adj.num_nodes();
                // Edge-scaled upstream gradient g_i / deg(i), per edge.
                let mut g_edge = vec![0.0; e * d_out];
                for i in 0..n {
                    let range = adj.edge_range(i);
                    let inv_deg = 1.0 / range.len() as f64;
                    for eid in range {
                        for o in 0..d_out {
                            g_edge[eid * d_out + o] = g[i * d_out + o] * inv_deg;
                        }
                    }
                }
                acc(*hidden, &mut |gh| {
                    for eid in 0..e {
                        let j = adj.sources[eid];
                        let ge = &g_edge[eid * d_out..(eid + 1) * d_out];
                        let resp = &responses[j * basis * d_out..];
                        for k in 0..m {
                            let r = &resp[k * d_out..(k + 1) * d_out];
                            gh[eid * m + k] += dot(ge, r);
                        }
                    }
                });
                // Per source node: z_j[k] = Σ_{e from j} coef_k(e) · g_e.
                let mut z = vec![0.0; n * basis * d_out];
                for eid in 0..e {
                    let j = adj.sources[eid];
                    let ge = &g_edge[eid * d_out..(eid + 1) * d_out];
                    let zj = &mut z[j * basis * d_out..(j + 1) * basis * d_out];
                    for (k, zk) in zj.chunks_mut(d_out).enumerate() {
                        let coef = if k < m { hd[eid * m + k] } else { 1.0 };
                        if coef == 0.0 {
                            continue;
                        }
                        for (zv, gv) in zk.iter_mut().zip(ge) {
                            *zv += coef * gv;
                        }
                    }
                }
                let xd = self.value(*x).data();
                let width = d_out * d_in;
                // dW_k[o][c] = Σ_j z_j[k][o] · X_j[c]; the bias basis is k = m.
                let basis_grad = |k: usize, out: &mut [f64]| {
                    for j in 0..n {
                        let zk = &z[(j * basis + k) * d_out..][..d_out];
                        let xj = &xd[j * d_in..(j + 1) * d_in];
                        for (o, &zv) in zk.iter().enumerate() {
                            if zv == 0.0 {
                                continue;
                            }
                            for (dst, xv) in out[o * d_in..(o + 1) * d_in].iter_mut().zip(xj) {
                                *dst += zv * xv;
                            }
                        }
                    }
                };
                acc(*w_last, &mut |gw| {
                    for k in 0..m {
                        basis_grad(k, &mut gw[k * width..(k + 1) * width]);
                    }
                });
                acc(*b_last, &mut |gb| basis_grad(m, gb));
                let wd = self.value(*w_last).data();
                let bd = self.value(*b_last).data();
                acc(*x, &mut |gx| {
                    for k in 0..basis {
                        let mat = if k < m { &wd[k * width..(k + 1) * width] } else { bd };
                        for (o, wrow) in mat.chunks(d_in).enumerate() {
                            for j in 0..n {
                                let zv = z[(j * basis + k) * d_out + o];
                                if zv == 0.0 {
                                    continue;
                                }
                                for (dst, wv) in gx[j * d_in..(j + 1) * d_in].iter_mut().zip(wrow) {
                                    *dst += zv * wv;
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax, cols } => {
                let d = *cols;
                acc(*x, &mut |gx| {
                    for (slot, &src) in argmax.iter().enumerate() {
                        gx[src * d + slot % d] += g[slot];
                    }
                });
            }
            Op::SegmentMean {
                x,
                assignment,
                counts,
            } => {
                let (_, d) = self.value(*x).dims2();
                acc(*x, &mut |gx| {
                    for (i, &s) in assignment.iter().enumerate() {
                        let c = counts[s] as f64;
                        for f in 0..d {
                            gx[i * d + f] += g[s * d + f] / c;
                        }
                    }
                });
            }
        }
    }
}

fn normalize(
    xd: &[f64],
    d: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(xd.len());
    let mut xhat = Vec::with_capacity(xd.len());
    for row in xd.chunks(d) {
        for f in 0..d {
            let h = (row[f] - mean[f]) * inv_std[f];
            xhat.push(h);
            out.push(gamma[f] * h + beta[f]);
        }
    }
    (out, xhat)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|v| v / s));
    }
    out
}

/// `W_k · X_j` for every source node `j` and basis `k` (the last basis is the bias matrix).
fn basis_responses(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    n: usize,
    m: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let basis = m + 1;
    let width = d_out * d_in;
    let mut out = vec![0.0; n * basis * d_out];
    // Each weight row is read once and applied to every node while hot.
    for k in 0..basis {
        let mat = if k < m { &w[k * width..(k + 1) * width] } else { b };
        for (o, row) in mat.chunks(d_in).enumerate() {
            for j in 0..n {
                out[(j * basis + k) * d_out + o] = dot(row, &x[j * d_in..(j + 1) * d_in]);
            }
        }
    }
    out
}

fn check_adjacency(adj: &Adjacency, nodes: usize, edges: usize) -> Result<()> {
    if adj.num_nodes() != nodes || adj.num_edges() != edges {
        return Err(Error::Shape {
            op: "graph aggregation",
            left: vec![adj.num_nodes(), adj.num_edges()],
            right: vec![nodes, edges],
        });
    }
    if let Some(i) = (0..nodes).find(|&i| adj.in_degree(i) == 0) {
        return Err(Error::Structure(format!("node {i} has no incoming edge")));
    }
    Ok(())
}

fn check_assignment(assignment: &[usize], rows: usize, segments: usize) -> Result<()> {
    if assignment.len() != rows {
        return Err(Error::Shape {
            op: "segment",
            left: vec![assignment.len()],
            right: vec![rows],
        });
    }
    let mut seen = vec![false; segments];
    for (i, &s) in assignment.iter().enumerate() {
        if s >= segments {
            return Err(Error::Data {
                index: i,
                reason: format!("segment {s} >= {segments}"),
            });
        }
        seen[s] = true;
    }
    if let Some(s) = seen.iter().position(|&v| !v) {
        return Err(Error::Structure(format!("segment {s} is empty")));
    }
    Ok(())
}
