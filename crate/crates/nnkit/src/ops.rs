//! Differentiable tensor ops recorded on a [`Graph`].
//!
//! Shape errors are reported eagerly at record time. Every op here has a
//! closed-form backward; layer-level compositions live in [`crate::layers`].

use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::graph::{BackwardCtx, Graph, Var};
use crate::tensor::{strides, Tensor};

/// Every op name this module can record. The gradient-check suite asserts
/// that it exercises all of them.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "elu",
    "sum",
    "mean",
    "mul_bcast",
    "mean_axis",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "bmm",
    "softmax",
    "dense",
    "gru",
    "conv2d",
    "conv_transpose2d",
    "layer_norm",
];

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    let last = rank - 1;
    let (last_len, last_step) = (out_shape[last], step[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..last_len {
            out.push(data[off]);
            off += last_step;
        }
        // advance the odometer over all axes but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn unary(g: &mut Graph, op: &'static str, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
    let xv = g.value(x);
    let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect());
    g.custom(
        op,
        &[x],
        out,
        Box::new(move |c: &BackwardCtx| {
            let gx = c
                .inputs[0]
                .data()
                .iter()
                .zip(c.output.data())
                .zip(c.grad)
                .map(|((&x, &y), &gy)| gy * df(x, y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), data);
        Ok(self.custom(
            "add",
            &[a, b],
            out,
            Box::new(|c: &BackwardCtx| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape(), data);
        Ok(self.custom(
            "sub",
            &[a, b],
            out,
            Box::new(|c: &BackwardCtx| {
                vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|g| -g).collect())]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data);
        Ok(self.custom(
            "mul",
            &[a, b],
            out,
            Box::new(|c: &BackwardCtx| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                let gx = c.needs[0].then(|| c.grad.iter().zip(y).map(|(g, y)| g * y).collect());
                let gy = c.needs[1].then(|| c.grad.iter().zip(x).map(|(g, x)| g * x).collect());
                vec![gx, gy]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * k).collect());
        self.custom(
            "scale",
            &[x],
            out,
            Box::new(move |c: &BackwardCtx| vec![Some(c.grad.iter().map(|g| g * k).collect())]),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary(self, "sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary(self, "tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        unary(
            self,
            "elu",
            x,
            |v| if v > 0.0 { v } else { v.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.custom(
            "sum",
            &[x],
            Tensor::scalar(s),
            Box::new(|c: &BackwardCtx| vec![Some(vec![c.grad[0]; c.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.numel().max(1) as f64;
        let s = xv.data().iter().sum::<f64>() / n;
        self.custom(
            "mean",
            &[x],
            Tensor::scalar(s),
            Box::new(move |c: &BackwardCtx| vec![Some(vec![c.grad[0] / n; c.inputs[0].numel()])]),
        )
    }

    /// Multiplies `x` by the 1-D `s` broadcast along `axis`.
    pub fn mul_bcast(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        if axis >= xv.rank() || sv.rank() != 1 || sv.numel() != xv.shape()[axis] {
            return shape_err("mul_bcast", format!("x {:?}, s {:?}, axis {axis}", xv.shape(), sv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for a in 0..len {
                let k = sv.data()[a];
                let base = (o * len + a) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v *= k);
            }
        }
        let out = Tensor::new(xv.shape(), data);
        Ok(self.custom(
            "mul_bcast",
            &[x, s],
            out,
            Box::new(move |c: &BackwardCtx| {
                let (xd, sd) = (c.inputs[0].data(), c.inputs[1].data());
                let mut gx = c.needs[0].then(|| vec![0.0; xd.len()]);
                let mut gs = c.needs[1].then(|| vec![0.0; sd.len()]);
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        let gseg = &c.grad[base..base + inner];
                        if let Some(gx) = gx.as_mut() {
                            for (d, g) in gx[base..base + inner].iter_mut().zip(gseg) {
                                *d = g * sd[a];
                            }
                        }
                        if let Some(gs) = gs.as_mut() {
                            gs[a] += gseg.iter().zip(&xd[base..base + inner]).map(|(g, x)| g * x).sum::<f64>();
                        }
                    }
                }
                vec![gx, gs]
            }),
        ))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return shape_err("mean_axis", format!("axis {axis} for shape {:?}", xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        let inv = 1.0 / len.max(1) as f64;
        for o in 0..outer {
            for a in 0..len {
                let src = &xv.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
        Ok(self.custom(
            "mean_axis",
            &[x],
            Tensor::new(&shape, data),
            Box::new(move |c: &BackwardCtx| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let gseg = &c.grad[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        for (d, g) in gx[(o * len + a) * inner..(o * len + a + 1) * inner].iter_mut().zip(gseg) {
                            *d = g * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", xv.shape()));
        }
        let out = Tensor::new(shape, xv.data().to_vec());
        Ok(self.custom(
            "reshape",
            &[x],
            out,
            Box::new(|c: &BackwardCtx| vec![Some(c.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("perm {perm:?} for shape {:?}", xv.shape()));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.custom(
            "permute",
            &[x],
            Tensor::new(&shape, data),
            Box::new(move |c: &BackwardCtx| {
                let (g, _) = permute_data(c.grad, c.output.shape(), &inverse);
                vec![Some(g)]
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            let ok = s.len() == base.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        Ok(self.custom(
            "concat",
            xs,
            Tensor::new(&shape, data),
            Box::new(move |c: &BackwardCtx| {
                let mut out: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &l) in out.iter_mut().zip(&lens) {
                        buf.extend_from_slice(&c.grad[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return shape_err("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, xv.shape()));
        }
        let (outer, full, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[b..b + len * inner]);
        }
        Ok(self.custom(
            "narrow",
            &[x],
            Tensor::new(&shape, data),
            Box::new(move |c: &BackwardCtx| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let b = (o * full + start) * inner;
                    gx[b..b + len * inner].copy_from_slice(&c.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Batched matrix product on rank-3 inputs. With `ta`, `a` is stored as
    /// `[B, k, m]`; with `tb`, `b` is stored as `[B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return shape_err("bmm", format!("inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(m, k, n, &ad[i * m * k..], ta, &bd[i * k * n..], tb, &mut out[i * m * n..], 0.0);
            }
        }
        Ok(self.custom(
            "bmm",
            &[a, b],
            Tensor::new(&[batch, m, n], out),
            Box::new(move |c: &BackwardCtx| {
                let (ad, bd) = (c.inputs[0].data(), c.inputs[1].data());
                let g = c.grad;
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let (gi, bi, gai) = (&g[i * m * n..], &bd[i * k * n..], &mut ga[i * m * k..]);
                        if ta {
                            // dA^T[k×m] = B[k×n] · G^T
                            gemm(k, n, m, bi, tb, gi, true, gai, 0.0);
                        } else {
                            // dA[m×k] = G · B^T
                            gemm(m, n, k, gi, false, bi, !tb, gai, 0.0);
                        }
                    }
                    ga
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (gi, ai, gbi) = (&g[i * m * n..], &ad[i * m * k..], &mut gb[i * k * n..]);
                        if tb {
                            // dB^T[n×k] = G^T · A
                            gemm(n, m, k, gi, true, ai, ta, gbi, 0.0);
                        } else {
                            // dB[k×n] = A^T · G
                            gemm(k, m, n, ai, !ta, gi, false, gbi, 0.0);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(xv.shape(), data);
        self.custom(
            "softmax",
            &[x],
            out,
            Box::new(move |c: &BackwardCtx| {
                let y = c.output.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), gxr) in c.grad.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Affine map over the last axis: `x[.., d_in] · w[d_in, d_out] + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let din = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[0] != din || xs.is_empty() {
            return shape_err("dense", format!("x {xs:?}, w {ws:?}"));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return shape_err("dense", format!("bias {:?}, expected [{dout}]", self.value(b).shape()));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bd);
            }
        }
        gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.custom(
            "dense",
            &inputs,
            Tensor::new(&shape, out),
            Box::new(move |c: &BackwardCtx| {
                let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![0.0; rows * din];
                    gemm(rows, dout, din, g, false, wd, true, &mut gx, 0.0);
                    gx
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![0.0; din * dout];
                    gemm(din, rows, dout, xd, true, g, false, &mut gw, 0.0);
                    gw
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    let mut gb = vec![0.0; dout];
                    for r in g.chunks(dout) {
                        gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    res.push(Some(gb));
                }
                res
            }),
        ))
    }

    /// GRU over `x[B, T, d_in]` returning every hidden state `[B, T, h]`.
    ///
    /// Gate layout along the `3h` axis is (reset, update, candidate):
    /// `r = σ(x W_ir + b_ir + h W_hr + b_hr)`,
    /// `z = σ(x W_iz + b_iz + h W_hz + b_hz)`,
    /// `n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))`,
    /// `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn gru(&mut self, x: Var, h0: Option<Var>, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let wis = self.value(w_ih).shape().to_vec();
        let whs = self.value(w_hh).shape().to_vec();
        if xs.len() != 3 || wis.len() != 2 || whs.len() != 2 || wis[0] != xs[2] || !wis[1].is_multiple_of(3) {
            return shape_err("gru", format!("x {xs:?}, w_ih {wis:?}"));
        }
        let (batch, steps, din) = (xs[0], xs[1], xs[2]);
        let h = wis[1] / 3;
        if whs != [h, 3 * h] || self.value(b_ih).shape() != [3 * h] || self.value(b_hh).shape() != [3 * h] {
            return shape_err("gru", format!("w_hh {whs:?} for hidden {h}"));
        }
        if let Some(h0) = h0 {
            if self.value(h0).shape() != [batch, h] {
                return shape_err("gru", format!("h0 {:?}, expected [{batch}, {h}]", self.value(h0).shape()));
            }
        }
        if !self.value(x).is_finite() {
            return Err(crate::NnError::NonFinite("gru input".into()));
        }
        let h3 = 3 * h;
        // input projections for every step at once: [B*T, 3h]
        let mut gi = vec![0.0; batch * steps * h3];
        {
            let bi = self.value(b_ih).data();
            for r in gi.chunks_mut(h3) {
                r.copy_from_slice(bi);
            }
        }
        gemm(batch * steps, din, h3, self.value(x).data(), false, self.value(w_ih).data(), false, &mut gi, 1.0);

        let whd = self.value(w_hh).data().to_vec();
        let bhd = self.value(b_hh).data().to_vec();
        let mut hprev = match h0 {
            Some(v) => self.value(v).data().to_vec(),
            None => vec![0.0; batch * h],
        };
        // saved per step: r, z, n, (h W_hn + b_hn), and h_{t-1}
        let mut r_s = vec![0.0; batch * steps * h];
        let mut z_s = vec![0.0; batch * steps * h];
        let mut n_s = vec![0.0; batch * steps * h];
        let mut ghn_s = vec![0.0; batch * steps * h];
        let mut hp_s = vec![0.0; batch * steps * h];
        let mut out = vec![0.0; batch * steps * h];
        let mut gh = vec![0.0; batch * h3];
        for t in 0..steps {
            for r in gh.chunks_mut(h3) {
                r.copy_from_slice(&bhd);
            }
            gemm(batch, h, h3, &hprev, false, &whd, false, &mut gh, 1.0);
            for bi in 0..batch {
                let row = (bi * steps + t) * h;
                let gir = &gi[(bi * steps + t) * h3..(bi * steps + t + 1) * h3];
                let ghr = &gh[bi * h3..(bi + 1) * h3];
                for j in 0..h {
                    let r = sigmoid(gir[j] + ghr[j]);
                    let z = sigmoid(gir[h + j] + ghr[h + j]);
                    let n = (gir[2 * h + j] + r * ghr[2 * h + j]).tanh();
                    let hp = hprev[bi * h + j];
                    let hn = (1.0 - z) * n + z * hp;
                    r_s[row + j] = r;
                    z_s[row + j] = z;
                    n_s[row + j] = n;
                    ghn_s[row + j] = ghr[2 * h + j];
                    hp_s[row + j] = hp;
                    out[row + j] = hn;
                }
            }
            for bi in 0..batch {
                let row = (bi * steps + t) * h;
                hprev[bi * h..(bi + 1) * h].copy_from_slice(&out[row..row + h]);
            }
        }
        let mut inputs = vec![x, w_ih, w_hh, b_ih, b_hh];
        inputs.extend(h0);
        Ok(self.custom(
            "gru",
            &inputs,
            Tensor::new(&[batch, steps, h], out),
            Box::new(move |c: &BackwardCtx| {
                let xd = c.inputs[0].data();
                let wid = c.inputs[1].data();
                let g = c.grad;
                let mut dgi = vec![0.0; batch * steps * h3];
                let mut dgh_all = vec![0.0; batch * steps * h3];
                let mut dh = vec![0.0; batch * h];
                let mut dgh = vec![0.0; batch * h3];
                let mut dhp = vec![0.0; batch * h];
                for t in (0..steps).rev() {
                    for bi in 0..batch {
                        let row = (bi * steps + t) * h;
                        let gr = (bi * steps + t) * h3;
                        for j in 0..h {
                            let dht = dh[bi * h + j] + g[row + j];
                            let (r, z, n) = (r_s[row + j], z_s[row + j], n_s[row + j]);
                            let hp = hp_s[row + j];
                            let dn = dht * (1.0 - z);
                            let dz = dht * (hp - n);
                            dhp[bi * h + j] = dht * z;
                            let dan = dn * (1.0 - n * n);
                            let dr = dan * ghn_s[row + j];
                            let daz = dz * z * (1.0 - z);
                            let dar = dr * r * (1.0 - r);
                            dgi[gr + j] = dar;
                            dgi[gr + h + j] = daz;
                            dgi[gr + 2 * h + j] = dan;
                            dgh[bi * h3 + j] = dar;
                            dgh[bi * h3 + h + j] = daz;
                            dgh[bi * h3 + 2 * h + j] = dan * r;
                        }
                        dgh_all[gr..gr + h3].copy_from_slice(&dgh[bi * h3..(bi + 1) * h3]);
                    }
                    // dh_{t-1} = z ⊙ dh_t + dgh · W_hh^T
                    dh.copy_from_slice(&dhp);
                    gemm(batch, h3, h, &dgh, false, &whd, true, &mut dh, 1.0);
                }
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![0.0; batch * steps * din];
                    gemm(batch * steps, h3, din, &dgi, false, wid, true, &mut gx, 0.0);
                    gx
                });
                let gwi = c.needs[1].then(|| {
                    let mut gw = vec![0.0; din * h3];
                    gemm(din, batch * steps, h3, xd, true, &dgi, false, &mut gw, 0.0);
                    gw
                });
                let gwh = c.needs[2].then(|| {
                    let mut gw = vec![0.0; h * h3];
                    gemm(h, batch * steps, h3, &hp_s, true, &dgh_all, false, &mut gw, 0.0);
                    gw
                });
                let col_sum = |m: &[f64]| {
                    let mut s = vec![0.0; h3];
                    for r in m.chunks(h3) {
                        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    s
                };
                let gbi = c.needs[3].then(|| col_sum(&dgi));
                let gbh = c.needs[4].then(|| col_sum(&dgh_all));
                let mut res = vec![gx, gwi, gwh, gbi, gbh];
                if c.inputs.len() == 6 {
                    res.push(Some(dh));
                }
                res
            }),
        ))
    }

    /// 2-D cross-correlation of `x[C_in, H, W]` with `w[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || stride.0 == 0 || stride.1 == 0 {
            return shape_err("conv2d", format!("x {xs:?}, w {ws:?}"));
        }
        let geo = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geo.cout] {
                return shape_err("conv2d", format!("bias {:?}", self.value(b).shape()));
            }
        }
        let cols = im2col(self.value(x).data(), &geo);
        let (ho, wo) = (geo.ho, geo.wo);
        let kdim = geo.cin * geo.kh * geo.kw;
        let mut out = vec![0.0; geo.cout * ho * wo];
        if let Some(b) = b {
            for (o, &bv) in out.chunks_mut(ho * wo).zip(self.value(b).data()) {
                o.iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm(geo.cout, kdim, ho * wo, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.custom(
            "conv2d",
            &inputs,
            Tensor::new(&[geo.cout, ho, wo], out),
            Box::new(move |c: &BackwardCtx| {
                let (wd, g) = (c.inputs[1].data(), c.grad);
                let gx = c.needs[0].then(|| {
                    let mut dcols = vec![0.0; kdim * ho * wo];
                    gemm(kdim, geo.cout, ho * wo, wd, true, g, false, &mut dcols, 0.0);
                    col2im(&dcols, &geo)
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![0.0; geo.cout * kdim];
                    gemm(geo.cout, ho * wo, kdim, g, false, &cols, true, &mut gw, 0.0);
                    gw
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(Some(g.chunks(ho * wo).map(|r| r.iter().sum()).collect()));
                }
                res
            }),
        ))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`]) of
    /// `x[C_in, H, W]` with `w[C_in, C_out, kh, kw]`. Output size per axis is
    /// `(in − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || stride.0 == 0 || stride.1 == 0 {
            return shape_err("conv_transpose2d", format!("x {xs:?}, w {ws:?}"));
        }
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = ((h - 1) * stride.0 + kh).checked_sub(2 * pad.0);
        let wo = ((wdt - 1) * stride.1 + kw).checked_sub(2 * pad.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return shape_err("conv_transpose2d", "padding larger than output");
        };
        // geometry of the forward conv that this op is the adjoint of
        let geo = ConvGeom::new(cout, ho, wo, cin, kh, kw, stride, pad)?;
        if geo.ho != h || geo.wo != wdt {
            return shape_err("conv_transpose2d", "inconsistent stride/padding geometry");
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return shape_err("conv_transpose2d", format!("bias {:?}", self.value(b).shape()));
            }
        }
        let kdim = cout * kh * kw;
        // cols[kdim, H*W] = W^T[kdim, cin] · x[cin, H*W]
        let mut cols = vec![0.0; kdim * h * wdt];
        gemm(kdim, cin, h * wdt, self.value(w).data(), true, self.value(x).data(), false, &mut cols, 0.0);
        let mut out = col2im(&cols, &geo);
        if let Some(b) = b {
            for (o, &bv) in out.chunks_mut(ho * wo).zip(self.value(b).data()) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.custom(
            "conv_transpose2d",
            &inputs,
            Tensor::new(&[cout, ho, wo], out),
            Box::new(move |c: &BackwardCtx| {
                let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
                let gcols = im2col(g, &geo);
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![0.0; cin * h * wdt];
                    gemm(cin, kdim, h * wdt, wd, false, &gcols, false, &mut gx, 0.0);
                    gx
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![0.0; cin * kdim];
                    gemm(cin, h * wdt, kdim, xd, false, &gcols, true, &mut gw, 0.0);
                    gw
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(Some(g.chunks(ho * wo).map(|r| r.iter().sum()).collect()));
                }
                res
            }),
        ))
    }

    /// Normalises the last axis to zero mean / unit (population) variance,
    /// then applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d < 2 || self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return shape_err("layer_norm", format!("x {:?}, gamma {:?}", xv.shape(), self.value(gamma).shape()));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (xr, hr)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mu) * rs;
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, g), b) in row.iter_mut().zip(gd).zip(bd) {
                *o = *o * g + b;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.custom(
            "layer_norm",
            &[x, gamma, beta],
            Tensor::new(&shape, out),
            Box::new(move |c: &BackwardCtx| {
                let (gd, g) = (c.inputs[1].data(), c.grad);
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![0.0; rows * d];
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            gx[r * d + j] = rstd[r] * (dh - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                    gx
                });
                let mut ggam = vec![0.0; d];
                let mut gbet = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        ggam[j] += gr[j] * hr[j];
                        gbet[j] += gr[j];
                    }
                }
                vec![gx, Some(ggam), Some(gbet)]
            }),
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if kh > h + 2 * pad.0 || kw > w + 2 * pad.1 {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho: (h + 2 * pad.0 - kh) / stride.0 + 1,
            wo: (w + 2 * pad.1 - kw) / stride.1 + 1,
        })
    }
}

/// `[C_in·kh·kw, H_o·W_o]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * npos];
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * npos;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = (ci * g.h + iy as usize) * g.w;
                    let dst = row + oy * g.wo;
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[C_in, H, W]`.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * npos;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (ci * g.h + iy as usize) * g.w;
                    let src = row + oy * g.wo;
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
