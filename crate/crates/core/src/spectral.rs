//! Complex per-bin operations on `[C, N, F, 2]` tensors (re/im interleaved).

use nnkit::{BackwardCtx, Graph, Tensor, Var};
use num_complex::Complex64;

use crate::error::{domain, Error, Result};
use crate::stft::Spectrogram;

pub const OP_NAMES: &[&str] = &["corr_features", "covariance", "apply_crf", "apply_beamformer"];

/// Tap geometry of a complex ratio filter: `(2K+1) × (2L+1)` taps over
/// (time, frequency) neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CrfGeometry {
    pub k: usize,
    pub l: usize,
}

impl Default for CrfGeometry {
    fn default() -> Self {
        Self { k: 1, l: 0 }
    }
}

impl CrfGeometry {
    pub fn taps(&self) -> usize {
        (2 * self.k + 1) * (2 * self.l + 1)
    }

    /// Tap index of offset `(τ1, τ2)`.
    pub fn tap(&self, t1: isize, t2: isize) -> usize {
        ((t1 + self.k as isize) as usize) * (2 * self.l + 1) + (t2 + self.l as isize) as usize
    }

    pub fn center(&self) -> usize {
        self.tap(0, 0)
    }

    fn offsets(&self) -> Vec<(isize, isize)> {
        let (k, l) = (self.k as isize, self.l as isize);
        (-k..=k).flat_map(|a| (-l..=l).map(move |b| (a, b))).collect()
    }
}

fn spec_dims(g: &Graph, x: Var, op: &str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [c, n, f, 2] => Ok((c, n, f)),
        ref s => Err(Error::Shape(format!("{op}: expected [C, N, F, 2], got {s:?}"))),
    }
}

/// Number of real features per bin for the upper-triangle layout.
pub fn corr_feature_len(channels: usize) -> usize {
    channels * channels
}

#[derive(Clone, Copy)]
enum Layout {
    /// Diagonal as |Y|², strict upper triangle as (re, im).
    Upper,
    /// Every entry as (re, im).
    Full,
}

fn pairs(c: usize, layout: Layout) -> Vec<(usize, usize)> {
    match layout {
        Layout::Upper => (0..c).flat_map(|a| (a..c).map(move |b| (a, b))).collect(),
        Layout::Full => (0..c).flat_map(|a| (0..c).map(move |b| (a, b))).collect(),
    }
}

fn outer_op(g: &mut Graph, x: Var, layout: Layout, op: &'static str) -> Result<Var> {
    let (c, n, f) = spec_dims(g, x, op)?;
    let pr = pairs(c, layout);
    let width = match layout {
        Layout::Upper => c * c,
        Layout::Full => 2 * c * c,
    };
    let xd = g.value(x).data();
    let at = move |d: &[f64], ch: usize, t: usize, k: usize| {
        let i = ((ch * n + t) * f + k) * 2;
        (d[i], d[i + 1])
    };
    let mut out = Vec::with_capacity(n * f * width);
    for t in 0..n {
        for k in 0..f {
            for &(a, b) in &pr {
                let (p, q) = at(xd, a, t, k);
                if a == b && matches!(layout, Layout::Upper) {
                    out.push(p * p + q * q);
                } else {
                    let (r, s) = at(xd, b, t, k);
                    out.push(p * r + q * s);
                    out.push(q * r - p * s);
                }
            }
        }
    }
    Ok(g.custom(
        op,
        &[x],
        Tensor::new(&[n, f, width], out),
        Box::new(move |ctx: &BackwardCtx| {
            let xd = ctx.inputs[0].data();
            let mut gx = vec![0.0; xd.len()];
            let idx = |ch: usize, t: usize, k: usize| ((ch * n + t) * f + k) * 2;
            let mut o = 0;
            for t in 0..n {
                for k in 0..f {
                    for &(a, b) in &pr {
                        let ia = idx(a, t, k);
                        let (p, q) = (xd[ia], xd[ia + 1]);
                        if a == b && matches!(layout, Layout::Upper) {
                            let gg = ctx.grad[o];
                            gx[ia] += 2.0 * p * gg;
                            gx[ia + 1] += 2.0 * q * gg;
                            o += 1;
                        } else {
                            let ib = idx(b, t, k);
                            let (r, s) = (xd[ib], xd[ib + 1]);
                            let (gr, gi) = (ctx.grad[o], ctx.grad[o + 1]);
                            gx[ia] += gr * r - gi * s;
                            gx[ia + 1] += gr * s + gi * r;
                            gx[ib] += gr * p + gi * q;
                            gx[ib + 1] += gr * q - gi * p;
                            o += 2;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Correlation features `R(n,f) = Y(n,f) Y(n,f)^H` flattened per bin:
/// `[C, N, F, 2]` → `[N, F, C²]`. Diagonal entries are `|Y_a|²`;
/// each strict-upper entry contributes its real then imaginary part.
pub fn corr_features(g: &mut Graph, y: Var) -> Result<Var> {
    let (c, _, _) = spec_dims(g, y, "corr_features")?;
    if c < 2 {
        return domain("correlation features need at least one mixture channel plus the far end");
    }
    outer_op(g, y, Layout::Upper, "corr_features")
}

/// Frame-wise covariance `Φ(n,f) = S(n,f) S(n,f)^H` as `[N, F, 2C²]`,
/// row-major over `(a, b)` with re/im interleaved.
pub fn covariance(g: &mut Graph, s: Var) -> Result<Var> {
    outer_op(g, s, Layout::Full, "covariance")
}

/// Channel-wise complex ratio filtering:
/// `out(c,n,f) = Σ_{τ1,τ2} crf(c,n,f,τ) · S(c, n+τ1, f+τ2)`, zero outside
/// the grid. `s` is `[C, N, F, 2]`, `crf` is `[C, N, F, taps, 2]`.
pub fn apply_crf(g: &mut Graph, s: Var, crf: Var, geom: CrfGeometry) -> Result<Var> {
    let (c, n, f) = spec_dims(g, s, "apply_crf")?;
    let taps = geom.taps();
    if g.shape(crf) != [c, n, f, taps, 2] {
        return Err(Error::Shape(format!(
            "apply_crf: filter {:?} for signal [{c}, {n}, {f}, 2] with {taps} taps",
            g.shape(crf)
        )));
    }
    let offs = geom.offsets();
    let neighbours = move |t: usize, k: usize| {
        offs.clone().into_iter().enumerate().filter_map(move |(tap, (a, b))| {
            let (tt, kk) = (t as isize + a, k as isize + b);
            (tt >= 0 && (tt as usize) < n && kk >= 0 && (kk as usize) < f).then_some((tap, tt as usize, kk as usize))
        })
    };
    let sd = g.value(s).data();
    let hd = g.value(crf).data();
    let mut out = vec![0.0; c * n * f * 2];
    for ch in 0..c {
        for t in 0..n {
            for k in 0..f {
                let o = ((ch * n + t) * f + k) * 2;
                let (mut re, mut im) = (0.0, 0.0);
                for (tap, tt, kk) in neighbours(t, k) {
                    let hi = (o / 2 * taps + tap) * 2;
                    let si = ((ch * n + tt) * f + kk) * 2;
                    let (a, b, x, y) = (hd[hi], hd[hi + 1], sd[si], sd[si + 1]);
                    re += a * x - b * y;
                    im += a * y + b * x;
                }
                out[o] = re;
                out[o + 1] = im;
            }
        }
    }
    Ok(g.custom(
        "apply_crf",
        &[s, crf],
        Tensor::new(&[c, n, f, 2], out),
        Box::new(move |ctx: &BackwardCtx| {
            let (sd, hd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gs = ctx.needs[0].then(|| vec![0.0; sd.len()]);
            let mut gh = ctx.needs[1].then(|| vec![0.0; hd.len()]);
            for ch in 0..c {
                for t in 0..n {
                    for k in 0..f {
                        let o = ((ch * n + t) * f + k) * 2;
                        let (gr, gi) = (gd[o], gd[o + 1]);
                        for (tap, tt, kk) in neighbours(t, k) {
                            let hi = (o / 2 * taps + tap) * 2;
                            let si = ((ch * n + tt) * f + kk) * 2;
                            let (a, b, x, y) = (hd[hi], hd[hi + 1], sd[si], sd[si + 1]);
                            if let Some(gh) = gh.as_mut() {
                                gh[hi] += gr * x + gi * y;
                                gh[hi + 1] += gi * x - gr * y;
                            }
                            if let Some(gs) = gs.as_mut() {
                                gs[si] += gr * a + gi * b;
                                gs[si + 1] += gi * a - gr * b;
                            }
                        }
                    }
                }
            }
            vec![gs, gh]
        }),
    ))
}

/// `Ŝ(n,f) = Σ_c conj(w_c(n,f)) · Y_c(n,f)`: `[C, N, F, 2]` × 2 → `[1, N, F, 2]`.
pub fn apply_beamformer(g: &mut Graph, w: Var, y: Var) -> Result<Var> {
    let (c, n, f) = spec_dims(g, y, "apply_beamformer")?;
    if g.shape(w) != g.shape(y) {
        return Err(Error::Shape(format!(
            "apply_beamformer: weights {:?} vs signal {:?}",
            g.shape(w),
            g.shape(y)
        )));
    }
    let per = n * f;
    let (wd, yd) = (g.value(w).data(), g.value(y).data());
    let mut out = vec![0.0; per * 2];
    for ch in 0..c {
        for i in 0..per {
            let j = (ch * per + i) * 2;
            let (a, b, x, v) = (wd[j], wd[j + 1], yd[j], yd[j + 1]);
            out[2 * i] += a * x + b * v;
            out[2 * i + 1] += a * v - b * x;
        }
    }
    Ok(g.custom(
        "apply_beamformer",
        &[w, y],
        Tensor::new(&[1, n, f, 2], out),
        Box::new(move |ctx: &BackwardCtx| {
            let (wd, yd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gw = ctx.needs[0].then(|| vec![0.0; wd.len()]);
            let mut gy = ctx.needs[1].then(|| vec![0.0; yd.len()]);
            for ch in 0..c {
                for i in 0..per {
                    let j = (ch * per + i) * 2;
                    let (gr, gi) = (gd[2 * i], gd[2 * i + 1]);
                    let (a, b, x, v) = (wd[j], wd[j + 1], yd[j], yd[j + 1]);
                    if let Some(gw) = gw.as_mut() {
                        gw[j] += gr * x + gi * v;
                        gw[j + 1] += gr * v - gi * x;
                    }
                    if let Some(gy) = gy.as_mut() {
                        gy[j] += gr * a - gi * b;
                        gy[j + 1] += gr * b + gi * a;
                    }
                }
            }
            vec![gw, gy]
        }),
    ))
}

/// Full complex `C × C` matrix `Y Y^H` at one bin (row-major).
pub fn outer_product(spec: &Spectrogram, n: usize, f: usize) -> Vec<Complex64> {
    let c = spec.channels;
    let v: Vec<Complex64> = (0..c).map(|ch| spec.get(ch, n, f)).collect();
    (0..c).flat_map(|a| (0..c).map(move |b| (a, b))).map(|(a, b)| v[a] * v[b].conj()).collect()
}

/// Unpacks one bin of [`covariance`] output into a complex matrix.
pub fn unpack_full(features: &[f64], c: usize) -> Vec<Complex64> {
    (0..c * c).map(|i| Complex64::new(features[2 * i], features[2 * i + 1])).collect()
}

/// Eigenvalues of a Hermitian matrix by cyclic complex Jacobi rotations.
pub fn hermitian_eigenvalues(m: &[Complex64], c: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..c)
            .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * c + j].norm_sqr())
            .sum();
        let total: f64 = a.iter().map(|v| v.norm_sqr()).sum();
        if off <= 1e-30 * total.max(1e-300) {
            break;
        }
        for p in 0..c {
            for q in p + 1..c {
                let apq = a[p * c + q];
                if apq.norm() == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * c + p].re, a[q * c + q].re);
                // Rotate in the (p, q) plane: phase-align then real Jacobi.
                let phase = apq / apq.norm();
                let theta = 0.5 * (2.0 * apq.norm()).atan2(aqq - app);
                let (cs, sn) = (theta.cos(), theta.sin());
                // Columns: col_p' = cs·col_p − sn·conj(phase)·col_q ; col_q' = sn·phase·col_p + cs·col_q
                for r in 0..c {
                    let (xp, xq) = (a[r * c + p], a[r * c + q]);
                    a[r * c + p] = xp * cs - xq * sn * phase.conj();
                    a[r * c + q] = xp * sn * phase + xq * cs;
                }
                for col in 0..c {
                    let (xp, xq) = (a[p * c + col], a[q * c + col]);
                    a[p * c + col] = xp * cs - xq * sn * phase;
                    a[q * c + col] = xp * sn * phase.conj() + xq * cs;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..c).map(|i| a[i * c + i].re).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}
