//! Short-time Fourier analysis/synthesis and its differentiable graph ops.
//!
//! Spectra are stored as interleaved re/im reals shaped `[C, N, F, 2]`,
//! the same layout the graph ops use, so a [`Spectrogram`] converts to a
//! tensor without copying element order.

use std::f64::consts::PI;
use std::sync::Arc;

use nnkit::{BackwardCtx, Graph, Tensor, Var};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{domain, Error, Result};

/// Window-sum values below this are clamped in synthesis. Only the first
/// and last few samples of a signal ever fall under it.
pub const NORM_FLOOR: f64 = 0.1;

pub const OP_NAMES: &[&str] = &["stft", "istft"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            win_length: 512,
            hop: 256,
            sample_rate: 16000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win_length == 0 || !self.win_length.is_multiple_of(self.hop) {
            return domain(format!("hop {} must divide win_length {}", self.hop, self.win_length));
        }
        if self.win_length > self.fft_size || !self.fft_size.is_multiple_of(2) {
            return domain(format!(
                "need even fft_size >= win_length, got {}/{}",
                self.fft_size, self.win_length
            ));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `1 + floor((T − win) / hop)`.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.win_length {
            return domain(format!("clip of {len} samples shorter than window {}", self.win_length));
        }
        Ok(1 + (len - self.win_length) / self.hop)
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let l = self.win_length as f64;
        (0..self.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / l).cos())
            .collect()
    }

    /// `Σ w²` of the analysis window.
    pub fn window_energy(&self) -> f64 {
        self.window().iter().map(|w| w * w).sum()
    }
}

/// Complex `[C, N, F]` spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        Self {
            channels,
            frames,
            bins,
            data: vec![0.0; channels * frames * bins * 2],
        }
    }

    /// From interleaved re/im data.
    pub fn from_interleaved(channels: usize, frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * frames * bins * 2 {
            return Err(Error::Shape(format!(
                "{} values for spectrogram [{channels}, {frames}, {bins}]",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            frames,
            bins,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, n, f, 2] => Self::from_interleaved(c, n, f, t.data().to_vec()),
            s => Err(Error::Shape(format!("expected [C, N, F, 2], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape4(), self.data.clone())
    }

    pub fn shape4(&self) -> [usize; 4] {
        [self.channels, self.frames, self.bins, 2]
    }

    fn idx(&self, c: usize, n: usize, f: usize) -> usize {
        ((c * self.frames + n) * self.bins + f) * 2
    }

    pub fn get(&self, c: usize, n: usize, f: usize) -> Complex64 {
        let i = self.idx(c, n, f);
        Complex64::new(self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, c: usize, n: usize, f: usize, v: Complex64) {
        let i = self.idx(c, n, f);
        self.data[i] = v.re;
        self.data[i + 1] = v.im;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One channel as a single-channel spectrogram.
    pub fn channel(&self, c: usize) -> Spectrogram {
        let len = self.frames * self.bins * 2;
        Spectrogram {
            channels: 1,
            frames: self.frames,
            bins: self.bins,
            data: self.data[c * len..(c + 1) * len].to_vec(),
        }
    }

    /// Channel-wise concatenation.
    pub fn stack(parts: &[&Spectrogram]) -> Result<Spectrogram> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.frames, p.bins) != (first.frames, first.bins) {
                return Err(Error::Shape(format!(
                    "stack: [{}, {}] vs [{}, {}]",
                    p.frames, p.bins, first.frames, first.bins
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Spectrogram::from_interleaved(channels, first.frames, first.bins, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// A configured transform with its FFT plans.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Arc<Vec<f64>>,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            cfg,
            window: Arc::new(cfg.window()),
            r2c: planner.plan_fft_forward(cfg.fft_size),
            c2r: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn rfft(&self, frame: &mut [f64], out: &mut [Complex64]) {
        self.r2c.process(frame, out).expect("fft sizes fixed at plan time");
    }

    /// Unnormalized inverse of a one-sided spectrum; DC/Nyquist imaginary
    /// parts are ignored.
    fn irfft(&self, spec: &mut [Complex64], out: &mut [f64]) {
        let last = spec.len() - 1;
        spec[0].im = 0.0;
        spec[last].im = 0.0;
        self.c2r.process(spec, out).expect("fft sizes fixed at plan time");
    }

    /// Per-sample synthesis normalization `max(Σ_n w²(t − nH), NORM_FLOOR)`.
    fn synthesis_norm(&self, frames: usize, out_len: usize) -> Vec<f64> {
        let hop = self.cfg.hop;
        let mut norm = vec![0.0; out_len];
        for n in 0..frames {
            for (i, w) in self.window.iter().enumerate() {
                if let Some(v) = norm.get_mut(n * hop + i) {
                    *v += w * w;
                }
            }
        }
        norm.iter_mut().for_each(|v| *v = v.max(NORM_FLOOR));
        norm
    }

    /// Analysis of one channel into `[N, F]` interleaved re/im.
    pub fn analyze(&self, x: &[f64]) -> Result<Vec<f64>> {
        let frames = self.cfg.num_frames(x.len())?;
        let (l, f, hop) = (self.cfg.fft_size, self.cfg.bins(), self.cfg.hop);
        let mut buf = vec![0.0; l];
        let mut spec = vec![Complex64::default(); f];
        let mut out = Vec::with_capacity(frames * f * 2);
        for n in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (i, w) in self.window.iter().enumerate() {
                buf[i] = x[n * hop + i] * w;
            }
            self.rfft(&mut buf, &mut spec);
            out.extend(spec.iter().flat_map(|c| [c.re, c.im]));
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::analyze`]: maps a gradient on `[N, F, 2]` back to
    /// the `len` input samples.
    pub fn analyze_adjoint(&self, grad: &[f64], len: usize) -> Vec<f64> {
        let (l, f, hop) = (self.cfg.fft_size, self.cfg.bins(), self.cfg.hop);
        let frames = grad.len() / (2 * f);
        let mut gx = vec![0.0; len];
        let mut spec = vec![Complex64::default(); f];
        let mut buf = vec![0.0; l];
        for n in 0..frames {
            for k in 0..f {
                let c = if k == 0 || k == f - 1 { 1.0 } else { 0.5 };
                let i = (n * f + k) * 2;
                spec[k] = Complex64::new(grad[i], grad[i + 1]) * c;
            }
            self.irfft(&mut spec, &mut buf);
            for (i, w) in self.window.iter().enumerate() {
                gx[n * hop + i] += w * buf[i];
            }
        }
        gx
    }

    /// Weighted overlap-add synthesis of `[N, F]` interleaved re/im into
    /// `out_len` samples.
    pub fn synthesize(&self, spec: &[f64], out_len: usize) -> Vec<f64> {
        let (l, f, hop) = (self.cfg.fft_size, self.cfg.bins(), self.cfg.hop);
        let frames = spec.len() / (2 * f);
        let mut y = vec![0.0; out_len];
        let mut buf = vec![0.0; l];
        let mut cs = vec![Complex64::default(); f];
        let scale = 1.0 / l as f64;
        for n in 0..frames {
            for k in 0..f {
                cs[k] = Complex64::new(spec[(n * f + k) * 2], spec[(n * f + k) * 2 + 1]);
            }
            self.irfft(&mut cs, &mut buf);
            for (i, w) in self.window.iter().enumerate() {
                if let Some(v) = y.get_mut(n * hop + i) {
                    *v += w * buf[i] * scale;
                }
            }
        }
        let norm = self.synthesis_norm(frames, out_len);
        y.iter_mut().zip(&norm).for_each(|(v, d)| *v /= d);
        y
    }

    /// Adjoint of [`Stft::synthesize`] for `frames` frames.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Vec<f64> {
        let (l, f, hop) = (self.cfg.fft_size, self.cfg.bins(), self.cfg.hop);
        let norm = self.synthesis_norm(frames, grad.len());
        let mut out = Vec::with_capacity(frames * f * 2);
        let mut buf = vec![0.0; l];
        let mut cs = vec![Complex64::default(); f];
        for n in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (i, w) in self.window.iter().enumerate() {
                let t = n * hop + i;
                if t < grad.len() {
                    buf[i] = grad[t] * w / norm[t];
                }
            }
            self.rfft(&mut buf, &mut cs);
            for (k, c) in cs.iter().enumerate() {
                let ck = if k == 0 || k == f - 1 { 1.0 } else { 2.0 } / l as f64;
                let (re, im) = if k == 0 || k == f - 1 { (c.re, 0.0) } else { (c.re, c.im) };
                out.push(re * ck);
                out.push(im * ck);
            }
        }
        out
    }

    /// Multichannel analysis.
    pub fn stft(&self, clip: &AudioClip) -> Result<Spectrogram> {
        if clip.sample_rate != self.cfg.sample_rate {
            return domain(format!(
                "clip at {} Hz, transform configured for {} Hz",
                clip.sample_rate, self.cfg.sample_rate
            ));
        }
        let frames = self.cfg.num_frames(clip.len())?;
        let mut data = Vec::with_capacity(clip.num_channels() * frames * self.cfg.bins() * 2);
        for ch in clip.channels() {
            data.extend(self.analyze(ch)?);
        }
        Spectrogram::from_interleaved(clip.num_channels(), frames, self.cfg.bins(), data)
    }

    pub fn istft(&self, spec: &Spectrogram, out_len: usize) -> Result<AudioClip> {
        if spec.bins != self.cfg.bins() {
            return domain(format!("spectrogram has {} bins, config expects {}", spec.bins, self.cfg.bins()));
        }
        let len = spec.frames * spec.bins * 2;
        let channels = (0..spec.channels)
            .map(|c| self.synthesize(&spec.data()[c * len..(c + 1) * len], out_len))
            .collect();
        AudioClip::new(self.cfg.sample_rate, channels)
    }

    /// Graph op: `x[C, T]` → `[C, N, F, 2]`.
    pub fn stft_op(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let &[c, t] = shape.as_slice() else {
            return Err(Error::Shape(format!("stft op expects [C, T], got {shape:?}")));
        };
        let frames = self.cfg.num_frames(t)?;
        let f = self.cfg.bins();
        let mut data = Vec::with_capacity(c * frames * f * 2);
        for ch in g.value(x).data().chunks(t) {
            data.extend(self.analyze(ch)?);
        }
        let me = self.clone();
        Ok(g.custom(
            "stft",
            &[x],
            Tensor::new(&[c, frames, f, 2], data),
            Box::new(move |ctx: &BackwardCtx| {
                let per = frames * f * 2;
                let gx = ctx.grad.chunks(per).flat_map(|gc| me.analyze_adjoint(gc, t)).collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Graph op: `[C, N, F, 2]` → `[C, out_len]`.
    pub fn istft_op(&self, g: &mut Graph, spec: Var, out_len: usize) -> Result<Var> {
        let shape = g.shape(spec).to_vec();
        let &[c, frames, f, 2] = shape.as_slice() else {
            return Err(Error::Shape(format!("istft op expects [C, N, F, 2], got {shape:?}")));
        };
        if f != self.cfg.bins() {
            return domain(format!("spectrogram has {f} bins, config expects {}", self.cfg.bins()));
        }
        let per = frames * f * 2;
        let data: Vec<f64> = g
            .value(spec)
            .data()
            .chunks(per)
            .flat_map(|s| self.synthesize(s, out_len))
            .collect();
        let me = self.clone();
        Ok(g.custom(
            "istft",
            &[spec],
            Tensor::new(&[c, out_len], data),
            Box::new(move |ctx: &BackwardCtx| {
                let gs = ctx
                    .grad
                    .chunks(out_len)
                    .flat_map(|gy| me.synthesize_adjoint(gy, frames))
                    .collect();
                vec![Some(gs)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradsuite::check;
    use nnkit::gradcheck::{project_to_scalar, random_tensor, GradCheckOptions};
    use nnkit::ParamTree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn four_seconds_gives_249_frames() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.num_frames(64000).unwrap(), 249);
        assert_eq!(cfg.bins(), 257);
    }

    #[test]
    fn short_clip_rejected() {
        let s = Stft::new(StftConfig::default()).unwrap();
        assert!(s.stft(&AudioClip::mono(16000, vec![0.0; 100])).is_err());
    }

    #[test]
    fn bad_hop_rejected() {
        let cfg = StftConfig {
            hop: 300,
            ..Default::default()
        };
        assert!(Stft::new(cfg).is_err());
    }

    #[test]
    fn dc_lands_in_lowest_bins() {
        // A periodic Hann spectrum is w0 = Σw at DC and Σw/2 at bin 1.
        let s = Stft::new(StftConfig::default()).unwrap();
        let c = 0.7;
        let spec = s.stft(&AudioClip::mono(16000, vec![c; 2048])).unwrap();
        let wsum: f64 = s.config().window().iter().sum();
        for n in 0..spec.frames {
            assert!((spec.get(0, n, 0).norm() - c * wsum).abs() < 1e-9);
            assert!((spec.get(0, n, 1).norm() - 0.5 * c * wsum).abs() < 1e-9);
            for f in 2..spec.bins {
                assert!(spec.get(0, n, f).norm() < 1e-9 * c * wsum, "bin {f}");
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let s = Stft::new(StftConfig::default()).unwrap();
        let x = noise(4000, 3);
        let spec = s.stft(&AudioClip::mono(16000, x.clone())).unwrap();
        let w = s.config().window();
        let mut time = 0.0;
        let mut freq = 0.0;
        for n in 0..spec.frames {
            time += (0..512).map(|i| (x[n * 256 + i] * w[i]).powi(2)).sum::<f64>();
            for f in 0..spec.bins {
                let c = if f == 0 || f == spec.bins - 1 { 1.0 } else { 2.0 };
                freq += c * spec.get(0, n, f).norm_sqr();
            }
        }
        assert!((time - freq / 512.0).abs() < 1e-6 * time);
    }

    #[test]
    fn roundtrip_interior() {
        let s = Stft::new(StftConfig::default()).unwrap();
        let x = noise(16000, 1);
        let y = s.istft(&s.stft(&AudioClip::mono(16000, x.clone())).unwrap(), x.len()).unwrap();
        let covered = 256 * (s.config().num_frames(x.len()).unwrap() - 1) + 512;
        for t in 512..covered - 512 {
            assert!((y.channel(0)[t] - x[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn impulse_roundtrip() {
        let s = Stft::new(StftConfig::default()).unwrap();
        let mut x = vec![0.0; 16000];
        x[8000] = 1.0;
        let y = s.istft(&s.stft(&AudioClip::mono(16000, x.clone())).unwrap(), x.len()).unwrap();
        for (t, v) in y.channel(0).iter().enumerate() {
            assert!((v - x[t]).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn zero_spectrum_gives_silence() {
        let s = Stft::new(StftConfig::default()).unwrap();
        let y = s.istft(&Spectrogram::zeros(2, 10, 257), 3000).unwrap();
        assert!(y.channels().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(y.len(), 3000);
    }

    fn small() -> Stft {
        Stft::new(StftConfig {
            fft_size: 16,
            win_length: 16,
            hop: 8,
            sample_rate: 16000,
        })
        .unwrap()
    }

    #[test]
    fn stft_op_gradcheck() {
        let s = small();
        let r = check(
            "stft",
            &ParamTree::new(),
            &[random_tensor(&[2, 45], 1.0, 5)],
            1e-6,
            &GradCheckOptions::default(),
            |g, _, x| {
                let y = s.stft_op(g, x[0])?;
                Ok(project_to_scalar(g, y, 3)?)
            },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn istft_op_gradcheck() {
        let s = small();
        let r = check(
            "istft",
            &ParamTree::new(),
            &[random_tensor(&[2, 4, 9, 2], 1.0, 6)],
            1e-6,
            &GradCheckOptions::default(),
            |g, _, x| {
                let y = s.istft_op(g, x[0], 45)?;
                Ok(project_to_scalar(g, y, 4)?)
            },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
