//! Classical anchors: a partitioned-block frequency-domain adaptive filter
//! and a delay-and-sum beamformer.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{domain, Error, Result};
use crate::sim::room::{distance, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbfdafConfig {
    /// Block length in samples; the FFT is twice this.
    pub block: usize,
    pub partitions: usize,
    pub step_size: f64,
    /// Regularization relative to the mean far-end power.
    pub delta_rel: f64,
}

impl Default for PbfdafConfig {
    fn default() -> Self {
        Self {
            block: 256,
            partitions: 16,
            step_size: 0.5,
            delta_rel: 1e-6,
        }
    }
}

impl PbfdafConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..2.0).contains(&self.step_size) {
            return Err(Error::Config(format!("step size {} outside [0, 2)", self.step_size)));
        }
        if self.partitions == 0 || self.block == 0 {
            return Err(Error::Config("block and partitions must be positive".into()));
        }
        if !(self.delta_rel >= 0.0) {
            return Err(Error::Config("delta_rel must be non-negative".into()));
        }
        Ok(())
    }
}

/// Overlap-save PBFDAF with constrained (gradient-windowed) NLMS updates.
pub struct Pbfdaf {
    cfg: PbfdafConfig,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    /// Far-end spectra, newest first.
    x_hist: Vec<Vec<Complex64>>,
    weights: Vec<Vec<Complex64>>,
    x_prev: Vec<f64>,
    delta: f64,
    /// Blocks in which adaptation was skipped.
    pub frozen_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct CancelOutput {
    pub echo_estimate: Vec<f64>,
    pub error: Vec<f64>,
}

impl Pbfdaf {
    /// `far_power` is the mean far-end sample power used to scale δ.
    pub fn new(cfg: &PbfdafConfig, far_power: f64) -> Result<Self> {
        cfg.validate()?;
        let n = 2 * cfg.block;
        let mut planner = RealFftPlanner::<f64>::new();
        let bins = cfg.block + 1;
        Ok(Self {
            r2c: planner.plan_fft_forward(n),
            c2r: planner.plan_fft_inverse(n),
            x_hist: vec![vec![Complex64::default(); bins]; cfg.partitions],
            weights: vec![vec![Complex64::default(); bins]; cfg.partitions],
            x_prev: vec![0.0; cfg.block],
            // |X|² of a 2B-point FFT scales as 2B times the sample power.
            delta: cfg.delta_rel * far_power * n as f64,
            frozen_blocks: 0,
            cfg: cfg.clone(),
        })
    }

    fn fft(&self, mut buf: Vec<f64>) -> Vec<Complex64> {
        let mut out = self.r2c.make_output_vec();
        self.r2c.process(&mut buf, &mut out).expect("fft sizes fixed at plan time");
        out
    }

    fn ifft(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        let n = 2 * self.cfg.block;
        spec[0].im = 0.0;
        let last = spec.len() - 1;
        spec[last].im = 0.0;
        let mut out = self.c2r.make_output_vec();
        self.c2r.process(&mut spec, &mut out).expect("fft sizes fixed at plan time");
        out.iter_mut().for_each(|v| *v /= n as f64);
        out
    }

    /// Time-domain taps of partition `p` (first `block` samples).
    pub fn impulse_response(&self, p: usize) -> Vec<f64> {
        let mut h = self.ifft(self.weights[p].clone());
        h.truncate(self.cfg.block);
        h
    }

    /// Processes one block of `block` samples; returns (echo estimate, error).
    pub fn process_block(&mut self, mic: &[f64], far: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = self.cfg.block;
        let mut buf = self.x_prev.clone();
        buf.extend_from_slice(far);
        self.x_prev.copy_from_slice(far);
        let xk = self.fft(buf);
        self.x_hist.rotate_right(1);
        self.x_hist[0] = xk;

        let bins = b + 1;
        let mut y_spec = vec![Complex64::default(); bins];
        for (w, x) in self.weights.iter().zip(&self.x_hist) {
            for f in 0..bins {
                y_spec[f] += w[f] * x[f];
            }
        }
        let y_full = self.ifft(y_spec);
        let echo = y_full[b..].to_vec();
        let err: Vec<f64> = mic.iter().zip(&echo).map(|(d, y)| d - y).collect();

        let e_pow: f64 = err.iter().map(|v| v * v).sum();
        let d_pow: f64 = mic.iter().map(|v| v * v).sum();
        if self.cfg.step_size == 0.0 || e_pow > d_pow {
            self.frozen_blocks += 1;
            return (echo, err);
        }
        let mut ebuf = vec![0.0; 2 * b];
        ebuf[b..].copy_from_slice(&err);
        let e_spec = self.fft(ebuf);
        let norm: Vec<f64> = (0..bins)
            .map(|f| self.x_hist.iter().map(|x| x[f].norm_sqr()).sum::<f64>() + self.delta)
            .collect();
        let mu = self.cfg.step_size;
        for p in 0..self.cfg.partitions {
            let grad: Vec<Complex64> = (0..bins)
                .map(|f| {
                    if norm[f] > 0.0 {
                        self.x_hist[p][f].conj() * e_spec[f] * (mu / norm[f])
                    } else {
                        Complex64::default()
                    }
                })
                .collect();
            // Gradient constraint: keep only the causal half.
            let mut g = self.ifft(grad);
            g[b..].iter_mut().for_each(|v| *v = 0.0);
            let gc = self.fft(g);
            for (w, u) in self.weights[p].iter_mut().zip(gc) {
                *w += u;
            }
        }
        (echo, err)
    }
}

/// Cancels the echo of `far` in the single-channel `mic`.
pub fn pbfdaf_cancel(mic: &[f64], far: &[f64], cfg: &PbfdafConfig) -> Result<CancelOutput> {
    Ok(pbfdaf_run(mic, far, cfg)?.0)
}

/// Like [`pbfdaf_cancel`] and also returns the adapted filter.
pub fn pbfdaf_run(mic: &[f64], far: &[f64], cfg: &PbfdafConfig) -> Result<(CancelOutput, Pbfdaf)> {
    if mic.len() != far.len() {
        return domain(format!("mic has {} samples, far end {}", mic.len(), far.len()));
    }
    let far_power = far.iter().map(|v| v * v).sum::<f64>() / far.len().max(1) as f64;
    let mut filt = Pbfdaf::new(cfg, far_power)?;
    if far_power == 0.0 {
        let out = CancelOutput {
            echo_estimate: vec![0.0; mic.len()],
            error: mic.to_vec(),
        };
        return Ok((out, filt));
    }
    let b = cfg.block;
    let mut echo = Vec::with_capacity(mic.len() + b);
    let mut error = Vec::with_capacity(mic.len() + b);
    for start in (0..mic.len()).step_by(b) {
        let end = (start + b).min(mic.len());
        let mut m = mic[start..end].to_vec();
        let mut x = far[start..end].to_vec();
        m.resize(b, 0.0);
        x.resize(b, 0.0);
        let (y, e) = filt.process_block(&m, &x);
        echo.extend_from_slice(&y[..end - start]);
        error.extend_from_slice(&e[..end - start]);
    }
    Ok((
        CancelOutput {
            echo_estimate: echo,
            error,
        },
        filt,
    ))
}

/// Runs the canceller independently on every mic channel.
pub fn pbfdaf_multichannel(mic: &AudioClip, far: &AudioClip, cfg: &PbfdafConfig) -> Result<AudioClip> {
    if far.num_channels() != 1 {
        return domain("far end must be a single channel");
    }
    if mic.sample_rate != far.sample_rate {
        return domain(format!("mic at {} Hz, far end at {} Hz", mic.sample_rate, far.sample_rate));
    }
    let chans = mic
        .channels()
        .iter()
        .map(|c| pbfdaf_cancel(c, far.channel(0), cfg).map(|o| o.error))
        .collect::<Result<Vec<_>>>()?;
    AudioClip::new(mic.sample_rate, chans)
}

/// Half-width of the fractional-delay interpolator.
pub const DAS_HALF_WIDTH: usize = 40;

fn windowed_sinc(t: f64) -> f64 {
    let half = DAS_HALF_WIDTH as f64 + 1.0;
    if t.abs() >= half {
        return 0.0;
    }
    let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
    sinc * (0.5 + 0.5 * (PI * t / half).cos())
}

/// `y[n] = x[n + shift]`, band-limited for fractional shifts, zero outside.
pub fn fractional_advance(x: &[f64], shift: f64) -> Vec<f64> {
    let n = x.len();
    let whole = shift.round();
    if (shift - whole).abs() < 1e-12 {
        let s = whole as isize;
        return (0..n as isize)
            .map(|i| {
                let j = i + s;
                if j >= 0 && (j as usize) < n {
                    x[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
    }
    let base = shift.floor() as isize;
    let frac = shift - base as f64;
    let h = DAS_HALF_WIDTH as isize;
    let taps: Vec<f64> = (-h..=h + 1).map(|k| windowed_sinc(k as f64 - frac)).collect();
    (0..n as isize)
        .map(|i| {
            let mut acc = 0.0;
            for (ti, k) in (-h..=h + 1).enumerate() {
                let j = i + base + k;
                if j >= 0 && (j as usize) < n {
                    acc += x[j as usize] * taps[ti];
                }
            }
            acc
        })
        .collect()
}

/// Aligns each channel by advancing it `delays[m]` samples and averages.
pub fn das_beamform(mixture: &AudioClip, delays: &[f64]) -> Result<AudioClip> {
    let m = mixture.num_channels();
    if delays.len() != m {
        return domain(format!("{} delays for {m} channels", delays.len()));
    }
    if let Some(d) = delays.iter().find(|d| !(d.abs() <= DAS_HALF_WIDTH as f64)) {
        return domain(format!("steering delay {d} exceeds ±{DAS_HALF_WIDTH} samples"));
    }
    let mut out = vec![0.0; mixture.len()];
    for (c, &d) in delays.iter().enumerate() {
        let a = fractional_advance(mixture.channel(c), d);
        out.iter_mut().zip(&a).for_each(|(o, v)| *o += v / m as f64);
    }
    Ok(AudioClip::mono(mixture.sample_rate, out))
}

/// Arrival delays of `source` at each mic relative to mic 0, in samples.
pub fn steering_delays(source: &Point, mics: &[Point], sample_rate: u32, sound_speed: f64) -> Vec<f64> {
    let d0 = mics.first().map_or(0.0, |m| distance(source, m));
    mics.iter()
        .map(|m| (distance(source, m) - d0) / sound_speed * sample_rate as f64)
        .collect()
}
