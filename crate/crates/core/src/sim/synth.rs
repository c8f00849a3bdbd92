//! Synthetic speech-like and noise sources for the scene pool.
//!
//! Utterances alternate voiced syllables (glottal pulse trains through
//! formant resonators), short fricative bursts and pauses, so that a
//! scene contains near-only, far-only and double-talk stretches.

use std::f64::consts::PI;

use rand::Rng;

use crate::audio::rms;

/// Two-pole resonator at `freq` Hz with bandwidth `bw` Hz.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, fs: f64) -> Self {
        let r = (-PI * bw / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn envelope(i: usize, n: usize) -> f64 {
    (PI * i as f64 / n as f64).sin().powi(2)
}

fn voiced<R: Rng>(rng: &mut R, fs: f64, n: usize) -> Vec<f64> {
    let f0_start = rng.gen_range(90.0..240.0);
    let f0_end = f0_start * rng.gen_range(0.8..1.25);
    let formants = [
        (rng.gen_range(300.0..900.0), 80.0),
        (rng.gen_range(900.0..2400.0), 120.0),
        (rng.gen_range(2400.0..3500.0), 200.0),
    ];
    let mut res: Vec<Resonator> = formants.iter().map(|&(f, b)| Resonator::new(f, b, fs)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let f0 = f0_start + (f0_end - f0_start) * i as f64 / n as f64;
        phase += f0 / fs;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let src = pulse + 0.02 * rng.gen_range(-1.0..1.0);
        let y: f64 = res.iter_mut().map(|r| r.tick(src)).sum();
        out.push(y * envelope(i, n));
    }
    out
}

fn fricative<R: Rng>(rng: &mut R, fs: f64, n: usize) -> Vec<f64> {
    let mut res = Resonator::new(rng.gen_range(3000.0..6000.0), 1500.0, fs);
    (0..n).map(|i| res.tick(rng.gen_range(-1.0..1.0)) * envelope(i, n) * 0.5).collect()
}

/// A speech-like utterance of `len` samples at unit-ish level (RMS 0.1).
pub fn utterance<R: Rng>(rng: &mut R, sample_rate: u32, len: usize) -> Vec<f64> {
    let fs = sample_rate as f64;
    let ms = |v: f64| (v * fs / 1000.0) as usize;
    let mut out = Vec::with_capacity(len);
    let mut paused = true;
    while out.len() < len {
        let pick = rng.gen_range(0..10);
        let pause = pick >= 7 && !paused;
        paused = pause;
        match if pause { pick } else { pick.min(6) } {
            0..=5 => {
                let n = ms(rng.gen_range(80.0..260.0));
                out.extend(voiced(rng, fs, n));
            }
            6 => {
                let n = ms(rng.gen_range(40.0..120.0));
                out.extend(fricative(rng, fs, n));
            }
            _ => {
                let n = ms(rng.gen_range(60.0..350.0));
                out.extend(std::iter::repeat_n(0.0, n));
            }
        }
    }
    out.truncate(len);
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.1 / r);
    }
    out
}

/// Low-pass tilted noise (one-pole smoothed white noise mixed with white).
pub fn ambient_noise<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let a = rng.gen_range(0.85..0.98);
    let mut s = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w = rng.gen_range(-1.0..1.0);
            s = a * s + (1.0 - a) * w;
            s * 4.0 + 0.1 * w
        })
        .collect();
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.1 / r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::active_frames;
    use rand::SeedableRng;

    #[test]
    fn utterance_has_pauses_and_activity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let u = utterance(&mut rng, 16000, 32000);
        assert_eq!(u.len(), 32000);
        assert!((rms(&u) - 0.1).abs() < 1e-9);
        let act = active_frames(&u, 256, 40.0);
        let on = act.iter().filter(|&&a| a).count();
        assert!(on > act.len() / 3 && on < act.len(), "{on}/{}", act.len());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = utterance(&mut rand_chacha::ChaCha8Rng::seed_from_u64(5), 16000, 4000);
        let b = utterance(&mut rand_chacha::ChaCha8Rng::seed_from_u64(5), 16000, 4000);
        assert_eq!(a, b);
    }
}
