//! Shoebox image-source impulse responses.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::room::{distance, Point, RoomSpec};
use crate::error::{domain, Result};

/// Fractional-delay interpolator length.
pub const SINC_TAPS: usize = 81;
const HALF: isize = (SINC_TAPS / 2) as isize;
pub const DEFAULT_MAX_ORDER: usize = 30;
/// Images quieter than this relative to the direct path are skipped.
const IMAGE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RirSet {
    pub h_near: Vec<Vec<f64>>,
    pub h_loud: Vec<Vec<f64>>,
    pub h_noise: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl RirSet {
    pub fn mics(&self) -> usize {
        self.h_near.len()
    }

    pub fn generate(room: &RoomSpec, max_order: usize) -> Result<Self> {
        Ok(Self {
            h_near: generate_rir(room, &room.source_pos, max_order)?,
            h_loud: generate_rir(room, &room.loudspeaker_pos, max_order)?,
            h_noise: generate_rir(room, &room.noise_pos, max_order)?,
            sample_rate: room.sample_rate,
        })
    }
}

/// Adds `amp · δ(t − delay)` realized with a Hann-windowed sinc; integer
/// delays land on a single tap.
fn add_tap(h: &mut [f64], delay: f64, amp: f64) {
    let nearest = delay.round();
    if (delay - nearest).abs() < 1e-9 {
        if let Some(v) = h.get_mut(nearest as usize) {
            *v += amp;
        }
        return;
    }
    let base = delay.floor() as isize;
    let frac = delay - base as f64;
    // sin(π(n − delay)) alternates sign over consecutive integers n.
    let s0 = (PI * (-HALF as f64 - frac)).sin();
    for k in -HALF..=HALF {
        let n = base + k;
        if n < 0 || n as usize >= h.len() {
            continue;
        }
        let t = k as f64 - frac;
        if t.abs() > HALF as f64 + 1.0 {
            continue;
        }
        let sign = if (k + HALF) % 2 == 0 { 1.0 } else { -1.0 };
        let sinc = sign * s0 / (PI * t);
        let win = 0.5 + 0.5 * (PI * t / (HALF as f64 + 1.0)).cos();
        h[n as usize] += amp * sinc * win;
    }
}

/// RIR length in samples: `(rt60 + 0.05 s) · fs`, extended to hold the
/// direct path plus the interpolator tail.
pub fn rir_length(room: &RoomSpec, source: &Point) -> usize {
    let fs = room.sample_rate as f64;
    let base = ((room.rt60 + 0.05) * fs).ceil() as usize;
    let far = room
        .mic_positions
        .iter()
        .map(|m| distance(m, source))
        .fold(0.0f64, f64::max);
    base.max((far / room.sound_speed * fs).ceil() as usize + HALF as usize + 2)
}

/// One impulse response per microphone for a source at `source`.
pub fn generate_rir(room: &RoomSpec, source: &Point, max_order: usize) -> Result<Vec<Vec<f64>>> {
    room.validate()?;
    if !room.inside(source) {
        return domain(format!("source {source:?} outside room {:?}", room.dimensions));
    }
    let beta = room.reflection_coefficient();
    let max_order = if beta == 0.0 { 0 } else { max_order } as i64;
    let fs = room.sample_rate as f64;
    let c = room.sound_speed;
    let len = rir_length(room, source);
    let max_dist = len as f64 / fs * c;
    let dims = room.dimensions;

    let mut out = Vec::with_capacity(room.mic_positions.len());
    for mic in &room.mic_positions {
        let mut h = vec![0.0; len];
        let direct = distance(mic, source);
        let reach: Vec<i64> = dims
            .iter()
            .map(|&d| ((max_dist / (2.0 * d)).ceil() as i64 + 1).min(max_order))
            .collect();
        for nx in -reach[0]..=reach[0] {
            for ny in -reach[1]..=reach[1] {
                for nz in -reach[2]..=reach[2] {
                    for parity in 0..8u8 {
                        let q = [(parity & 1) as i64, ((parity >> 1) & 1) as i64, ((parity >> 2) & 1) as i64];
                        let n = [nx, ny, nz];
                        let order: i64 = (0..3).map(|a| (n[a] - q[a]).abs() + n[a].abs()).sum();
                        if order > max_order {
                            continue;
                        }
                        let mut img = [0.0; 3];
                        for a in 0..3 {
                            img[a] = (1 - 2 * q[a]) as f64 * source[a] + 2.0 * n[a] as f64 * dims[a];
                        }
                        let d = distance(&img, mic);
                        if d > max_dist {
                            continue;
                        }
                        let amp = beta.powi(order as i32) / d.max(1e-3);
                        if amp * direct < IMAGE_FLOOR {
                            continue;
                        }
                        add_tap(&mut h, d / c * fs, amp);
                    }
                }
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// RT60 from Schroeder backward integration with a least-squares line
/// through the −5 … −35 dB part of the decay curve. `None` when the curve
/// never reaches −35 dB.
pub fn schroeder_rt60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).max(1e-300).log10()).collect();
    let start = db.iter().position(|&v| v <= -5.0)?;
    let end = db.iter().position(|&v| v <= -35.0)?;
    if end <= start + 1 {
        return None;
    }
    let fs = sample_rate as f64;
    let pts: Vec<(f64, f64)> = (start..=end).map(|i| (i as f64 / fs, db[i])).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Sample index of the largest-magnitude tap.
pub fn peak_index(h: &[f64]) -> usize {
    h.iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0
}

/// First local magnitude peak reaching a quarter of the global peak.
/// Coincident wall images can outweigh the direct arrival, so the global
/// argmax is not used.
pub fn direct_path_index(h: &[f64]) -> usize {
    let peak = h.get(peak_index(h)).map_or(0.0, |v| v.abs());
    let Some(mut i) = h.iter().position(|v| v.abs() >= 0.25 * peak) else {
        return 0;
    };
    while i + 1 < h.len() && h[i + 1].abs() > h[i].abs() {
        i += 1;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::room::linear_array;

    fn room(rt60: f64) -> RoomSpec {
        RoomSpec {
            dimensions: [5.0, 4.0, 3.0],
            rt60,
            source_pos: [1.0, 2.0, 1.5],
            loudspeaker_pos: [2.6, 2.2, 1.2],
            noise_pos: [4.0, 3.0, 2.0],
            mic_positions: vec![[4.43, 2.0, 1.5]],
            sample_rate: 16000,
            sound_speed: 343.0,
        }
    }

    #[test]
    fn anechoic_direct_path_is_a_single_tap() {
        let r = room(0.0);
        let h = generate_rir(&r, &r.source_pos, 30).unwrap();
        let nz: Vec<usize> = (0..h[0].len()).filter(|&i| h[0][i] != 0.0).collect();
        assert_eq!(nz, vec![160]);
        assert!((h[0][160] - 1.0 / 3.43).abs() < 1e-12);
    }

    #[test]
    fn length_follows_rt60() {
        let r = room(0.3);
        let h = generate_rir(&r, &r.source_pos, 30).unwrap();
        assert_eq!(h[0].len(), (0.35f64 * 16000.0).ceil() as usize);
    }

    #[test]
    fn fractional_delay_is_band_limited_impulse() {
        let mut h = vec![0.0; 200];
        add_tap(&mut h, 100.5, 1.0);
        assert!(h[..59].iter().all(|&v| v == 0.0));
        let sum: f64 = h.iter().sum();
        assert!((sum - 1.0).abs() < 0.02, "{sum}");
        assert!(peak_index(&h) == 100 || peak_index(&h) == 101);
    }

    #[test]
    fn broadside_pair_has_equal_delays() {
        let mut r = room(0.0);
        r.mic_positions = linear_array([2.5, 2.0, 1.5], 2, 0.26);
        let src = [2.5, 0.5, 1.5];
        let h = generate_rir(&r, &src, 0).unwrap();
        assert!(direct_path_index(&h[0]).abs_diff(direct_path_index(&h[1])) <= 1);
    }

    #[test]
    fn source_outside_rejected() {
        let r = room(0.2);
        assert!(generate_rir(&r, &[6.0, 1.0, 1.0], 10).is_err());
    }

    #[test]
    fn schroeder_rt60_matches_request() {
        let r = room(0.3);
        for src in [r.source_pos, r.loudspeaker_pos, r.noise_pos] {
            let h = generate_rir(&r, &src, DEFAULT_MAX_ORDER).unwrap();
            let t = schroeder_rt60(&h[0], 16000).unwrap();
            assert!((0.24..=0.36).contains(&t), "measured {t}");
        }
    }

    #[test]
    fn smoothed_energy_decays() {
        // 10 ms windows grouped in fives; single windows can rise on sparse early echoes.
        for rt in [0.2, 0.4, 0.6] {
            let mut r = room(rt);
            r.mic_positions = linear_array([3.0, 2.0, 1.4], 4, 0.26);
            for src in [r.source_pos, r.loudspeaker_pos, r.noise_pos] {
                for h in generate_rir(&r, &src, DEFAULT_MAX_ORDER).unwrap() {
                    let start = direct_path_index(&h) + SINC_TAPS / 2 + 1;
                    let e: Vec<f64> = h[start..].chunks_exact(160).map(|c| c.iter().map(|v| v * v).sum()).collect();
                    let blocks: Vec<f64> = e.chunks_exact(5).map(|c| c.iter().sum()).collect();
                    assert!(blocks.windows(2).all(|w| w[1] < w[0] || w[0] == 0.0), "rt60 {rt}: {blocks:?}");
                }
            }
        }
    }
}
