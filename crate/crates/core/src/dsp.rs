//! Small signal helpers shared by the simulator, baselines and metrics.

use num_complex::Complex64;
use realfft::RealFftPlanner;

/// Linear convolution `x * h` truncated to `out_len` samples, via FFT.
pub fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    let n = full.min(out_len.max(1)).max(1);
    // Circular convolution of length >= full avoids wrap-around.
    let size = full.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = vec![0.0; size];
    a[..x.len()].copy_from_slice(x);
    let mut b = vec![0.0; size];
    b[..h.len()].copy_from_slice(h);
    let mut fa = fwd.make_output_vec();
    let mut fb = fwd.make_output_vec();
    fwd.process(&mut a, &mut fa).expect("sizes fixed");
    fwd.process(&mut b, &mut fb).expect("sizes fixed");
    let scale = 1.0 / size as f64;
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(p, q)| p * q * scale).collect();
    let last = prod.len() - 1;
    prod[0].im = 0.0;
    prod[last].im = 0.0;
    let mut out = inv.make_output_vec();
    inv.process(&mut prod, &mut out).expect("sizes fixed");
    let mut y = vec![0.0; out_len];
    y[..n].copy_from_slice(&out[..n]);
    y
}

/// Energy of consecutive `hop`-sample frames; the last frame may be short.
pub fn frame_energies(x: &[f64], hop: usize) -> Vec<f64> {
    x.chunks(hop).map(|c| c.iter().map(|v| v * v).sum()).collect()
}

/// Frames whose energy is within `floor_db` of the loudest frame.
pub fn active_frames(x: &[f64], hop: usize, floor_db: f64) -> Vec<bool> {
    let e = frame_energies(x, hop);
    let peak = e.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return vec![false; e.len()];
    }
    let thr = peak * 10f64.powf(-floor_db / 10.0);
    e.iter().map(|&v| v > thr).collect()
}

/// RMS over the samples of active frames (0 when nothing is active).
pub fn active_rms(x: &[f64], hop: usize, floor_db: f64) -> f64 {
    let act = active_frames(x, hop, floor_db);
    let (mut s, mut n) = (0.0, 0usize);
    for (chunk, &a) in x.chunks(hop).zip(&act) {
        if a {
            s += chunk.iter().map(|v| v * v).sum::<f64>();
            n += chunk.len();
        }
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

pub fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_convolution_matches_direct() {
        let x: Vec<f64> = (0..37).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let h: Vec<f64> = (0..13).map(|i| ((i * 5 % 7) as f64 - 3.0) / 2.0).collect();
        let y = fft_convolve(&x, &h, 60);
        for (t, v) in y.iter().enumerate() {
            let mut d = 0.0;
            for (k, hk) in h.iter().enumerate() {
                if t >= k && t - k < x.len() {
                    d += hk * x[t - k];
                }
            }
            assert!((v - d).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn active_rms_ignores_silence() {
        let mut x = vec![0.0; 1000];
        x[..500].iter_mut().for_each(|v| *v = 0.5);
        assert!((active_rms(&x, 100, 40.0) - 0.5).abs() < 1e-12);
        assert_eq!(active_rms(&[0.0; 10], 4, 40.0), 0.0);
    }
}
