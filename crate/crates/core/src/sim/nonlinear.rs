//! Memoryless loudspeaker distortions.

use serde::{Deserialize, Serialize};

use crate::audio::{rms, AudioClip};
use crate::error::{domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    None,
    Clip,
    Sigmoid,
}

pub const CLIP_RATIO: f64 = 0.8;

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 3] = [Nonlinearity::None, Nonlinearity::Clip, Nonlinearity::Sigmoid];

    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::None => "none",
            Nonlinearity::Clip => "clip",
            Nonlinearity::Sigmoid => "sigmoid",
        }
    }

    /// Constants recorded alongside each scene.
    pub fn params(&self) -> serde_json::Value {
        match self {
            Nonlinearity::None => serde_json::json!({}),
            Nonlinearity::Clip => serde_json::json!({ "threshold_ratio": CLIP_RATIO }),
            Nonlinearity::Sigmoid => serde_json::json!({
                "b": "1.5x - 0.3x^2", "a_pos": 4.0, "a_neg": 0.5, "gamma": "2 max|x|", "rescale": "input rms"
            }),
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Nonlinearity::None),
            "clip" => Ok(Nonlinearity::Clip),
            "sigmoid" => Ok(Nonlinearity::Sigmoid),
            other => domain(format!("unknown nonlinearity {other:?}")),
        }
    }
}

pub fn distort(x: &[f64], kind: Nonlinearity) -> Result<Vec<f64>> {
    if x.is_empty() {
        return domain("cannot distort an empty clip");
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(match kind {
        Nonlinearity::None => x.to_vec(),
        Nonlinearity::Clip => {
            let t = CLIP_RATIO * peak;
            x.iter().map(|v| v.clamp(-t, t)).collect()
        }
        Nonlinearity::Sigmoid => {
            let gamma = 2.0 * peak;
            let y: Vec<f64> = x
                .iter()
                .map(|&v| {
                    let b = 1.5 * v - 0.3 * v * v;
                    let a = if b > 0.0 { 4.0 } else { 0.5 };
                    gamma * (2.0 / (1.0 + (-a * b).exp()) - 1.0)
                })
                .collect();
            let (rx, ry) = (rms(x), rms(&y));
            if ry > 0.0 {
                y.iter().map(|v| v * rx / ry).collect()
            } else {
                y
            }
        }
    })
}

/// Applies `kind` to a single-channel clip.
pub fn apply_nonlinearity(x: &AudioClip, kind: Nonlinearity) -> Result<AudioClip> {
    if x.num_channels() != 1 {
        return domain("nonlinearity expects a single-channel clip");
    }
    Ok(AudioClip::mono(x.sample_rate, distort(x.channel(0), kind)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_is_identity() {
        let x = [0.3, -0.2, 0.9];
        assert_eq!(distort(&x, Nonlinearity::None).unwrap(), x);
    }

    #[test]
    fn clip_at_point_eight_of_peak() {
        assert_eq!(distort(&[0.5, 1.0, -1.0], Nonlinearity::Clip).unwrap(), vec![0.5, 0.8, -0.8]);
    }

    #[test]
    fn sigmoid_fixes_zero() {
        assert!(distort(&[0.0; 16], Nonlinearity::Sigmoid).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_keeps_rms() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin() * 0.7).collect();
        let y = distort(&x, Nonlinearity::Sigmoid).unwrap();
        assert!((rms(&y) - rms(&x)).abs() < 1e-12);
        assert!(y != x);
    }

    #[test]
    fn empty_rejected() {
        assert!(distort(&[], Nonlinearity::Clip).is_err());
    }
}
