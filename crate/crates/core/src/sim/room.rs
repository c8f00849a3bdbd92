use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Shoebox extent in meters.
    pub dimensions: Point,
    pub rt60: f64,
    pub source_pos: Point,
    pub loudspeaker_pos: Point,
    pub noise_pos: Point,
    pub mic_positions: Vec<Point>,
    pub sample_rate: u32,
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
}

fn default_sound_speed() -> f64 {
    343.0
}

pub const DEFAULT_APERTURE: f64 = 0.26;

/// `count` mics evenly spaced along x, centered on `center`, spanning `aperture`.
pub fn linear_array(center: Point, count: usize, aperture: f64) -> Vec<Point> {
    if count == 1 {
        return vec![center];
    }
    let step = aperture / (count - 1) as f64;
    (0..count)
        .map(|i| [center[0] - aperture / 2.0 + i as f64 * step, center[1], center[2]])
        .collect()
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Largest pairwise mic distance.
pub fn aperture(mics: &[Point]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in mics.iter().enumerate() {
        for b in &mics[i + 1..] {
            best = best.max(distance(a, b));
        }
    }
    best
}

impl RoomSpec {
    pub fn inside(&self, p: &Point) -> bool {
        p.iter().zip(&self.dimensions).all(|(&v, &d)| v > 0.0 && v < d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return domain(format!("room dimensions must be positive, got {:?}", self.dimensions));
        }
        if !(0.0..=0.6).contains(&self.rt60) {
            return domain(format!("rt60 {} outside [0, 0.6] s", self.rt60));
        }
        if self.mic_positions.is_empty() {
            return domain("room needs at least one microphone");
        }
        if self.sample_rate == 0 || !(self.sound_speed > 0.0) {
            return domain("sample rate and sound speed must be positive");
        }
        let named = [
            ("source", &self.source_pos),
            ("loudspeaker", &self.loudspeaker_pos),
            ("noise", &self.noise_pos),
        ];
        for (what, p) in named.into_iter().chain(self.mic_positions.iter().map(|m| ("microphone", m))) {
            if !self.inside(p) {
                return domain(format!("{what} position {p:?} outside room {:?}", self.dimensions));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [a, b, c] = self.dimensions;
        2.0 * (a * b + a * c + b * c)
    }

    /// Uniform wall reflection coefficient from Eyring's relation
    /// `T60 = 24 ln10 · V / (−c S ln(1 − α))`, with `β = √(1 − α)`.
    pub fn reflection_coefficient(&self) -> f64 {
        if self.rt60 <= 0.0 {
            return 0.0;
        }
        let k = 24.0 * std::f64::consts::LN_10 / self.sound_speed;
        (-k * self.volume() / (2.0 * self.surface() * self.rt60)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_array_aperture() {
        let mics = linear_array([2.0, 2.0, 1.2], 8, DEFAULT_APERTURE);
        assert!((aperture(&mics) - 0.26).abs() < 1e-9);
    }

    #[test]
    fn outside_positions_rejected() {
        let mut r = RoomSpec {
            dimensions: [5.0, 4.0, 3.0],
            rt60: 0.2,
            source_pos: [1.0, 1.0, 1.0],
            loudspeaker_pos: [2.0, 2.0, 1.0],
            noise_pos: [4.0, 3.0, 2.0],
            mic_positions: linear_array([2.5, 2.0, 1.2], 2, 0.26),
            sample_rate: 16000,
            sound_speed: 343.0,
        };
        assert!(r.validate().is_ok());
        r.source_pos = [6.0, 1.0, 1.0];
        assert!(r.validate().is_err());
        r.source_pos = [1.0, 1.0, 1.0];
        r.rt60 = 0.7;
        assert!(r.validate().is_err());
    }
}
