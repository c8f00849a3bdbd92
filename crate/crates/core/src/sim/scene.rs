//! Scene mixing: reverberant near end + distorted echo + noise.

use serde::{Deserialize, Serialize};

use super::nonlinear::{distort, Nonlinearity};
use super::rir::RirSet;
use super::room::RoomSpec;
use crate::audio::AudioClip;
use crate::dsp::{active_frames, active_rms, db, fft_convolve};
use crate::error::{domain, Result};

/// Frames more than this far below a component's loudest frame are inactive.
pub const ACTIVITY_FLOOR_DB: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activity {
    NearOnly,
    FarOnly,
    DoubleTalk,
    Silence,
}

impl Activity {
    pub fn code(self) -> char {
        match self {
            Activity::NearOnly => 'N',
            Activity::FarOnly => 'F',
            Activity::DoubleTalk => 'D',
            Activity::Silence => 'S',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'N' => Activity::NearOnly,
            'F' => Activity::FarOnly,
            'D' => Activity::DoubleTalk,
            'S' => Activity::Silence,
            _ => return None,
        })
    }
}

/// Run-length encoding such as `"3S12N4D"`.
pub fn encode_activity(labels: &[Activity]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        out.push_str(&format!("{}{}", j - i, labels[i].code()));
        i = j;
    }
    out
}

pub fn decode_activity(s: &str) -> Result<Vec<Activity>> {
    let mut out = Vec::new();
    let mut num = String::new();
    for ch in s.chars() {
        if ch.is_ascii_digit() {
            num.push(ch);
            continue;
        }
        let a = Activity::from_code(ch).ok_or_else(|| crate::Error::Domain(format!("bad activity code {ch:?}")))?;
        let n: usize = num
            .parse()
            .map_err(|_| crate::Error::Domain(format!("activity run without a count in {s:?}")))?;
        out.extend(std::iter::repeat_n(a, n));
        num.clear();
    }
    if !num.is_empty() {
        return domain(format!("dangling count in activity string {s:?}"));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub ser_db: f64,
    pub snr_db: f64,
    pub nonlinearity: Nonlinearity,
    pub near_utterance: AudioClip,
    pub far_utterance: AudioClip,
    pub noise: AudioClip,
    pub chunk_seconds: f64,
    /// Frame length for activity labels.
    pub hop: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-10.0..=10.0).contains(&self.ser_db) {
            return domain(format!("SER {} dB outside [-10, 10]", self.ser_db));
        }
        if !(0.0..=40.0).contains(&self.snr_db) {
            return domain(format!("SNR {} dB outside [0, 40]", self.snr_db));
        }
        if !(self.chunk_seconds > 0.0) || self.hop == 0 {
            return domain("chunk_seconds and hop must be positive");
        }
        self.room.validate()
    }

    pub fn samples(&self) -> usize {
        (self.chunk_seconds * self.room.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct SceneAudio {
    /// `d(t)`, M channels.
    pub mixture: AudioClip,
    /// Clean far-end reference `x(t)`.
    pub far_end: AudioClip,
    /// Reverberant near end at the reference (first) mic.
    pub target: AudioClip,
    /// Echo at every mic.
    pub echo_ref: AudioClip,
    /// Reverberant near end at every mic.
    pub near: AudioClip,
    /// Scaled noise at every mic.
    pub noise: AudioClip,
    pub activity: Vec<Activity>,
}

fn convolve_all(h: &[Vec<f64>], x: &[f64], len: usize) -> Vec<Vec<f64>> {
    h.iter().map(|hm| fft_convolve(x, hm, len)).collect()
}

/// Per-frame labels from the near and echo components at the reference mic.
pub fn activity_labels(near: &[f64], echo: &[f64], hop: usize) -> Vec<Activity> {
    let n = active_frames(near, hop, ACTIVITY_FLOOR_DB);
    let f = active_frames(echo, hop, ACTIVITY_FLOOR_DB);
    n.iter()
        .zip(&f)
        .map(|(&a, &b)| match (a, b) {
            (true, true) => Activity::DoubleTalk,
            (true, false) => Activity::NearOnly,
            (false, true) => Activity::FarOnly,
            (false, false) => Activity::Silence,
        })
        .collect()
}

pub fn mix_scene(spec: &SceneSpec, rirs: &RirSet) -> Result<SceneAudio> {
    spec.validate()?;
    let fs = spec.room.sample_rate;
    for (what, c) in [
        ("near", &spec.near_utterance),
        ("far", &spec.far_utterance),
        ("noise", &spec.noise),
    ] {
        if c.sample_rate != fs {
            return domain(format!("{what} clip at {} Hz, room at {fs} Hz", c.sample_rate));
        }
    }
    if rirs.sample_rate != fs {
        return domain(format!("RIRs at {} Hz, room at {fs} Hz", rirs.sample_rate));
    }
    let m = spec.room.mic_positions.len();
    if rirs.mics() != m || rirs.h_loud.len() != m || rirs.h_noise.len() != m {
        return domain(format!("RIR set has {} channels for {m} mics", rirs.mics()));
    }
    let len = spec.samples();
    for (what, c) in [
        ("near", &spec.near_utterance),
        ("far", &spec.far_utterance),
        ("noise", &spec.noise),
    ] {
        if c.len() < len {
            return domain(format!("{what} clip has {} samples, scene needs {len}", c.len()));
        }
    }
    let s = &spec.near_utterance.channel(0)[..len];
    let x = &spec.far_utterance.channel(0)[..len];
    let v = &spec.noise.channel(0)[..len];

    let near = convolve_all(&rirs.h_near, s, len);
    let near_level = active_rms(&near[0], spec.hop, ACTIVITY_FLOOR_DB);
    if near_level == 0.0 {
        return domain("near-end utterance is silent at the reference mic; SER undefined");
    }
    let xd = distort(x, spec.nonlinearity)?;
    let mut echo = convolve_all(&rirs.h_loud, &xd, len);
    let echo_level = active_rms(&echo[0], spec.hop, ACTIVITY_FLOOR_DB);
    let ge = if echo_level > 0.0 {
        near_level / (echo_level * 10f64.powf(spec.ser_db / 20.0))
    } else {
        0.0
    };
    echo.iter_mut().flatten().for_each(|e| *e *= ge);
    let mut noise = convolve_all(&rirs.h_noise, v, len);
    let noise_level = active_rms(&noise[0], spec.hop, ACTIVITY_FLOOR_DB);
    let gn = if noise_level > 0.0 {
        near_level / (noise_level * 10f64.powf(spec.snr_db / 20.0))
    } else {
        0.0
    };
    noise.iter_mut().flatten().for_each(|e| *e *= gn);

    let mixture: Vec<Vec<f64>> = (0..m)
        .map(|c| (0..len).map(|t| near[c][t] + echo[c][t] + noise[c][t]).collect())
        .collect();
    let activity = activity_labels(&near[0], &echo[0], spec.hop);
    Ok(SceneAudio {
        mixture: AudioClip::new(fs, mixture)?,
        far_end: AudioClip::mono(fs, x.to_vec()),
        target: AudioClip::mono(fs, near[0].clone()),
        echo_ref: AudioClip::new(fs, echo)?,
        near: AudioClip::new(fs, near)?,
        noise: AudioClip::new(fs, noise)?,
        activity,
    })
}

/// Realized SER at the reference mic over active segments.
pub fn measured_ser(scene: &SceneAudio, hop: usize) -> f64 {
    let a = active_rms(scene.target.channel(0), hop, ACTIVITY_FLOOR_DB);
    let b = active_rms(scene.echo_ref.channel(0), hop, ACTIVITY_FLOOR_DB);
    2.0 * db(a / b)
}

pub fn measured_snr(scene: &SceneAudio, hop: usize) -> f64 {
    let a = active_rms(scene.target.channel(0), hop, ACTIVITY_FLOOR_DB);
    let b = active_rms(scene.noise.channel(0), hop, ACTIVITY_FLOOR_DB);
    2.0 * db(a / b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activity_rle_roundtrip() {
        use Activity::*;
        let labels = vec![Silence, Silence, NearOnly, DoubleTalk, DoubleTalk, DoubleTalk, FarOnly];
        let s = encode_activity(&labels);
        assert_eq!(s, "2S1N3D1F");
        assert_eq!(decode_activity(&s).unwrap(), labels);
        assert!(decode_activity("3").is_err());
        assert!(decode_activity("2X").is_err());
    }

    #[test]
    fn label_count_is_ceil_of_hops() {
        let near = vec![0.1; 1000];
        let echo = vec![0.0; 1000];
        let l = activity_labels(&near, &echo, 256);
        assert_eq!(l.len(), 4);
        assert!(l.iter().all(|&a| a == Activity::NearOnly));
    }
}
