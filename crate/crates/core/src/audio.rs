//! Multichannel sample buffers and WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{domain, Error, Result};

/// Channel-major time-domain audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return domain("audio clip needs at least one channel");
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return domain("audio channels differ in length");
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            channels: vec![samples],
        }
    }

    pub fn silent(sample_rate: u32, channels: usize, len: usize) -> Self {
        Self {
            sample_rate,
            channels: vec![vec![0.0; len]; channels.max(1)],
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// A single channel as its own clip.
    pub fn select(&self, i: usize) -> AudioClip {
        AudioClip::mono(self.sample_rate, self.channels[i].clone())
    }

    /// First `len` samples of every channel.
    pub fn truncated(&self, len: usize) -> AudioClip {
        AudioClip {
            sample_rate: self.sample_rate,
            channels: self.channels.iter().map(|c| c[..len.min(c.len())].to_vec()).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        let nch = spec.channels as usize;
        let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            (SampleFormat::Int, bits) if bits <= 32 => {
                let scale = 1.0 / (1u64 << (bits - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
            (fmt, bits) => return domain(format!("{}: unsupported WAV format {fmt:?}/{bits}", path.display())),
        };
        let len = interleaved.len() / nch.max(1);
        let mut channels = vec![Vec::with_capacity(len); nch];
        for frame in interleaved.chunks(nch) {
            for (c, &v) in channels.iter_mut().zip(frame) {
                c.push(v);
            }
        }
        AudioClip::new(spec.sample_rate, channels)
    }

    /// Writes interleaved IEEE float-32.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = WavSpec {
            channels: self.channels.len() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut w = WavWriter::create(path, spec).map_err(wav_err)?;
        for t in 0..self.len() {
            for c in &self.channels {
                w.write_sample(c[t] as f32).map_err(wav_err)?;
            }
        }
        w.finalize().map_err(wav_err)
    }

    /// Writes interleaved 16-bit PCM (clipped to ±1).
    pub fn write_wav_pcm16(&self, path: &Path) -> Result<()> {
        let spec = WavSpec {
            channels: self.channels.len() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut w = WavWriter::create(path, spec).map_err(wav_err)?;
        for t in 0..self.len() {
            for c in &self.channels {
                let v = (c[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_sample(v).map_err(wav_err)?;
            }
        }
        w.finalize().map_err(wav_err)
    }
}

/// Root-mean-square of a slice (0 for empty input).
pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_float_roundtrip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let ch0: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.1).sin() as f32 as f64).collect();
        let ch1: Vec<f64> = ch0.iter().map(|v| -v * 0.5).collect();
        let clip = AudioClip::new(16000, vec![ch0, ch1]).unwrap();
        clip.write_wav(&p).unwrap();
        assert_eq!(AudioClip::read_wav(&p).unwrap(), clip);
    }

    #[test]
    fn wav_pcm16_reads_back_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let clip = AudioClip::mono(16000, vec![0.0, 0.5, -0.25, 0.999]);
        clip.write_wav_pcm16(&p).unwrap();
        let back = AudioClip::read_wav(&p).unwrap();
        for (a, b) in back.channel(0).iter().zip(clip.channel(0)) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn ragged_channels_rejected() {
        assert!(AudioClip::new(16000, vec![vec![0.0; 3], vec![0.0; 4]]).is_err());
    }
}
