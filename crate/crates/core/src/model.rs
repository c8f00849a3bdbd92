//! The assembled network: neural AEC → joint beamformer → iSTFT.

use nnkit::init::Initializer;
use nnkit::{Graph, ParamTree, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::aec::{AecOutput, NeuralAec};
use crate::audio::{rms, AudioClip};
use crate::beamformer::{beamform, DtdGate, GatedWeights, SpeechNoise, SpeechNoiseEstimator, WeightPredictor};
use crate::error::{domain, Error, Result};
use crate::spectral::CrfGeometry;
use crate::stft::{Spectrogram, Stft, StftConfig};

/// Network sizes. Defaults are the toy scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Microphone count M.
    pub mics: usize,
    pub crf: CrfGeometry,
    pub enc_channels: Vec<usize>,
    pub aec_width: usize,
    pub aec_heads: usize,
    pub ft_hidden: usize,
    pub bf_width: usize,
    pub bf_heads: usize,
    pub bf_hidden: usize,
    pub weight_hidden: usize,
    pub dtd_width: usize,
    pub dtd_heads: usize,
    pub dtd_hidden: usize,
    /// Bound decoder taps with tanh.
    pub tanh_taps: bool,
    /// Apply the double-talk gate (false forces it open).
    pub dtd: bool,
    pub init_seed: u64,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mics: 2,
            crf: CrfGeometry::default(),
            enc_channels: vec![8, 16, 32],
            aec_width: 8,
            aec_heads: 2,
            ft_hidden: 32,
            bf_width: 16,
            bf_heads: 2,
            bf_hidden: 16,
            weight_hidden: 16,
            dtd_width: 16,
            dtd_heads: 2,
            dtd_hidden: 8,
            tanh_taps: false,
            dtd: true,
            init_seed: 0,
            stft: StftConfig::default(),
        }
    }
}

impl ModelConfig {
    /// `C = 2M + 2`.
    pub fn stacked_channels(&self) -> usize {
        2 * self.mics + 2
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.mics == 0 {
            return bad("model.mics must be at least 1".into());
        }
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return bad("model.enc_channels must be a nonempty list of positive widths".into());
        }
        if !self.stft.fft_size.is_multiple_of(4) {
            return bad("stft.fft_size must be a multiple of 4 (odd bin count for the encoder strides)".into());
        }
        for (w, h, what) in [
            (self.aec_width, self.aec_heads, "aec"),
            (self.bf_width, self.bf_heads, "bf"),
            (self.dtd_width, self.dtd_heads, "dtd"),
        ] {
            if w == 0 || h == 0 || w % h != 0 {
                return bad(format!("model.{what}_width {w} must be a positive multiple of {what}_heads {h}"));
            }
        }
        for (v, what) in [
            (self.ft_hidden, "ft_hidden"),
            (self.bf_hidden, "bf_hidden"),
            (self.weight_hidden, "weight_hidden"),
            (self.dtd_hidden, "dtd_hidden"),
        ] {
            if v == 0 {
                return bad(format!("model.{what} must be positive"));
            }
        }
        Ok(())
    }
}

/// Layer structure; parameter values live in a [`ParamTree`].
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub aec: NeuralAec,
    pub estimator: SpeechNoiseEstimator,
    pub weights: WeightPredictor,
    pub dtd: DtdGate,
    pub stft: Stft,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub aec: AecOutput,
    pub speech_noise: SpeechNoise,
    /// Unscaled weights from the RNN-DNN.
    pub weights: Var,
    pub gated: GatedWeights,
    /// `[1, N, F, 2]` in the normalized domain.
    pub spec: Var,
    /// `[1, T]` in the normalized domain.
    pub audio: Var,
}

/// Inputs scaled to unit RMS and transformed.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[M + 1, N, F]`, far end last.
    pub spec: Spectrogram,
    /// Multiplier applied to the mixture (and to targets in training).
    pub mix_scale: f64,
    pub far_scale: f64,
    pub len: usize,
    pub sample_rate: u32,
}

fn unit_scale(channels: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = channels.iter().flatten().copied().collect();
    let r = rms(&all);
    if r > 1e-12 {
        1.0 / r
    } else {
        1.0
    }
}

impl Network {
    pub fn build(cfg: &ModelConfig, tree: &mut ParamTree) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(cfg.init_seed);
        Ok(Self {
            cfg: cfg.clone(),
            aec: NeuralAec::new(tree, &mut init, cfg)?,
            estimator: SpeechNoiseEstimator::new(tree, &mut init, cfg)?,
            weights: WeightPredictor::new(tree, &mut init, cfg)?,
            dtd: DtdGate::new(tree, &mut init, cfg)?,
            stft: Stft::new(cfg.stft)?,
        })
    }

    /// Scales and transforms a scene's microphone and far-end signals.
    pub fn prepare(&self, mixture: &AudioClip, far_end: &AudioClip) -> Result<Prepared> {
        if mixture.sample_rate != far_end.sample_rate || mixture.sample_rate != self.cfg.stft.sample_rate {
            return domain(format!(
                "sample rates differ: mixture {} Hz, far end {} Hz, model {} Hz",
                mixture.sample_rate, far_end.sample_rate, self.cfg.stft.sample_rate
            ));
        }
        if mixture.num_channels() != self.cfg.mics || far_end.num_channels() != 1 {
            return Err(Error::ConfigMismatch(format!(
                "model expects {} mixture channels and a mono far end, got {} and {}",
                self.cfg.mics,
                mixture.num_channels(),
                far_end.num_channels()
            )));
        }
        if mixture.len() != far_end.len() {
            return domain(format!("mixture has {} samples, far end {}", mixture.len(), far_end.len()));
        }
        let mix_scale = unit_scale(mixture.channels());
        let far_scale = unit_scale(far_end.channels());
        let mut chans: Vec<Vec<f64>> = mixture
            .channels()
            .iter()
            .map(|c| c.iter().map(|v| v * mix_scale).collect())
            .collect();
        chans.push(far_end.channel(0).iter().map(|v| v * far_scale).collect());
        let clip = AudioClip::new(mixture.sample_rate, chans)?;
        Ok(Prepared {
            spec: self.stft.stft(&clip)?,
            mix_scale,
            far_scale,
            len: mixture.len(),
            sample_rate: mixture.sample_rate,
        })
    }

    /// Full chain from the stacked input spectrum `[M+1, N, F, 2]`.
    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, y: Var, out_len: usize, gated: bool) -> Result<ForwardVars> {
        let aec = self.aec.forward(g, tree, y)?;
        let speech_noise = self.estimator.forward(g, tree, aec.stacked)?;
        let weights = self.weights.forward(g, tree, speech_noise.speech, speech_noise.noise)?;
        let gw = self.dtd.forward(g, tree, weights, gated)?;
        let spec = beamform(g, gw.scaled, aec.stacked)?;
        let audio = self.stft.istft_op(g, spec, out_len)?;
        Ok(ForwardVars {
            aec,
            speech_noise,
            weights,
            gated: gw,
            spec,
            audio,
        })
    }
}

/// Network structure plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamTree,
}

/// Result of [`Model::enhance`].
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub audio: AudioClip,
    /// Gate the network predicts per frame.
    pub gate: Vec<f64>,
    /// Gate actually applied (all ones with the gate forced open).
    pub applied_gate: Vec<f64>,
    /// MHSA-refined weights before gating, `[C, N, F, 2]`.
    pub refined: Tensor,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut params = ParamTree::new();
        let net = Network::build(cfg, &mut params)?;
        Ok(Self { net, params })
    }

    /// Rebuilds the structure for `cfg` and adopts `params`, which must
    /// match it name for name and shape for shape.
    pub fn from_params(cfg: &ModelConfig, params: ParamTree) -> Result<Self> {
        let fresh = Self::new(cfg)?;
        let want: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, p)| (n, p.shape.as_slice())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.shape.as_slice())).collect();
        if want != got {
            let diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} vs {} tensors", want.len(), got.len()));
            return Err(Error::ConfigMismatch(format!("parameters do not fit the model config: {diff}")));
        }
        Ok(Self { net: fresh.net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Estimates the reverberant near-end speech at the reference mic.
    pub fn enhance(&self, mixture: &AudioClip, far_end: &AudioClip, gated: bool) -> Result<Enhanced> {
        let prep = self.net.prepare(mixture, far_end)?;
        let mut g = Graph::new();
        let y = g.constant(prep.spec.to_tensor());
        let fv = self.net.forward(&mut g, &self.params, y, prep.len, gated)?;
        let out: Vec<f64> = g.value(fv.audio).data().iter().map(|v| v / prep.mix_scale).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("enhanced output".into()));
        }
        let gate = g.value(fv.gated.gate).data().to_vec();
        let applied_gate = if gated { gate.clone() } else { vec![1.0; gate.len()] };
        Ok(Enhanced {
            audio: AudioClip::mono(prep.sample_rate, out),
            gate,
            applied_gate,
            refined: g.value(fv.gated.refined).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn scene(len: usize) -> (AudioClip, AudioClip) {
        let mix = AudioClip::new(16000, vec![noise(len, 1), noise(len, 2)]).unwrap();
        (mix, AudioClip::mono(16000, noise(len, 3)))
    }

    #[test]
    fn toy_model_fits_budget() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        assert!(m.num_params() <= 100_000, "{}", m.num_params());
    }

    #[test]
    fn output_length_matches_input() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let (mix, far) = scene(8000);
        let e = m.enhance(&mix, &far, true).unwrap();
        assert_eq!(e.audio.len(), 8000);
        assert_eq!(e.audio.num_channels(), 1);
        assert!(e.gate.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_weight_head_silences_output() {
        let mut m = Model::new(&ModelConfig::default()).unwrap();
        let fc2 = m.net.weights.output_layer().clone();
        m.params.fill(fc2.weight_name(), 0.0).unwrap();
        m.params.fill(fc2.bias_name(), 0.0).unwrap();
        let (mix, far) = scene(8000);
        let e = m.enhance(&mix, &far, true).unwrap();
        assert!(e.audio.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count_is_a_mismatch() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let (_, far) = scene(8000);
        let mono = AudioClip::mono(16000, noise(8000, 4));
        assert!(matches!(m.enhance(&mono, &far, true), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn forced_open_gate_only_changes_scaling() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let (mix, far) = scene(8000);
        let a = m.enhance(&mix, &far, true).unwrap();
        let b = m.enhance(&mix, &far, false).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.gate, b.gate);
        assert!(b.applied_gate.iter().all(|&p| p == 1.0));
    }

    #[test]
    #[ignore]
    fn timing() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let (mix, far) = scene(8192);
        let prep = m.net.prepare(&mix, &far).unwrap();
        let t0 = std::time::Instant::now();
        for _ in 0..3 {
            let mut g = Graph::new();
            let y = g.constant(prep.spec.to_tensor());
            let fv = m.net.forward(&mut g, &m.params, y, prep.len, true).unwrap();
            let l = g.mean(fv.audio);
            g.backward(l).unwrap();
        }
        eprintln!("fwd+bwd 0.5 s: {:?}", t0.elapsed() / 3);
    }
}
