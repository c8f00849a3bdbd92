//! Joint AEC-RNN beamformer: speech/noise cRFs, frame-wise covariances,
//! recurrent weight prediction and the double-talk gate.

use nnkit::init::Initializer;
use nnkit::layers::{Conv2d, Dense, Gru, LayerNorm, Mhsa};
use nnkit::{Graph, ParamTree, Var};

use crate::aec::CorrAttention;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::spectral::{apply_beamformer, apply_crf, covariance, CrfGeometry};

/// Emits `cRF_S` and `cRF_N` from the stacked signals and applies them.
#[derive(Clone, Debug)]
pub struct SpeechNoiseEstimator {
    feat: CorrAttention,
    gru: Gru,
    fc: Dense,
    emit: Conv2d,
    channels: usize,
    crf: CrfGeometry,
}

#[derive(Clone, Copy, Debug)]
pub struct SpeechNoise {
    pub crf_s: Var,
    pub crf_n: Var,
    pub speech: Var,
    pub noise: Var,
}

/// `[channels·taps·2, N, F]` → `[channels, N, F, taps, 2]`.
fn planes_to_taps(g: &mut Graph, planes: Var, channels: usize, taps: usize) -> Result<Var> {
    let s = g.shape(planes).to_vec();
    let x = g.reshape(planes, &[channels, taps, 2, s[1], s[2]])?;
    Ok(g.permute(x, &[0, 3, 4, 1, 2])?)
}

impl SpeechNoiseEstimator {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stacked_channels();
        let taps = cfg.crf.taps();
        Ok(Self {
            feat: CorrAttention::new(tree, init, "bf.feat", c, cfg.bf_width, cfg.bf_heads)?,
            gru: Gru::new(tree, init, "bf.est.gru", cfg.bf_width, cfg.bf_hidden)?,
            fc: Dense::new(tree, init, "bf.est.fc", cfg.bf_hidden, cfg.bf_hidden)?,
            emit: Conv2d::new(tree, init, "bf.est.emit", cfg.bf_hidden, 4 * c * taps, (1, 3), (1, 1), (0, 1))?,
            channels: c,
            crf: cfg.crf,
        })
    }

    pub fn emission_layer(&self) -> &Conv2d {
        &self.emit
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, stacked: Var) -> Result<SpeechNoise> {
        let c = self.channels;
        let taps = self.crf.taps();
        let f = self.feat.forward(g, tree, stacked)?;
        let h = self.gru.forward(g, tree, f, None)?;
        let h = self.fc.forward(g, tree, h)?;
        let h = g.elu(h);
        // Frequency becomes the conv width axis.
        let planes = g.permute(h, &[2, 1, 0])?;
        let out = self.emit.forward(g, tree, planes)?;
        let half = 2 * c * taps;
        let ps = g.narrow(out, 0, 0, half)?;
        let pn = g.narrow(out, 0, half, half)?;
        let crf_s = planes_to_taps(g, ps, c, taps)?;
        let crf_n = planes_to_taps(g, pn, c, taps)?;
        let speech = apply_crf(g, stacked, crf_s, self.crf)?;
        let noise = apply_crf(g, stacked, crf_n, self.crf)?;
        Ok(SpeechNoise {
            crf_s,
            crf_n,
            speech,
            noise,
        })
    }
}

/// Layer-normalized covariances → per-bin causal GRU → beam weights.
#[derive(Clone, Debug)]
pub struct WeightPredictor {
    ln_s: LayerNorm,
    ln_n: LayerNorm,
    gru: Gru,
    fc1: Dense,
    fc2: Dense,
    channels: usize,
}

impl WeightPredictor {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stacked_channels();
        let d = 2 * c * c;
        Ok(Self {
            ln_s: LayerNorm::new(tree, "bf.cov.ln_s", d)?,
            ln_n: LayerNorm::new(tree, "bf.cov.ln_n", d)?,
            gru: Gru::new(tree, init, "bf.w.gru", 2 * d, cfg.weight_hidden)?,
            fc1: Dense::new(tree, init, "bf.w.fc1", cfg.weight_hidden, cfg.weight_hidden)?,
            fc2: Dense::new(tree, init, "bf.w.fc2", cfg.weight_hidden, 2 * c)?,
            channels: c,
        })
    }

    pub fn output_layer(&self) -> &Dense {
        &self.fc2
    }

    /// Normalized covariance features `[F, N, 2C²]` of one stream.
    pub fn normalized_covariance(&self, g: &mut Graph, tree: &ParamTree, s: Var, speech: bool) -> Result<Var> {
        let phi = covariance(g, s)?;
        let phi = g.permute(phi, &[1, 0, 2])?;
        let ln = if speech { &self.ln_s } else { &self.ln_n };
        Ok(ln.forward(g, tree, phi)?)
    }

    /// `(S̃, Ñ)` as `[C, N, F, 2]` each → `w` as `[C, N, F, 2]`.
    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, speech: Var, noise: Var) -> Result<Var> {
        if g.shape(speech) != g.shape(noise) {
            return Err(Error::Shape(format!(
                "predict_weights: speech {:?} vs noise {:?}",
                g.shape(speech),
                g.shape(noise)
            )));
        }
        let (n, f) = (g.shape(speech)[1], g.shape(speech)[2]);
        let fs = self.normalized_covariance(g, tree, speech, true)?;
        let fnn = self.normalized_covariance(g, tree, noise, false)?;
        let x = g.concat(&[fs, fnn], 2)?;
        let h = self.gru.forward(g, tree, x, None)?;
        let h = self.fc1.forward(g, tree, h)?;
        let h = g.elu(h);
        let w = self.fc2.forward(g, tree, h)?;
        let w = g.reshape(w, &[f, n, self.channels, 2])?;
        Ok(g.permute(w, &[2, 1, 0, 3])?)
    }
}

/// Attention refinement of the weight sequence plus a per-frame sigmoid
/// gate from a time GRU over the frequency-pooled projection.
#[derive(Clone, Debug)]
pub struct DtdGate {
    proj: Dense,
    mhsa: Mhsa,
    back: Dense,
    gru: Gru,
    head: Dense,
    channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GatedWeights {
    /// MHSA-refined weights `[C, N, F, 2]`.
    pub refined: Var,
    /// Gate probability per frame `[N]`.
    pub gate: Var,
    /// `gate · refined` (or `refined` with the gate forced open).
    pub scaled: Var,
}

impl DtdGate {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stacked_channels();
        Ok(Self {
            proj: Dense::new(tree, init, "dtd.proj", 2 * c, cfg.dtd_width)?,
            mhsa: Mhsa::new(tree, init, "dtd.mhsa", cfg.dtd_width, cfg.dtd_heads)?,
            back: Dense::new(tree, init, "dtd.back", cfg.dtd_width, 2 * c)?,
            gru: Gru::new(tree, init, "dtd.gru", cfg.dtd_width, cfg.dtd_hidden)?,
            head: Dense::new(tree, init, "dtd.head", cfg.dtd_hidden, 1)?,
            channels: c,
        })
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// With `gated == false` the gate is still computed (for inspection)
    /// but the output weights are the refined weights unscaled.
    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, w: Var, gated: bool) -> Result<GatedWeights> {
        let (c, n, f) = (self.channels, g.shape(w)[1], g.shape(w)[2]);
        let wf = g.permute(w, &[2, 1, 0, 3])?;
        let wf = g.reshape(wf, &[f, n, 2 * c])?;
        let z = self.proj.forward(g, tree, wf)?;
        let a = self.mhsa.self_attention(g, tree, z)?;
        let r = self.back.forward(g, tree, a)?;
        let refined = g.add(wf, r)?;
        let refined = g.reshape(refined, &[f, n, c, 2])?;
        let refined = g.permute(refined, &[2, 1, 0, 3])?;

        let pooled = g.mean_axis(z, 0)?;
        let pooled = g.reshape(pooled, &[1, n, self.proj.d_out])?;
        let h = self.gru.forward(g, tree, pooled, None)?;
        let logit = self.head.forward(g, tree, h)?;
        let p = g.sigmoid(logit);
        let gate = g.reshape(p, &[n])?;
        let scaled = if gated {
            g.mul_bcast(refined, gate, 1)?
        } else {
            refined
        };
        Ok(GatedWeights { refined, gate, scaled })
    }
}

/// Beamformer output `Σ_c conj(w_c) Ỹ_c`.
pub fn beamform(g: &mut Graph, w: Var, stacked: Var) -> Result<Var> {
    apply_beamformer(g, w, stacked)
}
