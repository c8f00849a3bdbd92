//! Multichannel neural echo canceller: correlation attention, twin
//! conv encoders, frequency-time GRU, twin decoders emitting cRFs.

use nnkit::init::Initializer;
use nnkit::layers::{Conv2d, Dense, Gru, LayerNorm, Mhsa};
use nnkit::{Graph, ParamTree, Var};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::spectral::{apply_crf, corr_features, corr_feature_len, CrfGeometry};

/// Correlation features of a `[C, N, F, 2]` stack, normalized, projected
/// and attended over time independently in every bin (bins act as batch).
#[derive(Clone, Debug)]
pub struct CorrAttention {
    ln: LayerNorm,
    proj: Dense,
    mhsa: Mhsa,
    pub width: usize,
}

impl CorrAttention {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, prefix: &str, channels: usize, width: usize, heads: usize) -> Result<Self> {
        let d = corr_feature_len(channels);
        Ok(Self {
            ln: LayerNorm::new(tree, &format!("{prefix}.ln"), d)?,
            proj: Dense::new(tree, init, &format!("{prefix}.proj"), d, width)?,
            mhsa: Mhsa::new(tree, init, &format!("{prefix}.mhsa"), width, heads)?,
            width,
        })
    }

    /// `[C, N, F, 2]` → `[F, N, width]`.
    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, y: Var) -> Result<Var> {
        let r = corr_features(g, y)?;
        let r = g.permute(r, &[1, 0, 2])?;
        let r = self.ln.forward(g, tree, r)?;
        let r = self.proj.forward(g, tree, r)?;
        Ok(self.mhsa.self_attention(g, tree, r)?)
    }
}

/// Stride-(1,2) conv stack with ELU; returns every layer's activation.
#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, prefix: &str, c_in: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut prev = c_in;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv2d::new(tree, init, &format!("{prefix}.{i}"), prev, c, (3, 3), (1, 2), (1, 1))?);
            prev = c;
        }
        Ok(Self { convs })
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, x: Var) -> Result<Vec<Var>> {
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for conv in &self.convs {
            let z = conv.forward(g, tree, h)?;
            h = g.elu(z);
            acts.push(h);
        }
        Ok(acts)
    }
}

/// Transposed-conv mirror of an [`Encoder`] with additive skips from it.
#[derive(Clone, Debug)]
pub struct Decoder {
    tconvs: Vec<Conv2d>,
    tanh_out: bool,
}

impl Decoder {
    pub fn new(
        tree: &mut ParamTree,
        init: &mut Initializer,
        prefix: &str,
        channels: &[usize],
        c_out: usize,
        tanh_out: bool,
    ) -> Result<Self> {
        let mut tconvs = Vec::new();
        let rev: Vec<usize> = channels.iter().rev().copied().collect();
        for i in 0..rev.len() {
            let out = rev.get(i + 1).copied().unwrap_or(c_out);
            tconvs.push(Conv2d::new_transposed(tree, init, &format!("{prefix}.{i}"), rev[i], out, (3, 3), (1, 2), (1, 1))?);
        }
        Ok(Self { tconvs, tanh_out })
    }

    /// Name of the last layer's weight (zeroing it and its bias silences
    /// the decoder).
    pub fn output_layer(&self) -> &Conv2d {
        self.tconvs.last().expect("decoder has at least one layer")
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, u: Var, skips: &[Var]) -> Result<Var> {
        let n = self.tconvs.len();
        let mut h = u;
        for (i, tc) in self.tconvs.iter().enumerate() {
            h = tc.forward(g, tree, h)?;
            if i + 1 < n {
                let skip = skips[n - 2 - i];
                if g.shape(h) != g.shape(skip) {
                    return Err(Error::Shape(format!(
                        "decoder layer {i}: {:?} vs skip {:?} (frequency bins must be odd at every level)",
                        g.shape(h),
                        g.shape(skip)
                    )));
                }
                h = g.add(h, skip)?;
                h = g.elu(h);
            } else if self.tanh_out {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Frequency-time GRU with residual connections on `[C, N, F']`.
#[derive(Clone, Debug)]
pub struct FtGru {
    freq_gru: Gru,
    freq_fc: Dense,
    time_gru: Gru,
    time_fc: Dense,
}

impl FtGru {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, prefix: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            freq_gru: Gru::new(tree, init, &format!("{prefix}.freq_gru"), channels, hidden)?,
            freq_fc: Dense::new(tree, init, &format!("{prefix}.freq_fc"), hidden, channels)?,
            time_gru: Gru::new(tree, init, &format!("{prefix}.time_gru"), channels, hidden)?,
            time_fc: Dense::new(tree, init, &format!("{prefix}.time_fc"), hidden, channels)?,
        })
    }

    /// Every layer's parameter names, for zeroing in tests.
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for gru in [&self.freq_gru, &self.time_gru] {
            v.extend(gru.param_names().iter().map(|s| s.to_string()));
        }
        for d in [&self.freq_fc, &self.time_fc] {
            v.push(d.weight_name().into());
            v.push(d.bias_name().into());
        }
        v
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, u: Var) -> Result<Var> {
        // Scan over frequency with frames as batch.
        let x = g.permute(u, &[1, 2, 0])?;
        let h = self.freq_gru.forward(g, tree, x, None)?;
        let h = self.freq_fc.forward(g, tree, h)?;
        let z = g.add(h, x)?;
        // Scan over time with bins as batch.
        let zt = g.permute(z, &[1, 0, 2])?;
        let h = self.time_gru.forward(g, tree, zt, None)?;
        let h = self.time_fc.forward(g, tree, h)?;
        let o = g.add(h, zt)?;
        Ok(g.permute(o, &[2, 1, 0])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AecOutput {
    /// `[M, N, F, taps, 2]`
    pub crf_mix: Var,
    /// `[1, N, F, taps, 2]`
    pub crf_echo: Var,
    /// `[M, N, F, 2]`
    pub d_aec: Var,
    /// `[1, N, F, 2]`
    pub x_aec: Var,
    /// `[2M + 2, N, F, 2]`: mixture, far end, D_aec, X_aec.
    pub stacked: Var,
}

#[derive(Clone, Debug)]
pub struct NeuralAec {
    feat: CorrAttention,
    enc_mix: Encoder,
    enc_far: Encoder,
    ftgru: FtGru,
    dec_mix: Decoder,
    dec_echo: Decoder,
    mics: usize,
    crf: CrfGeometry,
}

/// `[C, N, F, 2]` → `[2C, N, F]` conv planes (re/im of each channel).
fn to_planes(g: &mut Graph, y: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    let p = g.permute(y, &[0, 3, 1, 2])?;
    Ok(g.reshape(p, &[2 * s[0], s[1], s[2]])?)
}

/// `[channels·taps·2, N, F]` → `[channels, N, F, taps, 2]`.
fn to_taps(g: &mut Graph, planes: Var, channels: usize, taps: usize) -> Result<Var> {
    let s = g.shape(planes).to_vec();
    let x = g.reshape(planes, &[channels, taps, 2, s[1], s[2]])?;
    Ok(g.permute(x, &[0, 3, 4, 1, 2])?)
}

impl NeuralAec {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.mics;
        let taps = cfg.crf.taps();
        let enc = &cfg.enc_channels;
        Ok(Self {
            feat: CorrAttention::new(tree, init, "aec.feat", m + 1, cfg.aec_width, cfg.aec_heads)?,
            enc_mix: Encoder::new(tree, init, "aec.enc_mix", 2 * m, enc)?,
            enc_far: Encoder::new(tree, init, "aec.enc_far", 2 + cfg.aec_width, enc)?,
            ftgru: FtGru::new(tree, init, "aec.ftgru", *enc.last().expect("validated"), cfg.ft_hidden)?,
            dec_mix: Decoder::new(tree, init, "aec.dec_mix", enc, 2 * taps * m, cfg.tanh_taps)?,
            dec_echo: Decoder::new(tree, init, "aec.dec_echo", enc, 2 * taps, cfg.tanh_taps)?,
            mics: m,
            crf: cfg.crf,
        })
    }

    pub fn ftgru(&self) -> &FtGru {
        &self.ftgru
    }

    pub fn output_layers(&self) -> [&Conv2d; 2] {
        [self.dec_mix.output_layer(), self.dec_echo.output_layer()]
    }

    /// Runs on `y = [M mixture channels, far end]` as `[M+1, N, F, 2]`.
    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, y: Var) -> Result<AecOutput> {
        let m = self.mics;
        let shape = g.shape(y).to_vec();
        if shape.len() != 4 || shape[0] != m + 1 {
            return Err(Error::ConfigMismatch(format!(
                "model expects {} mixture channels plus far end, got input {shape:?}",
                m
            )));
        }
        let mix = g.narrow(y, 0, 0, m)?;
        let far = g.narrow(y, 0, m, 1)?;

        let feats = self.feat.forward(g, tree, y)?;
        let feats = g.permute(feats, &[2, 1, 0])?;
        let mix_planes = to_planes(g, mix)?;
        let far_planes = to_planes(g, far)?;
        let far_in = g.concat(&[far_planes, feats], 0)?;

        let acts_mix = self.enc_mix.forward(g, tree, mix_planes)?;
        let acts_far = self.enc_far.forward(g, tree, far_in)?;
        let u_enc = g.add(*acts_mix.last().unwrap(), *acts_far.last().unwrap())?;
        let u_out = self.ftgru.forward(g, tree, u_enc)?;

        let taps = self.crf.taps();
        let pm = self.dec_mix.forward(g, tree, u_out, &acts_mix)?;
        let crf_mix = to_taps(g, pm, m, taps)?;
        let pe = self.dec_echo.forward(g, tree, u_out, &acts_far)?;
        let crf_echo = to_taps(g, pe, 1, taps)?;

        let d_aec = apply_crf(g, mix, crf_mix, self.crf)?;
        let x_aec = apply_crf(g, far, crf_echo, self.crf)?;
        let stacked = stack_outputs(g, y, d_aec, x_aec)?;
        Ok(AecOutput {
            crf_mix,
            crf_echo,
            d_aec,
            x_aec,
            stacked,
        })
    }
}

/// Channel stack `[Y, D_aec, X_aec]`.
pub fn stack_outputs(g: &mut Graph, y: Var, d_aec: Var, x_aec: Var) -> Result<Var> {
    let (sy, sd, sx) = (g.shape(y).to_vec(), g.shape(d_aec).to_vec(), g.shape(x_aec).to_vec());
    if sy[1..] != sd[1..] || sy[1..] != sx[1..] {
        return Err(Error::Shape(format!("stack_outputs: {sy:?}, {sd:?}, {sx:?}")));
    }
    Ok(g.concat(&[y, d_aec, x_aec], 0)?)
}

/// Splits a stack back into `(Y, D_aec, X_aec)` for `m` mixture channels.
pub fn unstack_outputs(g: &mut Graph, stacked: Var, m: usize) -> Result<(Var, Var, Var)> {
    Ok((g.narrow(stacked, 0, 0, m + 1)?, g.narrow(stacked, 0, m + 1, m)?, g.narrow(stacked, 0, 2 * m + 1, 1)?))
}
