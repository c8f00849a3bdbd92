//! Losses, the joint training step and the epoch/batch schedule.

use std::f64::consts::LN_10;

use nnkit::optim::{clip_grad_norm, AdamConfig, AdamState};
use nnkit::{Graph, ParamTree, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{domain, Error, Result};
use crate::metrics::{si_snr_from_terms, si_snr_terms, RATIO_CAP_DB};
use crate::model::{Model, Network};
use crate::sim::scene::Activity;
use crate::sim::LoadedScene;

pub const OP_NAMES: [&str; 2] = ["si_snr_loss", "bce"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub chunk_seconds: f64,
    pub grad_clip: f64,
    pub alpha_sisnr: f64,
    pub alpha_mse: f64,
    /// Weight of the optional supervised gate loss (0 disables it).
    pub alpha_dtd: f64,
    pub seed: u64,
    /// Steps between checkpoints (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 12,
            epochs: 30,
            steps: None,
            chunk_seconds: 4.0,
            grad_clip: 10.0,
            alpha_sisnr: 1.0,
            alpha_mse: 1.0,
            alpha_dtd: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("chunk_seconds", self.chunk_seconds), ("grad_clip", self.grad_clip)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("alpha_sisnr", self.alpha_sisnr), ("alpha_mse", self.alpha_mse), ("alpha_dtd", self.alpha_dtd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if self.batch == 0 || (self.epochs == 0 && self.steps.is_none()) {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Negated, capped Si-SNR of `est` (any shape) against `reference`.
pub fn si_snr_loss(g: &mut Graph, est: Var, reference: &[f64]) -> Result<Var> {
    let x = g.value(est).data().to_vec();
    if x.len() != reference.len() {
        return domain(format!("estimate has {} samples, reference {}", x.len(), reference.len()));
    }
    let (a, rr, ee, e, r) = si_snr_terms(&x, reference);
    if rr == 0.0 {
        return domain("all-zero reference");
    }
    let value = si_snr_from_terms(a, rr, ee);
    let capped = value.abs() >= RATIO_CAP_DB;
    let backward = Box::new(move |ctx: &nnkit::BackwardCtx<'_>| {
        let n = e.len();
        if capped {
            return vec![Some(vec![0.0; n])];
        }
        let up = ctx.grad[0];
        // d/de of 10·log10(a² / (R·E − a²)).
        let denom = rr * ee - a * a;
        let k = 10.0 / LN_10;
        let mut gr: Vec<f64> = (0..n)
            .map(|i| -up * k * (2.0 * r[i] / a - (2.0 * rr * e[i] - 2.0 * a * r[i]) / denom))
            .collect();
        let m = gr.iter().sum::<f64>() / n as f64;
        gr.iter_mut().for_each(|v| *v -= m);
        vec![Some(gr)]
    });
    Ok(g.custom("si_snr_loss", &[est], Tensor::scalar(-value), backward))
}

/// Mean over TF bins of the complex squared error; spectra are `[.., 2]` re/im.
pub fn spectral_mse(g: &mut Graph, est: Var, target: &Tensor) -> Result<Var> {
    if g.shape(est) != target.shape() {
        return Err(Error::Shape(format!(
            "spectral MSE between {:?} and {:?}",
            g.shape(est),
            target.shape()
        )));
    }
    let bins = target.numel() / 2;
    let t = g.constant(target.clone());
    let d = g.sub(est, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / bins as f64))
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`.
pub fn bce(g: &mut Graph, p: Var, labels: &[f64]) -> Result<Var> {
    let pv = g.value(p).data().to_vec();
    if pv.len() != labels.len() {
        return domain(format!("{} probabilities, {} labels", pv.len(), labels.len()));
    }
    const EPS: f64 = 1e-7;
    let n = pv.len() as f64;
    let loss = pv
        .iter()
        .zip(labels)
        .map(|(&q, &y)| {
            let q = q.clamp(EPS, 1.0 - EPS);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n;
    let labels = labels.to_vec();
    let backward = Box::new(move |ctx: &nnkit::BackwardCtx<'_>| {
        let up = ctx.grad[0];
        let gr = pv
            .iter()
            .zip(&labels)
            .map(|(&q, &y)| {
                if q <= EPS || q >= 1.0 - EPS {
                    0.0
                } else {
                    up * (q - y) / (q * (1.0 - q)) / n
                }
            })
            .collect();
        vec![Some(gr)]
    });
    Ok(g.custom("bce", &[p], Tensor::scalar(loss), backward))
}

/// One scene, transformed once and reused every epoch.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    /// Normalized `[M+1, N, F, 2]` input spectra.
    pub input: Tensor,
    /// Target spectrum in the same normalized domain, scaled by `1/sqrt(Σw²)`.
    pub target_spec: Tensor,
    pub target_audio: Vec<f64>,
    pub len: usize,
    /// Per model frame: 1 when the near end is active.
    pub near_active: Vec<f64>,
}

/// Scale applied to spectra before the MSE so a unit-RMS signal has unit
/// mean bin power.
pub fn mse_spectrum_scale(net: &Network) -> f64 {
    let w2: f64 = net.stft.config().window_energy();
    1.0 / w2.sqrt()
}

impl TrainItem {
    pub fn new(net: &Network, id: &str, mixture: &AudioClip, far_end: &AudioClip, target: &AudioClip, activity: &[Activity], hop: usize) -> Result<Self> {
        let prep = net.prepare(mixture, far_end)?;
        let ts: Vec<f64> = target.channel(0).iter().map(|v| v * prep.mix_scale).collect();
        let tclip = AudioClip::mono(target.sample_rate, ts.clone());
        let k = mse_spectrum_scale(net);
        let mut target_spec = net.stft.stft(&tclip)?.to_tensor();
        target_spec.data_mut().iter_mut().for_each(|v| *v *= k);
        let frames = prep.spec.frames;
        let cfg = net.stft.config();
        let near_active = (0..frames)
            .map(|n| {
                let first = n * cfg.hop / hop;
                let last = ((n * cfg.hop + cfg.win_length).div_ceil(hop)).min(activity.len());
                let on = activity[first.min(activity.len())..last]
                    .iter()
                    .any(|a| matches!(a, Activity::NearOnly | Activity::DoubleTalk));
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            id: id.to_string(),
            input: prep.spec.to_tensor(),
            target_spec,
            target_audio: ts,
            len: prep.len,
            near_active,
        })
    }

    /// Splits a loaded scene into non-overlapping `chunk` sample pieces
    /// (the whole scene when shorter).
    pub fn from_scene(net: &Network, scene: &LoadedScene, chunk: usize) -> Result<Vec<Self>> {
        let len = scene.mixture.len();
        let hop = scene.record.hop;
        let chunk = chunk.max(1);
        let pieces = (len / chunk).max(1);
        let size = if len < chunk { len } else { chunk };
        (0..pieces)
            .map(|p| {
                let (a, b) = (p * size, p * size + size);
                let cut = |c: &AudioClip| -> Result<AudioClip> {
                    AudioClip::new(c.sample_rate, c.channels().iter().map(|ch| ch[a..b].to_vec()).collect())
                };
                // Activity frames overlapping the piece; hop divides the chunk in practice.
                let acts: Vec<Activity> = scene.activity[a / hop..b.div_ceil(hop).min(scene.activity.len())].to_vec();
                let id = if pieces == 1 { scene.record.id.clone() } else { format!("{}#{p}", scene.record.id) };
                Self::new(net, &id, &cut(&scene.mixture)?, &cut(&scene.far_end)?, &cut(&scene.target)?, &acts, hop)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub sisnr_term: f64,
    pub mse_term: f64,
    pub dtd_term: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

struct ItemResult {
    loss: f64,
    sisnr: f64,
    mse: f64,
    dtd: f64,
    grads: Vec<(String, Vec<f64>)>,
}

fn item_loss(net: &Network, params: &ParamTree, item: &TrainItem, cfg: &TrainConfig) -> Result<ItemResult> {
    let mut g = Graph::new();
    let y = g.constant(item.input.clone());
    let gated = net.cfg.dtd;
    let fv = net.forward(&mut g, params, y, item.len, gated)?;
    let sis = si_snr_loss(&mut g, fv.audio, &item.target_audio)?;
    let spec = g.scale(fv.spec, mse_spectrum_scale(net));
    let mse = spectral_mse(&mut g, spec, &item.target_spec)?;
    let a = g.scale(sis, cfg.alpha_sisnr);
    let b = g.scale(mse, cfg.alpha_mse);
    let mut total = g.add(a, b)?;
    let mut dtd = 0.0;
    if cfg.alpha_dtd > 0.0 && gated {
        let d = bce(&mut g, fv.gated.gate, &item.near_active)?;
        dtd = g.value(d).item();
        let d = g.scale(d, cfg.alpha_dtd);
        total = g.add(total, d)?;
    }
    let loss = g.value(total).item();
    let sisnr = g.value(sis).item();
    let mse_v = g.value(mse).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss on {} (si-snr term {sisnr}, mse term {mse_v})",
            item.id
        )));
    }
    g.backward(total)?;
    Ok(ItemResult {
        loss,
        sisnr,
        mse: mse_v,
        dtd,
        grads: g.param_grads(),
    })
}

/// Forward + backward over a batch, clip, and one Adam update.
pub fn train_step(model: &mut Model, adam: &mut AdamState, batch: &[&TrainItem], cfg: &TrainConfig) -> Result<StepStats> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let net = &model.net;
    let params = &model.params;
    let results = batch
        .par_iter()
        .map(|item| item_loss(net, params, item, cfg))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / batch.len() as f64;
    model.params.zero_grad();
    let mut stats = StepStats::default();
    for r in &results {
        for (name, gr) in &r.grads {
            model.params.add_grad(name, gr, w)?;
        }
        stats.loss += r.loss * w;
        stats.sisnr_term += r.sisnr * w;
        stats.mse_term += r.mse * w;
        stats.dtd_term += r.dtd * w;
    }
    if !model.params.grads_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    stats.grad_norm = model.params.grad_norm();
    clip_grad_norm(&mut model.params, cfg.grad_clip);
    adam.step(&mut model.params, &cfg.adam())?;
    stats.step = adam.step;
    Ok(stats)
}

/// Loss without an update (for monitoring).
pub fn eval_loss(model: &Model, items: &[&TrainItem], cfg: &TrainConfig) -> Result<f64> {
    let r = items
        .par_iter()
        .map(|item| item_loss(&model.net, &model.params, item, cfg).map(|r| r.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(r.iter().sum::<f64>() / r.len().max(1) as f64)
}

/// The model, its optimizer and the fixed batch schedule.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub items: Vec<TrainItem>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, items: Vec<TrainItem>) -> Result<Self> {
        cfg.validate()?;
        if items.is_empty() {
            return domain("no training items");
        }
        let adam = AdamState::new(&model.params);
        Ok(Self { model, adam, cfg, items })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.items.len().div_ceil(self.cfg.batch)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.steps.unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Item indices for 0-based step `step`; depends only on the seed.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let epoch = step / spe;
        let k = (step % spe) as usize;
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        let end = ((k + 1) * self.cfg.batch).min(order.len());
        order[k * self.cfg.batch..end].to_vec()
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let idx = self.batch_indices(self.adam.step);
        let batch: Vec<&TrainItem> = idx.iter().map(|&i| &self.items[i]).collect();
        train_step(&mut self.model, &mut self.adam, &batch, &self.cfg)
    }
}

/// Mean of the first and last `window` values.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let first = losses[..w].iter().sum::<f64>() / w as f64;
    let last = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    Some((first, last))
}

/// The loss-fall criterion: the final smoothed loss is at least `frac`
/// of `|initial|` below the initial one (losses can be negative).
pub fn loss_fell(initial: f64, last: f64, frac: f64) -> bool {
    last <= initial - frac * initial.abs()
}
