//! Gradient checks for the signal-path ops and the assembled models.

use std::collections::BTreeSet;
use std::str::FromStr;

use nnkit::gradcheck::{project_to_scalar, random_tensor, GradCheckOptions, GradCheckReport};
use nnkit::init::Initializer;
use nnkit::{Graph, NnError, ParamTree, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aec::NeuralAec;
use crate::audio::AudioClip;
use crate::beamformer::{DtdGate, SpeechNoiseEstimator, WeightPredictor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Network};
use crate::spectral::{apply_beamformer, apply_crf, corr_features, covariance, CrfGeometry};
use crate::stft::{Stft, StftConfig};
use crate::train::{bce, mse_spectrum_scale, si_snr_loss, spectral_mse};

/// [`nnkit::gradcheck::check`] for builders returning this crate's errors.
pub fn check<F>(
    name: &str,
    tree: &ParamTree,
    inputs: &[Tensor],
    tolerance: f64,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamTree, &[Var]) -> Result<Var>,
{
    Ok(nnkit::gradcheck::check(name, tree, inputs, tolerance, opts, |g, t, x| {
        build(g, t, x).map_err(|e| match e {
            crate::Error::Nn(n) => n,
            other => NnError::Invalid(other.to_string()),
        })
    })?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    All,
    Stft,
    Nnkit,
    Aec,
    Bf,
    Loss,
    Model,
}

impl Module {
    pub const PARTS: [Module; 6] = [Module::Stft, Module::Nnkit, Module::Aec, Module::Bf, Module::Loss, Module::Model];

    pub fn name(self) -> &'static str {
        match self {
            Module::All => "all",
            Module::Stft => "stft",
            Module::Nnkit => "nnkit",
            Module::Aec => "aec",
            Module::Bf => "bf",
            Module::Loss => "loss",
            Module::Model => "model",
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Module::All)
            .chain(Module::PARTS)
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module {s:?}")))
    }
}

/// Every op name that records a backward closure.
pub fn differentiable_ops() -> BTreeSet<&'static str> {
    nnkit::ops::OP_NAMES
        .iter()
        .chain(crate::stft::OP_NAMES.iter())
        .chain(crate::spectral::OP_NAMES.iter())
        .chain(crate::train::OP_NAMES.iter())
        .copied()
        .collect()
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: Module,
    pub report: GradCheckReport,
}

type Build = Box<dyn Fn(&mut Graph, &ParamTree, &[Var]) -> Result<Var>>;

struct Case {
    module: Module,
    name: &'static str,
    tol: f64,
    tree: ParamTree,
    inputs: Vec<Tensor>,
    /// Coordinates per tensor for large cases.
    max_coords: Option<usize>,
    build: Build,
}

impl Case {
    fn new(module: Module, name: &'static str, tol: f64, tree: ParamTree, inputs: Vec<Tensor>, build: Build) -> Self {
        Self {
            module,
            name,
            tol,
            tree,
            inputs,
            max_coords: None,
            build,
        }
    }
}

fn tiny_stft() -> StftConfig {
    StftConfig {
        fft_size: 16,
        win_length: 16,
        hop: 8,
        sample_rate: 16000,
    }
}

/// Narrow model on a 16-point STFT for the component checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        mics: 2,
        enc_channels: vec![3, 4, 4],
        aec_width: 4,
        aec_heads: 2,
        ft_hidden: 4,
        bf_width: 4,
        bf_heads: 2,
        bf_hidden: 4,
        weight_hidden: 4,
        dtd_width: 4,
        dtd_heads: 2,
        dtd_hidden: 3,
        stft: tiny_stft(),
        ..ModelConfig::default()
    }
}

fn noise(len: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn signal_cases() -> Result<Vec<Case>> {
    let r = random_tensor;
    let mut out = Vec::new();
    let stft = Stft::new(tiny_stft())?;
    let s1 = stft.clone();
    out.push(Case::new(
        Module::Stft,
        "stft",
        1e-6,
        ParamTree::new(),
        vec![r(&[2, 45], 1.0, 101)],
        Box::new(move |g, _, x| {
            let y = s1.stft_op(g, x[0])?;
            Ok(project_to_scalar(g, y, 1)?)
        }),
    ));
    out.push(Case::new(
        Module::Stft,
        "istft",
        1e-6,
        ParamTree::new(),
        vec![r(&[2, 4, 9, 2], 1.0, 102)],
        Box::new(move |g, _, x| {
            let y = stft.istft_op(g, x[0], 45)?;
            Ok(project_to_scalar(g, y, 2)?)
        }),
    ));
    out.push(Case::new(
        Module::Aec,
        "corr_features",
        1e-6,
        ParamTree::new(),
        vec![r(&[3, 4, 5, 2], 1.0, 103)],
        Box::new(|g, _, x| {
            let y = corr_features(g, x[0])?;
            Ok(project_to_scalar(g, y, 3)?)
        }),
    ));
    let geom = CrfGeometry { k: 1, l: 1 };
    out.push(Case::new(
        Module::Aec,
        "apply_crf",
        1e-6,
        ParamTree::new(),
        vec![r(&[2, 4, 5, 2], 1.0, 104), r(&[2, 4, 5, geom.taps(), 2], 1.0, 105)],
        Box::new(move |g, _, x| {
            let y = apply_crf(g, x[0], x[1], geom)?;
            Ok(project_to_scalar(g, y, 4)?)
        }),
    ));
    out.push(Case::new(
        Module::Bf,
        "covariance",
        1e-6,
        ParamTree::new(),
        vec![r(&[3, 4, 5, 2], 1.0, 106)],
        Box::new(|g, _, x| {
            let y = covariance(g, x[0])?;
            Ok(project_to_scalar(g, y, 5)?)
        }),
    ));
    out.push(Case::new(
        Module::Bf,
        "apply_beamformer",
        1e-6,
        ParamTree::new(),
        vec![r(&[3, 4, 5, 2], 1.0, 107), r(&[3, 4, 5, 2], 1.0, 108)],
        Box::new(|g, _, x| {
            let y = apply_beamformer(g, x[0], x[1])?;
            Ok(project_to_scalar(g, y, 6)?)
        }),
    ));
    let reference = noise(50, 1.0, 109);
    out.push(Case::new(
        Module::Loss,
        "si_snr_loss",
        1e-6,
        ParamTree::new(),
        vec![Tensor::new(&[50], reference.iter().zip(noise(50, 1.0, 110)).map(|(a, b)| a + b).collect())],
        Box::new(move |g, _, x| si_snr_loss(g, x[0], &reference)),
    ));
    let target = r(&[1, 4, 5, 2], 1.0, 111);
    out.push(Case::new(
        Module::Loss,
        "spectral_mse",
        1e-6,
        ParamTree::new(),
        vec![r(&[1, 4, 5, 2], 1.0, 112)],
        Box::new(move |g, _, x| spectral_mse(g, x[0], &target)),
    ));
    let labels = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    out.push(Case::new(
        Module::Loss,
        "bce",
        1e-6,
        ParamTree::new(),
        vec![r(&[6], 2.0, 113)],
        Box::new(move |g, _, x| {
            let p = g.sigmoid(x[0]);
            bce(g, p, &labels)
        }),
    ));
    Ok(out)
}

fn component_cases() -> Result<Vec<Case>> {
    let cfg = tiny_model_config();
    cfg.validate()?;
    let (n, f) = (4, cfg.stft.bins());
    let c = cfg.stacked_channels();
    let mut out = Vec::new();

    let mut tree = ParamTree::new();
    let aec = NeuralAec::new(&mut tree, &mut Initializer::new(201), &cfg)?;
    out.push(Case::new(
        Module::Aec,
        "neural_aec",
        1e-5,
        tree,
        vec![random_tensor(&[cfg.mics + 1, n, f, 2], 1.0, 202)],
        Box::new(move |g, t, x| {
            let o = aec.forward(g, t, x[0])?;
            Ok(project_to_scalar(g, o.stacked, 7)?)
        }),
    ));

    let mut tree = ParamTree::new();
    let est = SpeechNoiseEstimator::new(&mut tree, &mut Initializer::new(203), &cfg)?;
    out.push(Case::new(
        Module::Bf,
        "speech_noise",
        1e-5,
        tree,
        vec![random_tensor(&[c, n, f, 2], 1.0, 204)],
        Box::new(move |g, t, x| {
            let o = est.forward(g, t, x[0])?;
            let both = g.concat(&[o.speech, o.noise], 0)?;
            Ok(project_to_scalar(g, both, 8)?)
        }),
    ));

    let mut tree = ParamTree::new();
    let wp = WeightPredictor::new(&mut tree, &mut Initializer::new(205), &cfg)?;
    out.push(Case::new(
        Module::Bf,
        "weights",
        1e-5,
        tree,
        vec![random_tensor(&[c, n, f, 2], 1.0, 206), random_tensor(&[c, n, f, 2], 1.0, 207)],
        Box::new(move |g, t, x| {
            let w = wp.forward(g, t, x[0], x[1])?;
            Ok(project_to_scalar(g, w, 9)?)
        }),
    ));

    let mut tree = ParamTree::new();
    let dtd = DtdGate::new(&mut tree, &mut Initializer::new(208), &cfg)?;
    out.push(Case::new(
        Module::Bf,
        "dtd_gate",
        1e-5,
        tree,
        vec![random_tensor(&[c, n, f, 2], 1.0, 209)],
        Box::new(move |g, t, x| {
            let o = dtd.forward(g, t, x[0], true)?;
            let a = project_to_scalar(g, o.scaled, 10)?;
            let b = project_to_scalar(g, o.gate, 11)?;
            Ok(g.add(a, b)?)
        }),
    ));
    Ok(out)
}

/// The default toy model on 0.5 s of audio through the training loss,
/// checked on a few sampled coordinates per tensor.
fn model_case() -> Result<Case> {
    let cfg = ModelConfig::default();
    let model = Model::new(&cfg)?;
    let len = cfg.stft.sample_rate as usize / 2;
    let mix = AudioClip::new(cfg.stft.sample_rate, (0..cfg.mics).map(|m| noise(len, 0.5, 300 + m as u64)).collect())?;
    let far = AudioClip::mono(cfg.stft.sample_rate, noise(len, 0.5, 310));
    let prep = model.net.prepare(&mix, &far)?;
    let reference = noise(len, 0.5, 311);
    let target = {
        let mut t = model.net.stft.stft(&AudioClip::mono(cfg.stft.sample_rate, reference.clone()))?.to_tensor();
        let k = mse_spectrum_scale(&model.net);
        t.data_mut().iter_mut().for_each(|v| *v *= k);
        t
    };
    let Model { net, params } = model;
    let net: Network = net;
    let mut case = Case::new(
        Module::Model,
        "full_model",
        1e-3,
        params,
        vec![prep.spec.to_tensor()],
        Box::new(move |g, t, x| {
            let fv = net.forward(g, t, x[0], len, true)?;
            let l1 = si_snr_loss(g, fv.audio, &reference)?;
            let spec = g.scale(fv.spec, mse_spectrum_scale(&net));
            let l2 = spectral_mse(g, spec, &target)?;
            Ok(g.add(l1, l2)?)
        }),
    );
    case.max_coords = Some(2);
    Ok(case)
}

/// Runs the checks for `module` (every part for [`Module::All`]).
pub fn run(module: Module, opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let wanted = |m: Module| module == Module::All || module == m;
    let mut out = Vec::new();
    if wanted(Module::Nnkit) {
        for report in nnkit::suite::run(opts)? {
            out.push(SuiteEntry {
                module: Module::Nnkit,
                report,
            });
        }
    }
    let mut cases = signal_cases()?;
    cases.extend(component_cases()?);
    if wanted(Module::Model) {
        cases.push(model_case()?);
    }
    for c in cases.into_iter().filter(|c| wanted(c.module)) {
        let o = GradCheckOptions {
            max_coords: c.max_coords.or(opts.max_coords),
            ..opts.clone()
        };
        let report = check(c.name, &c.tree, &c.inputs, c.tol, &o, c.build)?;
        out.push(SuiteEntry {
            module: c.module,
            report,
        });
    }
    Ok(out)
}

/// Ops exercised by a set of reports.
pub fn covered_ops(entries: &[SuiteEntry]) -> BTreeSet<&'static str> {
    entries.iter().flat_map(|e| e.report.ops.iter().copied()).collect()
}
