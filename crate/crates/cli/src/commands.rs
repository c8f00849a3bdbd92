use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Args;
use jaecbf::baseline::{das_beamform, pbfdaf_cancel, pbfdaf_multichannel};
use jaecbf::checkpoint::Checkpoint;
use jaecbf::config::ExperimentConfig;
use jaecbf::gradsuite::{self, Module};
use jaecbf::metrics::{evaluate_corpus, run_system, System};
use jaecbf::model::Model;
use jaecbf::sim::{build_dataset, Manifest, Split};
use jaecbf::train::{TrainItem, Trainer};
use jaecbf::{AudioClip, Error, Result};
use log::info;
use nnkit::gradcheck::GradCheckOptions;
use sha2::{Digest, Sha256};

use crate::Global;

const LOSS_HEADER: &str = "step,loss,sisnr_term,mse_term,grad_norm";

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    match &g.config {
        Some(p) => ExperimentConfig::load(p, &g.overrides),
        None => ExperimentConfig::with_overrides(&g.overrides),
    }
}

/// Whether the user supplied any model settings to check a checkpoint against.
fn explicit(g: &Global) -> bool {
    g.config.is_some() || !g.overrides.is_empty()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_model(path: &Path, cfg: Option<&ExperimentConfig>) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    // Only the architecture must match; the checkpoint carries its own
    // parameters and the gate switch is chosen per call.
    let expected = cfg.map(|c| {
        let mut m = c.model.clone();
        m.dtd = ckpt.model.dtd;
        m.init_seed = ckpt.model.init_seed;
        m
    });
    ckpt.into_model(expected.as_ref())
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory for WAVs and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

pub fn simulate(g: &Global, a: &SimulateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.dataset.seed = s;
    }
    let t0 = Instant::now();
    let manifest = build_dataset(&cfg.dataset, &a.out)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{} {}", s.name(), manifest.split(s).count()))
        .collect();
    println!(
        "{} scenes ({}) in {} [{:.1}s]",
        manifest.scenes.len(),
        counts.join(", "),
        a.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory (or manifest file).
    #[arg(long)]
    data: PathBuf,
    /// Run directory: loss log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn read_loss_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= upto)
        })
        .map(str::to_string)
        .collect())
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    let manifest = Manifest::load(&a.data)?;
    let mut model = Model::new(&cfg.model)?;
    let mut adam = None;
    if let Some(p) = &a.resume {
        let ckpt = Checkpoint::load(p)?;
        adam = ckpt.adam.clone();
        model = ckpt.into_model(Some(&cfg.model))?;
    }
    let fs_hz = cfg.model.stft.sample_rate as f64;
    let chunk = (cfg.train.chunk_seconds * fs_hz).round() as usize;
    let mut items = Vec::new();
    for rec in manifest.split(Split::Train) {
        let scene = manifest.load_scene(rec)?;
        if scene.mixture.num_channels() != cfg.model.mics {
            return Err(Error::ConfigMismatch(format!(
                "scene {} has {} channels, model.mics = {}",
                rec.id,
                scene.mixture.num_channels(),
                cfg.model.mics
            )));
        }
        items.extend(TrainItem::from_scene(&model.net, &scene, chunk)?);
    }
    info!("{} training items, {} parameters", items.len(), model.num_params());
    let mut trainer = Trainer::new(model, cfg.train.clone(), items)?;
    if let Some(st) = adam {
        trainer.adam = st;
    }
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let log_path = a.out.join("loss.csv");
    let start = trainer.step_count();
    let kept = if a.resume.is_some() {
        read_loss_rows(&log_path, start)?
    } else {
        Vec::new()
    };
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{LOSS_HEADER}").map_err(io_err(&log_path))?;
    for row in kept {
        writeln!(log, "{row}").map_err(io_err(&log_path))?;
    }

    let total = trainer.total_steps() as u64;
    let every = cfg.train.checkpoint_every as u64;
    let save = |t: &Trainer, name: &str| -> Result<PathBuf> {
        let p = a.out.join(name);
        Checkpoint::from_model(&t.model, Some(&t.adam), Some(&t.cfg)).save(&p)?;
        Ok(p)
    };
    let t0 = Instant::now();
    while trainer.step_count() < total {
        let st = match trainer.step() {
            Ok(st) => st,
            Err(Error::NonFinite(msg)) => {
                // The failed step never reached the optimizer, so the
                // in-memory parameters are still the last good ones.
                let p = save(&trainer, "last_good.ckpt")?;
                return Err(Error::NonFinite(format!(
                    "{msg} at step {}; last good state in {}",
                    trainer.step_count() + 1,
                    p.display()
                )));
            }
            Err(e) => return Err(e),
        };
        writeln!(
            log,
            "{},{},{},{},{}",
            st.step, st.loss, st.sisnr_term, st.mse_term, st.grad_norm
        )
        .map_err(io_err(&log_path))?;
        if st.step % 10 == 0 || st.step == total {
            info!(
                "step {}/{} loss {:.4} grad {:.3} [{:.0}s]",
                st.step,
                total,
                st.loss,
                st.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
        if every > 0 && st.step % every == 0 {
            save(&trainer, &format!("step_{:06}.ckpt", st.step))?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let p = save(&trainer, "model.ckpt")?;
    println!("trained to step {} -> {}", trainer.step_count(), p.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Checkpoint; not needed for the pure signal-processing systems.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Multichannel mixture WAV.
    #[arg(long)]
    mix: PathBuf,
    /// Mono far-end WAV.
    #[arg(long)]
    far: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// none, pbfdaf, das, jaecbf, jaecbf_dtd or pbfdaf+jaecbf.
    #[arg(long, default_value = "jaecbf_dtd")]
    system: String,
    /// Force the double-talk gate open.
    #[arg(long)]
    no_dtd: bool,
    /// Write per-frame gates and a digest of the pre-gate weights as JSON.
    #[arg(long, hide = true)]
    dump: Option<PathBuf>,
}

fn check_pair(mix: &AudioClip, far: &AudioClip) -> Result<()> {
    if far.num_channels() != 1 {
        return Err(Error::ConfigMismatch(format!("far end has {} channels, expected 1", far.num_channels())));
    }
    if far.len() != mix.len() || far.sample_rate != mix.sample_rate {
        return Err(Error::ConfigMismatch(format!(
            "mixture is {} samples at {} Hz, far end {} at {} Hz",
            mix.len(),
            mix.sample_rate,
            far.len(),
            far.sample_rate
        )));
    }
    Ok(())
}

pub fn enhance(g: &Global, a: &EnhanceArgs) -> Result<ExitCode> {
    let cfg = load_config(g)?;
    let mut system: System = a.system.parse()?;
    if a.no_dtd {
        system = match system {
            System::JaecbfDtd | System::Jaecbf => System::Jaecbf,
            System::PbfdafJaecbf => System::PbfdafJaecbf,
            other => return Err(Error::Config(format!("--no-dtd has no effect on system {other}"))),
        };
    }
    let mix = AudioClip::read_wav(&a.mix)?;
    let far = AudioClip::read_wav(&a.far)?;
    check_pair(&mix, &far)?;

    let out = if system.needs_model() {
        let path = a
            .model
            .as_ref()
            .ok_or_else(|| Error::Config(format!("system {system} needs --model")))?;
        let model = load_model(path, explicit(g).then_some(&cfg))?;
        if model.config().mics != mix.num_channels() {
            return Err(Error::ConfigMismatch(format!(
                "mixture has {} channels, model expects {}",
                mix.num_channels(),
                model.config().mics
            )));
        }
        let gated = !a.no_dtd && system != System::Jaecbf;
        let input = if system == System::PbfdafJaecbf {
            pbfdaf_multichannel(&mix, &far, &cfg.pbfdaf)?
        } else {
            mix.clone()
        };
        let enh = model.enhance(&input, &far, gated)?;
        if let Some(dump) = &a.dump {
            let mut h = Sha256::new();
            for v in enh.refined.data() {
                h.update(v.to_le_bytes());
            }
            let doc = serde_json::json!({
                "system": system.name(),
                "gated": gated,
                "gate": enh.gate,
                "applied_gate": enh.applied_gate,
                "refined_sha256": hex::encode(h.finalize()),
            });
            fs::write(dump, serde_json::to_string_pretty(&doc)?).map_err(io_err(dump))?;
        }
        enh.audio
    } else {
        run_system(system, &mix, &far, None, None, &cfg.pbfdaf)?
    };
    out.write_wav(&a.out)?;
    println!("{system}: {} samples -> {}", out.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Corpus directory (or manifest file).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "jaecbf_dtd")]
    system: String,
    #[arg(long)]
    model: Option<PathBuf>,
    /// train, dev or test; every scene when omitted.
    #[arg(long)]
    split: Option<String>,
    /// Report stem; `.csv` and `.json` are appended.
    #[arg(long)]
    out: PathBuf,
}

pub fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<ExitCode> {
    let cfg = load_config(g)?;
    let system: System = a.system.parse()?;
    let split = a.split.as_deref().map(str::parse::<Split>).transpose()?;
    let manifest = Manifest::load(&a.data)?;
    let model = match (&a.model, system.needs_model()) {
        (Some(p), true) => Some(load_model(p, explicit(g).then_some(&cfg))?),
        (None, true) => return Err(Error::Config(format!("system {system} needs --model"))),
        _ => None,
    };
    let report = evaluate_corpus(&manifest, split, system, model.as_ref(), &cfg.pbfdaf)?;
    report.write(&a.out)?;
    let erle = report.mean.erle_db.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "{system}: {} scenes, si-snr {:.2} dB, sdr {:.2} dB, erle {erle} dB",
        report.mean.scenes, report.mean.sisnr_db, report.mean.sdr_db
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// pbfdaf (per channel) or das.
    #[arg(long, default_value = "pbfdaf")]
    method: String,
    #[arg(long)]
    mix: PathBuf,
    /// Mono far-end WAV (pbfdaf only).
    #[arg(long)]
    far: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the echo estimate (pbfdaf only).
    #[arg(long)]
    echo_out: Option<PathBuf>,
    /// Steering delays in samples, one per channel (das only; default zero).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    delays: Vec<f64>,
}

pub fn baseline(g: &Global, a: &BaselineArgs) -> Result<ExitCode> {
    let cfg = load_config(g)?;
    let mix = AudioClip::read_wav(&a.mix)?;
    match a.method.as_str() {
        "pbfdaf" => {
            let far_path = a.far.as_ref().ok_or_else(|| Error::Config("pbfdaf needs --far".into()))?;
            let far = AudioClip::read_wav(far_path)?;
            check_pair(&mix, &far)?;
            let mut err = Vec::new();
            let mut echo = Vec::new();
            for ch in mix.channels() {
                let o = pbfdaf_cancel(ch, far.channel(0), &cfg.pbfdaf)?;
                err.push(o.error);
                echo.push(o.echo_estimate);
            }
            AudioClip::new(mix.sample_rate, err)?.write_wav(&a.out)?;
            if let Some(p) = &a.echo_out {
                AudioClip::new(mix.sample_rate, echo)?.write_wav(p)?;
            }
        }
        "das" => {
            let delays = if a.delays.is_empty() {
                vec![0.0; mix.num_channels()]
            } else {
                a.delays.clone()
            };
            das_beamform(&mix, &delays)?.write_wav(&a.out)?;
        }
        other => return Err(Error::Config(format!("unknown baseline {other:?}"))),
    }
    println!("{} -> {}", a.method, a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// all, stft, nnkit, aec, bf, loss or model.
    #[arg(long, default_value = "all")]
    module: String,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Perturb every analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let module: Module = a.module.parse()?;
    let opts = GradCheckOptions {
        step: a.step,
        corrupt: a.corrupt,
        ..GradCheckOptions::default()
    };
    let entries = gradsuite::run(module, &opts)?;
    println!("{:<8} {:<22} {:>12} {:>8}  status", "module", "case", "max_rel_err", "tol");
    let mut ok = true;
    for e in &entries {
        let pass = e.report.passed();
        ok &= pass;
        println!(
            "{:<8} {:<22} {:>12.3e} {:>8.0e}  {}",
            e.module.name(),
            e.report.name,
            e.report.max_rel_err,
            e.report.tolerance,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if module == Module::All {
        let covered = gradsuite::covered_ops(&entries);
        let missing: Vec<_> = gradsuite::differentiable_ops().difference(&covered).copied().collect();
        if missing.is_empty() {
            println!("coverage: all {} differentiable ops checked", covered.len());
        } else {
            println!("coverage: unchecked ops {missing:?}");
            ok = false;
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
