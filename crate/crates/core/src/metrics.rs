//! Objective scores: Si-SNR, SDR and ERLE, per scene and over a corpus.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::baseline::{das_beamform, pbfdaf_cancel, pbfdaf_multichannel, steering_delays, PbfdafConfig};
use crate::error::{domain, Error, Result};
use crate::model::Model;
use crate::sim::scene::Activity;
use crate::sim::{LoadedScene, Manifest, Split};

/// Magnitude cap on Si-SNR and SDR.
pub const RATIO_CAP_DB: f64 = 60.0;
pub const ERLE_CAP_DB: f64 = 80.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return domain(format!("estimate has {} samples, reference {}", est.len(), reference.len()));
    }
    if reference.is_empty() {
        return domain("empty reference");
    }
    Ok(())
}

/// Si-SNR parts on zero-meaned signals: `(⟨e,r⟩, ‖r‖², ‖e‖²)`.
pub fn si_snr_terms(est: &[f64], reference: &[f64]) -> (f64, f64, f64, Vec<f64>, Vec<f64>) {
    let e = zero_mean(est);
    let r = zero_mean(reference);
    (dot(&e, &r), dot(&r, &r), dot(&e, &e), e, r)
}

/// Si-SNR from its parts, capped at ±60 dB.
pub fn si_snr_from_terms(a: f64, rr: f64, ee: f64) -> f64 {
    let target = a * a / rr;
    let noise = ee - target;
    if noise <= 0.0 {
        return RATIO_CAP_DB;
    }
    if target <= 0.0 {
        return -RATIO_CAP_DB;
    }
    (10.0 * (target / noise).log10()).clamp(-RATIO_CAP_DB, RATIO_CAP_DB)
}

pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let (a, rr, ee, _, _) = si_snr_terms(est, reference);
    if rr == 0.0 {
        return domain("all-zero reference");
    }
    Ok(si_snr_from_terms(a, rr, ee))
}

pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(est, reference)?;
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return domain("all-zero reference");
    }
    let err: f64 = est.iter().zip(reference).map(|(e, r)| (r - e) * (r - e)).sum();
    if err == 0.0 {
        return Ok(RATIO_CAP_DB);
    }
    Ok((10.0 * (rr / err).log10()).clamp(-RATIO_CAP_DB, RATIO_CAP_DB))
}

/// ERLE over frames labeled far-only; `None` when there are none.
pub fn erle(mic_ref: &[f64], est: &[f64], activity: &[Activity], hop: usize) -> Result<Option<f64>> {
    check_pair(est, mic_ref)?;
    if activity.is_empty() {
        return domain("no activity labels");
    }
    if hop == 0 || activity.len() != mic_ref.len().div_ceil(hop) {
        return domain(format!(
            "{} activity labels for {} samples at hop {hop}",
            activity.len(),
            mic_ref.len()
        ));
    }
    let (mut dm, mut de, mut any) = (0.0, 0.0, false);
    for (k, a) in activity.iter().enumerate() {
        if *a != Activity::FarOnly {
            continue;
        }
        any = true;
        let end = ((k + 1) * hop).min(mic_ref.len());
        for t in k * hop..end {
            dm += mic_ref[t] * mic_ref[t];
            de += est[t] * est[t];
        }
    }
    if !any {
        return Ok(None);
    }
    if de == 0.0 {
        return Ok(Some(ERLE_CAP_DB));
    }
    if dm == 0.0 {
        return Ok(Some(-ERLE_CAP_DB));
    }
    Ok(Some((10.0 * (dm / de).log10()).min(ERLE_CAP_DB)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "none")]
    Unprocessed,
    #[serde(rename = "pbfdaf")]
    Pbfdaf,
    #[serde(rename = "das")]
    Das,
    #[serde(rename = "jaecbf")]
    Jaecbf,
    #[serde(rename = "jaecbf_dtd")]
    JaecbfDtd,
    #[serde(rename = "pbfdaf+jaecbf")]
    PbfdafJaecbf,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Unprocessed,
        System::Pbfdaf,
        System::Das,
        System::Jaecbf,
        System::JaecbfDtd,
        System::PbfdafJaecbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Unprocessed => "none",
            System::Pbfdaf => "pbfdaf",
            System::Das => "das",
            System::Jaecbf => "jaecbf",
            System::JaecbfDtd => "jaecbf_dtd",
            System::PbfdafJaecbf => "pbfdaf+jaecbf",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, System::Jaecbf | System::JaecbfDtd | System::PbfdafJaecbf)
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown system {s:?}")))
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Steering target for the delay-and-sum baseline.
#[derive(Clone, Debug, Default)]
pub struct Geometry {
    pub source: [f64; 3],
    pub mics: Vec<[f64; 3]>,
    pub sound_speed: f64,
}

/// Runs one processing chain on a mixture; returns a mono estimate.
pub fn run_system(
    system: System,
    mixture: &AudioClip,
    far_end: &AudioClip,
    model: Option<&Model>,
    geometry: Option<&Geometry>,
    pbfdaf: &PbfdafConfig,
) -> Result<AudioClip> {
    let need_model = || model.ok_or_else(|| Error::Config(format!("system {system} needs a model")));
    match system {
        System::Unprocessed => Ok(mixture.select(0)),
        System::Pbfdaf => {
            let out = pbfdaf_cancel(mixture.channel(0), far_end.channel(0), pbfdaf)?;
            Ok(AudioClip::mono(mixture.sample_rate, out.error))
        }
        System::Das => {
            let delays = match geometry {
                Some(g) => {
                    if g.mics.len() != mixture.num_channels() {
                        return domain("geometry and mixture disagree on mic count");
                    }
                    steering_delays(&g.source, &g.mics, mixture.sample_rate, g.sound_speed)
                }
                None => vec![0.0; mixture.num_channels()],
            };
            das_beamform(mixture, &delays)
        }
        System::Jaecbf => Ok(need_model()?.enhance(mixture, far_end, false)?.audio),
        System::JaecbfDtd => Ok(need_model()?.enhance(mixture, far_end, true)?.audio),
        System::PbfdafJaecbf => {
            let m = need_model()?;
            let pre = pbfdaf_multichannel(mixture, far_end, pbfdaf)?;
            Ok(m.enhance(&pre, far_end, true)?.audio)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub sisnr_db: f64,
    pub sdr_db: f64,
    pub erle_db: Option<f64>,
    /// Set when any value sits at its cap.
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScore {
    pub sisnr_db: f64,
    pub sdr_db: f64,
    pub erle_db: Option<f64>,
    pub scenes: usize,
    pub erle_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: System,
    pub split: Option<Split>,
    pub scenes: Vec<SceneScore>,
    pub mean: MeanScore,
}

pub fn score_scene(scene: &LoadedScene, est: &AudioClip) -> Result<SceneScore> {
    if est.num_channels() != 1 {
        return domain("estimate must be mono");
    }
    let target = scene.target.channel(0);
    let sisnr_db = si_snr(est.channel(0), target)?;
    let sdr_db = sdr(est.channel(0), target)?;
    let erle_db = erle(scene.mixture.channel(0), est.channel(0), &scene.activity, scene.record.hop)?;
    let capped = sisnr_db.abs() >= RATIO_CAP_DB
        || sdr_db.abs() >= RATIO_CAP_DB
        || erle_db.is_some_and(|e| e.abs() >= ERLE_CAP_DB);
    Ok(SceneScore {
        scene_id: scene.record.id.clone(),
        sisnr_db,
        sdr_db,
        erle_db,
        capped,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_scores(system: System, split: Option<Split>, scenes: Vec<SceneScore>) -> Self {
        let mean = MeanScore {
            sisnr_db: mean(scenes.iter().map(|s| s.sisnr_db)).unwrap_or(f64::NAN),
            sdr_db: mean(scenes.iter().map(|s| s.sdr_db)).unwrap_or(f64::NAN),
            erle_db: mean(scenes.iter().filter_map(|s| s.erle_db)),
            scenes: scenes.len(),
            erle_scenes: scenes.iter().filter(|s| s.erle_db.is_some()).count(),
        };
        Self {
            system,
            split,
            scenes,
            mean,
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let o = |v: Option<f64>| v.map(f).unwrap_or_default();
        let mut out = String::from("scene_id,sisnr_db,sdr_db,erle_db\n");
        for s in &self.scenes {
            out.push_str(&format!("{},{},{},{}\n", s.scene_id, f(s.sisnr_db), f(s.sdr_db), o(s.erle_db)));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            f(self.mean.sisnr_db),
            f(self.mean.sdr_db),
            o(self.mean.erle_db)
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, stem: &Path) -> Result<()> {
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json()?)] {
            let path = stem.with_extension(ext);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            f.write_all(body.as_bytes()).map_err(|e| Error::Io { path, source: e })?;
        }
        Ok(())
    }
}

/// Scores one system over the scenes of a manifest (all splits when `split` is `None`).
pub fn evaluate_corpus(
    manifest: &Manifest,
    split: Option<Split>,
    system: System,
    model: Option<&Model>,
    pbfdaf: &PbfdafConfig,
) -> Result<EvalReport> {
    if system.needs_model() && model.is_none() {
        return Err(Error::Config(format!("system {system} needs a model")));
    }
    let mut scores = Vec::new();
    for rec in manifest.scenes.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        let scene = manifest.load_scene(rec)?;
        if let Some(m) = model {
            if m.config().mics != scene.mixture.num_channels() {
                return Err(Error::ConfigMismatch(format!(
                    "scene {} has {} channels, model expects {}",
                    rec.id,
                    scene.mixture.num_channels(),
                    m.config().mics
                )));
            }
        }
        let geom = Geometry {
            source: rec.room.source_pos,
            mics: rec.room.mic_positions.clone(),
            sound_speed: rec.room.sound_speed,
        };
        let est = run_system(system, &scene.mixture, &scene.far_end, model, Some(&geom), pbfdaf)?;
        scores.push(score_scene(&scene, &est)?);
    }
    Ok(EvalReport::from_scores(system, split, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn si_snr_examples() {
        let r = [0.0, 1.0, 0.0, -1.0];
        assert_eq!(si_snr(&r, &r).unwrap(), 60.0);
        let two: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&two, &r).unwrap(), 60.0);
        let v = si_snr(&[0.0, 1.0, 1.0, -1.0], &r).unwrap();
        // ‖s_t‖² = 2, error [-0.25,-0.25,0.75,-0.25] has energy 0.75.
        assert!((v - 10.0 * (2.0f64 / 0.75).log10()).abs() < 1e-12);
        assert!((v - 4.26).abs() < 0.01);
        assert!(si_snr(&r, &[0.0; 4]).is_err());
    }

    #[test]
    fn sdr_examples() {
        let r = [0.5, -1.0, 0.25, 2.0];
        assert_eq!(sdr(&r, &r).unwrap(), 60.0);
        assert_eq!(sdr(&[0.0; 4], &r).unwrap(), 0.0);
    }

    #[test]
    fn erle_examples() {
        use Activity::*;
        let d = [1.0, -1.0, 0.5, 0.5, 0.3, 0.2];
        let labels = [FarOnly, NearOnly, FarOnly];
        assert_eq!(erle(&d, &d, &labels, 2).unwrap(), Some(0.0));
        let est = [0.0, 0.0, 9.0, 9.0, 0.0, 0.0];
        assert_eq!(erle(&d, &est, &labels, 2).unwrap(), Some(80.0));
        assert_eq!(erle(&d, &d, &[NearOnly; 3], 2).unwrap(), None);
        assert!(erle(&d, &d, &[], 2).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = EvalReport::from_scores(
            System::Unprocessed,
            None,
            vec![SceneScore {
                scene_id: "a".into(),
                sisnr_db: 1.0,
                sdr_db: 2.0,
                erle_db: None,
                capped: false,
            }],
        );
        let csv = r.to_csv();
        assert!(csv.starts_with("scene_id,sisnr_db,sdr_db,erle_db\n"));
        assert!(csv.ends_with("mean,1.000000,2.000000,\n"));
    }
}
