//! Randomized scene corpora written to disk with a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nonlinear::Nonlinearity;
use super::rir::{RirSet, DEFAULT_MAX_ORDER};
use super::room::{distance, linear_array, Point, RoomSpec, DEFAULT_APERTURE};
use super::scene::{decode_activity, encode_activity, mix_scene, Activity, SceneAudio, SceneSpec};
use super::synth::{ambient_noise, utterance};
use crate::audio::{rms, AudioClip};
use crate::error::{domain, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Keep sampled positions this far from every wall.
const WALL_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 20, dev: 4, test: 4 }
    }
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub counts: SplitCounts,
    pub mics: usize,
    pub aperture: f64,
    pub sample_rate: u32,
    pub chunk_seconds: f64,
    pub hop: usize,
    pub rt60: [f64; 2],
    pub ser_db: [f64; 2],
    pub snr_db: [f64; 2],
    pub room_min: Point,
    pub room_max: Point,
    pub nonlinearities: Vec<Nonlinearity>,
    pub max_order: usize,
    /// Synthetic utterances generated when `pool_dir` is unset.
    pub pool_size: usize,
    /// Directory of mono WAV utterances to draw from instead.
    pub pool_dir: Option<PathBuf>,
    pub pcm16: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            counts: SplitCounts::default(),
            mics: 8,
            aperture: DEFAULT_APERTURE,
            sample_rate: 16000,
            chunk_seconds: 4.0,
            hop: 256,
            rt60: [0.0, 0.6],
            ser_db: [-10.0, 10.0],
            snr_db: [0.0, 40.0],
            room_min: [3.0, 3.0, 2.5],
            room_max: [8.0, 6.0, 3.5],
            nonlinearities: Nonlinearity::ALL.to_vec(),
            max_order: DEFAULT_MAX_ORDER,
            pool_size: 16,
            pool_dir: None,
            pcm16: false,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return domain(format!("{name} range {r:?} must lie within [{lo}, {hi}]"));
    }
    Ok(())
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("rt60", self.rt60, 0.0, 0.6)?;
        check_range("ser_db", self.ser_db, -10.0, 10.0)?;
        check_range("snr_db", self.snr_db, 0.0, 40.0)?;
        if self.mics == 0 || self.hop == 0 || !(self.chunk_seconds > 0.0) {
            return Err(Error::Config("mics, hop and chunk_seconds must be positive".into()));
        }
        if self.nonlinearities.is_empty() {
            return Err(Error::Config("nonlinearities must not be empty".into()));
        }
        for a in 0..3 {
            if !(self.room_min[a] > 2.0 * WALL_MARGIN && self.room_min[a] <= self.room_max[a]) {
                return Err(Error::Config(format!(
                    "room extent bounds {:?}..{:?} invalid",
                    self.room_min, self.room_max
                )));
            }
        }
        if self.aperture + 2.0 * WALL_MARGIN >= self.room_min[0] {
            return Err(Error::Config("array aperture does not fit the smallest room".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.chunk_seconds * self.sample_rate as f64).round() as usize
    }
}

/// Everything random about one scene except the source audio itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePlan {
    pub room: RoomSpec,
    pub ser_db: f64,
    pub snr_db: f64,
    pub nonlinearity: Nonlinearity,
    pub near_idx: usize,
    pub far_idx: usize,
    pub near_offset: usize,
    pub far_offset: usize,
    pub noise_seed: u64,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn point_in(rng: &mut impl Rng, dims: &Point) -> Point {
    [0, 1, 2].map(|a| rng.gen_range(WALL_MARGIN..dims[a] - WALL_MARGIN))
}

fn far_from(rng: &mut impl Rng, dims: &Point, avoid: &[Point], min_dist: f64) -> Point {
    loop {
        let p = point_in(rng, dims);
        if avoid.iter().all(|q| distance(&p, q) >= min_dist) {
            return p;
        }
    }
}

/// Draws room geometry and mixing parameters uniformly from the configured ranges.
pub fn sample_scene_params(cfg: &DatasetConfig, pool: &[Vec<f64>], rng: &mut impl Rng) -> Result<ScenePlan> {
    if pool.is_empty() {
        return domain("source pool is empty");
    }
    let dims = [0, 1, 2].map(|a| uniform(rng, [cfg.room_min[a], cfg.room_max[a]]));
    let half = cfg.aperture / 2.0;
    let center = [
        rng.gen_range(WALL_MARGIN + half..dims[0] - WALL_MARGIN - half),
        rng.gen_range(WALL_MARGIN..dims[1] - WALL_MARGIN),
        rng.gen_range(WALL_MARGIN..dims[2] - WALL_MARGIN),
    ];
    let mics = linear_array(center, cfg.mics, cfg.aperture);
    let source = far_from(rng, &dims, &mics, 0.5);
    // The loudspeaker sits on the device, a short distance from the array.
    let loud = loop {
        let p = [0, 1, 2].map(|a| center[a] + rng.gen_range(-0.4..0.4));
        let inside = p.iter().zip(&dims).all(|(&v, &d)| v > 0.1 && v < d - 0.1);
        if inside && mics.iter().all(|m| distance(&p, m) >= 0.1) {
            break p;
        }
    };
    let noise = far_from(rng, &dims, &mics, 0.5);
    let room = RoomSpec {
        dimensions: dims,
        rt60: uniform(rng, cfg.rt60),
        source_pos: source,
        loudspeaker_pos: loud,
        noise_pos: noise,
        mic_positions: mics,
        sample_rate: cfg.sample_rate,
        sound_speed: 343.0,
    };
    let ser_db = uniform(rng, cfg.ser_db);
    let snr_db = uniform(rng, cfg.snr_db);
    let nonlinearity = cfg.nonlinearities[rng.gen_range(0..cfg.nonlinearities.len())];
    let near_idx = rng.gen_range(0..pool.len());
    let far_idx = if pool.len() > 1 {
        (near_idx + rng.gen_range(1..pool.len())) % pool.len()
    } else {
        near_idx
    };
    let need = cfg.samples();
    // Prefer cuts that are not mostly silence; give up after a few draws.
    let mut offset = |i: usize| {
        let clip = &pool[i];
        let whole = rms(clip);
        let mut off = 0;
        for _ in 0..16 {
            off = if clip.len() > need { rng.gen_range(0..=clip.len() - need) } else { 0 };
            if rms(&clip[off..off + need]) >= 0.25 * whole {
                break;
            }
        }
        off
    };
    let near_offset = offset(near_idx);
    let far_offset = offset(far_idx);
    Ok(ScenePlan {
        room,
        ser_db,
        snr_db,
        nonlinearity,
        near_idx,
        far_idx,
        near_offset,
        far_offset,
        noise_seed: rng.gen(),
    })
}

fn scene_rng(seed: u64, split: Split, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 32) | idx as u64);
    rng
}

/// Source utterances, either synthesized from the seed or read from disk.
pub fn load_pool(cfg: &DatasetConfig) -> Result<Vec<Vec<f64>>> {
    let need = cfg.samples();
    let pool: Vec<Vec<f64>> = match &cfg.pool_dir {
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0);
            let extra = cfg.sample_rate as usize / 2;
            (0..cfg.pool_size)
                .map(|_| utterance(&mut rng, cfg.sample_rate, need + extra))
                .collect()
        }
        Some(dir) => {
            let entries = fs::read_dir(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            paths.sort();
            let mut out = Vec::new();
            for p in paths {
                let clip = AudioClip::read_wav(&p)?;
                if clip.sample_rate != cfg.sample_rate {
                    return domain(format!(
                        "{} is {} Hz, corpus is {} Hz",
                        p.display(),
                        clip.sample_rate,
                        cfg.sample_rate
                    ));
                }
                if clip.len() >= need {
                    out.push(clip.into_channels().swap_remove(0));
                }
            }
            out
        }
    };
    if pool.is_empty() {
        return domain("source pool is empty");
    }
    Ok(pool)
}

pub fn realize_scene(cfg: &DatasetConfig, plan: &ScenePlan, pool: &[Vec<f64>]) -> Result<SceneAudio> {
    let need = cfg.samples();
    let fs = cfg.sample_rate;
    let cut = |i: usize, off: usize| AudioClip::mono(fs, pool[i][off..off + need].to_vec());
    let mut nrng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
    let spec = SceneSpec {
        room: plan.room.clone(),
        ser_db: plan.ser_db,
        snr_db: plan.snr_db,
        nonlinearity: plan.nonlinearity,
        near_utterance: cut(plan.near_idx, plan.near_offset),
        far_utterance: cut(plan.far_idx, plan.far_offset),
        noise: AudioClip::mono(fs, ambient_noise(&mut nrng, need)),
        chunk_seconds: cfg.chunk_seconds,
        hop: cfg.hop,
    };
    let rirs = RirSet::generate(&plan.room, cfg.max_order)?;
    mix_scene(&spec, &rirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub mixture: String,
    pub far_end: String,
    pub target: String,
    pub echo: String,
    pub samples: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub ser_db: f64,
    pub snr_db: f64,
    pub rt60: f64,
    pub nonlinearity: Nonlinearity,
    pub nonlinearity_params: serde_json::Value,
    pub room: RoomSpec,
    pub activity: String,
}

/// Audio for one manifest entry.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub record: SceneRecord,
    pub mixture: AudioClip,
    pub far_end: AudioClip,
    pub target: AudioClip,
    pub echo: AudioClip,
    pub activity: Vec<Activity>,
}

impl SceneRecord {
    pub fn wav_paths(&self) -> [&str; 4] {
        [&self.mixture, &self.far_end, &self.target, &self.echo]
    }

    pub fn load(&self, base: &Path) -> Result<LoadedScene> {
        let [m, f, t, e] = self.wav_paths().map(|p| AudioClip::read_wav(&base.join(p)));
        let scene = LoadedScene {
            record: self.clone(),
            mixture: m?,
            far_end: f?,
            target: t?,
            echo: e?,
            activity: decode_activity(&self.activity)?,
        };
        for c in [&scene.far_end, &scene.target, &scene.echo] {
            if c.len() != scene.mixture.len() || c.sample_rate != scene.mixture.sample_rate {
                return domain(format!("scene {}: clips differ in length or rate", self.id));
            }
        }
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub scenes: Vec<SceneRecord>,
    /// Directory the relative WAV paths resolve against.
    pub base: PathBuf,
}

impl Manifest {
    /// Reads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let scenes: Vec<SceneRecord> = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { scenes, base })
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(move |r| r.split == s)
    }

    pub fn load_scene(&self, r: &SceneRecord) -> Result<LoadedScene> {
        r.load(&self.base)
    }
}

fn write_clip(cfg: &DatasetConfig, path: &Path, clip: &AudioClip) -> Result<()> {
    if cfg.pcm16 {
        clip.write_wav_pcm16(path)
    } else {
        clip.write_wav(path)
    }
}

/// Synthesizes every split and writes WAVs plus `manifest.json` under `out`.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e| Error::Io { path, source: e }
    };
    fs::create_dir_all(out).map_err(io(out))?;
    let pool = load_pool(cfg)?;

    let mut jobs = Vec::new();
    for split in Split::ALL {
        for idx in 0..cfg.counts.get(split) {
            let plan = sample_scene_params(cfg, &pool, &mut scene_rng(cfg.seed, split, idx))?;
            jobs.push((split, idx, plan));
        }
    }
    let scenes = jobs
        .par_iter()
        .map(|(split, idx, plan)| -> Result<SceneRecord> {
            let id = format!("{}_{idx:04}", split.name());
            let audio = realize_scene(cfg, plan, &pool)?;
            let dir = out.join(&id);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let rel = |f: &str| format!("{id}/{f}");
            write_clip(cfg, &out.join(rel("mixture.wav")), &audio.mixture)?;
            write_clip(cfg, &out.join(rel("far_end.wav")), &audio.far_end)?;
            write_clip(cfg, &out.join(rel("target.wav")), &audio.target)?;
            write_clip(cfg, &out.join(rel("echo.wav")), &audio.echo_ref)?;
            Ok(SceneRecord {
                id: id.clone(),
                split: *split,
                mixture: rel("mixture.wav"),
                far_end: rel("far_end.wav"),
                target: rel("target.wav"),
                echo: rel("echo.wav"),
                samples: audio.mixture.len(),
                sample_rate: cfg.sample_rate,
                hop: cfg.hop,
                ser_db: plan.ser_db,
                snr_db: plan.snr_db,
                rt60: plan.room.rt60,
                nonlinearity: plan.nonlinearity,
                nonlinearity_params: plan.nonlinearity.params(),
                room: plan.room.clone(),
                activity: encode_activity(&audio.activity),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&scenes)?;
    fs::write(&path, text).map_err(io(&path))?;
    Ok(Manifest {
        scenes,
        base: out.to_path_buf(),
    })
}
