use jaecbf::sim::dataset::{realize_scene, sample_scene_params, load_pool};
use jaecbf::sim::room::linear_array;
use jaecbf::sim::scene::{measured_ser, measured_snr};
use jaecbf::sim::synth::{ambient_noise, utterance};
use jaecbf::sim::{build_dataset, mix_scene, DatasetConfig, Manifest, Nonlinearity, RirSet, RoomSpec, SceneSpec};
use jaecbf::AudioClip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FS: u32 = 16000;

fn room() -> RoomSpec {
    RoomSpec {
        dimensions: [5.0, 4.0, 3.0],
        rt60: 0.3,
        source_pos: [1.2, 2.5, 1.6],
        loudspeaker_pos: [2.9, 1.8, 1.2],
        noise_pos: [4.2, 3.3, 2.1],
        mic_positions: linear_array([3.0, 1.5, 1.2], 2, 0.26),
        sample_rate: FS,
        sound_speed: 343.0,
    }
}

fn spec(ser: f64, snr: f64, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = FS as usize;
    SceneSpec {
        room: room(),
        ser_db: ser,
        snr_db: snr,
        nonlinearity: Nonlinearity::Sigmoid,
        near_utterance: AudioClip::mono(FS, utterance(&mut rng, FS, n)),
        far_utterance: AudioClip::mono(FS, utterance(&mut rng, FS, n)),
        noise: AudioClip::mono(FS, ambient_noise(&mut rng, n)),
        chunk_seconds: 1.0,
        hop: 256,
    }
}

#[test]
fn components_sum_to_mixture() {
    let s = spec(-5.0, 10.0, 1);
    let rirs = RirSet::generate(&s.room, 30).unwrap();
    let a = mix_scene(&s, &rirs).unwrap();
    for c in 0..2 {
        for t in 0..a.mixture.len() {
            let sum = a.near.channel(c)[t] + a.echo_ref.channel(c)[t] + a.noise.channel(c)[t];
            assert!((sum - a.mixture.channel(c)[t]).abs() <= 1e-9);
        }
    }
    assert_eq!(a.target.channel(0), a.near.channel(0));
    assert_eq!(a.activity.len(), a.mixture.len().div_ceil(256));
}

#[test]
fn requested_ratios_are_realized() {
    for (i, (ser, snr)) in [(-10.0, 0.0), (-5.0, 10.0), (0.0, 25.0), (7.5, 40.0)].into_iter().enumerate() {
        let s = spec(ser, snr, 10 + i as u64);
        let rirs = RirSet::generate(&s.room, 30).unwrap();
        let a = mix_scene(&s, &rirs).unwrap();
        assert!((measured_ser(&a, 256) - ser).abs() < 0.1);
        assert!((measured_snr(&a, 256) - snr).abs() < 0.1);
    }
}

#[test]
fn zero_db_ser_equal_active_rms() {
    let s = spec(0.0, 20.0, 3);
    let a = mix_scene(&s, &RirSet::generate(&s.room, 30).unwrap()).unwrap();
    let r = 10f64.powf(measured_ser(&a, 256) / 20.0);
    assert!((r - 1.0).abs() < 1e-6);
}

#[test]
fn silent_far_end_and_noise_leave_target() {
    let mut s = spec(0.0, 20.0, 4);
    s.far_utterance = AudioClip::silent(FS, 1, FS as usize);
    s.noise = AudioClip::silent(FS, 1, FS as usize);
    let a = mix_scene(&s, &RirSet::generate(&s.room, 30).unwrap()).unwrap();
    assert_eq!(a.mixture.channel(0), a.target.channel(0));
}

#[test]
fn silent_near_end_is_an_error() {
    let mut s = spec(0.0, 20.0, 5);
    s.near_utterance = AudioClip::silent(FS, 1, FS as usize);
    assert!(mix_scene(&s, &RirSet::generate(&s.room, 30).unwrap()).is_err());
}

#[test]
fn rate_mismatch_is_an_error() {
    let mut s = spec(0.0, 20.0, 6);
    s.far_utterance.sample_rate = 8000;
    assert!(mix_scene(&s, &RirSet::generate(&s.room, 30).unwrap()).is_err());
}

#[test]
fn causal_relative_to_direct_path() {
    let r = room();
    let h = jaecbf::sim::rir::generate_rir(&r, &r.source_pos, 30).unwrap();
    for (m, hm) in h.iter().enumerate() {
        let d = jaecbf::sim::room::distance(&r.source_pos, &r.mic_positions[m]) / 343.0 * FS as f64;
        let first = hm.iter().position(|&v| v != 0.0).unwrap();
        assert!(first as f64 >= d.floor() - 40.0);
        assert!((jaecbf::sim::rir::direct_path_index(hm) as f64 - d).abs() <= 1.0, "{d}");
    }
}

fn small_cfg() -> DatasetConfig {
    DatasetConfig {
        mics: 2,
        chunk_seconds: 0.5,
        pool_size: 6,
        ..DatasetConfig::default()
    }
}

#[test]
fn dataset_is_counted_and_deterministic() {
    let cfg = small_cfg();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, a.path()).unwrap();
    build_dataset(&cfg, b.path()).unwrap();
    assert_eq!(m.scenes.len(), 28);
    let ja = std::fs::read(a.path().join("manifest.json")).unwrap();
    let jb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(ja, jb);
    let wa = std::fs::read(a.path().join("test_0003/mixture.wav")).unwrap();
    let wb = std::fs::read(b.path().join("test_0003/mixture.wav")).unwrap();
    assert_eq!(wa, wb);

    let loaded = Manifest::load(a.path()).unwrap();
    assert_eq!(loaded.scenes, m.scenes);
    for r in &loaded.scenes {
        assert_eq!(r.wav_paths().len(), 4);
    }
    let sc = loaded.load_scene(&loaded.scenes[0]).unwrap();
    assert_eq!(sc.mixture.num_channels(), 2);
    assert_eq!(sc.activity.len(), sc.mixture.len().div_ceil(256));
}

#[test]
fn scene_realization_is_pure() {
    let cfg = small_cfg();
    let pool = load_pool(&cfg).unwrap();
    let plan = sample_scene_params(&cfg, &pool, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let a = realize_scene(&cfg, &plan, &pool).unwrap();
    let b = realize_scene(&cfg, &plan, &pool).unwrap();
    assert_eq!(a.mixture, b.mixture);
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    assert!(build_dataset(&small_cfg(), &file.join("sub")).is_err());
}
