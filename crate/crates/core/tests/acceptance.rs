//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.
//!
//! Runs single-threaded; the two training runs dominate (tens of minutes).

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use jaecbf::baseline::{pbfdaf_cancel, pbfdaf_run, Pbfdaf, PbfdafConfig};
use jaecbf::config::ExperimentConfig;
use jaecbf::dsp::fft_convolve;
use jaecbf::gradsuite::{self, covered_ops, differentiable_ops, Module};
use jaecbf::metrics::{evaluate_corpus, EvalReport, System};
use jaecbf::model::{Model, ModelConfig};
use jaecbf::sim::rir::{direct_path_index, generate_rir, schroeder_rt60, DEFAULT_MAX_ORDER};
use jaecbf::sim::room::{distance, linear_array};
use jaecbf::sim::scene::{measured_ser, measured_snr};
use jaecbf::sim::synth::{ambient_noise, utterance};
use jaecbf::sim::{build_dataset, mix_scene, Manifest, Nonlinearity, RirSet, RoomSpec, SceneSpec, Split};
use jaecbf::spectral::{apply_beamformer, apply_crf, corr_features, covariance, hermitian_eigenvalues, CrfGeometry};
use jaecbf::train::{loss_fell, smoothed_endpoints, TrainItem, Trainer};
use jaecbf::{AudioClip, Stft, StftConfig};
use nnkit::gradcheck::{random_tensor, GradCheckOptions};
use nnkit::{Graph, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: u32 = 16000;

struct Outcome {
    pass: bool,
    detail: String,
    /// Exact serialization of every reported number, for the determinism check.
    report: String,
}

fn verdict(id: usize, name: &str, o: &Outcome, took: Duration, budget: Duration) -> bool {
    let ok = o.pass && took <= budget;
    println!(
        "criterion {id} {:<24} {}  {} [{:.1}s, budget {:.0}s]",
        name,
        if ok { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    ok
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed())
}

fn rel_max(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// 1. STFT round trip ---------------------------------------------------------

fn stft_round_trip() -> Outcome {
    let stft = Stft::new(StftConfig::default()).unwrap();
    let cfg = *stft.config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(FS as usize..=4 * FS as usize);
        let amp = 10f64.powf(rng.gen_range(-3.0..0.0));
        let x: Vec<f64> = (0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
        let spec = stft.stft(&AudioClip::mono(FS, x.clone())).unwrap();
        let y = stft.istft(&spec, len).unwrap();
        let covered = cfg.hop * (cfg.num_frames(len).unwrap() - 1) + cfg.win_length;
        let inner = cfg.win_length..covered - cfg.win_length;
        worst = worst.max(rel_max(&y.channel(0)[inner.clone()], &x[inner]));
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!("100 clips, max interior rel err {worst:.2e} (< 1e-6)"),
        report: format!("{worst:?}"),
    }
}

// 2. Gradient suite ----------------------------------------------------------

fn gradient_suite() -> Outcome {
    let entries = gradsuite::run(Module::All, &GradCheckOptions::default()).unwrap();
    let mut detail = String::new();
    for e in &entries {
        println!(
            "    {:<6} {:<18} max_rel_err {:.2e} tol {:.0e} {}",
            e.module.name(),
            e.report.name,
            e.report.max_rel_err,
            e.report.tolerance,
            if e.report.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.report.passed()).map(|e| e.report.name.as_str()).collect();
    let missing: Vec<&str> = differentiable_ops().difference(&covered_ops(&entries)).copied().collect();
    let model = entries.iter().find(|e| e.report.name == "full_model").expect("full model case");
    write!(
        detail,
        "{} cases, {} failed, {} ops unchecked, full model rel err {:.2e}",
        entries.len(),
        failed.len(),
        missing.len(),
        model.report.max_rel_err
    )
    .unwrap();
    Outcome {
        pass: failed.is_empty() && missing.is_empty(),
        detail,
        report: String::new(),
    }
}

// 3. Algebraic invariants ----------------------------------------------------

fn c_at(t: &Tensor, idx: usize) -> Complex64 {
    Complex64::new(t.data()[2 * idx], t.data()[2 * idx + 1])
}

fn naive_crf(s: &Tensor, h: &Tensor, c: usize, n: usize, f: usize, geom: CrfGeometry) -> Vec<f64> {
    let (k, l) = (geom.k as isize, geom.l as isize);
    let taps = geom.taps();
    let mut out = Vec::new();
    for ch in 0..c {
        for t in 0..n as isize {
            for q in 0..f as isize {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in -k..=k {
                    for b in -l..=l {
                        let (tt, qq) = (t + a, q + b);
                        if tt < 0 || qq < 0 || tt >= n as isize || qq >= f as isize {
                            continue;
                        }
                        let tap = ((a + k) * (2 * l + 1) + (b + l)) as usize;
                        let hi = ((ch * n + t as usize) * f + q as usize) * taps + tap;
                        let si = (ch * n + tt as usize) * f + qq as usize;
                        acc += c_at(h, hi) * c_at(s, si);
                    }
                }
                out.extend([acc.re, acc.im]);
            }
        }
    }
    out
}

fn naive_beamformer(w: &Tensor, y: &Tensor, c: usize, n: usize, f: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..n * f {
        let acc: Complex64 = (0..c).map(|ch| c_at(w, ch * n * f + i).conj() * c_at(y, ch * n * f + i)).sum();
        out.extend([acc.re, acc.im]);
    }
    out
}

fn algebraic_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hermitian = true;
    let mut corr_consistent = true;
    let mut eig_worst = 0.0f64;
    let mut crf_worst = 0.0f64;
    let mut bf_worst = 0.0f64;
    for case in 0..50u64 {
        let c = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=6);
        let f = rng.gen_range(1..=7);
        let geom = CrfGeometry {
            k: rng.gen_range(0..=2),
            l: rng.gen_range(0..=2),
        };
        let s = random_tensor(&[c, n, f, 2], 1.0, 100 + case);
        let h = random_tensor(&[c, n, f, geom.taps(), 2], 1.0, 200 + case);
        let w = random_tensor(&[c, n, f, 2], 1.0, 300 + case);

        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let hv = g.constant(h.clone());
        let wv = g.constant(w.clone());
        let phi = covariance(&mut g, sv).unwrap();
        let corr = corr_features(&mut g, sv).unwrap();
        let crf = apply_crf(&mut g, sv, hv, geom).unwrap();
        let bf = apply_beamformer(&mut g, wv, sv).unwrap();

        crf_worst = crf_worst.max(rel_max(g.value(crf).data(), &naive_crf(&s, &h, c, n, f, geom)));
        bf_worst = bf_worst.max(rel_max(g.value(bf).data(), &naive_beamformer(&w, &s, c, n, f)));

        let (pd, cd) = (g.value(phi).data(), g.value(corr).data());
        for bin in 0..n * f {
            let m: Vec<Complex64> = (0..c * c)
                .map(|i| Complex64::new(pd[bin * 2 * c * c + 2 * i], pd[bin * 2 * c * c + 2 * i + 1]))
                .collect();
            for a in 0..c {
                for b in 0..c {
                    hermitian &= m[a * c + b] == m[b * c + a].conj();
                }
            }
            // The correlation features are the upper triangle of the same matrix.
            let mut o = bin * c * c;
            for a in 0..c {
                for b in a..c {
                    if a == b {
                        corr_consistent &= cd[o] == m[a * c + a].re;
                        o += 1;
                    } else {
                        corr_consistent &= cd[o] == m[a * c + b].re && cd[o + 1] == m[a * c + b].im;
                        o += 2;
                    }
                }
            }
            // Rank one: Φ v = ‖v‖² v for the generating vector, other eigenvalues ~ 0.
            let v: Vec<Complex64> = (0..c).map(|ch| c_at(&s, ch * n * f + bin)).collect();
            let norm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            if norm2 == 0.0 {
                continue;
            }
            let mut resid = 0.0;
            for a in 0..c {
                let mv: Complex64 = (0..c).map(|b| m[a * c + b] * v[b]).sum();
                resid += (mv - v[a] * norm2).norm_sqr();
            }
            eig_worst = eig_worst.max(resid.sqrt() / norm2.powf(1.5));
            let mut eig = hermitian_eigenvalues(&m, c);
            eig.sort_by(f64::total_cmp);
            eig_worst = eig_worst.max((eig[c - 1] - norm2).abs() / norm2);
            for &e in &eig[..c - 1] {
                eig_worst = eig_worst.max(e.abs() / norm2);
            }
        }
    }
    Outcome {
        pass: hermitian && corr_consistent && eig_worst < 1e-6 && crf_worst < 1e-6 && bf_worst < 1e-6,
        detail: format!(
            "hermitian {hermitian}, R_YY consistent {corr_consistent}, rank-1 residual {eig_worst:.1e}, \
             crf {crf_worst:.1e}, beamformer {bf_worst:.1e} (50 cases, < 1e-6)"
        ),
        report: String::new(),
    }
}

// 4. Simulator fidelity ------------------------------------------------------

fn room(rt60: f64) -> RoomSpec {
    RoomSpec {
        dimensions: [6.0, 4.5, 3.0],
        rt60,
        source_pos: [1.4, 3.1, 1.6],
        loudspeaker_pos: [3.2, 1.6, 1.1],
        noise_pos: [5.1, 3.6, 2.2],
        mic_positions: linear_array([3.0, 2.2, 1.3], 2, 0.26),
        sample_rate: FS,
        sound_speed: 343.0,
    }
}

fn simulator_fidelity() -> Outcome {
    let mut report = String::new();
    let mut ratio_err = 0.0f64;
    for (i, (ser, snr)) in [(-10.0, 0.0), (-5.0, 15.0), (0.0, 30.0), (5.0, 40.0), (10.0, 5.0)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let n = 2 * FS as usize;
        let spec = SceneSpec {
            room: room(0.25),
            ser_db: ser,
            snr_db: snr,
            nonlinearity: [Nonlinearity::None, Nonlinearity::Clip, Nonlinearity::Sigmoid][i % 3],
            near_utterance: AudioClip::mono(FS, utterance(&mut rng, FS, n)),
            far_utterance: AudioClip::mono(FS, utterance(&mut rng, FS, n)),
            noise: AudioClip::mono(FS, ambient_noise(&mut rng, n)),
            chunk_seconds: 2.0,
            hop: 256,
        };
        let scene = mix_scene(&spec, &RirSet::generate(&spec.room, DEFAULT_MAX_ORDER).unwrap()).unwrap();
        let (s, r) = (measured_ser(&scene, 256), measured_snr(&scene, 256));
        ratio_err = ratio_err.max((s - ser).abs()).max((r - snr).abs());
        write!(report, "{s:?},{r:?};").unwrap();
    }

    let r = room(0.3);
    let mut rt = Vec::new();
    let mut delay_err = 0.0f64;
    for src in [r.source_pos, r.loudspeaker_pos, r.noise_pos] {
        let h = generate_rir(&r, &src, DEFAULT_MAX_ORDER).unwrap();
        for (m, hm) in h.iter().enumerate() {
            rt.push(schroeder_rt60(hm, FS).unwrap());
            let expect = distance(&src, &r.mic_positions[m]) / r.sound_speed * FS as f64;
            delay_err = delay_err.max((direct_path_index(hm) as f64 - expect).abs());
        }
    }
    write!(report, "{rt:?},{delay_err:?}").unwrap();
    let rt_ok = rt.iter().all(|t| (0.24..=0.36).contains(t));
    let (lo, hi) = rt.iter().fold((f64::MAX, f64::MIN), |(a, b), &t| (a.min(t), b.max(t)));
    Outcome {
        pass: ratio_err <= 0.1 && rt_ok && delay_err <= 1.0,
        detail: format!(
            "SER/SNR max err {ratio_err:.3} dB (<= 0.1), RT60 {lo:.3}-{hi:.3} s (in [0.24, 0.36]), \
             direct path off by {delay_err:.2} samples (<= 1)"
        ),
        report,
    }
}

// 5. Baseline sanity ---------------------------------------------------------

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn baseline_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10 * FS as usize;
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cfg = PbfdafConfig::default();

    // Decaying random echo path, no near end, no noise.
    let h: Vec<f64> = (0..1200).map(|i| rng.gen_range(-1.0..1.0) * (-(i as f64) / 200.0).exp()).collect();
    let d = fft_convolve(&x, &h, n);
    let out = pbfdaf_cancel(&d, &x, &cfg).unwrap();
    let q = 3 * n / 4;
    let erle = 10.0 * (power(&d[q..]) / power(&out.error[q..])).log10();

    // Single tap 0.5.
    let d: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
    let (_, filt) = pbfdaf_run(&d, &x, &cfg).unwrap();
    let ir = filt.impulse_response(0);
    let tap_err = ir.iter().enumerate().fold(0.0f64, |m, (i, v)| m.max((v - if i == 0 { 0.5 } else { 0.0 }).abs()));

    // Silent far end: nothing adapts, the mic passes through.
    let mic: Vec<f64> = (0..FS as usize).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let (silent, f0) = pbfdaf_run(&mic, &vec![0.0; mic.len()], &cfg).unwrap();
    let passthrough = silent.error == mic && f0.impulse_response(0).iter().all(|&v| v == 0.0);

    // Echo path flips after convergence: the filter freezes instead of adapting.
    let b = cfg.block;
    let mut f = Pbfdaf::new(&cfg, power(&x)).unwrap();
    for k in 0..200 {
        let xs = &x[k * b..(k + 1) * b];
        let ds: Vec<f64> = xs.iter().map(|v| 0.5 * v).collect();
        f.process_block(&ds, xs);
    }
    let (frozen, before) = (f.frozen_blocks, f.impulse_response(0));
    let xs = &x[200 * b..201 * b];
    let ds: Vec<f64> = xs.iter().map(|v| -0.5 * v).collect();
    f.process_block(&ds, xs);
    let froze = f.frozen_blocks == frozen + 1 && f.impulse_response(0) == before;

    Outcome {
        pass: erle >= 20.0 && tap_err < 0.02 && passthrough && froze,
        detail: format!(
            "ERLE last quarter {erle:.1} dB (>= 20), single-tap err {tap_err:.1e} (< 0.02), \
             silent far end passthrough {passthrough}, freeze on divergence {froze}"
        ),
        report: format!("{erle:?},{tap_err:?},{passthrough},{froze}"),
    }
}

// 6-7. Overfit runs ----------------------------------------------------------

struct Run {
    losses: Vec<f64>,
    model: Model,
}

fn train_run(cfg: &ExperimentConfig, manifest: &Manifest, dtd: bool) -> Run {
    let mcfg = ModelConfig { dtd, ..cfg.model.clone() };
    let model = Model::new(&mcfg).unwrap();
    let chunk = (cfg.train.chunk_seconds * FS as f64).round() as usize;
    let mut items = Vec::new();
    for rec in manifest.split(Split::Train) {
        let scene = manifest.load_scene(rec).unwrap();
        items.extend(TrainItem::from_scene(&model.net, &scene, chunk).unwrap());
    }
    let mut tr = Trainer::new(model, cfg.train.clone(), items).unwrap();
    let total = tr.total_steps();
    let mut losses = Vec::with_capacity(total);
    for _ in 0..total {
        losses.push(tr.step().unwrap().loss);
    }
    Run { losses, model: tr.model }
}

struct Overfit {
    fell: bool,
    loss_ends: (f64, f64),
    steps: usize,
    scenes: usize,
    params: usize,
    mixture: EvalReport,
    das: EvalReport,
    gated: EvalReport,
    ablated: EvalReport,
    gated_forced_open: EvalReport,
    gate_in_range: bool,
    report: String,
}

fn overfit(data: &Path) -> Overfit {
    let cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml"), &[]).unwrap();
    let manifest = build_dataset(&cfg.dataset, data).unwrap();
    let a = train_run(&cfg, &manifest, true);
    let b = train_run(&cfg, &manifest, false);

    let window = (a.losses.len() / 10).max(1);
    let (first, last) = smoothed_endpoints(&a.losses, window).unwrap();
    let eval = |sys, m: Option<&Model>| evaluate_corpus(&manifest, Some(Split::Train), sys, m, &cfg.pbfdaf).unwrap();

    let mut gate_in_range = true;
    for rec in manifest.split(Split::Train) {
        let scene = manifest.load_scene(rec).unwrap();
        match a.model.enhance(&scene.mixture, &scene.far_end, true) {
            Ok(e) => gate_in_range &= e.gate.iter().all(|p| (0.0..=1.0).contains(p)) && !e.gate.is_empty(),
            Err(_) => gate_in_range = false,
        }
    }
    let o = Overfit {
        fell: loss_fell(first, last, 0.3),
        loss_ends: (first, last),
        steps: a.losses.len(),
        scenes: manifest.split(Split::Train).count(),
        params: a.model.num_params(),
        mixture: eval(System::Unprocessed, None),
        das: eval(System::Das, None),
        gated: eval(System::JaecbfDtd, Some(&a.model)),
        ablated: eval(System::Jaecbf, Some(&b.model)),
        gated_forced_open: eval(System::Jaecbf, Some(&a.model)),
        gate_in_range,
        report: String::new(),
    };
    let mut report = format!("{:?}\n{:?}\n", a.losses, b.losses);
    for r in [&o.mixture, &o.das, &o.gated, &o.ablated, &o.gated_forced_open] {
        report.push_str(&r.to_json().unwrap());
    }
    Overfit { report, ..o }
}

fn erle_of(r: &EvalReport) -> f64 {
    r.mean.erle_db.unwrap_or(f64::NAN)
}

fn overfit_outcome(o: &Overfit) -> Outcome {
    let gain = o.gated.mean.sisnr_db - o.mixture.mean.sisnr_db;
    let (eg, ed) = (erle_of(&o.gated), erle_of(&o.das));
    Outcome {
        pass: o.fell && gain >= 5.0 && eg >= ed && o.params <= 100_000,
        detail: format!(
            "{} scenes, {} steps, {} params; loss {:.3} -> {:.3} (needs 30% fall: {}); \
             si-snr {:.2} -> {:.2} dB (+{gain:.2}, needs +5); ERLE jaecbf_dtd {eg:.2} vs das {ed:.2} dB",
            o.scenes,
            o.steps,
            o.params,
            o.loss_ends.0,
            o.loss_ends.1,
            o.fell,
            o.mixture.mean.sisnr_db,
            o.gated.mean.sisnr_db
        ),
        report: o.report.clone(),
    }
}

fn ablation_outcome(o: &Overfit) -> Outcome {
    let (eg, ea, ef) = (erle_of(&o.gated), erle_of(&o.ablated), erle_of(&o.gated_forced_open));
    Outcome {
        pass: eg >= ea && o.gate_in_range,
        detail: format!(
            "ERLE jaecbf_dtd {eg:.2} vs jaecbf {ea:.2} dB (gate-open run; same model with gate forced open {ef:.2}); \
             p(n) in [0,1], finite: {}",
            o.gate_in_range
        ),
        report: String::new(),
    }
}

#[test]
fn acceptance() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    let secs = Duration::from_secs;
    let mut ok = Vec::new();

    let (o, t) = timed(stft_round_trip);
    ok.push(verdict(1, "stft round trip", &o, t, secs(10)));
    let (o, t) = timed(gradient_suite);
    ok.push(verdict(2, "gradient suite", &o, t, secs(300)));
    let (o, t) = timed(algebraic_invariants);
    ok.push(verdict(3, "algebraic invariants", &o, t, secs(60)));
    let (o4, t) = timed(simulator_fidelity);
    ok.push(verdict(4, "simulator fidelity", &o4, t, secs(60)));
    let (o5, t) = timed(baseline_sanity);
    ok.push(verdict(5, "baseline sanity", &o5, t, secs(30)));

    let tmp = tempfile::tempdir().unwrap();
    let (run, t) = timed(|| overfit(&tmp.path().join("first")));
    let o6 = overfit_outcome(&run);
    ok.push(verdict(6, "overfit smoke test", &o6, t, secs(1800)));
    let o7 = ablation_outcome(&run);
    ok.push(verdict(7, "ablation direction", &o7, Duration::ZERO, secs(1)));

    let (again, t) = timed(|| {
        let rerun = overfit(&tmp.path().join("second"));
        [
            simulator_fidelity().report == o4.report,
            baseline_sanity().report == o5.report,
            rerun.report == o6.report,
        ]
    });
    let same = again.iter().all(|&b| b);
    let o8 = Outcome {
        pass: same,
        detail: format!("reports of criteria 4, 5, 6-7 identical on rerun: {again:?}"),
        report: String::new(),
    };
    ok.push(verdict(8, "determinism", &o8, t, secs(3600)));

    let failed: Vec<usize> = ok.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
