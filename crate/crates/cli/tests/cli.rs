use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_jaecbf");

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(["--threads", "1"]).args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One toy corpus shared by the tests in this file.
fn corpus() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_corpus");
        let _ = std::fs::remove_dir_all(&dir);
        let o = run(&["simulate", "--config", s(&toy()), "--out", s(&dir)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dir
    })
}

fn loss_rows(run_dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,sisnr_term,mse_term,grad_norm"));
    lines.map(str::to_string).collect()
}

fn train(out: &Path, steps: usize, extra: &[&str]) -> Output {
    let steps = format!("train.steps={steps}");
    let cfg = toy();
    let mut args = vec![
        "--config",
        s(&cfg),
        "--set",
        &steps,
        "--set",
        "train.batch=2",
        "--set",
        "train.checkpoint_every=2",
        "train",
        "--data",
        s(corpus()),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again");
    let o = run(&["simulate", "--config", s(&toy()), "--out", s(&again), "--seed", "7"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("28 scenes"));
    let a = std::fs::read(corpus().join("manifest.json")).unwrap();
    let b = std::fs::read(again.join("manifest.json")).unwrap();
    assert_eq!(a, b);

    let other = tmp.path().join("other");
    assert_eq!(code(&run(&["simulate", "--config", s(&toy()), "--out", s(&other), "--seed", "8"])), 0);
    assert_ne!(a, std::fs::read(other.join("manifest.json")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = run(&["simulate", "--config", "/nonexistent/toy.toml", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));

    let o = run(&["--set", "dataset.rooms=3", "simulate", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["--set", "train.lr=fast", "simulate", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["simulate"]);
    assert_eq!(code(&o), 2, "clap usage errors also use 2");
}

#[test]
fn resume_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tmp.path().join("straight");
    let o = train(&straight, 4, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = loss_rows(&straight);
    assert_eq!(rows.len(), 4);

    let split = tmp.path().join("split");
    assert_eq!(code(&train(&split, 2, &[])), 0);
    let ckpt = split.join("step_000002.ckpt");
    let o = train(&split, 4, &["--resume", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(loss_rows(&split), rows);
    assert!(rows[3].starts_with("4,"));
    assert_eq!(
        std::fs::read(straight.join("model.ckpt")).unwrap(),
        std::fs::read(split.join("model.ckpt")).unwrap()
    );
}

#[test]
fn divergence_exits_3_and_keeps_last_good() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nan");
    let o = train(&out, 4, &[]);
    assert_eq!(code(&o), 0);
    let o = run(&[
        "--config",
        s(&toy()),
        "--set",
        "train.lr=1e30",
        "--set",
        "train.steps=5",
        "--set",
        "train.batch=2",
        "train",
        "--data",
        s(corpus()),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("last_good.ckpt").exists());
    let rows = loss_rows(&out);
    assert!(rows.len() < 5);
    assert!(rows.iter().all(|r| !r.contains("NaN")));
}

#[test]
fn enhance_systems_and_gate_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    assert_eq!(code(&train(&run_dir, 2, &[])), 0);
    let model = run_dir.join("model.ckpt");
    let scene = corpus().join("test_0000");
    let mix = scene.join("mixture.wav");
    let far = scene.join("far_end.wav");
    let len = jaecbf::AudioClip::read_wav(&mix).unwrap().len();

    for sys in ["none", "pbfdaf", "das"] {
        let out = tmp.path().join(format!("{sys}.wav"));
        let o = run(&["enhance", "--system", sys, "--mix", s(&mix), "--far", s(&far), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{sys}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(jaecbf::AudioClip::read_wav(&out).unwrap().len(), len);
    }

    let dumps: Vec<serde_json::Value> = [false, true]
        .iter()
        .map(|&no_dtd| {
            let out = tmp.path().join(format!("jaecbf_{no_dtd}.wav"));
            let dump = tmp.path().join(format!("dump_{no_dtd}.json"));
            let mut args = vec![
                "enhance", "--model", s(&model), "--mix", s(&mix), "--far", s(&far), "--out", s(&out), "--dump",
                s(&dump),
            ];
            if no_dtd {
                args.push("--no-dtd");
            }
            let o = run(&args);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            let clip = jaecbf::AudioClip::read_wav(&out).unwrap();
            assert_eq!((clip.len(), clip.num_channels()), (len, 1));
            serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap()
        })
        .collect();
    let (gated, open) = (&dumps[0], &dumps[1]);
    assert_eq!(gated["refined_sha256"], open["refined_sha256"]);
    assert_eq!(gated["gate"], open["gate"]);
    assert_eq!(gated["applied_gate"], gated["gate"]);
    let gate: Vec<f64> = serde_json::from_value(gated["gate"].clone()).unwrap();
    assert!(gate.iter().all(|p| (0.0..=1.0).contains(p)));
    let applied: Vec<f64> = serde_json::from_value(open["applied_gate"].clone()).unwrap();
    assert!(applied.iter().all(|&p| p == 1.0));

    let out = tmp.path().join("x.wav");
    let o = run(&["enhance", "--mix", s(&mix), "--far", s(&far), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "model systems need --model");
    let o = run(&["enhance", "--model", s(&model), "--mix", s(&mix), "--far", s(&mix), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "stereo far end");
    let mono = scene.join("target.wav");
    let o = run(&["enhance", "--model", s(&model), "--mix", s(&mono), "--far", s(&far), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "channel count differs from the model");
}

#[test]
fn evaluate_reports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let stem = tmp.path().join(format!("r{k}"));
        let o = run(&["--config", s(&toy()), "evaluate", "--data", s(corpus()), "--split", "dev", "--system", "das", "--out", s(&stem)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push((
            std::fs::read(stem.with_extension("csv")).unwrap(),
            std::fs::read(stem.with_extension("json")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
    let csv = String::from_utf8(bytes[0].0.clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);

    let o = run(&["evaluate", "--data", s(corpus()), "--split", "nope", "--system", "das", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn baseline_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = corpus().join("train_0000");
    let mix = scene.join("mixture.wav");
    let far = scene.join("far_end.wav");
    let (out, echo) = (tmp.path().join("err.wav"), tmp.path().join("echo.wav"));
    let o = run(&["baseline", "--mix", s(&mix), "--far", s(&far), "--out", s(&out), "--echo-out", s(&echo)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = jaecbf::AudioClip::read_wav(&mix).unwrap();
    let e = jaecbf::AudioClip::read_wav(&out).unwrap();
    let h = jaecbf::AudioClip::read_wav(&echo).unwrap();
    assert_eq!(e.num_channels(), m.num_channels());
    for c in 0..m.num_channels() {
        for i in 0..m.len() {
            assert!((e.channel(c)[i] + h.channel(c)[i] - m.channel(c)[i]).abs() < 1e-6);
        }
    }
    let das = tmp.path().join("das.wav");
    let o = run(&["baseline", "--method", "das", "--delays=0.5,-0.5", "--mix", s(&mix), "--out", s(&das)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["baseline", "--mix", s(&mix), "--out", s(&das)]);
    assert_eq!(code(&o), 2, "pbfdaf needs a far end");
}

#[test]
fn gradcheck_exit_status() {
    let o = run(&["gradcheck", "--module", "nnkit"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    for case in ["elementwise", "gru", "conv2d", "mhsa"] {
        assert!(table.contains(case), "{table}");
    }
    let o = run(&["gradcheck", "--module", "loss", "--corrupt"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(code(&run(&["gradcheck", "--module", "everything"])), 2);
}
