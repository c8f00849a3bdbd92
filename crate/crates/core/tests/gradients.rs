use jaecbf::gradsuite::{run, Module};
use nnkit::gradcheck::GradCheckOptions;

// The full suite with its coverage assertion runs in the acceptance test.

#[test]
fn signal_and_loss_ops_pass() {
    for m in [Module::Stft, Module::Loss, Module::Aec, Module::Bf] {
        for e in run(m, &GradCheckOptions::default()).unwrap() {
            assert!(e.report.passed(), "{:?}", e.report);
        }
    }
}

#[test]
fn corrupted_gradient_fails() {
    let opts = GradCheckOptions {
        corrupt: true,
        ..GradCheckOptions::default()
    };
    let entries = run(Module::Loss, &opts).unwrap();
    assert!(entries.iter().all(|e| !e.report.passed()));
}
