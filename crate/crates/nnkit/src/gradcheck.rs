//! Central-difference gradient verification.
//!
//! A check rebuilds the forward pass from scratch for every perturbed
//! coordinate, so the numeric side never touches the backward closures.
//! Error per tensor is the max-norm relative error
//! `max|a − n| / max(max|a|, max|n|)`, with the denominator floored at
//! 1e-4 of the largest gradient in the whole check so that tensors whose
//! true gradient is identically zero (e.g. attention key biases) are judged
//! against round-off rather than against themselves.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorError {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub finite: bool,
    pub tensors: Vec<TensorError>,
    pub ops: Vec<&'static str>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.finite && self.max_rel_err < self.tolerance
    }
}

enum Target {
    Input(usize),
    Param(String),
}

/// Checks every input tensor and every parameter the forward pass touches.
///
/// `build` must record a scalar on the graph it is given; `inputs` become
/// gradient-tracked leaves handed to `build` in order.
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
    let eval = |tree: &ParamTree, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, tree, &vars)?;
        Ok(g.value(y).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, tree, &vars)?;
    g.backward(y)?;
    let ops: Vec<&'static str> = g.ops_used().iter().copied().collect();

    let mut targets: Vec<(Target, Vec<f64>)> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            (Target::Input(i), grad)
        })
        .collect();
    targets.extend(g.param_grads().into_iter().map(|(n, gr)| (Target::Param(n), gr)));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut finite = true;
    let mut measured = Vec::new();
    let h = opts.step;
    for (target, mut analytic) in targets {
        if opts.corrupt {
            for a in analytic.iter_mut() {
                *a = *a * 1.1 + 1e-3;
            }
        }
        finite &= analytic.iter().all(|a| a.is_finite());
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for &i in &coords {
            let numeric = match &target {
                Target::Input(k) => {
                    let mut xs = inputs.to_vec();
                    let base = xs[*k].data()[i];
                    xs[*k].data_mut()[i] = base + h;
                    let fp = eval(tree, &xs)?;
                    xs[*k].data_mut()[i] = base - h;
                    let fm = eval(tree, &xs)?;
                    (fp - fm) / (2.0 * h)
                }
                Target::Param(pn) => {
                    let mut t = tree.clone();
                    let base = t.get(pn)?.value[i];
                    t.get_mut(pn)?.value[i] = base + h;
                    let fp = eval(&t, inputs)?;
                    t.get_mut(pn)?.value[i] = base - h;
                    let fm = eval(&t, inputs)?;
                    (fp - fm) / (2.0 * h)
                }
            };
            finite &= numeric.is_finite();
            max_diff = max_diff.max((analytic[i] - numeric).abs());
            scale = scale.max(analytic[i].abs()).max(numeric.abs());
        }
        let label = match &target {
            Target::Input(k) => format!("input{k}"),
            Target::Param(pn) => pn.clone(),
        };
        measured.push((label, max_diff, scale, coords.len()));
    }
    let global = measured.iter().fold(0.0f64, |m, t| m.max(t.2));
    let tensors: Vec<TensorError> = measured
        .into_iter()
        .map(|(name, diff, scale, checked)| {
            let denom = scale.max(1e-4 * global);
            TensorError {
                name,
                rel_err: if denom > 0.0 { diff / denom } else { 0.0 },
                checked,
            }
        })
        .collect();
    let max_rel_err = tensors.iter().fold(0.0f64, |m, t| m.max(t.rel_err));
    Ok(GradCheckReport {
        name: name.to_string(),
        tolerance,
        max_rel_err,
        finite,
        tensors,
        ops,
    })
}

/// Fixed random weights for reducing an op output to a scalar loss.
pub fn projection_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// `Σ y ⊙ R` with `R` from [`projection_weights`].
pub fn project_to_scalar(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(projection_weights(g.shape(y), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Uniform random tensor in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}
