//! Gradient checks for every op in [`crate::ops::OP_NAMES`], at the
//! tolerances each op is held to.

use crate::error::Result;
use crate::gradcheck::{check, project_to_scalar, random_tensor, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::init::Initializer;
use crate::layers::{Conv2d, Dense, Gru, LayerNorm, Mhsa};
use crate::params::ParamTree;

type Build = Box<dyn Fn(&mut Graph, &ParamTree, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    tol: f64,
    tree: ParamTree,
    inputs: Vec<crate::Tensor>,
    build: Build,
}

fn randomize(tree: &mut ParamTree, seed: u64, scale: f64) {
    let names: Vec<String> = tree.names().map(str::to_string).collect();
    for (i, n) in names.iter().enumerate() {
        let len = tree.get(n).unwrap().value.len();
        let t = random_tensor(&[len], scale, seed + i as u64);
        tree.set_value(n, t.data()).unwrap();
    }
}

fn cases() -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let r = random_tensor;

    out.push(Case {
        name: "elementwise",
        tol: 1e-6,
        tree: ParamTree::new(),
        inputs: vec![r(&[3, 4], 1.5, 1), r(&[3, 4], 1.5, 2), r(&[4], 1.0, 3)],
        build: Box::new(|g, _, x| {
            let a = g.add(x[0], x[1])?;
            let s = g.sub(a, x[1])?;
            let m = g.mul(s, x[1])?;
            let m = g.scale(m, 0.7);
            let t = g.tanh(m);
            let sg = g.sigmoid(x[0]);
            let e = g.elu(x[1]);
            let p = g.mul(t, sg)?;
            let p = g.add(p, e)?;
            let b = g.mul_bcast(p, x[2], 1)?;
            let mean = g.mean(b);
            let proj = project_to_scalar(g, b, 10)?;
            let mr = g.reshape(mean, &[1])?;
            let pr = g.reshape(proj, &[1])?;
            let tot = g.concat(&[mr, pr], 0)?;
            Ok(g.sum(tot))
        }),
    });

    out.push(Case {
        name: "shape_ops",
        tol: 1e-6,
        tree: ParamTree::new(),
        inputs: vec![r(&[2, 3, 4], 1.0, 4), r(&[2, 2, 4], 1.0, 5)],
        build: Box::new(|g, _, x| {
            let p = g.permute(x[0], &[2, 0, 1])?;
            let p = g.reshape(p, &[4, 2, 3])?;
            let p = g.permute(p, &[1, 2, 0])?;
            let c = g.concat(&[p, x[1]], 1)?;
            let n = g.narrow(c, 1, 1, 3)?;
            let m = g.mean_axis(n, 2)?;
            let sq = g.mul(m, m)?;
            project_to_scalar(g, sq, 11)
        }),
    });

    out.push(Case {
        name: "bmm_softmax",
        tol: 1e-6,
        tree: ParamTree::new(),
        inputs: vec![r(&[2, 3, 4], 1.0, 6), r(&[2, 5, 4], 1.0, 7), r(&[2, 5, 3], 1.0, 8)],
        build: Box::new(|g, _, x| {
            let s = g.bmm(x[0], x[1], false, true)?; // [2,3,5]
            let a = g.softmax(s);
            let o = g.bmm(a, x[2], false, false)?; // [2,3,3]
            let o2 = g.bmm(x[0], o, true, false)?; // [2,4,3]
            let o3 = g.bmm(o2, x[2], false, true)?; // [2,4,5]
            project_to_scalar(g, o3, 12)
        }),
    });

    {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(20);
        let d = Dense::new(&mut tree, &mut init, "dense", 5, 3)?;
        randomize(&mut tree, 21, 0.8);
        out.push(Case {
            name: "dense",
            tol: 1e-6,
            tree,
            inputs: vec![r(&[4, 5], 1.0, 22)],
            build: Box::new(move |g, t, x| {
                let y = d.forward(g, t, x[0])?;
                project_to_scalar(g, y, 13)
            }),
        });
    }

    {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(30);
        let gru = Gru::new(&mut tree, &mut init, "gru", 3, 3)?;
        randomize(&mut tree, 31, 0.6);
        out.push(Case {
            name: "gru",
            tol: 1e-5,
            tree,
            inputs: vec![r(&[2, 5, 3], 1.0, 32), r(&[2, 3], 0.5, 33)],
            build: Box::new(move |g, t, x| {
                let y = gru.forward(g, t, x[0], Some(x[1]))?;
                project_to_scalar(g, y, 14)
            }),
        });
    }

    {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(40);
        let conv = Conv2d::new(&mut tree, &mut init, "conv", 2, 3, (3, 3), (1, 2), (1, 1))?;
        let tconv = Conv2d::new_transposed(&mut tree, &mut init, "tconv", 3, 2, (3, 3), (1, 2), (1, 1))?;
        randomize(&mut tree, 41, 0.5);
        out.push(Case {
            name: "conv2d",
            tol: 1e-5,
            tree,
            inputs: vec![r(&[2, 8, 8], 1.0, 42)],
            build: Box::new(move |g, t, x| {
                let y = conv.forward(g, t, x[0])?; // [3, 8, 4]
                let y = g.tanh(y);
                let z = tconv.forward(g, t, y)?; // [2, 8, 7]
                project_to_scalar(g, z, 15)
            }),
        });
    }

    {
        let mut tree = ParamTree::new();
        let ln = LayerNorm::new(&mut tree, "ln", 6)?;
        randomize(&mut tree, 51, 1.0);
        out.push(Case {
            name: "layer_norm",
            tol: 1e-6,
            tree,
            inputs: vec![r(&[4, 6], 2.0, 52)],
            build: Box::new(move |g, t, x| {
                let y = ln.forward(g, t, x[0])?;
                project_to_scalar(g, y, 16)
            }),
        });
    }

    {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(60);
        let att = Mhsa::new(&mut tree, &mut init, "mhsa", 8, 2)?;
        randomize(&mut tree, 61, 0.5);
        out.push(Case {
            name: "mhsa",
            tol: 1e-5,
            tree,
            inputs: vec![r(&[1, 4, 8], 1.0, 62)],
            build: Box::new(move |g, t, x| {
                let y = att.self_attention(g, t, x[0])?;
                project_to_scalar(g, y, 17)
            }),
        });
    }
    Ok(out)
}

/// Runs the op-level gradient suite.
pub fn run(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    cases()?
        .into_iter()
        .map(|c| check(c.name, &c.tree, &c.inputs, c.tol, opts, c.build))
        .collect()
}
