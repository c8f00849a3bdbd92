//! Parameterised layers. Each layer only remembers its parameter names and
//! sizes; values live in a [`ParamTree`].

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::init::Initializer;
use crate::params::ParamTree;
use crate::tensor::Tensor;

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: String,
    b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let (w, b) = (name(prefix, "w"), name(prefix, "b"));
        tree.insert(&w, init.glorot(&[d_in, d_out], d_in, d_out))?;
        tree.insert(&b, Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, x: Var) -> Result<Var> {
        let w = g.param(tree, &self.w)?;
        let b = g.param(tree, &self.b)?;
        g.dense(x, w, Some(b))
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }
}

#[derive(Clone, Debug)]
pub struct Gru {
    w_ih: String,
    w_hh: String,
    b_ih: String,
    b_hh: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, prefix: &str, d_in: usize, hidden: usize) -> Result<Self> {
        let s = Self {
            w_ih: name(prefix, "w_ih"),
            w_hh: name(prefix, "w_hh"),
            b_ih: name(prefix, "b_ih"),
            b_hh: name(prefix, "b_hh"),
            d_in,
            hidden,
        };
        tree.insert(&s.w_ih, init.recurrent(&[d_in, 3 * hidden], hidden))?;
        tree.insert(&s.w_hh, init.recurrent(&[hidden, 3 * hidden], hidden))?;
        tree.insert(&s.b_ih, Tensor::zeros(&[3 * hidden]))?;
        tree.insert(&s.b_hh, Tensor::zeros(&[3 * hidden]))?;
        Ok(s)
    }

    /// `x[B, T, d_in]` → all hidden states `[B, T, hidden]`.
    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, x: Var, h0: Option<Var>) -> Result<Var> {
        let w_ih = g.param(tree, &self.w_ih)?;
        let w_hh = g.param(tree, &self.w_hh)?;
        let b_ih = g.param(tree, &self.b_ih)?;
        let b_hh = g.param(tree, &self.b_hh)?;
        g.gru(x, h0, w_ih, w_hh, b_ih, b_hh)
    }

    /// Returns `(sequence, final_state)` with the final state shaped `[B, hidden]`.
    pub fn forward_with_final(&self, g: &mut Graph, tree: &ParamTree, x: Var, h0: Option<Var>) -> Result<(Var, Var)> {
        let seq = self.forward(g, tree, x, h0)?;
        let [b, t, h] = *g.shape(seq) else {
            return shape_err("gru", "expected rank-3 output");
        };
        let last = g.narrow(seq, 1, t - 1, 1)?;
        let last = g.reshape(last, &[b, h])?;
        Ok((seq, last))
    }

    pub fn param_names(&self) -> [&str; 4] {
        [&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: String,
    b: String,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub transposed: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: &mut ParamTree,
        init: &mut Initializer,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let (w, b) = (name(prefix, "w"), name(prefix, "b"));
        let rf = kernel.0 * kernel.1;
        tree.insert(&w, init.glorot(&[c_out, c_in, kernel.0, kernel.1], c_in * rf, c_out * rf))?;
        tree.insert(&b, Tensor::zeros(&[c_out]))?;
        Ok(Self {
            w,
            b,
            stride,
            pad,
            transposed: false,
        })
    }

    /// Transposed variant; weights are stored `[c_in, c_out, kh, kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new_transposed(
        tree: &mut ParamTree,
        init: &mut Initializer,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let (w, b) = (name(prefix, "w"), name(prefix, "b"));
        let rf = kernel.0 * kernel.1;
        tree.insert(&w, init.glorot(&[c_in, c_out, kernel.0, kernel.1], c_in * rf, c_out * rf))?;
        tree.insert(&b, Tensor::zeros(&[c_out]))?;
        Ok(Self {
            w,
            b,
            stride,
            pad,
            transposed: true,
        })
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, x: Var) -> Result<Var> {
        let w = g.param(tree, &self.w)?;
        let b = g.param(tree, &self.b)?;
        if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.pad)
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(tree: &mut ParamTree, prefix: &str, d: usize) -> Result<Self> {
        let (gamma, beta) = (name(prefix, "gamma"), name(prefix, "beta"));
        tree.insert(&gamma, Tensor::full(&[d], 1.0))?;
        tree.insert(&beta, Tensor::zeros(&[d]))?;
        Ok(Self {
            gamma,
            beta,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, x: Var) -> Result<Var> {
        let gamma = g.param(tree, &self.gamma)?;
        let beta = g.param(tree, &self.beta)?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head scaled dot-product attention over the step axis of
/// `[B, T, d]` inputs, without masking.
#[derive(Clone, Debug)]
pub struct Mhsa {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    pub d: usize,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(tree: &mut ParamTree, init: &mut Initializer, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return shape_err("mhsa", format!("width {d} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Dense::new(tree, init, &name(prefix, "q"), d, d)?,
            k: Dense::new(tree, init, &name(prefix, "k"), d, d)?,
            v: Dense::new(tree, init, &name(prefix, "v"), d, d)?,
            o: Dense::new(tree, init, &name(prefix, "o"), d, d)?,
            d,
            heads,
        })
    }

    pub fn self_attention(&self, g: &mut Graph, tree: &ParamTree, x: Var) -> Result<Var> {
        self.forward(g, tree, x, x, x)
    }

    pub fn forward(&self, g: &mut Graph, tree: &ParamTree, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = g.shape(q).to_vec();
        let [b, t, d] = shape[..] else {
            return shape_err("mhsa", format!("expected [B, T, d], got {shape:?}"));
        };
        if d != self.d || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
            return shape_err("mhsa", format!("q/k/v shapes must all be [{b}, {t}, {}]", self.d));
        }
        let h = self.heads;
        let dh = d / h;
        let split = |g: &mut Graph, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, t, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, t, dh])
        };
        let qp = self.q.forward(g, tree, q)?;
        let kp = self.k.forward(g, tree, k)?;
        let vp = self.v.forward(g, tree, v)?;
        let (qh, kh, vh) = (split(g, qp)?, split(g, kp)?, split(g, vp)?);
        // Scaling q is cheaper than scaling the [T, T] scores.
        let qh = g.scale(qh, 1.0 / (dh as f64).sqrt());
        let scores = g.bmm(qh, kh, false, true)?;
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, vh, false, false)?;
        let ctx = g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.o.forward(g, tree, ctx)
    }

    /// Names of the four projection layers (q, k, v, o).
    pub fn projections(&self) -> [&Dense; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_identity(tree: &mut ParamTree, d: &Dense) {
        let n = d.d_in;
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        tree.set_value(d.weight_name(), &eye).unwrap();
    }

    #[test]
    fn mhsa_equal_keys_gives_mean_of_values() {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(1);
        let att = Mhsa::new(&mut tree, &mut init, "att", 2, 1).unwrap();
        for p in att.projections() {
            set_identity(&mut tree, p);
        }
        // key projection zeroed: every score is equal
        tree.fill(att.projections()[1].weight_name(), 0.0).unwrap();
        let xs = [1.0, 2.0, 3.0, -4.0, 5.0, 0.5];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3, 2], xs.to_vec()));
        let y = att.self_attention(&mut g, &tree, x).unwrap();
        let mean = [(1.0 + 3.0 + 5.0) / 3.0, (2.0 - 4.0 + 0.5) / 3.0];
        for row in g.value(y).data().chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-12 && (row[1] - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_single_step_is_value_projection() {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(3);
        let att = Mhsa::new(&mut tree, &mut init, "att", 4, 2).unwrap();
        let x_data = vec![0.3, -1.2, 0.7, 2.0];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 4], x_data.clone()));
        let y = att.self_attention(&mut g, &tree, x).unwrap();
        let [_, _, v, o] = att.projections();
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::new(&[1, 1, 4], x_data));
        let vp = v.forward(&mut g2, &tree, x2).unwrap();
        let want = o.forward(&mut g2, &tree, vp).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut tree = ParamTree::new();
        let mut init = Initializer::new(0);
        assert!(Mhsa::new(&mut tree, &mut init, "att", 6, 4).is_err());
    }
}
