//! Differentiable layers: GRU cell, graph convolution, feed-forward
//! stacks, and multiplicative attention. Each layer owns its parameter
//! names inside a `ParamSet` and builds its forward pass on a `Session`.

use crate::error::{Error, Result};
use crate::nn::params::{ParamSet, Session};
use crate::nn::tape::NodeId;
use rand_chacha::ChaCha20Rng;

fn expect_len(s: &Session, id: NodeId, want: usize, what: &str) -> Result<()> {
    let got = s.tape.value(id).len();
    if got != want {
        return Err(Error::ShapeMismatch(format!("{what}: expected {want}, got {got}")));
    }
    Ok(())
}

/// Gated recurrent unit: update/reset gates with sigmoid, tanh candidate,
/// convex combination h' = (1-z) h + z c.
#[derive(Debug, Clone)]
pub struct GruParams {
    prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        for gate in ["z", "r", "c"] {
            ps.add_matrix(&format!("{prefix}.w{gate}"), hidden, input, rng);
            ps.add_matrix(&format!("{prefix}.u{gate}"), hidden, hidden, rng);
            ps.add_zeros(&format!("{prefix}.b{gate}"), hidden);
        }
        GruParams {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    /// Reconstruct the handle for parameters already present in a set.
    pub fn attach(prefix: &str, input: usize, hidden: usize) -> Self {
        GruParams {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    pub fn cell(&self, s: &mut Session, x: NodeId, h: NodeId) -> Result<NodeId> {
        expect_len(s, x, self.input, "gru input")?;
        expect_len(s, h, self.hidden, "gru state")?;
        let gate = |s: &mut Session, name: &str| -> (NodeId, NodeId, NodeId) {
            (
                s.param(&format!("{}.w{name}", self.prefix)),
                s.param(&format!("{}.u{name}", self.prefix)),
                s.param(&format!("{}.b{name}", self.prefix)),
            )
        };
        let pre = |s: &mut Session, w: NodeId, u: NodeId, b: NodeId, hh: NodeId| {
            let wx = s.tape.matvec(w, self.hidden, self.input, x);
            let uh = s.tape.matvec(u, self.hidden, self.hidden, hh);
            let sum = s.tape.add(wx, uh);
            s.tape.add(sum, b)
        };
        let (wz, uz, bz) = gate(s, "z");
        let z_pre = pre(s, wz, uz, bz, h);
        let z = s.tape.sigmoid(z_pre);
        let (wr, ur, br) = gate(s, "r");
        let r_pre = pre(s, wr, ur, br, h);
        let r = s.tape.sigmoid(r_pre);
        let rh = s.tape.mul(r, h);
        let (wc, uc, bc) = gate(s, "c");
        let c_pre = pre(s, wc, uc, bc, rh);
        let c = s.tape.tanh(c_pre);

        let zh = s.tape.mul(z, h);
        let keep = s.tape.sub(h, zh);
        let zc = s.tape.mul(z, c);
        Ok(s.tape.add(keep, zc))
    }
}

/// One graph-convolution layer: out = ReLU(A_hat X W) with A_hat the
/// symmetrically normalized adjacency (self-loops included), applied to
/// per-node feature vectors.
#[derive(Debug, Clone)]
pub struct GconvParams {
    prefix: String,
    pub dim: usize,
}

impl GconvParams {
    pub fn init(ps: &mut ParamSet, prefix: &str, dim: usize, rng: &mut ChaCha20Rng) -> Self {
        ps.add_matrix(&format!("{prefix}.w"), dim, dim, rng);
        GconvParams {
            prefix: prefix.to_string(),
            dim,
        }
    }

    pub fn attach(prefix: &str, dim: usize) -> Self {
        GconvParams {
            prefix: prefix.to_string(),
            dim,
        }
    }

    pub fn forward(
        &self,
        s: &mut Session,
        adj: &[Vec<f64>],
        feats: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        if adj.len() != feats.len() {
            return Err(Error::ShapeMismatch(format!(
                "graph has {} vertices, got {} feature vectors",
                adj.len(),
                feats.len()
            )));
        }
        for &f in feats {
            expect_len(s, f, self.dim, "gconv feature")?;
        }
        let w = s.param(&format!("{}.w", self.prefix));
        let proj: Vec<NodeId> = feats
            .iter()
            .map(|&f| s.tape.matvec(w, self.dim, self.dim, f))
            .collect();
        let mut out = Vec::with_capacity(feats.len());
        for row in adj {
            let terms: Vec<(f64, NodeId)> = row
                .iter()
                .zip(&proj)
                .filter(|(&c, _)| c != 0.0)
                .map(|(&c, &p)| (c, p))
                .collect();
            let agg = s.tape.lincomb(&terms);
            out.push(s.tape.relu(agg));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
    Sigmoid,
}

fn apply_act(s: &mut Session, act: Act, x: NodeId) -> NodeId {
    match act {
        Act::Relu => s.tape.relu(x),
        Act::Tanh => s.tape.tanh(x),
        Act::Sigmoid => s.tape.sigmoid(x),
    }
}

/// Fully connected stack. `sizes` runs input first, output last; the
/// hidden activation sits between layers and the output stays linear
/// unless `output_act` is set.
#[derive(Debug, Clone)]
pub struct FfnSpec {
    pub sizes: Vec<usize>,
    pub hidden_act: Act,
    pub output_act: Option<Act>,
}

impl FfnSpec {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        FfnSpec {
            sizes,
            hidden_act: Act::Relu,
            output_act: None,
        }
    }

    pub fn with_output_act(mut self, act: Act) -> Self {
        self.output_act = Some(act);
        self
    }
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    prefix: String,
    pub spec: FfnSpec,
}

impl FfnParams {
    pub fn init(ps: &mut ParamSet, prefix: &str, spec: FfnSpec, rng: &mut ChaCha20Rng) -> Self {
        for l in 0..spec.sizes.len() - 1 {
            ps.add_matrix(&format!("{prefix}.w{l}"), spec.sizes[l + 1], spec.sizes[l], rng);
            ps.add_zeros(&format!("{prefix}.b{l}"), spec.sizes[l + 1]);
        }
        FfnParams {
            prefix: prefix.to_string(),
            spec,
        }
    }

    pub fn attach(prefix: &str, spec: FfnSpec) -> Self {
        FfnParams {
            prefix: prefix.to_string(),
            spec,
        }
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        expect_len(s, x, self.spec.sizes[0], "ffn input")?;
        let last = self.spec.sizes.len() - 2;
        let mut cur = x;
        for l in 0..=last {
            let w = s.param(&format!("{}.w{l}", self.prefix));
            let b = s.param(&format!("{}.b{l}", self.prefix));
            let wx = s.tape.matvec(w, self.spec.sizes[l + 1], self.spec.sizes[l], cur);
            cur = s.tape.add(wx, b);
            if l < last {
                cur = apply_act(s, self.spec.hidden_act, cur);
            } else if let Some(act) = self.spec.output_act {
                cur = apply_act(s, act, cur);
            }
        }
        Ok(cur)
    }
}

/// Multiplicative attention over a set of key vectors: scores are the
/// query scalar times w . k_i, softmaxed into weights, pooled by weighted
/// sum. Returns (weights, pooled).
pub fn mult_attention(
    s: &mut Session,
    y: NodeId,
    keys: &[NodeId],
    w: NodeId,
) -> Result<(NodeId, NodeId)> {
    if keys.is_empty() {
        return Err(Error::EmptySequence);
    }
    expect_len(s, y, 1, "attention query")?;
    let m = s.tape.value(w).len();
    for &k in keys {
        expect_len(s, k, m, "attention key")?;
    }
    let scores: Vec<NodeId> = keys
        .iter()
        .map(|&k| {
            let wk = s.tape.dot(w, k);
            s.tape.mul(y, wk)
        })
        .collect();
    let stacked = s.tape.concat(&scores);
    let alphas = s.tape.softmax(stacked);
    let mut pooled = {
        let a0 = s.tape.index(alphas, 0);
        s.tape.vscale(keys[0], a0)
    };
    for (i, &k) in keys.iter().enumerate().skip(1) {
        let ai = s.tape.index(alphas, i);
        let term = s.tape.vscale(k, ai);
        pooled = s.tape.add(pooled, term);
    }
    Ok((alphas, pooled))
}
