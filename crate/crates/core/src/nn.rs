//! Transformer building blocks on top of the tape.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Mat, ParamId, ParamStore, Tape, Var};

/// One forward pass: the tape plus dropout state.
pub struct Forward<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub ln_eps: f64,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Forward<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(store: &'a ParamStore, ln_eps: f64) -> Self {
        Self { tape: Tape::new(), store, ln_eps, dropout: None }
    }

    pub fn train(store: &'a ParamStore, ln_eps: f64, dropout: f64, seed: u64) -> Self {
        let dropout = (dropout > 0.0).then(|| (dropout, ChaCha8Rng::seed_from_u64(seed)));
        Self { tape: Tape::new(), store, ln_eps, dropout }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else { return x };
        let p = *p;
        let dim = self.tape.value(x).raw_dim();
        let keep = 1.0 / (1.0 - p);
        let mask = Mat::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(input, output, rng));
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let y = f.tape.matmul(x, w);
        f.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Mat::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let n = f.tape.layer_norm(x, f.ln_eps);
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let y = f.tape.mul_row(n, g);
        f.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, query_dim: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), query_dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `allowed[i][j]`: query row `i` may attend to key row `j`.
    pub fn forward(&self, f: &mut Forward, q: Var, kv: Var, allowed: &Array2<bool>) -> Var {
        let qs = self.query.forward(f, q);
        let ks = self.key.forward(f, kv);
        let vs = self.value.forward(f, kv);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = f.tape.slice_cols(qs, h * dh, dh);
            let kh = f.tape.slice_cols(ks, h * dh, dh);
            let vh = f.tape.slice_cols(vs, h * dh, dh);
            let scores = f.tape.matmul_t(qh, kh);
            let scores = f.tape.scale(scores, scale);
            let attn = f.tape.masked_softmax(scores, allowed);
            let attn = f.dropout(attn);
            heads.push(f.tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { f.tape.concat(&heads) };
        self.out.forward(f, cat)
    }
}

/// Post-norm encoder layer with a ReLU feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var, allowed: &Array2<bool>) -> Var {
        let a = self.attn.forward(f, x, x, allowed);
        let a = f.dropout(a);
        let x = f.tape.add(x, a);
        let x = self.norm1.forward(f, x);
        let h = self.ff1.forward(f, x);
        let h = f.tape.relu(h);
        let h = f.dropout(h);
        let h = self.ff2.forward(f, h);
        let h = f.dropout(h);
        let x2 = f.tape.add(x, h);
        self.norm2.forward(f, x2)
    }
}

pub fn encoder_stack(store: &mut ParamStore, name: &str, layers: usize, dim: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Vec<EncoderLayer> {
    (0..layers).map(|l| EncoderLayer::new(store, &format!("{name}.{l}"), dim, heads, ff, rng)).collect()
}

/// Cross-attention head: a projected query attends over the visit
/// embeddings, then a feed-forward block emits the head's raw outputs.
#[derive(Debug, Clone)]
pub struct CrossHead {
    pub query_proj: Linear,
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CrossHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        dim: usize,
        heads: usize,
        ff: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query_proj: Linear::new(store, &format!("{name}.query_proj"), query_dim, dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, output, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, query: Var, memory: Var, allowed: &Array2<bool>) -> Var {
        let q = self.query_proj.forward(f, query);
        let a = self.attn.forward(f, q, memory, allowed);
        let a = f.dropout(a);
        let x = f.tape.add(q, a);
        let x = self.norm.forward(f, x);
        let h = self.ff1.forward(f, x);
        let h = f.tape.relu(h);
        let h = f.dropout(h);
        self.ff2.forward(f, h)
    }
}
