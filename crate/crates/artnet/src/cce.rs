//! Context-conditioned word prediction head.
//!
//! Each masked position's encoder output is fused with the analogy context
//! vector, passed through a rectified conditioning layer, a GELU feed-forward
//! layer, and layer norm, then scored against a word embedding matrix to give
//! logits over the complete vocabulary. With a zero context vector the head
//! degenerates to a plain masked-LM head, which is exactly the no-reasoning
//! baseline.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{INIT_STD, LN_EPS};
use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{Graph, TensorError, Var};

/// Shape and tying knobs for the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CceConfig {
    /// Encoder output width.
    pub hidden: usize,
    /// Analogy context width.
    pub ctx_dim: usize,
    /// Number of scored tokens.
    pub vocab_size: usize,
    /// Score against the encoder's input embedding table instead of a
    /// separate output matrix.
    pub tie_embeddings: bool,
}

/// Learned head; owns its parameter ids.
#[derive(Debug, Clone)]
pub struct Cce {
    cfg: CceConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ff_w: ParamId,
    ff_b: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    phi: Option<ParamId>,
}

impl Cce {
    pub fn new(
        cfg: CceConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let h = cfg.hidden;
        let fused = h + cfg.ctx_dim;
        // The context columns start at zero: a fresh head reproduces the
        // plain masked-LM head exactly, and the context pathway only grows
        // where its gradient earns it. Gaussian context columns would feed
        // untrained-reasoning noise into every early prediction.
        let w1 = {
            let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
            let data: Vec<f64> = (0..h)
                .flat_map(|_| {
                    let m_cols: Vec<f64> =
                        (0..h).map(|_| rand_distr::Distribution::sample(&normal, rng)).collect();
                    m_cols.into_iter().chain(std::iter::repeat(0.0).take(cfg.ctx_dim))
                })
                .collect();
            store.add("cce.cond.w1", crate::tensor::Tensor::matrix(h, fused, data))?
        };
        let b1 = store.add_zeros_vec("cce.cond.b1", h)?;
        let w2 = store.add_gaussian("cce.cond.w2", h, h, INIT_STD, rng)?;
        let b2 = store.add_zeros_vec("cce.cond.b2", h)?;
        let ff_w = store.add_gaussian("cce.ff.w", h, h, INIT_STD, rng)?;
        let ff_b = store.add_zeros_vec("cce.ff.b", h)?;
        let ln_gain = store.add("cce.ln.gain", crate::tensor::Tensor::vector(vec![1.0; h]))?;
        let ln_bias = store.add_zeros_vec("cce.ln.bias", h)?;
        let phi = if cfg.tie_embeddings {
            None
        } else {
            Some(store.add_gaussian("cce.phi", cfg.vocab_size, h, INIT_STD, rng)?)
        };
        Ok(Cce {
            cfg,
            w1,
            b1,
            w2,
            b2,
            ff_w,
            ff_b,
            ln_gain,
            ln_bias,
            phi,
        })
    }

    pub fn config(&self) -> &CceConfig {
        &self.cfg
    }

    /// The scoring matrix: the head's own table, or `tied_table` when the
    /// config ties embeddings.
    pub fn phi_var(&self, bind: &Binding, tied_table: Var) -> Var {
        match self.phi {
            Some(id) => bind.var(id),
            None => tied_table,
        }
    }

    /// Fuses a masked-position representation with the context vector:
    /// `W2 relu(W1 [m; c] + b1) + b2`.
    pub fn condition(
        &self,
        g: &Graph,
        bind: &Binding,
        m: Var,
        c: Var,
    ) -> Result<Var, TensorError> {
        let fused = g.concat_vec(&[m, c])?;
        let mid = g.relu(g.add(g.matvec(bind.var(self.w1), fused)?, bind.var(self.b1))?);
        g.add(g.matvec(bind.var(self.w2), mid)?, bind.var(self.b2))
    }

    /// GELU feed-forward followed by affine layer norm.
    pub fn head_forward(&self, g: &Graph, bind: &Binding, h1: Var) -> Result<Var, TensorError> {
        let h2 = g.gelu(g.add(g.matvec(bind.var(self.ff_w), h1)?, bind.var(self.ff_b))?);
        let normed = g.layer_norm_vec(h2, LN_EPS)?;
        g.add(g.mul(normed, bind.var(self.ln_gain))?, bind.var(self.ln_bias))
    }

    /// Logits over the vocabulary: `phi_w . h`.
    pub fn logits(&self, g: &Graph, phi: Var, h: Var) -> Result<Var, TensorError> {
        g.matvec(phi, h)
    }

    /// Full head: condition, transform, score.
    pub fn forward(
        &self,
        g: &Graph,
        bind: &Binding,
        m: Var,
        c: Var,
        tied_table: Var,
    ) -> Result<Var, TensorError> {
        let h1 = self.condition(g, bind, m, c)?;
        let h = self.head_forward(g, bind, h1)?;
        self.logits(g, self.phi_var(bind, tied_table), h)
    }
}

/// Indices of the `n` largest logits, descending; ties break toward the
/// smaller word id.
pub fn top_n(logits: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}
