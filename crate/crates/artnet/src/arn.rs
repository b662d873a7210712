//! Analogical reasoning over retrieved references.
//!
//! The masked composition becomes a query vector (recurrent encoder over the
//! masked-position embeddings). Each retrieved reference contributes analogy
//! pairs — adjacent words and ordered region pairs — which are scored against
//! the query by additive attention, aggregated per modality, pushed through
//! modality transforms and a stack of neural-accumulator layers, and finally
//! folded across references (in retrieval-rank order) into one context vector.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};
use thiserror::Error;

use crate::backbone::INIT_STD;
use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ArnError {
    #[error("query needs at least one masked position")]
    EmptyQuery,
    #[error("need at least one retrieved reference")]
    NoReferences,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Shape knobs for the reasoning stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArnConfig {
    /// Embedding width of pair elements and of the final context vector.
    pub hidden: usize,
    /// Query vector width.
    pub query_dim: usize,
    /// Width of the attention scorer's middle layer.
    pub scorer_hidden: usize,
    /// Number of accumulator layers.
    pub nac_depth: usize,
    /// Drop probability inside the modality transforms (training only).
    pub dropout: f64,
}

impl ArnConfig {
    pub fn desk(hidden: usize) -> Self {
        ArnConfig {
            hidden,
            query_dim: hidden,
            scorer_hidden: 32,
            nac_depth: 2,
            dropout: 0.5,
        }
    }
}

/// Single-layer recurrent sequence encoder (input/forget/output gates with a
/// cell state); `run` returns the final hidden state.
#[derive(Debug, Clone)]
pub struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        // Gate order within the stacked rows: input, forget, cell, output.
        let wx = store.add_gaussian(&format!("{prefix}.wx"), 4 * hidden, input, INIT_STD, rng)?;
        let wh = store.add_gaussian(&format!("{prefix}.wh"), 4 * hidden, hidden, INIT_STD, rng)?;
        let b = store.add_zeros_vec(&format!("{prefix}.b"), 4 * hidden)?;
        Ok(Lstm { wx, wh, b, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the recurrence over `steps` (each a vector of the input width)
    /// and returns the final hidden state.
    pub fn run(&self, g: &Graph, bind: &Binding, steps: &[Var]) -> Result<Var, TensorError> {
        assert!(!steps.is_empty(), "recurrence needs at least one step");
        let h0 = g.constant(Tensor::zeros(&[self.hidden]));
        let mut h = h0;
        let mut c = h0;
        for &x in steps {
            let zx = g.matvec(bind.var(self.wx), x)?;
            let zh = g.matvec(bind.var(self.wh), h)?;
            let z = g.add(g.add(zx, zh)?, bind.var(self.b))?;
            let i = g.sigmoid(g.slice_vec(z, 0, self.hidden)?);
            let f = g.sigmoid(g.slice_vec(z, self.hidden, self.hidden)?);
            let cand = g.tanh(g.slice_vec(z, 2 * self.hidden, self.hidden)?);
            let o = g.sigmoid(g.slice_vec(z, 3 * self.hidden, self.hidden)?);
            c = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
            h = g.mul(o, g.tanh(c))?;
        }
        Ok(h)
    }
}

/// Stack of accumulator layers: each computes `W x` with
/// `W = tanh(What) * sigmoid(Mhat)`, so every effective weight lies in
/// (-1, 1) and the layer is biased toward additive behaviour.
#[derive(Debug, Clone)]
pub struct NacStack {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
}

impl NacStack {
    /// `dims = [input, hidden..., output]`; one layer per adjacent dim pair.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let w = store.add_gaussian(
                &format!("{prefix}.l{l}.w_hat"),
                dims[l + 1],
                dims[l],
                INIT_STD,
                rng,
            )?;
            let m = store.add_gaussian(
                &format!("{prefix}.l{l}.m_hat"),
                dims[l + 1],
                dims[l],
                INIT_STD,
                rng,
            )?;
            layers.push((w, m));
        }
        Ok(NacStack {
            layers,
            dims: dims.to_vec(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Effective weight matrix of layer `l`.
    pub fn effective_weight(&self, g: &Graph, bind: &Binding, l: usize) -> Result<Var, TensorError> {
        let (w_hat, m_hat) = self.layers[l];
        g.mul(g.tanh(bind.var(w_hat)), g.sigmoid(bind.var(m_hat)))
    }

    pub fn apply(&self, g: &Graph, bind: &Binding, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for l in 0..self.layers.len() {
            h = g.matvec(self.effective_weight(g, bind, l)?, h)?;
        }
        Ok(h)
    }
}

/// Adjacent-pair index lists for a sentence of `len` words.
pub fn adjacent_pair_indices(len: usize) -> (Vec<usize>, Vec<usize>) {
    if len < 2 {
        return (Vec::new(), Vec::new());
    }
    ((0..len - 1).collect(), (1..len).collect())
}

/// All ordered pairs (i, j), i != j, for `n` regions.
pub fn ordered_pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ia = Vec::with_capacity(n * n.saturating_sub(1));
    let mut ib = Vec::with_capacity(ia.capacity());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                ia.push(i);
                ib.push(j);
            }
        }
    }
    (ia, ib)
}

/// Pair-element embeddings of one retrieved reference. `None` means the
/// modality contributes no pairs (its aggregate falls back to zero).
pub struct ReferenceEmbeddings {
    /// Word embeddings in sentence order, `[words, hidden]`.
    pub text: Option<Var>,
    /// Region embeddings, `[regions, hidden]`.
    pub vis: Option<Var>,
}

/// Attention weights recorded for one reference, for diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RefTrace {
    pub alpha_text: Vec<f64>,
    pub alpha_vis: Vec<f64>,
}

/// Learned reasoning stack; owns its parameter ids.
#[derive(Debug, Clone)]
pub struct Arn {
    cfg: ArnConfig,
    query: Lstm,
    scorer_w1: ParamId,
    scorer_b1: ParamId,
    scorer_w2: ParamId,
    scorer_b2: ParamId,
    pair_w: ParamId,
    pair_b: ParamId,
    gv: (ParamId, ParamId, ParamId, ParamId),
    gl: (ParamId, ParamId, ParamId, ParamId),
    nac: NacStack,
    ctx: Lstm,
}

impl Arn {
    pub fn new(
        cfg: ArnConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let h = cfg.hidden;
        let query = Lstm::new(store, "arn.query", h, cfg.query_dim, rng)?;
        let sin = 2 * h + cfg.query_dim;
        let scorer_w1 =
            store.add_gaussian("arn.scorer.w1", cfg.scorer_hidden, sin, INIT_STD, rng)?;
        let scorer_b1 = store.add_zeros_vec("arn.scorer.b1", cfg.scorer_hidden)?;
        let scorer_w2 = store.add_gaussian("arn.scorer.w2", 1, cfg.scorer_hidden, INIT_STD, rng)?;
        let scorer_b2 = store.add_zeros_vec("arn.scorer.b2", 1)?;
        let pair_w = store.add_gaussian("arn.pair_proj.w", h, 2 * h, INIT_STD, rng)?;
        let pair_b = store.add_zeros_vec("arn.pair_proj.b", h)?;
        let modality = |tag: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            Ok::<_, ParamError>((
                store.add_gaussian(&format!("arn.{tag}.w1"), h, h, INIT_STD, rng)?,
                store.add_zeros_vec(&format!("arn.{tag}.b1"), h)?,
                store.add_gaussian(&format!("arn.{tag}.w2"), h, h, INIT_STD, rng)?,
                store.add_zeros_vec(&format!("arn.{tag}.b2"), h)?,
            ))
        };
        let gv = modality("g_vis", store, rng)?;
        let gl = modality("g_text", store, rng)?;
        let mut nac_dims = vec![2 * h];
        for _ in 0..cfg.nac_depth {
            nac_dims.push(h);
        }
        let nac = NacStack::new(store, "arn.nac", &nac_dims, rng)?;
        let ctx = Lstm::new(store, "arn.ctx", h, h, rng)?;
        Ok(Arn {
            cfg,
            query,
            scorer_w1,
            scorer_b1,
            scorer_w2,
            scorer_b2,
            pair_w,
            pair_b,
            gv,
            gl,
            nac,
            ctx,
        })
    }

    pub fn config(&self) -> &ArnConfig {
        &self.cfg
    }

    /// Query vector from the masked-position embeddings, in sentence order.
    pub fn build_query(
        &self,
        g: &Graph,
        bind: &Binding,
        masked_embeddings: &[Var],
    ) -> Result<Var, ArnError> {
        if masked_embeddings.is_empty() {
            return Err(ArnError::EmptyQuery);
        }
        Ok(self.query.run(g, bind, masked_embeddings)?)
    }

    /// Scores one modality's pairs against the query and aggregates.
    /// Returns the aggregate (zero vector when there are no pairs) and the
    /// attention weights.
    fn attend(
        &self,
        g: &Graph,
        bind: &Binding,
        q: Var,
        embs: Option<Var>,
        (ia, ib): (Vec<usize>, Vec<usize>),
    ) -> Result<(Var, Vec<f64>), TensorError> {
        let Some(embs) = embs.filter(|_| !ia.is_empty()) else {
            return Ok((g.constant(Tensor::zeros(&[self.cfg.hidden])), Vec::new()));
        };
        let p = ia.len();
        let first = g.gather_rows(embs, &ia)?;
        let second = g.gather_rows(embs, &ib)?;
        let pairs = g.concat_cols(&[first, second])?;
        let feats = g.concat_cols(&[pairs, g.repeat_row(q, p)?])?;
        let s1 = g.tanh(g.add_row(g.matmul_nt(feats, bind.var(self.scorer_w1))?, bind.var(self.scorer_b1))?);
        let scores = g.add_row(g.matmul_nt(s1, bind.var(self.scorer_w2))?, bind.var(self.scorer_b2))?;
        let alpha = g.softmax_vec(g.reshape(scores, &[p])?)?;
        let h = g.add_row(g.matmul_nt(pairs, bind.var(self.pair_w))?, bind.var(self.pair_b))?;
        let agg = g.reshape(g.matmul(g.reshape(alpha, &[1, p])?, h)?, &[self.cfg.hidden])?;
        Ok((agg, g.value(alpha).data().to_vec()))
    }

    /// Two-layer modality transform with optional inverted dropout after the
    /// rectified middle layer.
    fn modality_transform(
        &self,
        g: &Graph,
        bind: &Binding,
        (w1, b1, w2, b2): (ParamId, ParamId, ParamId, ParamId),
        x: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, TensorError> {
        let mut mid = g.relu(g.add(g.matvec(bind.var(w1), x)?, bind.var(b1))?);
        if let Some(rng) = dropout {
            if self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let bern = Bernoulli::new(keep).expect("dropout in [0,1)");
                let mask: Vec<f64> = (0..self.cfg.hidden)
                    .map(|_| if bern.sample(rng) { 1.0 / keep } else { 0.0 })
                    .collect();
                mid = g.mul(mid, g.constant(Tensor::vector(mask)))?;
            }
        }
        g.add(g.matvec(bind.var(w2), mid)?, bind.var(b2))
    }

    /// Full reasoning pass: per-reference attention, modality transforms,
    /// accumulator stack, then a recurrence over references in rank order.
    /// `dropout` enables the training-time masks inside the transforms.
    pub fn analogy_context(
        &self,
        g: &Graph,
        bind: &Binding,
        q: Var,
        refs: &[ReferenceEmbeddings],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<RefTrace>), ArnError> {
        if refs.is_empty() {
            return Err(ArnError::NoReferences);
        }
        let mut steps = Vec::with_capacity(refs.len());
        let mut traces = Vec::with_capacity(refs.len());
        for r in refs {
            let text_pairs = adjacent_pair_indices(r.text.map_or(0, |t| g.dims(t)[0]));
            let vis_pairs = ordered_pair_indices(r.vis.map_or(0, |v| g.dims(v)[0]));
            let (c_l, alpha_text) = self.attend(g, bind, q, r.text, text_pairs)?;
            let (c_v, alpha_vis) = self.attend(g, bind, q, r.vis, vis_pairs)?;
            let tv = self.modality_transform(g, bind, self.gv, c_v, dropout.as_deref_mut())?;
            let tl = self.modality_transform(g, bind, self.gl, c_l, dropout.as_deref_mut())?;
            let h_c = self.nac.apply(g, bind, g.concat_vec(&[tv, tl])?)?;
            steps.push(h_c);
            traces.push(RefTrace {
                alpha_text,
                alpha_vis,
            });
        }
        let c = self.ctx.run(g, bind, &steps)?;
        Ok((c, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{AdamW, GradAccumulator, OptimizerConfig};
    use crate::seeds;
    use crate::tensor::{finite_diff_check_inputs, DEFAULT_H, DEFAULT_TOL};
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gauss_vec(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = rand_distr::Normal::new(0.0, 1.0).unwrap();
        Tensor::vector((0..n).map(|_| d.sample(rng)).collect())
    }

    fn gauss_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = rand_distr::Normal::new(0.0, 1.0).unwrap();
        Tensor::matrix(r, c, (0..r * c).map(|_| d.sample(rng)).collect())
    }

    #[test]
    fn pair_counts_match_formulas() {
        let (ia, ib) = adjacent_pair_indices(4);
        assert_eq!(ia, vec![0, 1, 2]);
        assert_eq!(ib, vec![1, 2, 3]);
        assert_eq!(adjacent_pair_indices(2).0.len(), 1);
        assert_eq!(adjacent_pair_indices(1).0.len(), 0);

        let (va, vb) = ordered_pair_indices(3);
        assert_eq!(va.len(), 6);
        for (i, j) in va.iter().zip(&vb) {
            assert_ne!(i, j);
        }
        // K=3 references of 4 words each: 9 textual pairs total.
        let total: usize = (0..3).map(|_| adjacent_pair_indices(4).0.len()).sum();
        assert_eq!(total, 9);
    }

    #[test]
    fn query_is_order_sensitive_and_deterministic() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(8), &mut store, &mut r).unwrap();

        let a = gauss_vec(8, &mut r);
        let b = gauss_vec(8, &mut r);
        let q_of = |x: &Tensor, y: &Tensor| {
            let g = Graph::new();
            let bind = store.bind(&g);
            let vx = g.constant(x.clone());
            let vy = g.constant(y.clone());
            let q = arn.build_query(&g, &bind, &[vx, vy]).unwrap();
            g.value(q)
        };
        let q_ab = q_of(&a, &b);
        let q_ba = q_of(&b, &a);
        let q_ab2 = q_of(&a, &b);
        assert_eq!(q_ab.data(), q_ab2.data(), "same order, same query");
        let diff: f64 = q_ab
            .data()
            .iter()
            .zip(q_ba.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "swapping verb/noun order must change q");
    }

    #[test]
    fn query_rejects_zero_masked_positions() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(4), &mut store, &mut r).unwrap();
        let g = Graph::new();
        let bind = store.bind(&g);
        assert!(matches!(
            arn.build_query(&g, &bind, &[]),
            Err(ArnError::EmptyQuery)
        ));
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut r = rng(21);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(6), &mut store, &mut r).unwrap();
        let g = Graph::new();
        let bind = store.bind(&g);
        let q = g.constant(gauss_vec(6, &mut r));
        let refs = vec![ReferenceEmbeddings {
            text: Some(g.constant(gauss_mat(4, 6, &mut r))),
            vis: Some(g.constant(gauss_mat(3, 6, &mut r))),
        }];
        let (_, traces) = arn.analogy_context(&g, &bind, q, &refs, None).unwrap();
        assert_eq!(traces[0].alpha_text.len(), 3);
        assert_eq!(traces[0].alpha_vis.len(), 6);
        for t in &traces {
            assert!((t.alpha_text.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((t.alpha_vis.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_pairs_share_attention_equally() {
        let mut r = rng(22);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(5), &mut store, &mut r).unwrap();
        let g = Graph::new();
        let bind = store.bind(&g);
        let q = g.constant(gauss_vec(5, &mut r));
        // Three identical words give two identical adjacent pairs.
        let row = gauss_vec(5, &mut r);
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(row.data());
        }
        let refs = vec![ReferenceEmbeddings {
            text: Some(g.constant(Tensor::matrix(3, 5, data))),
            vis: None,
        }];
        let (_, traces) = arn.analogy_context(&g, &bind, q, &refs, None).unwrap();
        assert_eq!(traces[0].alpha_text.len(), 2);
        for &a in &traces[0].alpha_text {
            assert!((a - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_gets_full_weight_and_projected_value() {
        let mut r = rng(23);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(4), &mut store, &mut r).unwrap();
        let g = Graph::new();
        let bind = store.bind(&g);
        let q = g.constant(gauss_vec(4, &mut r));
        let words = gauss_mat(2, 4, &mut r);
        let emb = g.constant(words.clone());
        let (agg, alpha) = arn
            .attend(&g, &bind, q, Some(emb), adjacent_pair_indices(2))
            .unwrap();
        assert_eq!(alpha, vec![1.0]);

        // By hand: project [w0; w1] through the pair projection.
        let w = store.get(arn.pair_w);
        let b = store.get(arn.pair_b);
        let cat: Vec<f64> = words
            .row(0)
            .iter()
            .chain(words.row(1))
            .copied()
            .collect();
        let got = g.value(agg);
        for i in 0..4 {
            let want: f64 =
                (0..8).map(|j| w.at(i, j) * cat[j]).sum::<f64>() + b.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_modality_is_zero_but_output_flows() {
        let mut r = rng(24);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(5), &mut store, &mut r).unwrap();
        let g = Graph::new();
        let bind = store.bind(&g);
        let q = g.leaf(gauss_vec(5, &mut r));
        let refs = vec![ReferenceEmbeddings {
            text: None,
            vis: Some(g.leaf(gauss_mat(3, 5, &mut r))),
        }];
        let (c, traces) = arn.analogy_context(&g, &bind, q, &refs, None).unwrap();
        assert!(traces[0].alpha_text.is_empty());
        let val = g.value(c);
        assert!(val.all_finite());
        g.backward(g.sum(c)).unwrap();
        let grads = bind.gradients(&g);
        let vis_w1_grad = &grads[arn.gv.0.index()];
        assert!(
            vis_w1_grad
                .as_ref()
                .is_some_and(|t| t.data().iter().any(|&v| v != 0.0)),
            "gradient must flow to the populated modality"
        );
    }

    #[test]
    fn rank_order_changes_context() {
        let mut r = rng(25);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(5), &mut store, &mut r).unwrap();
        // Near-zero init would shrink the order signal below float noise;
        // spread the parameters out first.
        for id in store.ids() {
            for v in store.get_mut(id).data_mut() {
                *v = *v * 10.0 + 0.01;
            }
        }
        let ra = gauss_mat(3, 5, &mut r);
        let rb = gauss_mat(4, 5, &mut r);
        let qv = gauss_vec(5, &mut r);
        let ctx_of = |first: &Tensor, second: &Tensor| {
            let g = Graph::new();
            let bind = store.bind(&g);
            let q = g.constant(qv.clone());
            let refs = vec![
                ReferenceEmbeddings {
                    text: Some(g.constant(first.clone())),
                    vis: None,
                },
                ReferenceEmbeddings {
                    text: Some(g.constant(second.clone())),
                    vis: None,
                },
            ];
            let (c, _) = arn.analogy_context(&g, &bind, q, &refs, None).unwrap();
            g.value(c)
        };
        let ab = ctx_of(&ra, &rb);
        let ba = ctx_of(&rb, &ra);
        let diff: f64 = ab
            .data()
            .iter()
            .zip(ba.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "reference rank order must matter");
    }

    #[test]
    fn dropout_is_seeded_and_off_without_rng() {
        let mut r = rng(26);
        let mut store = ParamStore::new();
        let arn = Arn::new(ArnConfig::desk(16), &mut store, &mut r).unwrap();
        let text = gauss_mat(3, 16, &mut r);
        let qv = gauss_vec(16, &mut r);
        let run = |drop_seed: Option<u64>| {
            let g = Graph::new();
            let bind = store.bind(&g);
            let q = g.constant(qv.clone());
            let refs = vec![ReferenceEmbeddings {
                text: Some(g.constant(text.clone())),
                vis: None,
            }];
            let mut dr = drop_seed.map(|s| seeds::dropout_rng(s, 0, 0));
            let (c, _) = arn
                .analogy_context(&g, &bind, q, &refs, dr.as_mut())
                .unwrap();
            g.value(c)
        };
        assert_eq!(run(Some(7)).data(), run(Some(7)).data());
        assert_eq!(run(None).data(), run(None).data());
        let a = run(Some(7));
        let b = run(Some(8));
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-12, "different dropout seeds should differ");
    }

    #[test]
    fn nac_effective_weights_stay_inside_unit_box() {
        let mut r = rng(27);
        let mut store = ParamStore::new();
        let nac = NacStack::new(&mut store, "n", &[3, 2], &mut r).unwrap();
        // Even with huge raw parameters the effective weight is bounded.
        for v in store.get_mut(nac.layers[0].0).data_mut() {
            *v *= 1e6;
        }
        let g = Graph::new();
        let bind = store.bind(&g);
        let w = g.value(nac.effective_weight(&g, &bind, 0).unwrap());
        for &v in w.data() {
            assert!(v.abs() < 1.0);
        }
    }

    #[test]
    fn nac_saturation_computes_exact_sums_and_differences() {
        let mut r = rng(28);
        let mut store = ParamStore::new();
        let nac = NacStack::new(&mut store, "n", &[2, 2], &mut r).unwrap();
        let big = 40.0; // tanh/sigmoid saturate to 1 within f64 precision
        *store.get_mut(nac.layers[0].0) =
            Tensor::matrix(2, 2, vec![big, big, big, -big]);
        *store.get_mut(nac.layers[0].1) = Tensor::matrix(2, 2, vec![big; 4]);
        let g = Graph::new();
        let bind = store.bind(&g);
        let x = g.constant(Tensor::vector(vec![3.25, 1.5]));
        let y = g.value(nac.apply(&g, &bind, x).unwrap());
        assert!((y.data()[0] - 4.75).abs() < 1e-12, "row of +1s sums");
        assert!((y.data()[1] - 1.75).abs() < 1e-12, "+1,-1 row subtracts");
    }

    #[test]
    fn nac_learns_addition_and_extrapolates() {
        // Train W = tanh(What) * sigmoid(Mhat) on (a, b) -> a + b with
        // a, b in [0, 10]; check in-range MSE and [10, 20] extrapolation.
        let mut in_range = Vec::new();
        let mut extrap = Vec::new();
        for seed in 0..5u64 {
            let mut r = rng(100 + seed);
            let mut store = ParamStore::new();
            let nac = NacStack::new(&mut store, "n", &[2, 1], &mut r).unwrap();
            // beta2 low enough that the second moment tracks the fast-decaying
            // gradient near saturation; the default would crawl.
            let mut opt = AdamW::new(
                OptimizerConfig {
                    lr: 0.1,
                    beta2: 0.99,
                    weight_decay: 0.0,
                    eps: 1e-8,
                    ..OptimizerConfig::default()
                },
                &store,
            );
            let n = 256;
            let xs: Vec<f64> = (0..2 * n).map(|_| r.gen_range(0.0..10.0)).collect();
            let ys: Vec<f64> = xs.chunks(2).map(|p| p[0] + p[1]).collect();
            let x_t = Tensor::matrix(n, 2, xs);
            let y_t = Tensor::vector(ys);
            let mse = |store: &ParamStore, x: &Tensor, y: &Tensor, want_grads: bool| {
                let g = Graph::new();
                let bind = store.bind(&g);
                let w = nac.effective_weight(&g, &bind, 0).unwrap();
                let pred = g.reshape(
                    g.matmul_nt(g.constant(x.clone()), w).unwrap(),
                    &[x.rows()],
                )
                .unwrap();
                let diff = g.sub(pred, g.constant(y.clone())).unwrap();
                let loss = g.mean(g.mul(diff, diff).unwrap()).unwrap();
                let val = g.value(loss).item();
                let grads = if want_grads {
                    g.backward(loss).unwrap();
                    Some(bind.gradients(&g))
                } else {
                    None
                };
                (val, grads)
            };
            for _ in 0..3000 {
                let (_, grads) = mse(&store, &x_t, &y_t, true);
                let mut acc = GradAccumulator::new(&store);
                acc.add(&grads.unwrap());
                opt.step(&mut store, &acc.take()).unwrap();
            }
            let (train_mse, _) = mse(&store, &x_t, &y_t, false);
            in_range.push(train_mse);

            let xs2: Vec<f64> = (0..2 * n).map(|_| r.gen_range(10.0..20.0)).collect();
            let ys2: Vec<f64> = xs2.chunks(2).map(|p| p[0] + p[1]).collect();
            let (far_mse, _) = mse(
                &store,
                &Tensor::matrix(n, 2, xs2),
                &Tensor::vector(ys2),
                false,
            );
            extrap.push(far_mse);
        }
        in_range.sort_by(f64::total_cmp);
        extrap.sort_by(f64::total_cmp);
        assert!(
            in_range[2] < 1e-3,
            "median in-range MSE {} too high",
            in_range[2]
        );
        assert!(
            extrap[2] < 0.5,
            "median extrapolation MSE {} too high",
            extrap[2]
        );
    }

    #[test]
    fn full_stack_gradient_matches_finite_differences() {
        // Tiny shapes; dropout off. Leaves: every parameter plus the query
        // and reference embeddings.
        let cfg = ArnConfig {
            hidden: 4,
            query_dim: 4,
            scorer_hidden: 3,
            nac_depth: 2,
            dropout: 0.0,
        };
        let mut r = rng(31);
        let mut store = ParamStore::new();
        let arn = Arn::new(cfg, &mut store, &mut r).unwrap();
        // Spread parameters out so the check is not dominated by near-zero init.
        for id in store.ids() {
            for v in store.get_mut(id).data_mut() {
                *v = *v * 10.0 + 0.01;
            }
        }
        let n_params = store.len();
        let mut inputs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
        inputs.push(gauss_vec(4, &mut r)); // masked embedding 1
        inputs.push(gauss_vec(4, &mut r)); // masked embedding 2
        inputs.push(gauss_mat(3, 4, &mut r)); // ref text
        inputs.push(gauss_mat(2, 4, &mut r)); // ref regions

        let weights = gauss_vec(4, &mut r);
        let build = |g: &Graph, vars: &[Var]| {
            let bind = Binding::from_vars(vars[..n_params].to_vec());
            let q = arn
                .build_query(g, &bind, &[vars[n_params], vars[n_params + 1]])
                .map_err(|_| TensorError::EmptyInput { op: "query" })?;
            let refs = vec![ReferenceEmbeddings {
                text: Some(vars[n_params + 2]),
                vis: Some(vars[n_params + 3]),
            }];
            let (c, _) = arn
                .analogy_context(g, &bind, q, &refs, None)
                .map_err(|_| TensorError::EmptyInput { op: "context" })?;
            Ok(g.sum(g.mul(c, g.constant(weights.clone()))?))
        };
        let report = finite_diff_check_inputs(&build, &inputs, DEFAULT_H).unwrap();
        assert!(
            report.passes(DEFAULT_TOL),
            "worst rel err {} at input {} component {}",
            report.max_rel_err,
            report.worst_input,
            report.worst_component
        );
    }
}
