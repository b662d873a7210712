//! Single-stream multimodal encoder.
//!
//! An episode becomes a token sequence `[CLS] + whole-image + regions +
//! [SEP] + words`; every token embeds as token/projection + modality +
//! position, and a pre-norm transformer stack contextualizes the sequence.
//! The masking policy lives here too: BERT-style random corruption during
//! training, exactly the gold composition at test time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::world::{Episode, Vocab, MASK};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Gaussian init scale for embeddings and projection weights.
pub const INIT_STD: f64 = 0.02;

/// Training-time masking rates.
pub const TEXT_MASK_RATE: f64 = 1.0 / 3.0;
pub const VISUAL_MASK_RATE: f64 = 1.0 / 6.0;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("word id {id} outside vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("position {pos} exceeds max_positions {max}")]
    PositionOverflow { pos: usize, max: usize },
    #[error("test-composition masking: sentence lacks gold {what} token {token}")]
    MissingGold { what: &'static str, token: usize },
}

/// Modality of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
    Special,
}

impl Modality {
    fn row(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
            Modality::Special => 2,
        }
    }
}

/// Token payload: a vocabulary id or a region feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Word(usize),
    Region(Vec<f64>),
}

/// One element of the multimodal sequence. `position` indexes the shared
/// position table: word index for text, region ordinal for visual tokens
/// (whole image = 0), 0 for structural specials.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalToken {
    pub kind: Modality,
    pub payload: Payload,
    pub position: usize,
}

impl MultimodalToken {
    pub fn word(kind: Modality, id: usize, position: usize) -> Self {
        debug_assert!(kind != Modality::Visual);
        MultimodalToken {
            kind,
            payload: Payload::Word(id),
            position,
        }
    }

    pub fn region(features: Vec<f64>, ordinal: usize) -> Self {
        MultimodalToken {
            kind: Modality::Visual,
            payload: Payload::Region(features),
            position: ordinal,
        }
    }
}

/// Masking mode: random training corruption or the fixed test-time
/// composition mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Training,
    /// Masks exactly the two given global token ids (gold verb and noun).
    TestComposition { verb_token: usize, noun_token: usize },
}

/// Sequence after masking plus the reconstruction targets.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    pub tokens: Vec<MultimodalToken>,
    /// (sequence position, original word id), for every selected text slot.
    pub text_targets: Vec<(usize, usize)>,
    /// (sequence position, original feature vector) for zeroed visual slots.
    pub visual_targets: Vec<(usize, Vec<f64>)>,
    pub training_mode: bool,
}

/// Encoder topology. `hidden` must divide evenly by `heads`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_vis: usize,
}

impl EncoderConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk(vocab_size: usize, d_vis: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff_mult: 4,
            vocab_size,
            max_positions: 32,
            d_vis,
        }
    }

    /// Full-size configuration matching the original training setup.
    pub fn full(vocab_size: usize, d_vis: usize) -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 384,
            heads: 4,
            ff_mult: 4,
            vocab_size,
            max_positions: 64,
            d_vis,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden % self.heads != 0 {
            return Err(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Builds the `[CLS] + visual + [SEP] + words` sequence for an episode.
/// The whole-image token is the arithmetic mean of the region vectors.
pub fn tokenize(episode: &Episode) -> Vec<MultimodalToken> {
    let mut out = Vec::with_capacity(3 + episode.regions.len() + episode.tokens.len());
    out.push(MultimodalToken::word(Modality::Special, crate::world::CLS, 0));
    out.push(MultimodalToken::region(episode.mean_region(), 0));
    for (i, r) in episode.regions.iter().enumerate() {
        out.push(MultimodalToken::region(r.clone(), i + 1));
    }
    out.push(MultimodalToken::word(Modality::Special, crate::world::SEP, 0));
    for (i, &t) in episode.tokens.iter().enumerate() {
        out.push(MultimodalToken::word(Modality::Textual, t, i));
    }
    out
}

/// Text-only sequence: `[CLS] + words`, no visual tokens at all.
pub fn tokenize_text_only(episode: &Episode) -> Vec<MultimodalToken> {
    let mut out = Vec::with_capacity(1 + episode.tokens.len());
    out.push(MultimodalToken::word(Modality::Special, crate::world::CLS, 0));
    for (i, &t) in episode.tokens.iter().enumerate() {
        out.push(MultimodalToken::word(Modality::Textual, t, i));
    }
    out
}

/// Applies the masking policy.
///
/// Training: each textual token is selected with p=1/3 and then 80/10/10
/// becomes [MASK] / a random non-special word / stays unchanged; each
/// visual token is zeroed with p=1/6. Test-composition: exactly the gold
/// verb and noun become [MASK]; visual tokens are untouched.
pub fn apply_mask_policy(
    tokens: &[MultimodalToken],
    mode: MaskMode,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedSequence, BackboneError> {
    let mut out = tokens.to_vec();
    let mut text_targets = Vec::new();
    let mut visual_targets = Vec::new();
    match mode {
        MaskMode::Training => {
            let specials = vocab.special_tokens.len();
            let words = vocab.num_tokens() - specials;
            for (pos, tok) in out.iter_mut().enumerate() {
                match (&tok.kind, &mut tok.payload) {
                    (Modality::Textual, Payload::Word(id)) => {
                        if rng.gen_bool(TEXT_MASK_RATE) {
                            text_targets.push((pos, *id));
                            let u: f64 = rng.gen();
                            if u < 0.8 {
                                *id = MASK;
                            } else if u < 0.9 {
                                *id = specials + rng.gen_range(0..words);
                            }
                        }
                    }
                    (Modality::Visual, Payload::Region(feat)) => {
                        if rng.gen_bool(VISUAL_MASK_RATE) {
                            visual_targets.push((pos, feat.clone()));
                            feat.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    _ => {}
                }
            }
        }
        MaskMode::TestComposition {
            verb_token,
            noun_token,
        } => {
            for (what, gold) in [("verb", verb_token), ("noun", noun_token)] {
                let pos = out
                    .iter()
                    .position(|t| {
                        t.kind == Modality::Textual && t.payload == Payload::Word(gold)
                    })
                    .ok_or(BackboneError::MissingGold { what, token: gold })?;
                text_targets.push((pos, gold));
                out[pos].payload = Payload::Word(MASK);
            }
        }
    }
    Ok(MaskedSequence {
        tokens: out,
        text_targets,
        visual_targets,
        training_mode: matches!(mode, MaskMode::Training),
    })
}

struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1: ParamId,
    ff1_b: ParamId,
    ff2: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Encoder parameters registered in a [`ParamStore`] plus the forward pass.
pub struct Backbone {
    pub cfg: EncoderConfig,
    token_table: ParamId,
    pos_table: ParamId,
    modality_table: ParamId,
    vis_w: ParamId,
    vis_b: ParamId,
    layers: Vec<LayerIds>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
}

impl Backbone {
    pub fn new(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ParamError> {
        let h = cfg.hidden;
        let token_table =
            store.add_gaussian("backbone.token_table", cfg.vocab_size, h, INIT_STD, rng)?;
        let pos_table =
            store.add_gaussian("backbone.pos_table", cfg.max_positions, h, INIT_STD, rng)?;
        let modality_table = store.add_gaussian("backbone.modality_table", 3, h, INIT_STD, rng)?;
        let vis_w = store.add_gaussian("backbone.vis_proj.w", h, cfg.d_vis, INIT_STD, rng)?;
        let vis_b = store.add_zeros_vec("backbone.vis_proj.b", h)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("backbone.layer{l}.{s}");
            layers.push(LayerIds {
                wq: store.add_gaussian(&p("attn.wq"), h, h, INIT_STD, rng)?,
                bq: store.add_zeros_vec(&p("attn.bq"), h)?,
                wk: store.add_gaussian(&p("attn.wk"), h, h, INIT_STD, rng)?,
                bk: store.add_zeros_vec(&p("attn.bk"), h)?,
                wv: store.add_gaussian(&p("attn.wv"), h, h, INIT_STD, rng)?,
                bv: store.add_zeros_vec(&p("attn.bv"), h)?,
                wo: store.add_gaussian(&p("attn.wo"), h, h, INIT_STD, rng)?,
                bo: store.add_zeros_vec(&p("attn.bo"), h)?,
                ln1_g: store.add(&p("ln1.gain"), Tensor::vector(vec![1.0; h]))?,
                ln1_b: store.add_zeros_vec(&p("ln1.bias"), h)?,
                ff1: store.add_gaussian(&p("ff.w1"), h, h * cfg.ff_mult, INIT_STD, rng)?,
                ff1_b: store.add_zeros_vec(&p("ff.b1"), h * cfg.ff_mult)?,
                ff2: store.add_gaussian(&p("ff.w2"), h * cfg.ff_mult, h, INIT_STD, rng)?,
                ff2_b: store.add_zeros_vec(&p("ff.b2"), h)?,
                ln2_g: store.add(&p("ln2.gain"), Tensor::vector(vec![1.0; h]))?,
                ln2_b: store.add_zeros_vec(&p("ln2.bias"), h)?,
            });
        }
        let ln_f_g = store.add("backbone.ln_f.gain", Tensor::vector(vec![1.0; h]))?;
        let ln_f_b = store.add_zeros_vec("backbone.ln_f.bias", h)?;
        Ok(Backbone {
            cfg,
            token_table,
            pos_table,
            modality_table,
            vis_w,
            vis_b,
            layers,
            ln_f_g,
            ln_f_b,
        })
    }

    /// Input embedding table, for weight tying and word-pattern lookups.
    pub fn token_table(&self) -> ParamId {
        self.token_table
    }

    /// Token-table rows for a word-id list, `[n, hidden]` — the words'
    /// position-free initial embeddings.
    pub fn embed_word_rows(
        &self,
        g: &Graph,
        bind: &Binding,
        ids: &[usize],
    ) -> Result<Var, BackboneError> {
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(BackboneError::OutOfVocab {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(g.gather_rows(bind.var(self.token_table), ids)?)
    }

    /// Visual projection of a raw region matrix `[n, d_vis]` to `[n, hidden]`.
    pub fn embed_region_matrix(
        &self,
        g: &Graph,
        bind: &Binding,
        regions: Tensor,
    ) -> Result<Var, TensorError> {
        let proj = g.matmul_nt(g.constant(regions), bind.var(self.vis_w))?;
        g.add_row(proj, bind.var(self.vis_b))
    }

    /// Initial embeddings: token/projection + modality + position, [T, hidden].
    pub fn embed(
        &self,
        g: &Graph,
        bind: &Binding,
        tokens: &[MultimodalToken],
    ) -> Result<Var, BackboneError> {
        let mut word_ids = Vec::new();
        let mut word_slots = Vec::new();
        let mut regions: Vec<&[f64]> = Vec::new();
        let mut region_slots = Vec::new();
        let mut positions = Vec::with_capacity(tokens.len());
        let mut modalities = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.position >= self.cfg.max_positions {
                return Err(BackboneError::PositionOverflow {
                    pos: tok.position,
                    max: self.cfg.max_positions,
                });
            }
            positions.push(tok.position);
            modalities.push(tok.kind.row());
            match &tok.payload {
                Payload::Word(id) => {
                    if *id >= self.cfg.vocab_size {
                        return Err(BackboneError::OutOfVocab {
                            id: *id,
                            vocab: self.cfg.vocab_size,
                        });
                    }
                    word_ids.push(*id);
                    word_slots.push(i);
                }
                Payload::Region(feat) => {
                    regions.push(feat);
                    region_slots.push(i);
                }
            }
        }

        let word_emb = if word_ids.is_empty() {
            None
        } else {
            Some(g.gather_rows(bind.var(self.token_table), &word_ids)?)
        };
        let vis_emb = if regions.is_empty() {
            None
        } else {
            let d = self.cfg.d_vis;
            let mut data = Vec::with_capacity(regions.len() * d);
            for r in &regions {
                data.extend_from_slice(r);
            }
            let mat = g.constant(Tensor::matrix(regions.len(), d, data));
            let proj = g.matmul_nt(mat, bind.var(self.vis_w))?;
            Some(g.add_row(proj, bind.var(self.vis_b))?)
        };

        // Re-interleave the two blocks into sequence order.
        let mut rows: Vec<Var> = Vec::with_capacity(tokens.len());
        let mut wi = 0;
        let mut ri = 0;
        for i in 0..tokens.len() {
            if word_slots.get(wi) == Some(&i) {
                rows.push(g.row(word_emb.expect("word block exists"), wi)?);
                wi += 1;
            } else {
                debug_assert_eq!(region_slots[ri], i);
                rows.push(g.row(vis_emb.expect("visual block exists"), ri)?);
                ri += 1;
            }
        }
        let base = g.stack_rows(&rows)?;
        let pos = g.gather_rows(bind.var(self.pos_table), &positions)?;
        let moda = g.gather_rows(bind.var(self.modality_table), &modalities)?;
        Ok(g.add(g.add(base, pos)?, moda)?)
    }

    /// Pre-norm transformer stack. `key_mask[j] = false` removes position j
    /// from every attention softmax (padding). Returns the contextualized
    /// sequence and one attention tensor per (layer, head), rows = queries.
    pub fn encode(
        &self,
        g: &Graph,
        bind: &Binding,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let t = g.dims(x)[0];
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn_maps = Vec::with_capacity(self.cfg.layers * self.cfg.heads);
        let mut h = x;
        for layer in &self.layers {
            let normed = self.affine_ln(g, bind, h, layer.ln1_g, layer.ln1_b, t)?;
            let q = g.add_row(g.matmul(normed, bind.var(layer.wq))?, bind.var(layer.bq))?;
            let k = g.add_row(g.matmul(normed, bind.var(layer.wk))?, bind.var(layer.bk))?;
            let v = g.add_row(g.matmul(normed, bind.var(layer.wv))?, bind.var(layer.bv))?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let qh = g.cols(q, head * dh, dh)?;
                let kh = g.cols(k, head * dh, dh)?;
                let vh = g.cols(v, head * dh, dh)?;
                let scores = g.scale(g.matmul_nt(qh, kh)?, scale);
                let attn = g.softmax_rows(scores, key_mask)?;
                attn_maps.push(attn);
                heads.push(g.matmul(attn, vh)?);
            }
            let ctx = g.concat_cols(&heads)?;
            let attn_out = g.add_row(g.matmul(ctx, bind.var(layer.wo))?, bind.var(layer.bo))?;
            h = g.add(h, attn_out)?;

            let normed2 = self.affine_ln(g, bind, h, layer.ln2_g, layer.ln2_b, t)?;
            let ff = g.add_row(g.matmul(normed2, bind.var(layer.ff1))?, bind.var(layer.ff1_b))?;
            let ff = g.gelu(ff);
            let ff = g.add_row(g.matmul(ff, bind.var(layer.ff2))?, bind.var(layer.ff2_b))?;
            h = g.add(h, ff)?;
        }
        let out = self.affine_ln(g, bind, h, self.ln_f_g, self.ln_f_b, t)?;
        Ok((out, attn_maps))
    }

    fn affine_ln(
        &self,
        g: &Graph,
        bind: &Binding,
        x: Var,
        gain: ParamId,
        bias: ParamId,
        t: usize,
    ) -> Result<Var, TensorError> {
        let normed = g.layer_norm_rows(x, LN_EPS)?;
        let scaled = g.mul(normed, g.repeat_row(bind.var(gain), t)?)?;
        g.add_row(scaled, bind.var(bias))
    }
}
