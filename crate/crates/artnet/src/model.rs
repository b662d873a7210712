//! Variant-aware assembly of encoder, retrieval-driven reasoning, and the
//! prediction head into per-episode losses.
//!
//! All three variants register the identical parameter set, so checkpoint
//! layouts and counts match exactly; a variant differs only in which paths
//! the forward pass exercises. The two baselines force the analogy context
//! to zero, and the text-only baseline additionally drops visual tokens.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arn::{Arn, ArnConfig, ArnError, ReferenceEmbeddings, RefTrace};
use crate::backbone::{
    tokenize, tokenize_text_only, Backbone, BackboneError, EncoderConfig, MaskedSequence,
    MultimodalToken,
};
use crate::cce::{Cce, CceConfig};
use crate::objectives::{triplet_hinges, LossConfig};
use crate::params::{Binding, ParamError, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::world::Episode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Arn(#[from] ArnError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("episode has no prediction targets")]
    NothingToPredict,
    #[error("negative lists must align with the visual targets: {found} lists for {expected} targets")]
    NegativeCountMismatch { found: usize, expected: usize },
}

/// Which paths of the model are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Full model: multimodal encoder, retrieval, analogical context.
    Artnet,
    /// Multimodal encoder with the analogy context forced to zero.
    MultimodalBaseline,
    /// Words only, analogy context forced to zero, no visual loss.
    TextOnlyBaseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Artnet => "artnet",
            Variant::MultimodalBaseline => "multimodal-baseline",
            Variant::TextOnlyBaseline => "text-only-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "artnet" => Some(Variant::Artnet),
            "multimodal-baseline" => Some(Variant::MultimodalBaseline),
            "text-only-baseline" => Some(Variant::TextOnlyBaseline),
            _ => None,
        }
    }

    pub fn uses_visual(&self) -> bool {
        !matches!(self, Variant::TextOnlyBaseline)
    }

    pub fn uses_analogy(&self) -> bool {
        matches!(self, Variant::Artnet)
    }
}

/// Where analogy-pair element embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    /// Position-free initial embeddings (token table / visual projection).
    Initial,
    /// Encoder outputs of a full pass over each reference.
    Contextual,
}

/// Everything needed to build the model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub arn: ArnConfig,
    pub loss: LossConfig,
    pub tie_embeddings: bool,
    pub pair_source: PairSource,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary and region width.
    pub fn desk(variant: Variant, vocab_size: usize, d_vis: usize) -> Self {
        let encoder = EncoderConfig::desk(vocab_size, d_vis);
        let arn = ArnConfig::desk(encoder.hidden);
        ModelConfig {
            variant,
            encoder,
            arn,
            loss: LossConfig::default(),
            tie_embeddings: false,
            pair_source: PairSource::Initial,
        }
    }
}

/// One masked position's prediction.
pub struct WordPrediction {
    /// Position in the token layout.
    pub position: usize,
    /// Gold token id.
    pub target: usize,
    /// Logits over the full token space.
    pub logits: Var,
}

/// One masked visual token's reconstruction anchor.
pub struct VisualAnchor {
    /// Projected encoder output, `[d_vis]`.
    pub anchor: Var,
    /// The original (pre-masking) region vector.
    pub positive: Vec<f64>,
}

/// Forward-pass outputs for one episode.
pub struct Forward {
    pub words: Vec<WordPrediction>,
    pub anchors: Vec<VisualAnchor>,
    pub traces: Vec<RefTrace>,
}

/// Scalar bookkeeping from one episode's loss graph.
pub struct EpisodeLoss {
    /// Scaled partial loss; summing these over a batch gives the batch loss.
    pub loss: Var,
    pub ce_sum: f64,
    pub ce_terms: usize,
    pub triplet_sum: f64,
    pub triplet_terms: usize,
    pub traces: Vec<RefTrace>,
}

/// The assembled network; owns all parameter ids.
pub struct Model {
    cfg: ModelConfig,
    pub backbone: Backbone,
    pub arn: Arn,
    pub cce: Cce,
    anchor_w: ParamId,
    anchor_b: ParamId,
}

impl Model {
    pub fn new(
        cfg: ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let backbone = Backbone::new(cfg.encoder, store, rng)?;
        let arn = Arn::new(cfg.arn, store, rng)?;
        let cce = Cce::new(
            CceConfig {
                hidden: cfg.encoder.hidden,
                ctx_dim: cfg.arn.hidden,
                vocab_size: cfg.encoder.vocab_size,
                tie_embeddings: cfg.tie_embeddings,
            },
            store,
            rng,
        )?;
        let anchor_w = store.add_gaussian(
            "vis_anchor.w",
            cfg.encoder.d_vis,
            cfg.encoder.hidden,
            crate::backbone::INIT_STD,
            rng,
        )?;
        let anchor_b = store.add_zeros_vec("vis_anchor.b", cfg.encoder.d_vis)?;
        Ok(Model {
            cfg,
            backbone,
            arn,
            cce,
            anchor_w,
            anchor_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Variant-aware token layout for an episode.
    pub fn layout(&self, episode: &Episode) -> Vec<MultimodalToken> {
        if self.cfg.variant.uses_visual() {
            tokenize(episode)
        } else {
            tokenize_text_only(episode)
        }
    }

    /// Pair-element embeddings for one reference episode.
    fn reference_embeddings(
        &self,
        g: &Graph,
        bind: &Binding,
        reference: &Episode,
    ) -> Result<ReferenceEmbeddings, ModelError> {
        match self.cfg.pair_source {
            PairSource::Initial => {
                let text = if reference.tokens.len() >= 2 {
                    Some(self.backbone.embed_word_rows(g, bind, &reference.tokens)?)
                } else {
                    None
                };
                let vis = if reference.num_regions() >= 2 {
                    Some(self.backbone.embed_region_matrix(
                        g,
                        bind,
                        reference.region_matrix(),
                    )?)
                } else {
                    None
                };
                Ok(ReferenceEmbeddings { text, vis })
            }
            PairSource::Contextual => {
                let tokens = tokenize(reference);
                let x = self.backbone.embed(g, bind, &tokens)?;
                let (h, _) = self.backbone.encode(g, bind, x, None)?;
                // Layout: [CLS], whole image, regions, [SEP], words.
                let r = reference.num_regions();
                let words = reference.tokens.len();
                let text = if words >= 2 {
                    Some(g.gather_rows(h, &(3 + r..3 + r + words).collect::<Vec<_>>())?)
                } else {
                    None
                };
                let vis = if r >= 2 {
                    Some(g.gather_rows(h, &(2..2 + r).collect::<Vec<_>>())?)
                } else {
                    None
                };
                Ok(ReferenceEmbeddings { text, vis })
            }
        }
    }

    /// Full forward pass over one masked episode. `references` must be in
    /// retrieval-rank order and non-empty for the analogy variant; the
    /// baselines ignore them. `dropout` enables the training-time masks.
    pub fn forward(
        &self,
        g: &Graph,
        bind: &Binding,
        seq: &MaskedSequence,
        references: &[&Episode],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward, ModelError> {
        if seq.text_targets.is_empty() && seq.visual_targets.is_empty() {
            return Err(ModelError::NothingToPredict);
        }
        let x = self.backbone.embed(g, bind, &seq.tokens)?;
        let (h, _) = self.backbone.encode(g, bind, x, None)?;

        let hidden = self.cfg.encoder.hidden;
        let (context, traces) = if self.cfg.variant.uses_analogy() && !seq.text_targets.is_empty()
        {
            let masked_rows: Vec<Var> = seq
                .text_targets
                .iter()
                .map(|&(pos, _)| g.row(h, pos))
                .collect::<Result<_, _>>()?;
            let q = self.arn.build_query(g, bind, &masked_rows)?;
            let refs: Vec<ReferenceEmbeddings> = references
                .iter()
                .map(|r| self.reference_embeddings(g, bind, r))
                .collect::<Result<_, _>>()?;
            let (c, traces) = self.arn.analogy_context(g, bind, q, &refs, dropout)?;
            (c, traces)
        } else {
            (g.constant(Tensor::zeros(&[hidden])), Vec::new())
        };

        let table = bind.var(self.backbone.token_table());
        let mut words = Vec::with_capacity(seq.text_targets.len());
        for &(pos, target) in &seq.text_targets {
            let m = g.row(h, pos)?;
            let logits = self.cce.forward(g, bind, m, context, table)?;
            words.push(WordPrediction {
                position: pos,
                target,
                logits,
            });
        }

        let mut anchors = Vec::with_capacity(seq.visual_targets.len());
        if self.cfg.variant.uses_visual() {
            for (pos, original) in &seq.visual_targets {
                let proj = g.add(
                    g.matvec(bind.var(self.anchor_w), g.row(h, *pos)?)?,
                    bind.var(self.anchor_b),
                )?;
                anchors.push(VisualAnchor {
                    anchor: proj,
                    positive: original.clone(),
                });
            }
        }
        Ok(Forward {
            words,
            anchors,
            traces,
        })
    }

    /// One episode's contribution to the batch loss:
    /// `sum(word CE) * ce_scale + lambda * sum(per-anchor mean hinge) * triplet_scale`.
    ///
    /// With `ce_scale = 1/total masked words in the batch` and
    /// `triplet_scale = 1/total anchors in the batch`, summing episode losses
    /// reproduces the batch loss exactly, so per-episode graphs stay small.
    /// `negatives[i]` holds the sampled negatives for `seq.visual_targets[i]`
    /// (empty list: that anchor is skipped).
    #[allow(clippy::too_many_arguments)]
    pub fn episode_loss(
        &self,
        g: &Graph,
        bind: &Binding,
        seq: &MaskedSequence,
        references: &[&Episode],
        negatives: &[Vec<Tensor>],
        ce_scale: f64,
        triplet_scale: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<EpisodeLoss, ModelError> {
        let fwd = self.forward(g, bind, seq, references, dropout)?;
        if !fwd.anchors.is_empty() && negatives.len() != fwd.anchors.len() {
            return Err(ModelError::NegativeCountMismatch {
                found: negatives.len(),
                expected: fwd.anchors.len(),
            });
        }

        let mut terms: Vec<Var> = Vec::new();
        let mut ce_sum = 0.0;
        for w in &fwd.words {
            let ce = g.cross_entropy(w.logits, w.target)?;
            ce_sum += g.value(ce).item();
            terms.push(g.scale(ce, ce_scale));
        }

        let mut triplet_sum = 0.0;
        let mut triplet_terms = 0;
        for (a, negs) in fwd.anchors.iter().zip(negatives) {
            if negs.is_empty() {
                continue;
            }
            let hinges = triplet_hinges(
                g,
                a.anchor,
                &Tensor::vector(a.positive.clone()),
                negs,
                self.cfg.loss.margin,
            )?;
            let mean = g.mean(hinges)?;
            triplet_sum += g.value(mean).item();
            triplet_terms += 1;
            terms.push(g.scale(mean, self.cfg.loss.lambda * triplet_scale));
        }

        let loss = match terms.len() {
            0 => return Err(ModelError::NothingToPredict),
            1 => terms[0],
            _ => {
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t)?;
                }
                acc
            }
        };
        Ok(EpisodeLoss {
            loss,
            ce_sum,
            ce_terms: fwd.words.len(),
            triplet_sum,
            triplet_terms,
            traces: fwd.traces,
        })
    }
}
