//! Shared cross-modal embedding alignment.
//!
//! Both modalities are summarized against one learnable codebook: a
//! projected feature sequence is scored by its maximum cosine similarity
//! to each codebook row, the scores softmax into weights, and the
//! weighted codebook readout is the sample's shared-space vector. Matched
//! scene/text pairs are pulled together by a symmetric temperature-scaled
//! contrastive loss, while an auxiliary single-block decoder regenerates
//! the caption from the reprojected scene sequence so the codebook stays
//! tied to text semantics.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_alignment, save_alignment};
pub use forward::{
    batch_forward, caption_logits, caption_targets, cg_loss, contrastive_loss, sce_reproject,
    sce_reproject_eval, total_loss, BatchLosses, BatchSample, ContrastiveParts, SceProjection,
    SceReprojection,
};
pub use train::{
    train_align, write_loss_log, AlignTrainConfig, EpochLoss, KgpResources, TrainedAlignment,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::text::glorot;

/// Width configuration for the alignment model. `d_b` and the vocabulary
/// size come from the corpus, everything else from here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignDims {
    /// Codebook rows.
    pub k: usize,
    /// Shared-space width.
    pub d_c: usize,
    /// Token embedding width.
    pub d_tok: usize,
    /// Text sequence width after the encoder's output projection.
    pub d_lang: usize,
}

impl Default for AlignDims {
    fn default() -> Self {
        AlignDims {
            k: 16,
            d_c: 64,
            d_tok: 64,
            d_lang: 64,
        }
    }
}

/// Parameters of the auxiliary caption decoder: one causal self-attention
/// block, one cross-attention block over the reprojected scene sequence,
/// one feed-forward block, all residual, then a projection to vocabulary
/// logits. Attention is single-head.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDecoderParams {
    /// `[|V| × d_c]`, separate from the text encoder's table.
    pub token_embedding: Tensor,
    /// `[max_len × d_c]`, learned positions.
    pub position_embedding: Tensor,
    /// `[d_c × d_c]` each.
    pub self_query: Tensor,
    pub self_key: Tensor,
    pub self_value: Tensor,
    pub cross_query: Tensor,
    pub cross_key: Tensor,
    pub cross_value: Tensor,
    /// `[d_c × d_c]` each, with a ReLU between them.
    pub ff_hidden: Tensor,
    pub ff_output: Tensor,
    /// `[d_c × |V|]`.
    pub output_projection: Tensor,
}

impl CaptionDecoderParams {
    pub fn init(rng: &mut ChaCha8Rng, vocab_size: usize, d_c: usize, max_len: usize) -> Self {
        CaptionDecoderParams {
            token_embedding: glorot(rng, vocab_size, d_c),
            position_embedding: glorot(rng, max_len, d_c),
            self_query: glorot(rng, d_c, d_c),
            self_key: glorot(rng, d_c, d_c),
            self_value: glorot(rng, d_c, d_c),
            cross_query: glorot(rng, d_c, d_c),
            cross_key: glorot(rng, d_c, d_c),
            cross_value: glorot(rng, d_c, d_c),
            ff_hidden: glorot(rng, d_c, d_c),
            ff_output: glorot(rng, d_c, d_c),
            output_projection: glorot(rng, d_c, vocab_size),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }

    pub fn max_len(&self) -> usize {
        self.position_embedding.rows()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<DecoderParamIds> {
        Ok(DecoderParamIds {
            token_embedding: tape.leaf(self.token_embedding.clone(), trainable)?,
            position_embedding: tape.leaf(self.position_embedding.clone(), trainable)?,
            self_query: tape.leaf(self.self_query.clone(), trainable)?,
            self_key: tape.leaf(self.self_key.clone(), trainable)?,
            self_value: tape.leaf(self.self_value.clone(), trainable)?,
            cross_query: tape.leaf(self.cross_query.clone(), trainable)?,
            cross_key: tape.leaf(self.cross_key.clone(), trainable)?,
            cross_value: tape.leaf(self.cross_value.clone(), trainable)?,
            ff_hidden: tape.leaf(self.ff_hidden.clone(), trainable)?,
            ff_output: tape.leaf(self.ff_output.clone(), trainable)?,
            output_projection: tape.leaf(self.output_projection.clone(), trainable)?,
        })
    }
}

/// Tape handles for the decoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoderParamIds {
    pub token_embedding: TensorId,
    pub position_embedding: TensorId,
    pub self_query: TensorId,
    pub self_key: TensorId,
    pub self_value: TensorId,
    pub cross_query: TensorId,
    pub cross_key: TensorId,
    pub cross_value: TensorId,
    pub ff_hidden: TensorId,
    pub ff_output: TensorId,
    pub output_projection: TensorId,
}

/// All alignment-side parameters: the shared codebook, the per-modality
/// projections into the shared space, the loss hyperparameters, and the
/// caption decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SceParams {
    /// `[k × d_c]`.
    pub shared_embeddings: Tensor,
    /// `[d_b × d_c]`.
    pub bev_projection: Tensor,
    /// `[d_lang × d_c]`.
    pub text_projection: Tensor,
    pub temperature: f64,
    pub lambda: f64,
    pub decoder: CaptionDecoderParams,
}

impl SceParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        rng: &mut ChaCha8Rng,
        dims: &AlignDims,
        d_b: usize,
        vocab_size: usize,
        max_len: usize,
        temperature: f64,
        lambda: f64,
    ) -> Result<Self> {
        let params = SceParams {
            shared_embeddings: glorot(rng, dims.k, dims.d_c),
            bev_projection: glorot(rng, d_b, dims.d_c),
            text_projection: glorot(rng, dims.d_lang, dims.d_c),
            temperature,
            lambda,
            decoder: CaptionDecoderParams::init(rng, vocab_size, dims.d_c, max_len),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared_embeddings.rows() == 0 {
            return Err(Error::Data("codebook needs at least one row".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Data(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Data(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.shared_embeddings.rows()
    }

    pub fn d_c(&self) -> usize {
        self.shared_embeddings.cols()
    }

    pub fn d_b(&self) -> usize {
        self.bev_projection.rows()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<SceParamIds> {
        Ok(SceParamIds {
            shared_embeddings: tape.leaf(self.shared_embeddings.clone(), trainable)?,
            bev_projection: tape.leaf(self.bev_projection.clone(), trainable)?,
            text_projection: tape.leaf(self.text_projection.clone(), trainable)?,
            decoder: self.decoder.register(tape, trainable)?,
        })
    }
}

/// Tape handles for [`SceParams`].
#[derive(Debug, Clone, Copy)]
pub struct SceParamIds {
    pub shared_embeddings: TensorId,
    pub bev_projection: TensorId,
    pub text_projection: TensorId,
    pub decoder: DecoderParamIds,
}

/// Canonical parameter-group names, in registration order. Training
/// updates and checkpoints both follow this order.
pub const SCE_PARAM_NAMES: [&str; 14] = [
    "sce.shared_embeddings",
    "sce.bev_projection",
    "sce.text_projection",
    "decoder.token_embedding",
    "decoder.position_embedding",
    "decoder.self_query",
    "decoder.self_key",
    "decoder.self_value",
    "decoder.cross_query",
    "decoder.cross_key",
    "decoder.cross_value",
    "decoder.ff_hidden",
    "decoder.ff_output",
    "decoder.output_projection",
];

pub const TEXT_PARAM_NAMES: [&str; 3] = [
    "text.token_embedding",
    "text.kge_projection",
    "text.output_projection",
];

impl SceParams {
    /// Parameter tensors in [`SCE_PARAM_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.shared_embeddings,
            &self.bev_projection,
            &self.text_projection,
            &self.decoder.token_embedding,
            &self.decoder.position_embedding,
            &self.decoder.self_query,
            &self.decoder.self_key,
            &self.decoder.self_value,
            &self.decoder.cross_query,
            &self.decoder.cross_key,
            &self.decoder.cross_value,
            &self.decoder.ff_hidden,
            &self.decoder.ff_output,
            &self.decoder.output_projection,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.shared_embeddings,
            &mut self.bev_projection,
            &mut self.text_projection,
            &mut self.decoder.token_embedding,
            &mut self.decoder.position_embedding,
            &mut self.decoder.self_query,
            &mut self.decoder.self_key,
            &mut self.decoder.self_value,
            &mut self.decoder.cross_query,
            &mut self.decoder.cross_key,
            &mut self.decoder.cross_value,
            &mut self.decoder.ff_hidden,
            &mut self.decoder.ff_output,
            &mut self.decoder.output_projection,
        ]
    }
}

impl SceParamIds {
    /// Tape ids in [`SCE_PARAM_NAMES`] order.
    pub fn ids(&self) -> Vec<TensorId> {
        vec![
            self.shared_embeddings,
            self.bev_projection,
            self.text_projection,
            self.decoder.token_embedding,
            self.decoder.position_embedding,
            self.decoder.self_query,
            self.decoder.self_key,
            self.decoder.self_value,
            self.decoder.cross_query,
            self.decoder.cross_key,
            self.decoder.cross_value,
            self.decoder.ff_hidden,
            self.decoder.ff_output,
            self.decoder.output_projection,
        ]
    }
}
