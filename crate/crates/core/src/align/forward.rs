//! Forward construction of the alignment objective on a tape.

use crate::error::{Error, Result};
use crate::kg::{KgeModel, KnowledgeGraph, SynonymMap};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::text::{encode_caption, TextParamIds, Vocabulary, BOS, EOS};

use super::{DecoderParamIds, SceParamIds};

/// Tape handles produced by [`sce_reproject`].
#[derive(Debug, Clone, Copy)]
pub struct SceProjection {
    /// `[k]`, softmax weights over codebook rows.
    pub weights: TensorId,
    /// `[k × d_c]`, row i is `wᵢ·cᵢ`.
    pub reprojected: TensorId,
    /// `[1 × d_c]`, the weighted codebook readout `Σᵢ wᵢcᵢ`.
    pub pooled: TensorId,
}

/// Summarizes a shared-space sequence against the codebook: each codebook
/// row's score is its maximum cosine similarity to any sequence row, the
/// scores softmax into weights, and the readout is the weight-combined
/// codebook. Differentiable end to end; the max uses a first-argmax
/// subgradient.
pub fn sce_reproject(
    tape: &mut Tape,
    sequence: TensorId,
    codebook: TensorId,
) -> Result<SceProjection> {
    let k = tape.value(codebook).rows();
    let sims = tape.cosine_matrix(codebook, sequence)?;
    let maxima = tape.row_max(sims)?;
    let weights = tape.softmax(maxima)?;
    let reprojected = tape.scale_rows(codebook, weights)?;
    let weights_row = tape.reshape(weights, vec![1, k])?;
    let pooled = tape.matmul(weights_row, codebook)?;
    Ok(SceProjection {
        weights,
        reprojected,
        pooled,
    })
}

/// Plain-tensor result of [`sce_reproject_eval`].
#[derive(Debug, Clone)]
pub struct SceReprojection {
    /// `[k]`.
    pub weights: Tensor,
    /// `[k × d_c]`.
    pub reprojected: Tensor,
    /// `[d_c]`.
    pub pooled: Tensor,
}

/// [`sce_reproject`] on plain tensors, outside any training graph.
pub fn sce_reproject_eval(sequence: &Tensor, codebook: &Tensor) -> Result<SceReprojection> {
    let mut tape = Tape::new();
    let seq = tape.constant(sequence.clone())?;
    let c = tape.constant(codebook.clone())?;
    let proj = sce_reproject(&mut tape, seq, c)?;
    let pooled_row = tape.value(proj.pooled);
    Ok(SceReprojection {
        weights: tape.value(proj.weights).clone(),
        reprojected: tape.value(proj.reprojected).clone(),
        pooled: Tensor::vector(pooled_row.data().to_vec()),
    })
}

/// Tape handles for the two contrastive directions and their sum.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveParts {
    /// Text-to-scene direction.
    pub t2s: TensorId,
    /// Scene-to-text direction.
    pub s2t: TensorId,
    /// Their sum.
    pub total: TensorId,
}

/// Symmetric in-batch contrastive loss over pooled vectors. Row i of each
/// matrix is sample i; matching rows are the positive pairs. Each
/// direction is the mean cross-entropy of picking the matching partner
/// among all candidates, with cosine similarities scaled by `1/τ`.
pub fn contrastive_loss(
    tape: &mut Tape,
    bev_pooled: TensorId,
    text_pooled: TensorId,
    temperature: f64,
) -> Result<ContrastiveParts> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Data(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = tape.value(bev_pooled).rows();
    let n_text = tape.value(text_pooled).rows();
    if n != n_text {
        return Err(Error::Shape(format!(
            "contrastive batch sizes differ: {n} scenes vs {n_text} texts"
        )));
    }
    let sims = tape.cosine_matrix(text_pooled, bev_pooled)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    let t2s = tape.cross_entropy_logits(logits, &targets)?;
    let logits_t = tape.transpose(logits)?;
    let s2t = tape.cross_entropy_logits(logits_t, &targets)?;
    let total = tape.add(t2s, s2t)?;
    Ok(ContrastiveParts { t2s, s2t, total })
}

/// Strictly-upper-triangular additive mask: position i may attend to
/// positions 0..=i only.
fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = -1e9;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask shape is consistent")
}

/// Teacher-forced decoder logits for a caption prefix, conditioned on the
/// reprojected scene sequence through cross-attention. Position p's logits
/// depend only on `prefix[0..=p]` and the scene sequence.
pub fn caption_logits(
    tape: &mut Tape,
    decoder: &DecoderParamIds,
    reprojected_bev: TensorId,
    prefix: &[usize],
) -> Result<TensorId> {
    let vocab_size = tape.value(decoder.token_embedding).rows();
    let max_len = tape.value(decoder.position_embedding).rows();
    let d_c = tape.value(decoder.token_embedding).cols();
    if prefix.is_empty() {
        return Err(Error::Data("decoder prefix is empty".into()));
    }
    if prefix[0] != BOS {
        return Err(Error::Data(format!(
            "decoder prefix must start with BOS (id {BOS}), got id {}",
            prefix[0]
        )));
    }
    if let Some(bad) = prefix.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    if prefix.len() > max_len {
        return Err(Error::Data(format!(
            "prefix length {} exceeds decoder maximum {max_len}",
            prefix.len()
        )));
    }
    let len = prefix.len();
    let attn_scale = 1.0 / (d_c as f64).sqrt();

    let tok = tape.gather_rows(decoder.token_embedding, prefix)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(decoder.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let q = tape.matmul(x, decoder.self_query)?;
    let k = tape.matmul(x, decoder.self_key)?;
    let v = tape.matmul(x, decoder.self_value)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, attn_scale)?;
    let mask = tape.constant(causal_mask(len))?;
    let scores = tape.add(scores, mask)?;
    let attn = tape.softmax_rows(scores)?;
    let ctx = tape.matmul(attn, v)?;
    x = tape.add(x, ctx)?;

    let q = tape.matmul(x, decoder.cross_query)?;
    let k = tape.matmul(reprojected_bev, decoder.cross_key)?;
    let v = tape.matmul(reprojected_bev, decoder.cross_value)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, attn_scale)?;
    let attn = tape.softmax_rows(scores)?;
    let ctx = tape.matmul(attn, v)?;
    x = tape.add(x, ctx)?;

    let h = tape.matmul(x, decoder.ff_hidden)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, decoder.ff_output)?;
    x = tape.add(x, h)?;

    tape.matmul(x, decoder.output_projection)
}

/// Builds the decoder input/target pair for a caption's token ids:
/// the input is the tokens shifted right behind BOS, the targets are the
/// tokens followed by EOS.
pub fn caption_targets(token_ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut prefix = Vec::with_capacity(token_ids.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(token_ids);
    let mut targets = Vec::with_capacity(token_ids.len() + 1);
    targets.extend_from_slice(token_ids);
    targets.push(EOS);
    (prefix, targets)
}

/// Next-token cross-entropy of decoder logits against the shifted targets.
pub fn cg_loss(tape: &mut Tape, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
    tape.cross_entropy_logits(logits, targets)
}

/// Combined objective on plain scalars: contrastive plus `λ` times the
/// caption-generation term.
pub fn total_loss(l_sce: f64, l_cg: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Data(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(l_sce + lambda * l_cg)
}

/// One training sample: a BEV sequence and its caption.
#[derive(Debug, Clone, Copy)]
pub struct BatchSample<'a> {
    pub bev: &'a Tensor,
    pub caption: &'a str,
}

/// Tape handles for a batch's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub t2s: TensorId,
    pub s2t: TensorId,
    pub l_sce: TensorId,
    pub l_cg: TensorId,
    pub total: TensorId,
}

/// Builds the full training objective for a batch: both modalities are
/// projected into the shared space and reprojected against the codebook,
/// pooled vectors feed the contrastive loss, and each scene's reprojected
/// sequence conditions the decoder on its caption for the auxiliary term.
#[allow(clippy::too_many_arguments)]
pub fn batch_forward(
    tape: &mut Tape,
    samples: &[BatchSample],
    sce_ids: &SceParamIds,
    text_ids: &TextParamIds,
    vocab: &Vocabulary,
    kg: Option<(&KgeModel, &KnowledgeGraph, &SynonymMap)>,
    temperature: f64,
    lambda: f64,
) -> Result<BatchLosses> {
    if samples.is_empty() {
        return Err(Error::Data("batch is empty".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Data(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let mut bev_rows = Vec::with_capacity(samples.len());
    let mut text_rows = Vec::with_capacity(samples.len());
    let mut cg_terms = Vec::with_capacity(samples.len());
    for sample in samples {
        let bev = tape.constant(sample.bev.clone())?;
        let bev_shared = tape.matmul(bev, sce_ids.bev_projection)?;
        let bev_proj = sce_reproject(tape, bev_shared, sce_ids.shared_embeddings)?;
        bev_rows.push(bev_proj.pooled);

        let encoded = encode_caption(tape, sample.caption, vocab, text_ids, kg)?;
        let text_shared = tape.matmul(encoded.sequence, sce_ids.text_projection)?;
        let text_proj = sce_reproject(tape, text_shared, sce_ids.shared_embeddings)?;
        text_rows.push(text_proj.pooled);

        let (prefix, targets) = caption_targets(&encoded.token_ids);
        let logits = caption_logits(tape, &sce_ids.decoder, bev_proj.reprojected, &prefix)?;
        cg_terms.push(cg_loss(tape, logits, &targets)?);
    }
    let bev_pooled = tape.concat_rows(&bev_rows)?;
    let text_pooled = tape.concat_rows(&text_rows)?;
    let contrast = contrastive_loss(tape, bev_pooled, text_pooled, temperature)?;

    let mut cg_sum = cg_terms[0];
    for term in &cg_terms[1..] {
        cg_sum = tape.add(cg_sum, *term)?;
    }
    let l_cg = tape.scale(cg_sum, 1.0 / samples.len() as f64)?;
    let weighted = tape.scale(l_cg, lambda)?;
    let total = tape.add(contrast.total, weighted)?;
    Ok(BatchLosses {
        t2s: contrast.t2s,
        s2t: contrast.s2t,
        l_sce: contrast.total,
        l_cg,
        total,
    })
}
