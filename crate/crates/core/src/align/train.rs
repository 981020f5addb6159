//! Mini-batch training of the alignment objective.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KgeModel, KnowledgeGraph, SynonymMap};
use crate::scene::PairedCorpus;
use crate::tensor::{Tape, Tensor};
use crate::text::{encode_caption, tokenize, TextEncoderParams, Vocabulary};

use super::forward::{batch_forward, sce_reproject, BatchSample};
use super::{AlignDims, SceParams};

/// Hyperparameters for [`train_align`]. `epochs: 0` skips training and
/// returns the seeded initialization, the untrained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTrainConfig {
    /// Contrastive batch size; at least 2.
    pub batch_size: usize,
    pub epochs: usize,
    /// Peak learning rate; decays to zero by cosine annealing.
    pub learning_rate: f64,
    pub seed: u64,
    pub temperature: f64,
    pub lambda: f64,
    pub dims: AlignDims,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        AlignTrainConfig {
            batch_size: 8,
            epochs: 60,
            learning_rate: 0.5,
            seed: 0,
            temperature: 0.07,
            lambda: 0.15,
            dims: AlignDims::default(),
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Data(
                "batch_size must be at least 2 (a single pair has zero contrastive loss)".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Data(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
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
        if self.dims.k == 0 || self.dims.d_c == 0 || self.dims.d_tok == 0 || self.dims.d_lang == 0
        {
            return Err(Error::Data("all model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Knowledge-graph resources for graph-prompted text encoding: trained
/// entity embeddings, the graph they index into, and the surface-form
/// synonym table.
#[derive(Debug, Clone)]
pub struct KgpResources {
    pub model: KgeModel,
    pub graph: KnowledgeGraph,
    pub synonyms: SynonymMap,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(rename = "L_SCE")]
    pub l_sce: f64,
    #[serde(rename = "L_CG")]
    pub l_cg: f64,
    pub total: f64,
}

/// Writes the per-epoch loss log as JSONL.
pub fn write_loss_log(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let mut out = String::new();
    for entry in log {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Data(format!("loss log serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A trained (or freshly initialized) alignment model with everything
/// needed to embed new scenes and captions.
#[derive(Debug, Clone)]
pub struct TrainedAlignment {
    pub sce: SceParams,
    pub text: TextEncoderParams,
    pub vocab: Vocabulary,
    pub kgp: Option<KgpResources>,
    pub log: Vec<EpochLoss>,
}

impl TrainedAlignment {
    fn kg_tuple(&self) -> Option<(&KgeModel, &KnowledgeGraph, &SynonymMap)> {
        self.kgp
            .as_ref()
            .map(|r| (&r.model, &r.graph, &r.synonyms))
    }

    /// Shared-space vector for a caption, length `d_c`.
    pub fn embed_text(&self, caption: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let sce_ids = self.sce.register(&mut tape, false)?;
        let text_ids = self.text.register(&mut tape, false)?;
        let encoded = encode_caption(&mut tape, caption, &self.vocab, &text_ids, self.kg_tuple())?;
        let shared = tape.matmul(encoded.sequence, sce_ids.text_projection)?;
        let proj = sce_reproject(&mut tape, shared, sce_ids.shared_embeddings)?;
        Ok(tape.value(proj.pooled).data().to_vec())
    }

    /// Shared-space vector for a BEV sequence, length `d_c`.
    pub fn embed_scene(&self, bev: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let sce_ids = self.sce.register(&mut tape, false)?;
        let bev_id = tape.constant(bev.clone())?;
        let shared = tape.matmul(bev_id, sce_ids.bev_projection)?;
        let proj = sce_reproject(&mut tape, shared, sce_ids.shared_embeddings)?;
        Ok(tape.value(proj.pooled).data().to_vec())
    }
}

/// Trains the alignment model on a corpus's train split by plain
/// mini-batch gradient descent with a cosine-annealed learning rate.
/// Batches are drawn in seeded-shuffle order each epoch; the whole run is
/// a pure function of (corpus, kgp, config).
pub fn train_align(
    corpus: &PairedCorpus,
    kgp: Option<&KgpResources>,
    config: &AlignTrainConfig,
) -> Result<TrainedAlignment> {
    config.validate()?;
    corpus.validate()?;
    if corpus.scenes.is_empty() {
        return Err(Error::Data("corpus has no scenes".into()));
    }
    if corpus.split.train.is_empty() {
        return Err(Error::Data("corpus has an empty train split".into()));
    }
    if config.batch_size > corpus.split.train.len() {
        return Err(Error::Data(format!(
            "batch_size {} exceeds train split size {}",
            config.batch_size,
            corpus.split.train.len()
        )));
    }

    let captions: Vec<&str> = corpus.texts.iter().map(|(_, c)| c.as_str()).collect();
    let vocab = Vocabulary::from_texts(&captions);
    let max_prefix_len = captions
        .iter()
        .map(|c| tokenize(c).len() + 1)
        .max()
        .expect("corpus has texts");
    let d_b = corpus.scenes[0].bev_sequence.cols();
    let d_kg = kgp.map(|r| r.model.d_kg()).unwrap_or(1);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut text = TextEncoderParams::init(
        &mut rng,
        vocab.len(),
        config.dims.d_tok,
        d_kg,
        config.dims.d_lang,
    );
    let mut sce = SceParams::init(
        &mut rng,
        &config.dims,
        d_b,
        vocab.len(),
        max_prefix_len,
        config.temperature,
        config.lambda,
    )?;

    let train_pairs: Vec<(&Tensor, &str)> = corpus
        .split
        .train
        .iter()
        .map(|id| {
            let scene = corpus
                .scene_by_id(id)
                .ok_or_else(|| Error::Data(format!("train id {id:?} missing from scenes")))?;
            let caption = corpus
                .caption_by_id(id)
                .ok_or_else(|| Error::Data(format!("train id {id:?} missing from texts")))?;
            Ok((&scene.bev_sequence, caption))
        })
        .collect::<Result<_>>()?;

    let batches_per_epoch = train_pairs
        .chunks(config.batch_size)
        .filter(|c| c.len() >= 2)
        .count();
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let kg = kgp.map(|r| (&r.model, &r.graph, &r.synonyms));

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let lr = config.learning_rate
                * 0.5
                * (1.0 + (PI * step as f64 / total_steps as f64).cos());

            let mut tape = Tape::new();
            let sce_ids = sce.register(&mut tape, true)?;
            let text_ids = text.register(&mut tape, true)?;
            let samples: Vec<BatchSample> = chunk
                .iter()
                .map(|&i| BatchSample {
                    bev: train_pairs[i].0,
                    caption: train_pairs[i].1,
                })
                .collect();
            let losses = batch_forward(
                &mut tape,
                &samples,
                &sce_ids,
                &text_ids,
                &vocab,
                kg,
                config.temperature,
                config.lambda,
            )?;
            let l_sce = tape.value(losses.l_sce).item()?;
            let l_cg = tape.value(losses.l_cg).item()?;
            let total = tape.value(losses.total).item()?;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {total} at epoch {epoch}"
                )));
            }
            tape.backward(losses.total)?;

            let mut all_ids = sce_ids.ids();
            all_ids.push(text_ids.token_embedding);
            all_ids.push(text_ids.kge_projection);
            all_ids.push(text_ids.output_projection);
            let mut tensors = sce.tensors_mut();
            tensors.push(&mut text.token_embedding);
            tensors.push(&mut text.kge_projection);
            tensors.push(&mut text.output_projection);
            for (tensor, id) in tensors.into_iter().zip(all_ids) {
                if let Some(grad) = tape.grad(id) {
                    for (p, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
            }

            sums[0] += l_sce;
            sums[1] += l_cg;
            sums[2] += total;
            step += 1;
            batches += 1;
        }
        log.push(EpochLoss {
            epoch,
            l_sce: sums[0] / batches as f64,
            l_cg: sums[1] / batches as f64,
            total: sums[2] / batches as f64,
        });
    }

    Ok(TrainedAlignment {
        sce,
        text,
        vocab,
        kgp: kgp.cloned(),
        log,
    })
}
