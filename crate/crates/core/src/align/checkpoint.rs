//! Alignment checkpoints: every parameter tensor in one container plus a
//! JSON manifest carrying dimensions, loss hyperparameters, the
//! vocabulary, and (when graph prompting was on) the graph resources, so
//! a checkpoint embeds new inputs without the original training files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{load_graph, KgeModel, Scorer, SynonymMap};
use crate::tensor::{io, Tensor};
use crate::text::{TextEncoderParams, Vocabulary, RESERVED};

use super::train::{KgpResources, TrainedAlignment};
use super::{
    AlignDims, CaptionDecoderParams, SceParams, SCE_PARAM_NAMES, TEXT_PARAM_NAMES,
};

#[derive(Debug, Serialize, Deserialize)]
struct KgpManifest {
    scorer: Scorer,
    triples: Vec<(String, String, String)>,
    synonyms: SynonymMap,
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignManifest {
    dims: AlignDims,
    d_b: usize,
    vocab_size: usize,
    max_len: usize,
    temperature: f64,
    lambda: f64,
    /// Non-reserved tokens in id order.
    vocab: Vec<String>,
    /// SHA-256 over the newline-joined token list.
    vocab_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kgp: Option<KgpManifest>,
}

fn vocab_tokens(vocab: &Vocabulary) -> Vec<String> {
    (RESERVED.len()..vocab.len())
        .map(|id| vocab.token(id).expect("dense token ids").to_string())
        .collect()
}

fn hash_tokens(tokens: &[String]) -> String {
    hex::encode(Sha256::digest(tokens.join("\n").as_bytes()))
}

/// Writes `<base>.tsr` (all parameter tensors) and `<base>.json` (the
/// manifest).
pub fn save_alignment(base: &Path, trained: &TrainedAlignment) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, tensor) in SCE_PARAM_NAMES.iter().zip(trained.sce.tensors()) {
        tensors.insert((*name).to_string(), tensor.clone());
    }
    let text_tensors = [
        &trained.text.token_embedding,
        &trained.text.kge_projection,
        &trained.text.output_projection,
    ];
    for (name, tensor) in TEXT_PARAM_NAMES.iter().zip(text_tensors) {
        tensors.insert((*name).to_string(), tensor.clone());
    }
    let kgp_manifest = match &trained.kgp {
        Some(kgp) => {
            tensors.insert("kgp.entities".to_string(), kgp.model.entities.clone());
            tensors.insert("kgp.relations".to_string(), kgp.model.relations.clone());
            let triples = kgp
                .graph
                .triples()
                .iter()
                .map(|&(h, r, t)| {
                    (
                        kgp.graph.entity_name(h).to_string(),
                        kgp.graph.relation_name(r).to_string(),
                        kgp.graph.entity_name(t).to_string(),
                    )
                })
                .collect();
            Some(KgpManifest {
                scorer: kgp.model.scorer,
                triples,
                synonyms: kgp.synonyms.clone(),
            })
        }
        None => None,
    };
    let tokens = vocab_tokens(&trained.vocab);
    let manifest = AlignManifest {
        dims: AlignDims {
            k: trained.sce.k(),
            d_c: trained.sce.d_c(),
            d_tok: trained.text.d_tok(),
            d_lang: trained.text.output_projection.cols(),
        },
        d_b: trained.sce.d_b(),
        vocab_size: trained.vocab.len(),
        max_len: trained.sce.decoder.max_len(),
        temperature: trained.sce.temperature,
        lambda: trained.sce.lambda,
        vocab_hash: hash_tokens(&tokens),
        vocab: tokens,
        kgp: kgp_manifest,
    };
    io::write_container(&base.with_extension("tsr"), &tensors)?;
    let manifest_path = base.with_extension("json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

fn take(
    tensors: &mut BTreeMap<String, Tensor>,
    name: &str,
    shape: [usize; 2],
) -> Result<Tensor> {
    let tensor = tensors
        .remove(name)
        .ok_or_else(|| Error::parse(format!("checkpoint missing `{name}` tensor")))?;
    if tensor.shape() != shape {
        return Err(Error::Shape(format!(
            "`{name}` has shape {:?}, manifest implies {shape:?}",
            tensor.shape()
        )));
    }
    Ok(tensor)
}

/// Inverse of [`save_alignment`]; the returned model has an empty log.
pub fn load_alignment(base: &Path) -> Result<TrainedAlignment> {
    let manifest_path = base.with_extension("json");
    let raw = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: AlignManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::parse(format!("alignment manifest: {e}")).with_path(&manifest_path))?;

    if manifest.vocab.len() + RESERVED.len() != manifest.vocab_size {
        return Err(Error::parse(format!(
            "manifest vocab_size {} disagrees with {} stored tokens",
            manifest.vocab_size,
            manifest.vocab.len()
        ))
        .with_path(&manifest_path));
    }
    if hash_tokens(&manifest.vocab) != manifest.vocab_hash {
        return Err(
            Error::parse("vocabulary hash mismatch, checkpoint is corrupt")
                .with_path(&manifest_path),
        );
    }
    let vocab = Vocabulary::from_tokens(&manifest.vocab);
    if vocab.len() != manifest.vocab_size {
        return Err(Error::parse("stored vocabulary contains duplicate tokens")
            .with_path(&manifest_path));
    }

    let mut tensors = io::read_container(&base.with_extension("tsr"))?;
    let AlignDims { k, d_c, d_tok, d_lang } = manifest.dims;
    let v = manifest.vocab_size;
    let sce = SceParams {
        shared_embeddings: take(&mut tensors, "sce.shared_embeddings", [k, d_c])?,
        bev_projection: take(&mut tensors, "sce.bev_projection", [manifest.d_b, d_c])?,
        text_projection: take(&mut tensors, "sce.text_projection", [d_lang, d_c])?,
        temperature: manifest.temperature,
        lambda: manifest.lambda,
        decoder: CaptionDecoderParams {
            token_embedding: take(&mut tensors, "decoder.token_embedding", [v, d_c])?,
            position_embedding: take(
                &mut tensors,
                "decoder.position_embedding",
                [manifest.max_len, d_c],
            )?,
            self_query: take(&mut tensors, "decoder.self_query", [d_c, d_c])?,
            self_key: take(&mut tensors, "decoder.self_key", [d_c, d_c])?,
            self_value: take(&mut tensors, "decoder.self_value", [d_c, d_c])?,
            cross_query: take(&mut tensors, "decoder.cross_query", [d_c, d_c])?,
            cross_key: take(&mut tensors, "decoder.cross_key", [d_c, d_c])?,
            cross_value: take(&mut tensors, "decoder.cross_value", [d_c, d_c])?,
            ff_hidden: take(&mut tensors, "decoder.ff_hidden", [d_c, d_c])?,
            ff_output: take(&mut tensors, "decoder.ff_output", [d_c, d_c])?,
            output_projection: take(&mut tensors, "decoder.output_projection", [d_c, v])?,
        },
    };
    sce.validate()?;

    let kge_projection = tensors
        .remove("text.kge_projection")
        .ok_or_else(|| Error::parse("checkpoint missing `text.kge_projection` tensor"))?;
    let text = TextEncoderParams {
        token_embedding: take(&mut tensors, "text.token_embedding", [v, d_tok])?,
        kge_projection,
        output_projection: take(&mut tensors, "text.output_projection", [d_tok, d_lang])?,
    };

    let kgp = match manifest.kgp {
        Some(kgp_manifest) => {
            let (graph, dropped) = load_graph(&kgp_manifest.triples)?;
            if dropped != 0 {
                return Err(Error::parse("stored graph triples contain duplicates")
                    .with_path(&manifest_path));
            }
            let d_kg = text.kge_projection.rows();
            let entities = take(
                &mut tensors,
                "kgp.entities",
                [graph.num_entities(), d_kg],
            )?;
            let relations = take(
                &mut tensors,
                "kgp.relations",
                [graph.num_relations(), d_kg],
            )?;
            Some(KgpResources {
                model: KgeModel {
                    entities,
                    relations,
                    scorer: kgp_manifest.scorer,
                },
                graph,
                synonyms: kgp_manifest.synonyms,
            })
        }
        None => None,
    };

    Ok(TrainedAlignment {
        sce,
        text,
        vocab,
        kgp,
        log: Vec::new(),
    })
}
