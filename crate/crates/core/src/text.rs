//! Caption tokenization, entity linking, and the knowledge-fused text
//! encoder.
//!
//! Keywords found in a caption are linked to graph entities; each linked
//! entity's embedding is projected to token width and spliced into the
//! token-embedding sequence right after the phrase it annotates. A linear
//! projection plus mean pooling then produces the language embedding. The
//! encoder is deliberately interchangeable: anything that yields a pooled
//! vector per caption can replace it.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{KgeModel, KnowledgeGraph, SynonymMap};
use crate::tensor::{Tape, Tensor, TensorId};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token table with fixed reserved ids and first-appearance ordering for
/// the rest.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Build from raw tokens; duplicates and reserved names are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::reserved_only();
        for t in tokens {
            v.intern(t.as_ref());
        }
        v
    }

    /// Build from whole texts by tokenizing each.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut v = Self::reserved_only();
        for text in texts {
            for t in tokenize(text.as_ref()) {
                v.intern(&t);
            }
        }
        v
    }

    fn intern(&mut self, token: &str) {
        if token.is_empty() || self.ids.contains_key(token) {
            return;
        }
        self.ids.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token id, falling back to `UNK` for unknown tokens.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenize and map to ids (no BOS/EOS framing).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One non-reserved token per line; the id is the line index plus the
    /// reserved count.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let body: String = self.tokens[RESERVED.len()..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect();
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self::reserved_only();
        for (idx, raw) in text.lines().enumerate() {
            let token = raw.trim_end_matches('\r');
            if token.is_empty() {
                return Err(Error::parse_at("empty vocabulary line", path, Some(idx + 1)));
            }
            if v.ids.contains_key(token) {
                return Err(Error::parse_at(
                    format!("duplicate vocabulary token `{token}`"),
                    path,
                    Some(idx + 1),
                ));
            }
            v.intern(token);
        }
        Ok(v)
    }
}

/// Lowercased word/punctuation split: alphanumeric runs become tokens,
/// every other non-whitespace character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// A caption phrase linked to a graph entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMatch {
    /// Index of the LAST token of the matched phrase; the fused embedding
    /// is inserted immediately after this position.
    pub token_position: usize,
    pub entity_name: String,
    pub kge_vector: Vec<f64>,
}

/// Longest n-gram considered when linking phrases to entities.
pub const MAX_NGRAM: usize = 3;

/// Greedy longest-match linking of token n-grams (n ≤ 3, joined by single
/// spaces) against synonym-normalized entity names, left to right. Matched
/// tokens are consumed, so overlaps resolve to the earlier, longer phrase.
pub fn link_entities(
    tokens: &[String],
    synonyms: &SynonymMap,
    model: &KgeModel,
    graph: &KnowledgeGraph,
) -> Vec<EntityMatch> {
    let mut matches = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut advanced = false;
        for n in (1..=MAX_NGRAM.min(tokens.len() - pos)).rev() {
            let phrase = tokens[pos..pos + n].join(" ");
            let canonical = synonyms.normalize(&phrase);
            if let Some(id) = graph.entity_id(canonical) {
                matches.push(EntityMatch {
                    token_position: pos + n - 1,
                    entity_name: canonical.to_string(),
                    kge_vector: model.entity_vec(id).to_vec(),
                });
                pos += n;
                advanced = true;
                break;
            }
        }
        if !advanced {
            pos += 1;
        }
    }
    matches
}

/// Trainable parameters of the text branch.
#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    /// `[|V| × d_tok]`.
    pub token_embedding: Tensor,
    /// `[d_kg × d_tok]`, adapts entity embeddings to token width.
    pub kge_projection: Tensor,
    /// `[d_tok × d_lang]`.
    pub output_projection: Tensor,
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(vec![rows, cols]);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

impl TextEncoderParams {
    pub fn init(
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        d_tok: usize,
        d_kg: usize,
        d_lang: usize,
    ) -> Self {
        TextEncoderParams {
            token_embedding: glorot(rng, vocab_size, d_tok),
            kge_projection: glorot(rng, d_kg, d_tok),
            output_projection: glorot(rng, d_tok, d_lang),
        }
    }

    pub fn d_tok(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<TextParamIds> {
        Ok(TextParamIds {
            token_embedding: tape.leaf(self.token_embedding.clone(), trainable)?,
            kge_projection: tape.leaf(self.kge_projection.clone(), trainable)?,
            output_projection: tape.leaf(self.output_projection.clone(), trainable)?,
        })
    }
}

/// Tape handles for the text-branch parameters.
#[derive(Debug, Clone, Copy)]
pub struct TextParamIds {
    pub token_embedding: TensorId,
    pub kge_projection: TensorId,
    pub output_projection: TensorId,
}

/// Token-embedding rows for a caption's token ids.
pub fn embed_tokens(tape: &mut Tape, token_embedding: TensorId, ids: &[usize]) -> Result<TensorId> {
    if ids.is_empty() {
        return Err(Error::Data("cannot embed an empty token sequence".into()));
    }
    tape.gather_rows(token_embedding, ids)
}

/// Splice projected entity embeddings into a token-embedding sequence.
///
/// Each match contributes one row, inserted right after its phrase; with no
/// matches the input sequence is returned untouched.
pub fn fuse_kgp(
    tape: &mut Tape,
    token_embeds: TensorId,
    matches: &[EntityMatch],
    kge_projection: TensorId,
) -> Result<TensorId> {
    if matches.is_empty() {
        return Ok(token_embeds);
    }
    let rows = tape.value(token_embeds).rows();
    let d_kg = tape.value(kge_projection).rows();
    let mut segments = Vec::with_capacity(2 * matches.len() + 1);
    let mut cursor = 0;
    let mut prev: Option<usize> = None;
    for m in matches {
        if m.token_position >= rows {
            return Err(Error::Data(format!(
                "entity match at position {} outside a {rows}-token sequence",
                m.token_position
            )));
        }
        if prev.is_some_and(|p| m.token_position <= p) {
            return Err(Error::Data(
                "entity match positions must be strictly increasing".into(),
            ));
        }
        prev = Some(m.token_position);
        if m.kge_vector.len() != d_kg {
            return Err(Error::Shape(format!(
                "entity vector width {} vs projection input {d_kg}",
                m.kge_vector.len()
            )));
        }
        let end = m.token_position + 1;
        segments.push(tape.slice_rows(token_embeds, cursor, end - cursor)?);
        let kge = tape.constant(Tensor::matrix(1, d_kg, m.kge_vector.clone())?)?;
        segments.push(tape.matmul(kge, kge_projection)?);
        cursor = end;
    }
    if cursor < rows {
        segments.push(tape.slice_rows(token_embeds, cursor, rows - cursor)?);
    }
    tape.concat_rows(&segments)
}

/// Per-position projection into language width plus mean pooling.
pub fn encode_text(
    tape: &mut Tape,
    fused: TensorId,
    output_projection: TensorId,
) -> Result<(TensorId, TensorId)> {
    let sequence = tape.matmul(fused, output_projection)?;
    let pooled = tape.mean_rows(sequence)?;
    Ok((sequence, pooled))
}

/// A caption encoded on a tape.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub sequence: TensorId,
    pub pooled: TensorId,
    pub token_ids: Vec<usize>,
    pub matches: Vec<EntityMatch>,
}

/// Full text branch: tokenize, link entities (when a graph is supplied),
/// fuse, project, pool.
pub fn encode_caption(
    tape: &mut Tape,
    caption: &str,
    vocab: &Vocabulary,
    params: &TextParamIds,
    kg: Option<(&KgeModel, &KnowledgeGraph, &SynonymMap)>,
) -> Result<EncodedText> {
    let tokens = tokenize(caption);
    if tokens.is_empty() {
        return Err(Error::Data("caption has no tokens".into()));
    }
    let token_ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let matches = match kg {
        Some((model, graph, synonyms)) => link_entities(&tokens, synonyms, model, graph),
        None => Vec::new(),
    };
    let embeds = embed_tokens(tape, params.token_embedding, &token_ids)?;
    let fused = fuse_kgp(tape, embeds, &matches, params.kge_projection)?;
    let (sequence, pooled) = encode_text(tape, fused, params.output_projection)?;
    Ok(EncodedText { sequence, pooled, token_ids, matches })
}
