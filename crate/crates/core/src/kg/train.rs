//! SGD training for triple-scoring embeddings.
//!
//! TransE trains with margin ranking against sampled corruptions and keeps
//! entity rows on the unit sphere; DistMult trains with logistic loss over
//! the same corruption scheme. Both are single-threaded and fully
//! deterministic given the seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::score::Scorer;
use super::{KgeModel, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct KgeTrainConfig {
    pub scorer: Scorer,
    pub dimension: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Margin for the TransE ranking loss; ignored by DistMult.
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for KgeTrainConfig {
    fn default() -> Self {
        KgeTrainConfig {
            scorer: Scorer::TranseL2,
            dimension: 32,
            learning_rate: 0.25,
            iterations: 16_000,
            margin: 1.0,
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

impl KgeTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Data(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Data("iterations must be positive".into()));
        }
        if self.dimension == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Data("negatives_per_positive must be positive".into()));
        }
        let transe = matches!(self.scorer, Scorer::TranseL1 | Scorer::TranseL2);
        if transe && !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Data(format!("margin {} must be positive", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct KgeTrainResult {
    pub model: KgeModel,
    /// Mean per-pair loss at every iteration.
    pub loss_history: Vec<f64>,
}

/// One corruption of `(h, r, t)`: head or tail replaced (coin flip) by a
/// random entity, rejecting candidates that are themselves known triples.
fn corrupt(
    rng: &mut ChaCha8Rng,
    graph: &KnowledgeGraph,
    h: usize,
    r: usize,
    t: usize,
) -> Result<(usize, usize)> {
    let n = graph.num_entities();
    for _ in 0..200 {
        let e = rng.gen_range(0..n);
        let (h2, t2) = if rng.gen_bool(0.5) { (e, t) } else { (h, e) };
        if !graph.contains_triple((h2, r, t2)) {
            return Ok((h2, t2));
        }
    }
    // Dense little graphs can make rejection sampling hopeless; fall back to
    // enumerating the valid corruptions.
    let mut valid = Vec::new();
    for e in 0..n {
        if !graph.contains_triple((e, r, t)) {
            valid.push((e, t));
        }
        if !graph.contains_triple((h, r, e)) {
            valid.push((h, e));
        }
    }
    if valid.is_empty() {
        Err(Error::Data(format!(
            "no valid corruption exists for triple ({h}, {r}, {t})"
        )))
    } else {
        Ok(valid[rng.gen_range(0..valid.len())])
    }
}

fn normalize_row(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn train_kge(graph: &KnowledgeGraph, config: &KgeTrainConfig) -> Result<KgeTrainResult> {
    config.validate()?;
    if graph.triples().is_empty() {
        return Err(Error::Data("cannot train on a graph with no triples".into()));
    }
    if graph.num_entities() < 2 {
        return Err(Error::Data(
            "cannot train on a single-entity graph: no corruptions exist".into(),
        ));
    }

    let d = config.dimension;
    let (ne, nr) = (graph.num_entities(), graph.num_relations());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 6.0 / (d as f64).sqrt();
    let mut entities = Tensor::zeros(vec![ne, d]);
    let mut relations = Tensor::zeros(vec![nr, d]);
    let transe = matches!(config.scorer, Scorer::TranseL1 | Scorer::TranseL2);
    for v in entities.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    for v in relations.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    if transe {
        for i in 0..ne {
            normalize_row(row_mut(&mut entities, i, d));
        }
        for i in 0..nr {
            normalize_row(row_mut(&mut relations, i, d));
        }
    }

    // Positives are visited in reshuffled epochs rather than sampled
    // uniformly, so short runs still cover every triple evenly; the step
    // size decays linearly to zero over the run.
    let mut order: Vec<usize> = (0..graph.triples().len()).collect();
    let mut cursor = order.len();
    let mut loss_history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (h, r, t) = graph.triples()[order[cursor]];
        cursor += 1;
        let lr = config.learning_rate * (1.0 - it as f64 / config.iterations as f64);
        let mut iter_loss = 0.0;
        for _ in 0..config.negatives_per_positive {
            let (h2, t2) = corrupt(&mut rng, graph, h, r, t)?;
            iter_loss += match config.scorer {
                Scorer::TranseL1 => {
                    step_transe(&mut entities, &mut relations, d, (h, r, t), (h2, t2), 1, config.margin, lr)
                }
                Scorer::TranseL2 => {
                    step_transe(&mut entities, &mut relations, d, (h, r, t), (h2, t2), 2, config.margin, lr)
                }
                Scorer::DistMult => {
                    step_distmult(&mut entities, &mut relations, d, (h, r, t), (h2, t2), lr)
                }
            };
        }
        loss_history.push(iter_loss / config.negatives_per_positive as f64);
    }

    Ok(KgeTrainResult {
        model: KgeModel { entities, relations, scorer: config.scorer },
        loss_history,
    })
}

fn row_mut(t: &mut Tensor, i: usize, d: usize) -> &mut [f64] {
    &mut t.data_mut()[i * d..(i + 1) * d]
}

fn row(t: &Tensor, i: usize, d: usize) -> &[f64] {
    &t.data()[i * d..(i + 1) * d]
}

/// Hinge step `max(0, margin + ‖h+r−t‖_p − ‖h2+r−t2‖_p)`; touched entity
/// rows are renormalized afterwards so the unit-sphere invariant holds.
#[allow(clippy::too_many_arguments)]
fn step_transe(
    entities: &mut Tensor,
    relations: &mut Tensor,
    d: usize,
    (h, r, t): (usize, usize, usize),
    (h2, t2): (usize, usize),
    p: u8,
    margin: f64,
    lr: f64,
) -> f64 {
    let delta_pos: Vec<f64> = (0..d)
        .map(|i| row(entities, h, d)[i] + row(relations, r, d)[i] - row(entities, t, d)[i])
        .collect();
    let delta_neg: Vec<f64> = (0..d)
        .map(|i| row(entities, h2, d)[i] + row(relations, r, d)[i] - row(entities, t2, d)[i])
        .collect();
    let (dist_pos, dist_neg) = match p {
        1 => (
            delta_pos.iter().map(|v| v.abs()).sum::<f64>(),
            delta_neg.iter().map(|v| v.abs()).sum::<f64>(),
        ),
        _ => (
            delta_pos.iter().map(|v| v * v).sum::<f64>().sqrt(),
            delta_neg.iter().map(|v| v * v).sum::<f64>().sqrt(),
        ),
    };
    let hinge = margin + dist_pos - dist_neg;
    if hinge <= 0.0 {
        return 0.0;
    }

    // Distance gradients w.r.t. their delta vectors.
    let grad = |delta: &[f64], dist: f64| -> Vec<f64> {
        match p {
            1 => delta
                .iter()
                .map(|v| if *v == 0.0 { 0.0 } else { v.signum() })
                .collect(),
            _ if dist > 0.0 => delta.iter().map(|v| v / dist).collect(),
            _ => vec![0.0; delta.len()],
        }
    };
    let gp = grad(&delta_pos, dist_pos);
    let gn = grad(&delta_neg, dist_neg);

    for i in 0..d {
        row_mut(entities, h, d)[i] -= lr * gp[i];
        row_mut(entities, t, d)[i] += lr * gp[i];
        row_mut(entities, h2, d)[i] += lr * gn[i];
        row_mut(entities, t2, d)[i] -= lr * gn[i];
        row_mut(relations, r, d)[i] -= lr * (gp[i] - gn[i]);
    }
    for e in [h, t, h2, t2] {
        normalize_row(row_mut(entities, e, d));
    }
    hinge
}

/// Logistic step: `softplus(−s_pos) + softplus(s_neg)` on the trilinear score.
fn step_distmult(
    entities: &mut Tensor,
    relations: &mut Tensor,
    d: usize,
    (h, r, t): (usize, usize, usize),
    (h2, t2): (usize, usize),
    lr: f64,
) -> f64 {
    let score = |e: &Tensor, rel: &Tensor, a: usize, b: usize| -> f64 {
        (0..d)
            .map(|i| row(e, a, d)[i] * row(rel, r, d)[i] * row(e, b, d)[i])
            .sum()
    };
    let s_pos = score(entities, relations, h, t);
    let s_neg = score(entities, relations, h2, t2);
    let loss = softplus(-s_pos) + softplus(s_neg);

    let g_pos = -sigmoid(-s_pos);
    let g_neg = sigmoid(s_neg);
    let hp = row(entities, h, d).to_vec();
    let tp = row(entities, t, d).to_vec();
    let hn = row(entities, h2, d).to_vec();
    let tn = row(entities, t2, d).to_vec();
    let rv = row(relations, r, d).to_vec();
    for i in 0..d {
        row_mut(entities, h, d)[i] -= lr * g_pos * rv[i] * tp[i];
        row_mut(entities, t, d)[i] -= lr * g_pos * hp[i] * rv[i];
        row_mut(entities, h2, d)[i] -= lr * g_neg * rv[i] * tn[i];
        row_mut(entities, t2, d)[i] -= lr * g_neg * hn[i] * rv[i];
        row_mut(relations, r, d)[i] -= lr * (g_pos * hp[i] * tp[i] + g_neg * hn[i] * tn[i]);
    }
    loss
}
