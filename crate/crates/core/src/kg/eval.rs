//! Filtered link-prediction ranking.
//!
//! For each test triple both the tail and the head are ranked against all
//! entity substitutions. Substitutions that form some other known-true
//! triple (graph or test set) are excluded, so a model is never punished
//! for preferring a different correct answer.

use serde::{Deserialize, Serialize};

use super::{KgeModel, KnowledgeGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkPredictionReport {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_10: f64,
    pub ranks_evaluated: usize,
}

pub fn evaluate_link_prediction(
    model: &KgeModel,
    graph: &KnowledgeGraph,
    test: &[(usize, usize, usize)],
) -> Result<LinkPredictionReport> {
    if test.is_empty() {
        return Err(Error::Data("link prediction requires a non-empty test set".into()));
    }
    let ne = graph.num_entities();
    let nr = graph.num_relations();
    if model.entities.rows() != ne || model.relations.rows() != nr {
        return Err(Error::Shape(format!(
            "model tables [{}, {}] disagree with graph [{ne}, {nr}]",
            model.entities.rows(),
            model.relations.rows()
        )));
    }
    for &(h, r, t) in test {
        if h >= ne || t >= ne || r >= nr {
            return Err(Error::Data(format!(
                "test triple ({h}, {r}, {t}) references unknown ids"
            )));
        }
    }

    let is_known = |triple: (usize, usize, usize)| {
        graph.contains_triple(triple) || test.contains(&triple)
    };

    let mut reciprocal_sum = 0.0;
    let mut hits1 = 0usize;
    let mut hits10 = 0usize;
    let mut count = 0usize;
    let mut tally = |rank: usize| {
        reciprocal_sum += 1.0 / rank as f64;
        hits1 += usize::from(rank <= 1);
        hits10 += usize::from(rank <= 10);
        count += 1;
    };

    for &(h, r, t) in test {
        let true_score = model.score_ids(h, r, t)?;

        let mut tail_rank = 1;
        for e in 0..ne {
            if e == t || is_known((h, r, e)) {
                continue;
            }
            if model.score_ids(h, r, e)? > true_score {
                tail_rank += 1;
            }
        }
        tally(tail_rank);

        let mut head_rank = 1;
        for e in 0..ne {
            if e == h || is_known((e, r, t)) {
                continue;
            }
            if model.score_ids(e, r, t)? > true_score {
                head_rank += 1;
            }
        }
        tally(head_rank);
    }

    Ok(LinkPredictionReport {
        mrr: reciprocal_sum / count as f64,
        hits_at_1: hits1 as f64 / count as f64,
        hits_at_10: hits10 as f64 / count as f64,
        ranks_evaluated: count,
    })
}
