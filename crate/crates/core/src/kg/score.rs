//! Triple scoring functions. Higher scores mean more plausible triples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding scorer family. TransE scores are negated `‖h + r − t‖_p`, so
/// they peak at 0 exactly when the relation is a perfect translation;
/// DistMult is the trilinear form `Σᵢ hᵢ rᵢ tᵢ`, unbounded both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    TranseL1,
    TranseL2,
    DistMult,
}

impl Scorer {
    pub fn score(&self, h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
        match self {
            Scorer::TranseL1 => score_transe(h, r, t, 1),
            Scorer::TranseL2 => score_transe(h, r, t, 2),
            Scorer::DistMult => score_distmult(h, r, t),
        }
    }
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Scorer::TranseL1 => "transe-l1",
            Scorer::TranseL2 => "transe-l2",
            Scorer::DistMult => "dist-mult",
        };
        f.write_str(name)
    }
}

fn check_dims(h: &[f64], r: &[f64], t: &[f64]) -> Result<()> {
    if h.len() == r.len() && r.len() == t.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "triple score: dims {}/{}/{}",
            h.len(),
            r.len(),
            t.len()
        )))
    }
}

/// `−‖h + r − t‖_p` for p in {1, 2}.
pub fn score_transe(h: &[f64], r: &[f64], t: &[f64], p: u8) -> Result<f64> {
    check_dims(h, r, t)?;
    let deltas = h.iter().zip(r).zip(t).map(|((hi, ri), ti)| hi + ri - ti);
    let norm = match p {
        1 => deltas.map(f64::abs).sum::<f64>(),
        2 => deltas.map(|d| d * d).sum::<f64>().sqrt(),
        _ => return Err(Error::Data(format!("transe norm order {p}, expected 1 or 2"))),
    };
    Ok(-norm)
}

/// Trilinear `Σᵢ hᵢ rᵢ tᵢ`; symmetric in h and t.
pub fn score_distmult(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    check_dims(h, r, t)?;
    Ok(h.iter().zip(r).zip(t).map(|((hi, ri), ti)| hi * ri * ti).sum())
}
