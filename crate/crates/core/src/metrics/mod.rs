//! Evaluation metrics: identity re-identification, SSIM and Fréchet distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod frechet;
mod ssim;

pub use frechet::{frechet_distance, ActivationStats};
pub use ssim::{ssim, ssim_map, SsimParams};

/// Default cosine-similarity threshold for counting a re-identification.
pub const DEFAULT_REID_THRESHOLD: f64 = 0.4;

/// Identity vector from a face-recognition embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityEmbedding(Vec<f64>);

impl IdentityEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("embedding must be a nonempty finite vector"));
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::invalid("embedding has zero norm"));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> Result<f64> {
        cosine_similarity(self, other)
    }
}

/// a·b / (‖a‖‖b‖), clamped into [-1, 1].
pub fn cosine_similarity(a: &IdentityEmbedding, b: &IdentityEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("embedding has zero norm"));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Fraction of similarities strictly above `threshold`.
pub fn reid_rate_from_similarities(similarities: &[f64], threshold: f64) -> Result<f64> {
    if similarities.is_empty() {
        return Err(Error::invalid(
            "re-identification rate needs at least one pair",
        ));
    }
    let hits = similarities.iter().filter(|s| **s > threshold).count();
    Ok(hits as f64 / similarities.len() as f64)
}

/// Re-ID rate over (original, anonymized) embedding pairs.
pub fn reid_rate(pairs: &[(IdentityEmbedding, IdentityEmbedding)], threshold: f64) -> Result<f64> {
    let sims = pairs
        .iter()
        .map(|(a, b)| cosine_similarity(a, b))
        .collect::<Result<Vec<_>>>()?;
    reid_rate_from_similarities(&sims, threshold)
}
