//! Adaptive attribute-guidance correction.
//!
//! `M_t = λ σ_t ∇_{z̃_0} L_att(D(z̃_0), x_tgt)` is subtracted from the latent
//! produced by the reverse step. Because the weight is proportional to σ_t,
//! the correction shrinks as the plan approaches the clean latent.

use crate::backends::AttributeScorer;
use crate::error::{Error, Result};
use crate::grid::{Image, Latent};

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTerm {
    /// M_t, latent-shaped.
    pub values: Latent,
    /// L_att at the clean-latent estimate.
    pub loss: f64,
    /// w_t = λ σ_t.
    pub weight: f64,
}

impl GuidanceTerm {
    pub fn zero(like: &Latent) -> Self {
        Self {
            values: Latent::zeros(like.shape()),
            loss: 0.0,
            weight: 0.0,
        }
    }
}

/// M_t with no gradient clipping.
pub fn guidance_term(
    z_tilde0: &Latent,
    target: &Image,
    sigma_t: f64,
    lambda: f64,
    scorer: &dyn AttributeScorer,
) -> Result<GuidanceTerm> {
    guidance_term_clipped(z_tilde0, target, sigma_t, lambda, scorer, None)
}

/// M_t, optionally rescaling the gradient to at most `max_grad_norm`.
pub fn guidance_term_clipped(
    z_tilde0: &Latent,
    target: &Image,
    sigma_t: f64,
    lambda: f64,
    scorer: &dyn AttributeScorer,
    max_grad_norm: Option<f64>,
) -> Result<GuidanceTerm> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "guidance weight must be >= 0, got {lambda}"
        )));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma_t}")));
    }
    let r = scorer.loss_and_grad(z_tilde0, target)?;
    r.grad.ensure_shape(z_tilde0.shape())?;
    let mut grad = r.grad;
    if let Some(max) = max_grad_norm {
        let norm = grad.norm();
        if norm > max {
            grad = grad.scale(max / norm);
        }
    }
    let weight = lambda * sigma_t;
    let values = grad.scale(weight);
    if !values.all_finite() {
        return Err(Error::Backend("attribute gradient is not finite".into()));
    }
    Ok(GuidanceTerm {
        values,
        loss: r.loss,
        weight,
    })
}

/// ẑ_{t-1} = z_{t-1} − M_t.
pub fn apply_guidance(z_prev: &Latent, term: &GuidanceTerm) -> Result<Latent> {
    z_prev.ensure_shape(term.values.shape())?;
    if term.weight == 0.0 {
        // keeps the unguided trajectory bitwise intact (no -0.0 artefacts)
        return Ok(z_prev.clone());
    }
    z_prev.axpby(1.0, &term.values, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{FeatureMap, ToyScorer};
    use crate::grid::{Grid, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_grid(seed: u64) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(Shape::new(1, 8, 8), |_, _, _| {
            StandardNormal.sample(&mut rng)
        })
    }

    #[test]
    fn zero_weight_cases() {
        let s = ToyScorer::new(FeatureMap::Identity);
        let (z, tgt) = (random_grid(1), random_grid(2));
        for (sigma, lambda) in [(0.7, 0.0), (0.0, 0.8)] {
            let m = guidance_term(&z, &tgt, sigma, lambda, &s).unwrap();
            assert!(m.values.as_slice().iter().all(|v| *v == 0.0));
            assert!(m.loss > 0.0);
        }
    }

    #[test]
    fn scalar_product() {
        let s = ToyScorer::new(FeatureMap::Scalar(2.0));
        let m = guidance_term(&Grid::scalar(1.0), &Grid::scalar(0.5), 0.5, 0.8, &s).unwrap();
        assert!((m.values.as_slice()[0] - 1.6).abs() < 1e-15);
        assert_eq!(m.loss, 1.0);
        assert!((m.weight - 0.4).abs() < 1e-16);
        let out = apply_guidance(&Grid::scalar(1.0), &m).unwrap();
        assert!((out.as_slice()[0] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_parameters() {
        let s = ToyScorer::new(FeatureMap::Identity);
        let z = random_grid(1);
        assert!(guidance_term(&z, &z, 0.5, -0.1, &s).is_err());
        assert!(guidance_term(&z, &z, -0.5, 0.1, &s).is_err());
    }

    #[test]
    fn zero_term_is_identity() {
        let z = random_grid(3);
        assert!(apply_guidance(&z, &GuidanceTerm::zero(&z))
            .unwrap()
            .bit_eq(&z));
    }

    #[test]
    fn elementwise_against_loop() {
        let s = ToyScorer::new(FeatureMap::random(12, 64, 9));
        let (z, tgt, prev) = (random_grid(4), random_grid(5), random_grid(6));
        let m = guidance_term(&z, &tgt, 0.3, 0.8, &s).unwrap();
        let out = apply_guidance(&prev, &m).unwrap();
        for i in 0..64 {
            assert_eq!(
                out.as_slice()[i],
                prev.as_slice()[i] - m.values.as_slice()[i]
            );
        }
        assert!(apply_guidance(&Grid::zeros(Shape::new(1, 4, 4)), &m).is_err());
    }

    #[test]
    fn linear_in_lambda() {
        let s = ToyScorer::new(FeatureMap::Pooled { block: 3 });
        let (z, tgt) = (random_grid(7), random_grid(8));
        let a = guidance_term(&z, &tgt, 0.37, 0.8, &s).unwrap();
        for k in [2.0, 0.5, 3.0] {
            let b = guidance_term(&z, &tgt, 0.37, 0.8 * k, &s).unwrap();
            for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
                assert!((k * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clipping_bounds_gradient_norm() {
        let s = ToyScorer::new(FeatureMap::Identity);
        let (z, tgt) = (random_grid(9), random_grid(10));
        let m = guidance_term_clipped(&z, &tgt, 1.0, 1.0, &s, Some(1e-3)).unwrap();
        assert!((m.values.norm() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn small_step_descends() {
        let s = ToyScorer::new(FeatureMap::random(16, 64, 11));
        for seed in 0..10 {
            let (z, tgt) = (random_grid(100 + seed), random_grid(200 + seed));
            for (lambda, sigma) in [(0.8, 0.125), (0.1, 1.0), (0.2, 0.3)] {
                let m = guidance_term(&z, &tgt, sigma, lambda, &s).unwrap();
                let moved = apply_guidance(&z, &m).unwrap();
                assert!(s.loss(&moved, &tgt).unwrap() < m.loss);
            }
        }
    }
}
