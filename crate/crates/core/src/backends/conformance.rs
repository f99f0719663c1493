//! Shared checks every contract implementation must pass.
//!
//! The toy backend is held to a 1e-5 relative gradient error. Adapters
//! transporting f32 tensors should use [`ADAPTER_GRAD_TOLERANCE`] together
//! with a larger finite-difference step.

use super::{AttributeScorer, Conditioning, Denoiser, FaceParser, LatentCodec};
use crate::error::{Error, Result};
use crate::grid::{Image, Latent};

pub const TOY_GRAD_TOLERANCE: f64 = 1e-5;
pub const ADAPTER_GRAD_TOLERANCE: f64 = 1e-2;

fn fail(msg: impl Into<String>) -> Error {
    Error::Backend(format!("conformance: {}", msg.into()))
}

/// Central finite differences of a scalar function of a latent.
pub fn finite_difference_gradient(
    f: impl Fn(&Latent) -> Result<f64>,
    at: &Latent,
    step: f64,
) -> Result<Latent> {
    let mut probe = at.clone();
    let mut grad = Latent::zeros(at.shape());
    for i in 0..at.len() {
        let x = at.as_slice()[i];
        probe.as_mut_slice()[i] = x + step;
        let up = f(&probe)?;
        probe.as_mut_slice()[i] = x - step;
        let down = f(&probe)?;
        probe.as_mut_slice()[i] = x;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Latent, b: &Latent) -> Result<f64> {
    let diff = a.axpby(1.0, b, -1.0)?.norm();
    let scale = a.norm().max(b.norm());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

pub fn check_codec(codec: &dyn LatentCodec, sample: &Image) -> Result<()> {
    let z = codec.encode(sample)?;
    z.ensure_shape(codec.latent_shape(sample.shape())?)
        .map_err(|e| fail(format!("encode shape: {e}")))?;
    if !z.all_finite() {
        return Err(fail("encode produced non-finite values"));
    }
    if !codec.encode(sample)?.bit_eq(&z) {
        return Err(fail("encode is not deterministic"));
    }
    let x = codec.decode(&z)?;
    let err = x
        .max_abs_diff(sample)
        .map_err(|e| fail(format!("decode shape: {e}")))?;
    if err > codec.reconstruction_tolerance() {
        return Err(fail(format!(
            "round trip error {err} exceeds declared tolerance {}",
            codec.reconstruction_tolerance()
        )));
    }
    Ok(())
}

pub fn check_denoiser(
    denoiser: &dyn Denoiser,
    z_t: &Latent,
    t: usize,
    cond: &Conditioning,
) -> Result<()> {
    let eps = denoiser.predict_noise(z_t, t, cond)?;
    eps.ensure_shape(z_t.shape())
        .map_err(|e| fail(format!("noise shape: {e}")))?;
    if !eps.all_finite() {
        return Err(fail("noise prediction is not finite"));
    }
    if !denoiser.predict_noise(z_t, t, cond)?.bit_eq(&eps) {
        return Err(fail("noise prediction is not deterministic"));
    }
    Ok(())
}

/// Returns the measured relative gradient error on success.
pub fn check_scorer(
    scorer: &dyn AttributeScorer,
    z: &Latent,
    target: &Image,
    step: f64,
    tolerance: f64,
) -> Result<f64> {
    let r = scorer.loss_and_grad(z, target)?;
    if !(r.loss >= 0.0 && r.loss.is_finite()) {
        return Err(fail(format!(
            "loss {} is not a finite nonnegative number",
            r.loss
        )));
    }
    r.grad
        .ensure_shape(z.shape())
        .map_err(|e| fail(format!("gradient shape: {e}")))?;
    if !r.grad.all_finite() {
        return Err(fail("gradient is not finite"));
    }
    if r.loss == 0.0 && r.grad.norm() != 0.0 {
        return Err(fail("zero loss with nonzero gradient"));
    }
    let again = scorer.loss_and_grad(z, target)?;
    if again.loss.to_bits() != r.loss.to_bits() || !again.grad.bit_eq(&r.grad) {
        return Err(fail("scorer is not deterministic"));
    }
    let fd = finite_difference_gradient(|p| Ok(scorer.loss_and_grad(p, target)?.loss), z, step)?;
    let err = relative_error(&r.grad, &fd)?;
    if err > tolerance {
        return Err(fail(format!(
            "gradient relative error {err:e} exceeds {tolerance:e}"
        )));
    }
    Ok(err)
}

pub fn check_parser(parser: &dyn FaceParser, image: &Image) -> Result<()> {
    let p = parser.parse(image)?;
    let s = image.shape();
    if (p.height(), p.width()) != (s.height, s.width) {
        return Err(fail(format!(
            "parse map is {}x{}, image is {}x{}",
            p.height(),
            p.width(),
            s.height,
            s.width
        )));
    }
    if parser.parse(image)? != p {
        return Err(fail("parser is not deterministic"));
    }
    Ok(())
}
