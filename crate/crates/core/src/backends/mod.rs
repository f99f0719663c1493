//! Model contracts the sampler depends on.
//!
//! The sampler never touches model code directly. It sees a latent codec
//! (E, D), a noise predictor (ε_θ), an attribute scorer returning the
//! feature-matching loss together with its gradient, a face parser and an
//! identity embedder. [`toy`] implements all of them analytically;
//! [`adapter`] forwards them to an external process over TCP using the
//! framing in [`wire`].

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::Result;
use crate::grid::{Grid, Image, Latent, Shape};
use crate::masking::{FaceMask, ParseMap};
use crate::metrics::IdentityEmbedding;
use crate::schedule::NoiseSchedule;

pub mod adapter;
pub mod conformance;
pub mod toy;
pub mod wire;

/// Whether an implementation may be called from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Concurrency {
    /// Calls must be serialized; batch pipelines run with one worker.
    Serial,
    Concurrent,
}

/// Inpainting conditioning: the encoded masked image plus an optional mask
/// channel at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub latent: Latent,
    pub mask: Option<Grid<f64>>,
}

impl Conditioning {
    pub fn new(latent: Latent) -> Self {
        Self { latent, mask: None }
    }

    /// Attach the editable-region mask, nearest-resampled to the latent plane.
    pub fn with_mask(mut self, mask: &FaceMask) -> Self {
        let s = self.latent.shape();
        let (mh, mw) = (mask.height(), mask.width());
        self.mask = Some(Grid::from_fn(Shape::plane(s.height, s.width), |_, y, x| {
            let my = (y * mh) / s.height.max(1);
            let mx = (x * mw) / s.width.max(1);
            mask.is_editable(my.min(mh - 1), mx.min(mw - 1)) as u8 as f64
        }));
        self
    }
}

/// A latent grid tagged with its diffusion timestep (0 = clean).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub values: Latent,
    pub t: usize,
}

pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<Image>;

    /// Latent shape produced for an image of the given shape.
    fn latent_shape(&self, image: Shape) -> Result<Shape>;

    /// Max-abs tolerance of `decode(encode(x))` against `x`.
    fn reconstruction_tolerance(&self) -> f64 {
        0.0
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

pub trait Denoiser: Send + Sync {
    /// ε_θ(z_t, t, c): predicted noise with the shape of `z_t`.
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

/// Feature-matching loss at a clean-latent estimate and its latent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeLoss {
    pub loss: f64,
    pub grad: Latent,
}

pub trait AttributeScorer: Send + Sync {
    /// MSE between features of `decode(z_tilde0)` and of `target`, with the
    /// gradient taken with respect to `z_tilde0`.
    fn loss_and_grad(&self, z_tilde0: &Latent, target: &Image) -> Result<AttributeLoss>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

pub trait FaceParser: Send + Sync {
    fn parse(&self, image: &Image) -> Result<ParseMap>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

pub trait IdentityEmbedder: Send + Sync {
    /// Identity vector of an (already aligned) face image.
    fn embed(&self, image: &Image) -> Result<IdentityEmbedding>;

    /// Activations whose statistics feed the Fréchet distance.
    fn activations(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.embed(image)?.into_vec())
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

/// The full set of models used by a run.
#[derive(Clone)]
pub struct Backend {
    pub codec: Arc<dyn LatentCodec>,
    pub denoiser: Arc<dyn Denoiser>,
    pub scorer: Arc<dyn AttributeScorer>,
    pub parser: Arc<dyn FaceParser>,
    pub embedder: Arc<dyn IdentityEmbedder>,
}

impl Backend {
    /// The most restrictive declaration among the components.
    pub fn concurrency(&self) -> Concurrency {
        [
            self.codec.concurrency(),
            self.denoiser.concurrency(),
            self.scorer.concurrency(),
            self.parser.concurrency(),
            self.embedder.concurrency(),
        ]
        .into_iter()
        .min()
        .unwrap_or(Concurrency::Serial)
    }

    /// Analytic backend; see [`toy::ToyOptions`].
    pub fn toy(schedule: Arc<NoiseSchedule>, options: toy::ToyOptions) -> Self {
        options.build(schedule)
    }

    /// Remote backend speaking the wire protocol at `addr`.
    pub fn adapter(addr: &str) -> Result<Self> {
        let client = Arc::new(adapter::AdapterClient::connect(addr)?);
        Ok(Self {
            codec: client.clone(),
            denoiser: client.clone(),
            scorer: client.clone(),
            parser: client.clone(),
            embedder: client,
        })
    }
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("concurrency", &self.concurrency())
            .finish_non_exhaustive()
    }
}

/// Denoiser wrapper counting calls.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(z_t, t, cond)
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }
}

/// Scorer wrapper counting calls.
pub struct CountingScorer<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: AttributeScorer> AttributeScorer for CountingScorer<S> {
    fn loss_and_grad(&self, z_tilde0: &Latent, target: &Image) -> Result<AttributeLoss> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.loss_and_grad(z_tilde0, target)
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Arc<T> {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        (**self).predict_noise(z_t, t, cond)
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
}

impl<T: AttributeScorer + ?Sized> AttributeScorer for Arc<T> {
    fn loss_and_grad(&self, z_tilde0: &Latent, target: &Image) -> Result<AttributeLoss> {
        (**self).loss_and_grad(z_tilde0, target)
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
}
