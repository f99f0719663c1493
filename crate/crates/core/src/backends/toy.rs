//! Deterministic analytic stand-ins for every model contract.
//!
//! * [`ToyCodec`] is the identity, so `decode(encode(x)) == x` exactly.
//! * [`ToyDenoiser`] is the posterior-mean noise predictor for a Gaussian
//!   latent prior `N(μ(c), s² I)`. With `s² = 0` it reduces to
//!   `ε̂ = (z_t − √ᾱ_t μ(c)) / √(1 − ᾱ_t)` and the clean-latent estimate is
//!   `μ(c)` for every `z_t`.
//! * [`ToyScorer`] uses a linear feature map `A`, giving
//!   `L = ‖A(x̃ − x_tgt)‖² / n` and `∇L = (2/n) Aᵀ A (x̃ − x_tgt)`.
//! * [`ToyParser`] paints a parse map from labelled rectangles.
//! * [`ToyEmbedder`] is a fixed random projection of a centered thumbnail.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    AttributeLoss, AttributeScorer, Backend, Conditioning, Denoiser, FaceParser, IdentityEmbedder,
    LatentCodec,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Latent, Shape};
use crate::masking::{ParseMap, NUM_LABELS};
use crate::metrics::IdentityEmbedding;
use crate::schedule::NoiseSchedule;

/// Identity codec, optionally restricted to one declared shape.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyCodec {
    shape: Option<Shape>,
}

impl ToyCodec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_shape(shape: Shape) -> Self {
        Self { shape: Some(shape) }
    }

    fn check(&self, g: &Grid<f64>) -> Result<()> {
        match self.shape {
            Some(s) => g.ensure_shape(s),
            None => Ok(()),
        }
    }
}

impl LatentCodec for ToyCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        self.check(image)?;
        Ok(image.clone())
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        self.check(latent)?;
        Ok(latent.clone())
    }

    fn latent_shape(&self, image: Shape) -> Result<Shape> {
        if let Some(s) = self.shape {
            if s != image {
                return Err(Error::ShapeMismatch {
                    expected: s,
                    found: image,
                });
            }
        }
        Ok(image)
    }
}

/// How the toy denoiser turns conditioning into its prior mean μ(c).
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ConditioningMean {
    /// Every entry equals the mean of `c`.
    #[default]
    BroadcastMean,
    /// μ(c) = c; shapes must match.
    Identity,
    /// Ignore `c` and use a fixed grid.
    Fixed(Latent),
}

impl ConditioningMean {
    pub fn mean_for(&self, cond: &Conditioning, shape: Shape) -> Result<Latent> {
        match self {
            ConditioningMean::BroadcastMean => Ok(Grid::filled(shape, cond.latent.mean())),
            ConditioningMean::Identity => {
                cond.latent.ensure_shape(shape)?;
                Ok(cond.latent.clone())
            }
            ConditioningMean::Fixed(m) => {
                m.ensure_shape(shape)?;
                Ok(m.clone())
            }
        }
    }
}

/// Closed-form noise predictor.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    schedule: Arc<NoiseSchedule>,
    mean: ConditioningMean,
    prior_variance: f64,
}

impl ToyDenoiser {
    /// Point-mass prior: the clean-latent estimate is exactly μ(c).
    pub fn new(schedule: Arc<NoiseSchedule>, mean: ConditioningMean) -> Self {
        Self {
            schedule,
            mean,
            prior_variance: 0.0,
        }
    }

    /// Gaussian prior with per-entry variance `s²`; the estimate then
    /// depends on `z_t`.
    pub fn with_prior_variance(mut self, variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::invalid(format!(
                "prior variance must be >= 0, got {variance}"
            )));
        }
        self.prior_variance = variance;
        Ok(self)
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        if t == 0 {
            return Err(Error::invalid("noise prediction is undefined at t = 0"));
        }
        self.schedule.check_step(t)?;
        let a = self.schedule.alpha_bar(t);
        let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
        let mu = self.mean.mean_for(cond, z_t.shape())?;
        if self.prior_variance == 0.0 {
            return z_t.zip_map(&mu, |z, m| (z - sa * m) / s1a);
        }
        let s2 = self.prior_variance;
        let gain = sa * s2 / (a * s2 + 1.0 - a);
        z_t.zip_map(&mu, |z, m| {
            let clean = m + gain * (z - sa * m);
            (z - sa * clean) / s1a
        })
    }
}

/// Linear feature map `A` of the toy scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Identity,
    /// `A = k I`.
    Scalar(f64),
    /// Dense `rows × dim` matrix, row-major.
    Dense {
        rows: usize,
        dim: usize,
        weights: Vec<f64>,
    },
    /// Per-channel average over `block × block` tiles.
    Pooled {
        block: usize,
    },
}

impl FeatureMap {
    /// Gaussian random matrix scaled by `1/√dim`.
    pub fn random(rows: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let weights = (0..rows * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect::<Vec<f64>>();
        FeatureMap::Dense { rows, dim, weights }
    }

    fn pooled_dims(shape: Shape, block: usize) -> (usize, usize) {
        (shape.height.div_ceil(block), shape.width.div_ceil(block))
    }

    /// A·v.
    pub fn apply(&self, v: &Grid<f64>) -> Result<Vec<f64>> {
        let x = v.as_slice();
        match self {
            FeatureMap::Identity => Ok(x.to_vec()),
            FeatureMap::Scalar(k) => Ok(x.iter().map(|v| k * v).collect()),
            FeatureMap::Dense { rows, dim, weights } => {
                if x.len() != *dim {
                    return Err(Error::invalid(format!(
                        "feature map expects {dim} inputs, got {}",
                        x.len()
                    )));
                }
                Ok((0..*rows)
                    .map(|r| {
                        weights[r * dim..(r + 1) * dim]
                            .iter()
                            .zip(x)
                            .map(|(w, v)| w * v)
                            .sum()
                    })
                    .collect())
            }
            FeatureMap::Pooled { block } => {
                let s = v.shape();
                let (ph, pw) = Self::pooled_dims(s, *block);
                let mut sums = vec![0.0; s.channels * ph * pw];
                let mut counts = vec![0usize; ph * pw];
                for c in 0..s.channels {
                    for y in 0..s.height {
                        for xx in 0..s.width {
                            let cell = (y / block) * pw + xx / block;
                            sums[c * ph * pw + cell] += v.get(c, y, xx);
                            if c == 0 {
                                counts[cell] += 1;
                            }
                        }
                    }
                }
                for c in 0..s.channels {
                    for cell in 0..ph * pw {
                        sums[c * ph * pw + cell] /= counts[cell] as f64;
                    }
                }
                Ok(sums)
            }
        }
    }

    /// Aᵀ·f, shaped like `shape`.
    pub fn transpose_apply(&self, f: &[f64], shape: Shape) -> Result<Grid<f64>> {
        match self {
            FeatureMap::Identity => Grid::new(shape, f.to_vec()),
            FeatureMap::Scalar(k) => Grid::new(shape, f.iter().map(|v| k * v).collect()),
            FeatureMap::Dense { rows, dim, weights } => {
                if f.len() != *rows || shape.len() != *dim {
                    return Err(Error::invalid("feature map transpose dimension mismatch"));
                }
                let mut out = vec![0.0; *dim];
                for (r, fr) in f.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(&weights[r * dim..(r + 1) * dim]) {
                        *o += w * fr;
                    }
                }
                Grid::new(shape, out)
            }
            FeatureMap::Pooled { block } => {
                let (ph, pw) = Self::pooled_dims(shape, *block);
                let cell_len = |cy: usize, cx: usize| {
                    let h = (shape.height - cy * block).min(*block);
                    let w = (shape.width - cx * block).min(*block);
                    (h * w) as f64
                };
                Ok(Grid::from_fn(shape, |c, y, x| {
                    let (cy, cx) = (y / block, x / block);
                    f[c * ph * pw + cy * pw + cx] / cell_len(cy, cx)
                }))
            }
        }
    }
}

/// Quadratic feature-matching scorer through the identity decoder.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    features: FeatureMap,
}

impl ToyScorer {
    pub fn new(features: FeatureMap) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// Loss alone, for callers that only need to evaluate.
    pub fn loss(&self, x: &Image, target: &Image) -> Result<f64> {
        Ok(self.loss_and_grad(x, target)?.loss)
    }
}

impl AttributeScorer for ToyScorer {
    fn loss_and_grad(&self, z_tilde0: &Latent, target: &Image) -> Result<AttributeLoss> {
        target.ensure_shape(z_tilde0.shape())?;
        let fx = self.features.apply(z_tilde0)?;
        let ft = self.features.apply(target)?;
        let n = fx.len() as f64;
        let residual: Vec<f64> = fx.iter().zip(&ft).map(|(a, b)| a - b).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;
        let scaled: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
        let grad = self.features.transpose_apply(&scaled, z_tilde0.shape())?;
        Ok(AttributeLoss { loss, grad })
    }
}

/// Axis-aligned labelled rectangle in layout pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub label: u8,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(label: u8, x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { label, x, y, w, h }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

/// Non-overlapping rectangles on a `height × width` canvas; uncovered
/// pixels are background. Serialized as TOML with `[[rect]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserLayout {
    pub height: usize,
    pub width: usize,
    #[serde(default, rename = "rect")]
    pub rects: Vec<Rect>,
}

const SKIN: u8 = 1;
const L_BROW: u8 = 2;
const R_BROW: u8 = 3;
const L_EYE: u8 = 4;
const R_EYE: u8 = 5;
const L_EAR: u8 = 7;
const R_EAR: u8 = 8;
const NOSE: u8 = 10;
const MOUTH: u8 = 11;
const U_LIP: u8 = 12;
const L_LIP: u8 = 13;
const NECK: u8 = 14;
const CLOTH: u8 = 16;
const HAIR: u8 = 17;

impl ParserLayout {
    pub fn new(height: usize, width: usize, rects: Vec<Rect>) -> Result<Self> {
        let layout = Self {
            height,
            width,
            rects,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Schematic 8×8 face:
    ///
    /// ```text
    /// H  H  H  H  H  H  H  H
    /// H  S  lb S  S  rb S  H
    /// le S  l  S  S  r  S  re
    /// .  S  S  N  N  S  S  .
    /// .  S  S  N  N  S  S  .
    /// .  S  ul M  M  ul S  .
    /// .  S  ll ll ll ll S  .
    /// C  C  nk nk nk nk C  C
    /// ```
    pub fn face_8x8() -> Self {
        let r = Rect::new;
        let rects = vec![
            r(HAIR, 0, 0, 8, 1),
            r(HAIR, 0, 1, 1, 1),
            r(HAIR, 7, 1, 1, 1),
            r(SKIN, 1, 1, 1, 1),
            r(L_BROW, 2, 1, 1, 1),
            r(SKIN, 3, 1, 2, 1),
            r(R_BROW, 5, 1, 1, 1),
            r(SKIN, 6, 1, 1, 1),
            r(L_EAR, 0, 2, 1, 1),
            r(SKIN, 1, 2, 1, 1),
            r(L_EYE, 2, 2, 1, 1),
            r(SKIN, 3, 2, 2, 1),
            r(R_EYE, 5, 2, 1, 1),
            r(SKIN, 6, 2, 1, 1),
            r(R_EAR, 7, 2, 1, 1),
            r(SKIN, 1, 3, 2, 2),
            r(NOSE, 3, 3, 2, 2),
            r(SKIN, 5, 3, 2, 2),
            r(SKIN, 1, 5, 1, 2),
            r(U_LIP, 2, 5, 1, 1),
            r(MOUTH, 3, 5, 2, 1),
            r(U_LIP, 5, 5, 1, 1),
            r(SKIN, 6, 5, 1, 2),
            r(L_LIP, 2, 6, 4, 1),
            r(CLOTH, 0, 7, 2, 1),
            r(NECK, 2, 7, 4, 1),
            r(CLOTH, 6, 7, 2, 1),
        ];
        Self::new(8, 8, rects).expect("built-in layout is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let layout: ParserLayout =
            toml::from_str(text).map_err(|e| Error::InvalidLayout(e.to_string()))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidLayout("canvas must be nonempty".into()));
        }
        for (i, r) in self.rects.iter().enumerate() {
            if r.label as usize >= NUM_LABELS {
                return Err(Error::InvalidLayout(format!(
                    "rect {i}: label {} out of range",
                    r.label
                )));
            }
            if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
                return Err(Error::InvalidLayout(format!(
                    "rect {i} leaves the canvas or is empty"
                )));
            }
            if let Some(j) = self.rects[..i].iter().position(|o| o.overlaps(r)) {
                return Err(Error::InvalidLayout(format!("rects {j} and {i} overlap")));
            }
        }
        Ok(())
    }

    /// Parse map at the layout's own resolution.
    pub fn paint(&self) -> ParseMap {
        let grid = Grid::from_fn(Shape::plane(self.height, self.width), |_, y, x| {
            self.rects
                .iter()
                .find(|r| r.contains(y, x))
                .map_or(0, |r| r.label)
        });
        ParseMap::from_grid(grid).expect("labels validated")
    }

    /// Parse map nearest-resampled to `height × width`.
    pub fn paint_at(&self, height: usize, width: usize) -> ParseMap {
        let base = self.paint();
        let grid = Grid::from_fn(Shape::plane(height, width), |_, y, x| {
            base.get(y * self.height / height, x * self.width / width)
        });
        ParseMap::from_grid(grid).expect("labels validated")
    }
}

/// Parser that ignores image content and returns its layout.
#[derive(Debug, Clone)]
pub struct ToyParser {
    layout: ParserLayout,
}

impl ToyParser {
    pub fn new(layout: ParserLayout) -> Result<Self> {
        layout.validate()?;
        Ok(Self { layout })
    }

    pub fn layout(&self) -> &ParserLayout {
        &self.layout
    }
}

impl FaceParser for ToyParser {
    fn parse(&self, image: &Image) -> Result<ParseMap> {
        let s = image.shape();
        if s.height == 0 || s.width == 0 {
            return Err(Error::invalid("cannot parse an empty image"));
        }
        Ok(self.layout.paint_at(s.height, s.width))
    }
}

const THUMB: usize = 16;

/// Random projection of a mean-centered 16×16 grayscale thumbnail.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    projection: FeatureMap,
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            projection: FeatureMap::random(dim, THUMB * THUMB, seed),
        }
    }

    fn thumbnail(image: &Image) -> Grid<f64> {
        let s = image.shape();
        let mut sums = vec![0.0; THUMB * THUMB];
        let mut counts = vec![0usize; THUMB * THUMB];
        for y in 0..s.height {
            for x in 0..s.width {
                let cell = (y * THUMB / s.height) * THUMB + x * THUMB / s.width;
                sums[cell] +=
                    (0..s.channels).map(|c| image.get(c, y, x)).sum::<f64>() / s.channels as f64;
                counts[cell] += 1;
            }
        }
        // cells not hit by a small image copy their nearest source pixel
        let thumb = Grid::from_fn(Shape::plane(THUMB, THUMB), |_, ty, tx| {
            let cell = ty * THUMB + tx;
            if counts[cell] > 0 {
                sums[cell] / counts[cell] as f64
            } else {
                let (y, x) = (ty * s.height / THUMB, tx * s.width / THUMB);
                (0..s.channels).map(|c| image.get(c, y, x)).sum::<f64>() / s.channels as f64
            }
        });
        let mean = thumb.mean();
        thumb.map(|v| v - mean)
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(32, 0x5eed)
    }
}

impl IdentityEmbedder for ToyEmbedder {
    fn embed(&self, image: &Image) -> Result<IdentityEmbedding> {
        if image.is_empty() {
            return Err(Error::invalid("cannot embed an empty image"));
        }
        IdentityEmbedding::new(self.projection.apply(&Self::thumbnail(image))?)
    }
}

/// Knobs of the assembled toy backend.
#[derive(Debug, Clone)]
pub struct ToyOptions {
    pub prior_variance: f64,
    pub conditioning: ConditioningMean,
    pub features: FeatureMap,
    pub layout: ParserLayout,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            prior_variance: 0.5,
            conditioning: ConditioningMean::BroadcastMean,
            features: FeatureMap::Pooled { block: 8 },
            layout: ParserLayout::face_8x8(),
            embedding_dim: 32,
            embedding_seed: 0x5eed,
        }
    }
}

impl ToyOptions {
    pub(super) fn build(self, schedule: Arc<NoiseSchedule>) -> Backend {
        let denoiser = ToyDenoiser::new(schedule, self.conditioning)
            .with_prior_variance(self.prior_variance.max(0.0))
            .expect("variance clamped to be nonnegative");
        Backend {
            codec: Arc::new(ToyCodec::new()),
            denoiser: Arc::new(denoiser),
            scorer: Arc::new(ToyScorer::new(self.features)),
            parser: Arc::new(ToyParser {
                layout: self.layout,
            }),
            embedder: Arc::new(ToyEmbedder::new(self.embedding_dim, self.embedding_seed)),
        }
    }
}
