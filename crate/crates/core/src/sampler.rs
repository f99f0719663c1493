//! Forward noising, DDIM reverse steps and the guided anonymization loop.
//!
//! Random draws come from one seeded stream in a fixed order: first the
//! forward noise for `z_T`, then one fresh noise grid per reverse step
//! (drawn even when σ = 0, so the stream layout does not depend on `eta`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backends::{AttributeScorer, Conditioning, Denoiser, LatentState};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Latent, Shape};
use crate::guidance::{apply_guidance, guidance_term_clipped, GuidanceTerm};
use crate::schedule::{sigma, NoiseSchedule, TimestepPlan};

pub const DEFAULT_LAMBDA: f64 = 0.8;

/// Rounding slack allowed on `1 − ᾱ_prev − σ²` before it counts as negative.
const RADICAND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Guidance strength λ.
    pub lambda: f64,
    pub seed: u64,
    pub guidance_enabled: bool,
    /// Skip guidance on steps with `t` below this value.
    pub guidance_cutoff: Option<usize>,
    /// Optional gradient max-norm clip.
    pub max_grad_norm: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            guidance_enabled: true,
            guidance_cutoff: None,
            max_grad_norm: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Some(m) = self.max_grad_norm {
            if m.is_nan() || m <= 0.0 {
                return Err(Error::invalid(format!(
                    "max gradient norm must be > 0, got {m}"
                )));
            }
        }
        Ok(())
    }

    fn guides(&self, t: usize) -> bool {
        self.guidance_enabled && self.guidance_cutoff.is_none_or(|c| t >= c)
    }
}

/// Standard-normal grid from `rng`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Latent {
    Grid::from_fn(shape, |_, _, _| rng.sample(StandardNormal))
}

/// z_t = √ᾱ_t z_0 + √(1 − ᾱ_t) ε.
pub fn forward_noise(
    z0: &Latent,
    schedule: &NoiseSchedule,
    t: usize,
    epsilon: &Latent,
) -> Result<Latent> {
    schedule.check_step(t)?;
    let a = schedule.alpha_bar(t);
    z0.axpby(a.sqrt(), epsilon, (1.0 - a).sqrt())
}

/// z̃_0 = (z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t.
pub fn estimate_clean(
    z_t: &Latent,
    t: usize,
    eps_hat: &Latent,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if t == 0 {
        return Err(Error::invalid("clean-latent estimate needs t >= 1"));
    }
    schedule.check_step(t)?;
    let a = schedule.alpha_bar(t);
    let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - s1a * e) / sa)
}

/// z_{t_prev} = √ᾱ_prev z̃_0 + √(1 − ᾱ_prev − σ²) ε̂ + σ ε.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    t_prev: usize,
    eps_hat: &Latent,
    z_tilde0: &Latent,
    sigma_t: f64,
    epsilon: &Latent,
) -> Result<Latent> {
    if t_prev > schedule.total_steps() {
        return Err(Error::invalid(format!("timestep {t_prev} beyond schedule")));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma_t}")));
    }
    let a_prev = schedule.alpha_bar(t_prev);
    let radicand = 1.0 - a_prev - sigma_t * sigma_t;
    if radicand < -RADICAND_SLACK {
        return Err(Error::invalid(format!(
            "sigma {sigma_t} too large for transition to t = {t_prev} (radicand {radicand})"
        )));
    }
    let dir = radicand.max(0.0).sqrt();
    let sa = a_prev.sqrt();
    z_tilde0.ensure_shape(eps_hat.shape())?;
    epsilon.ensure_shape(eps_hat.shape())?;
    let out = z_tilde0
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .zip(epsilon.as_slice())
        .map(|((z0, e), n)| sa * z0 + dir * e + sigma_t * n)
        .collect();
    Grid::new(eps_hat.shape(), out)
}

/// What happened at one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub sigma: f64,
    /// Present when the scorer was called at this step.
    pub guidance: Option<GuidanceTerm>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
}

/// The noise predictor and scorer driving one run.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub scorer: &'a dyn AttributeScorer,
}

fn check_plan(plan: &TimestepPlan, schedule: &NoiseSchedule) -> Result<()> {
    for (t, t_prev, s) in plan.transitions() {
        let expected = sigma(schedule, t, t_prev, plan.eta())?;
        if expected.to_bits() != s.to_bits() {
            return Err(Error::invalid(
                "timestep plan was built for a different schedule",
            ));
        }
    }
    Ok(())
}

/// Guided reverse loop from a noisy latent at the plan's first timestep.
#[allow(clippy::too_many_arguments)]
pub fn reverse_loop<R: Rng + ?Sized>(
    start: &Latent,
    cond: &Conditioning,
    target: &Image,
    plan: &TimestepPlan,
    schedule: &NoiseSchedule,
    models: Models<'_>,
    config: &SamplerConfig,
    rng: &mut R,
    mut trace: Option<&mut Trace>,
) -> Result<Latent> {
    config.validate()?;
    check_plan(plan, schedule)?;
    let mut state = LatentState {
        values: start.clone(),
        t: plan.first_step(),
    };
    for (t, t_prev, sigma_t) in plan.transitions() {
        debug_assert_eq!(state.t, t);
        let eps_hat = models.denoiser.predict_noise(&state.values, t, cond)?;
        eps_hat.ensure_shape(state.values.shape())?;
        let z_tilde0 = estimate_clean(&state.values, t, &eps_hat, schedule)?;
        let noise = standard_normal(rng, state.values.shape());
        let mut next = reverse_step(schedule, t_prev, &eps_hat, &z_tilde0, sigma_t, &noise)?;
        let mut term = None;
        if config.guides(t) {
            let m = guidance_term_clipped(
                &z_tilde0,
                target,
                sigma_t,
                config.lambda,
                models.scorer,
                config.max_grad_norm,
            )?;
            next = apply_guidance(&next, &m)?;
            term = Some(m);
        }
        if !next.all_finite() {
            return Err(Error::Backend(format!(
                "latent became non-finite at t = {t}"
            )));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push(StepRecord {
                t,
                t_prev,
                sigma: sigma_t,
                guidance: term,
            });
        }
        state = LatentState {
            values: next,
            t: t_prev,
        };
    }
    Ok(state.values)
}

/// Full anonymization loop on latents: noise `z0` to the plan's first
/// timestep, then run the guided reverse loop down to `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn anonymize_latent<R: Rng + ?Sized>(
    z0: &Latent,
    cond: &Conditioning,
    target: &Image,
    plan: &TimestepPlan,
    schedule: &NoiseSchedule,
    models: Models<'_>,
    config: &SamplerConfig,
    rng: &mut R,
    trace: Option<&mut Trace>,
) -> Result<Latent> {
    let eps = standard_normal(rng, z0.shape());
    let z_start = forward_noise(z0, schedule, plan.first_step(), &eps)?;
    reverse_loop(
        &z_start, cond, target, plan, schedule, models, config, rng, trace,
    )
}

/// Bundles schedule, plan, models and config; seeds its own RNG per run.
pub struct Sampler<'a> {
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a TimestepPlan,
    pub models: Models<'a>,
    pub config: SamplerConfig,
}

impl Sampler<'_> {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed)
    }

    pub fn run(&self, z0: &Latent, cond: &Conditioning, target: &Image) -> Result<Latent> {
        let mut rng = self.rng();
        anonymize_latent(
            z0,
            cond,
            target,
            self.plan,
            self.schedule,
            self.models,
            &self.config,
            &mut rng,
            None,
        )
    }

    pub fn run_traced(
        &self,
        z0: &Latent,
        cond: &Conditioning,
        target: &Image,
    ) -> Result<(Latent, Trace)> {
        let mut rng = self.rng();
        let mut trace = Trace::default();
        let out = anonymize_latent(
            z0,
            cond,
            target,
            self.plan,
            self.schedule,
            self.models,
            &self.config,
            &mut rng,
            Some(&mut trace),
        )?;
        Ok((out, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{ConditioningMean, FeatureMap, ToyDenoiser, ToyScorer};
    use crate::backends::{CountingDenoiser, CountingScorer};
    use crate::schedule::BetaKind;
    use std::sync::Arc;

    fn scalar_schedule() -> NoiseSchedule {
        // ᾱ_1 = 0.5, ᾱ_2 = 0.25
        NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn forward_noise_examples() {
        let s = scalar_schedule();
        let z0 = Grid::scalar(1.0);
        let out = forward_noise(&z0, &s, 2, &Grid::scalar(0.0)).unwrap();
        assert_eq!(out.as_slice()[0], 0.5);
        let out = forward_noise(&z0, &s, 2, &Grid::scalar(0.5)).unwrap();
        assert!((out.as_slice()[0] - 0.9330127).abs() < 1e-7);
        assert!(forward_noise(&z0, &s, 3, &Grid::scalar(0.5)).is_err());
        assert!(forward_noise(&z0, &s, 1, &Grid::zeros(Shape::new(1, 2, 2))).is_err());
    }

    #[test]
    fn estimate_clean_examples() {
        let s = scalar_schedule();
        let out =
            estimate_clean(&Grid::scalar(0.9330127018922193), 2, &Grid::scalar(0.5), &s).unwrap();
        assert!((out.as_slice()[0] - 1.0).abs() < 1e-12);
        let out = estimate_clean(&Grid::scalar(0.3), 2, &Grid::scalar(0.0), &s).unwrap();
        assert!((out.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!(estimate_clean(&Grid::scalar(0.3), 0, &Grid::scalar(0.0), &s).is_err());
    }

    #[test]
    fn reverse_step_examples() {
        let s = scalar_schedule();
        let out = reverse_step(
            &s,
            1,
            &Grid::scalar(0.5),
            &Grid::scalar(1.0),
            0.0,
            &Grid::scalar(0.0),
        )
        .unwrap();
        assert!((out.as_slice()[0] - 1.0606602).abs() < 1e-7);
        let z0 = Grid::scalar(0.37);
        let out = reverse_step(&s, 0, &Grid::scalar(5.0), &z0, 0.0, &Grid::scalar(9.0)).unwrap();
        assert!(out.bit_eq(&z0));
        assert!(reverse_step(&s, 1, &Grid::scalar(0.5), &z0, 0.9, &Grid::scalar(0.0)).is_err());
    }

    #[test]
    fn terminal_consistency_with_perfect_denoiser() {
        let sched = Arc::new(NoiseSchedule::new(200, 1e-4, 0.02, BetaKind::Linear).unwrap());
        let shape = Shape::new(1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conditioning::new(standard_normal(&mut rng, shape));
        let d = ToyDenoiser::new(sched.clone(), ConditioningMean::Identity);
        let scorer = ToyScorer::new(FeatureMap::Identity);
        let target = standard_normal(&mut rng, shape);
        let z0 = standard_normal(&mut rng, shape);
        for steps in [1, 7, 50, 200] {
            let plan = TimestepPlan::new(&sched, steps, 0.0).unwrap();
            let sampler = Sampler {
                schedule: &sched,
                plan: &plan,
                models: Models {
                    denoiser: &d,
                    scorer: &scorer,
                },
                config: SamplerConfig {
                    seed: 3,
                    ..Default::default()
                },
            };
            let out = sampler.run(&z0, &c, &target).unwrap();
            assert!(out.max_abs_diff(&c.latent).unwrap() < 1e-9, "T' = {steps}");
        }
    }

    #[test]
    fn counts_calls_and_is_deterministic() {
        let sched = Arc::new(NoiseSchedule::default());
        let plan = TimestepPlan::new(&sched, 45, 1.0).unwrap();
        let shape = Shape::new(1, 8, 8);
        let d = CountingDenoiser::new(ToyDenoiser::new(
            sched.clone(),
            ConditioningMean::BroadcastMean,
        ));
        let sc = CountingScorer::new(ToyScorer::new(FeatureMap::Identity));
        let c = Conditioning::new(Grid::filled(shape, 0.2));
        let target = Grid::filled(shape, -0.3);
        let z0 = Grid::filled(shape, 0.1);
        let sampler = Sampler {
            schedule: &sched,
            plan: &plan,
            models: Models {
                denoiser: &d,
                scorer: &sc,
            },
            config: SamplerConfig {
                seed: 11,
                ..Default::default()
            },
        };
        let a = sampler.run(&z0, &c, &target).unwrap();
        assert_eq!((d.calls(), sc.calls()), (45, 45));
        let b = sampler.run(&z0, &c, &target).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn cutoff_skips_late_guidance() {
        let sched = Arc::new(NoiseSchedule::default());
        let plan = TimestepPlan::new(&sched, 10, 1.0).unwrap();
        let shape = Shape::new(1, 4, 4);
        let d = ToyDenoiser::new(sched.clone(), ConditioningMean::BroadcastMean);
        let sc = CountingScorer::new(ToyScorer::new(FeatureMap::Identity));
        let sampler = Sampler {
            schedule: &sched,
            plan: &plan,
            models: Models {
                denoiser: &d,
                scorer: &sc,
            },
            config: SamplerConfig {
                guidance_cutoff: Some(500),
                ..Default::default()
            },
        };
        let (_, trace) = sampler
            .run_traced(
                &Grid::zeros(shape),
                &Conditioning::new(Grid::zeros(shape)),
                &Grid::filled(shape, 1.0),
            )
            .unwrap();
        let guided: Vec<usize> = trace
            .steps
            .iter()
            .filter(|s| s.guidance.is_some())
            .map(|s| s.t)
            .collect();
        assert!(guided.iter().all(|t| *t >= 500));
        assert_eq!(sc.calls(), guided.len());
    }

    #[test]
    fn rejects_foreign_plan() {
        let a = NoiseSchedule::default();
        let b = NoiseSchedule::new(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let plan = TimestepPlan::new(&b, 10, 1.0).unwrap();
        let shape = Shape::new(1, 2, 2);
        let d = ToyDenoiser::new(Arc::new(a.clone()), ConditioningMean::BroadcastMean);
        let sc = ToyScorer::new(FeatureMap::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = anonymize_latent(
            &Grid::zeros(shape),
            &Conditioning::new(Grid::zeros(shape)),
            &Grid::zeros(shape),
            &plan,
            &a,
            Models {
                denoiser: &d,
                scorer: &sc,
            },
            &SamplerConfig::default(),
            &mut rng,
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_negative_lambda() {
        let cfg = SamplerConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
