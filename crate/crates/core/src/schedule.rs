//! Diffusion noise schedule, reverse timestep plan and per-step σ.
//!
//! Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=T` comes from the
//! running product of `1 - β`, and `alpha_bar(0) == 1` marks the clean latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 45;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_ETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    /// β linear in t.
    Linear,
    /// √β linear in t.
    #[default]
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            kind: BetaKind::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.train_steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// The β_t and ᾱ_t tables. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(total_steps: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if total_steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (total_steps - 1) as f64
            }
        };
        let betas = (0..total_steps)
            .map(|i| match kind {
                BetaKind::Linear => lerp(beta_start, beta_end, i),
                BetaKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::InvalidSchedule(format!(
                "beta_{} = {b} outside (0, 1)",
                i + 1
            )));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect::<Vec<f64>>();
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::InvalidSchedule(
                "cumulative alpha product must be positive and strictly decreasing".into(),
            ));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_1 ..= ᾱ_T.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ_t with ᾱ_0 = 1. Panics if `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.total_steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleConfig::default()
            .build()
            .expect("default schedule is valid")
    }
}

/// DDIM standard deviation for the transition `t -> t_prev`:
/// `eta * sqrt((1 - ᾱ_prev) / (1 - ᾱ_t)) * sqrt(1 - ᾱ_t / ᾱ_prev)`.
pub fn sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "previous timestep {t_prev} must precede {t}"
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!(
            "eta must be a nonnegative finite number, got {eta}"
        )));
    }
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t_prev);
    let s = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
    Ok(s.max(0.0))
}

/// Descending subsequence of timesteps with the σ used at each transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    eta: f64,
    sigmas: Vec<f64>,
}

impl TimestepPlan {
    /// Evenly spaced ("leading") plan: `t_i = i * (T / T') + 1`, largest first.
    pub fn new(schedule: &NoiseSchedule, sampling_steps: usize, eta: f64) -> Result<Self> {
        let total = schedule.total_steps();
        if sampling_steps == 0 || sampling_steps > total {
            return Err(Error::invalid(format!(
                "sampling steps must lie in 1..={total}, got {sampling_steps}"
            )));
        }
        let ratio = total / sampling_steps;
        let steps: Vec<usize> = (0..sampling_steps).rev().map(|i| i * ratio + 1).collect();
        Self::from_steps(schedule, steps, eta)
    }

    /// Plan over an explicit strictly decreasing step list.
    pub fn from_steps(schedule: &NoiseSchedule, steps: Vec<usize>, eta: f64) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("timestep plan is empty"));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("timesteps must be strictly decreasing"));
        }
        let sigmas = (0..steps.len())
            .map(|i| {
                sigma(
                    schedule,
                    steps[i],
                    steps.get(i + 1).copied().unwrap_or(0),
                    eta,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { steps, eta, sigmas })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep following step `i`, or 0 after the last one.
    pub fn predecessor(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }

    /// `(t, t_prev, σ)` for every transition, largest `t` first.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.steps.len()).map(|i| (self.steps[i], self.predecessor(i), self.sigmas[i]))
    }

    pub fn first_step(&self) -> usize {
        self.steps[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn linear_four_steps() {
        let s = NoiseSchedule::new(4, 0.1, 0.4, BetaKind::Linear).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((b - e).abs() < TOL);
        }
        for (a, e) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((a - e).abs() < TOL, "{a} vs {e}");
        }
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::new(1, 0.1, 0.1, BetaKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < TOL);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.total_steps(), 1000);
        assert_eq!(s.alpha_bars().len(), 1000);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.betas()[0] - 0.00085).abs() < 1e-15);
        assert!((s.betas()[999] - 0.012).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::new(0, 0.1, 0.2, BetaKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.2, BetaKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.3, 0.2, BetaKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0, BetaKind::ScaledLinear).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.5]).is_err());
    }

    #[test]
    fn uniform_plan_small() {
        let s = NoiseSchedule::new(10, 0.01, 0.2, BetaKind::Linear).unwrap();
        let p = TimestepPlan::new(&s, 5, 0.0).unwrap();
        assert_eq!(p.steps(), &[9, 7, 5, 3, 1]);
        assert!(p.sigmas().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn identity_plan() {
        let s = NoiseSchedule::default();
        let p = TimestepPlan::new(&s, 1000, 0.0).unwrap();
        let expected: Vec<usize> = (1..=1000).rev().collect();
        assert_eq!(p.steps(), expected.as_slice());
    }

    #[test]
    fn default_plan_has_45_nonnegative_sigmas() {
        let s = NoiseSchedule::default();
        let p = TimestepPlan::new(&s, 45, 1.0).unwrap();
        assert_eq!(p.len(), 45);
        assert_eq!(p.first_step(), 969);
        assert!(p.sigmas().iter().all(|s| *s >= 0.0));
        assert_eq!(*p.sigmas().last().unwrap(), 0.0);
    }

    #[test]
    fn plan_rejects_out_of_range() {
        let s = NoiseSchedule::new(10, 0.01, 0.2, BetaKind::Linear).unwrap();
        assert!(TimestepPlan::new(&s, 0, 1.0).is_err());
        assert!(TimestepPlan::new(&s, 11, 1.0).is_err());
        assert!(TimestepPlan::from_steps(&s, vec![3, 5], 1.0).is_err());
    }

    #[test]
    fn sigma_hand_value() {
        // ᾱ_1 = 0.5, ᾱ_2 = 0.25
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let v = sigma(&s, 2, 1, 1.0).unwrap();
        assert!((v - 0.5773503).abs() < 1e-7, "{v}");
        assert_eq!(sigma(&s, 2, 1, 0.0).unwrap(), 0.0);
        assert_eq!(sigma(&s, 2, 0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn sigma_rejects_bad_order() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert!(sigma(&s, 1, 1, 1.0).is_err());
        assert!(sigma(&s, 1, 2, 1.0).is_err());
        assert!(sigma(&s, 2, 1, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(
            t in 1usize..400,
            start in 1e-5f64..0.05,
            span in 0.0f64..0.5,
            scaled in any::<bool>(),
        ) {
            let kind = if scaled { BetaKind::ScaledLinear } else { BetaKind::Linear };
            let s = NoiseSchedule::new(t, start, start + span, kind).unwrap();
            prop_assert_eq!(s.alpha_bars().len(), t);
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            let mut prod = 1.0;
            for (b, a) in s.betas().iter().zip(s.alpha_bars()) {
                prod *= 1.0 - b;
                prop_assert!((prod - a).abs() < 1e-12);
            }
        }

        #[test]
        fn sigma_nonnegative_and_zero_iff(
            t in 2usize..1000,
            prev_frac in 0.0f64..1.0,
            eta in 0.0f64..2.0,
        ) {
            let s = NoiseSchedule::default();
            let t_prev = ((t as f64) * prev_frac) as usize;
            let v = sigma(&s, t, t_prev, eta).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, eta == 0.0 || t_prev == 0);
        }
    }
}
