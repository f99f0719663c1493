//! Acceptance suite. Runs every criterion on the toy backend and prints one
//! PASS/FAIL line each; exits nonzero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use faceanon::backends::conformance::{check_scorer, TOY_GRAD_TOLERANCE};
use faceanon::backends::toy::{
    ConditioningMean, FeatureMap, ParserLayout, ToyDenoiser, ToyOptions, ToyScorer,
};
use faceanon::backends::{Backend, Conditioning, CountingDenoiser, CountingScorer, Denoiser};
use faceanon::masking::{
    apply_mask, composite, full_face_mask, localized_mask, LabelMap, RegionSet,
};
use faceanon::metrics::{
    frechet_distance, reid_rate_from_similarities, ssim, ActivationStats, SsimParams,
};
use faceanon::pipeline::{cmd_anonymize, io, Anonymizer, RunConfig};
use faceanon::sampler::{
    anonymize_latent, estimate_clean, forward_noise, reverse_step, standard_normal, Models,
    Sampler, SamplerConfig, Trace,
};
use faceanon::schedule::{BetaKind, NoiseSchedule, TimestepPlan};
use faceanon::{Grid, Latent, Result, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_grid(shape: Shape, seed: u64) -> Latent {
    standard_normal(&mut rng(seed), shape)
}

fn uniform_grid(shape: Shape, seed: u64) -> Latent {
    let mut r = rng(seed);
    Grid::from_fn(shape, |_, _, _| r.random_range(-1.0..1.0))
}

fn random_pixels(shape: Shape, seed: u64) -> Grid<u8> {
    let mut r = rng(seed);
    Grid::from_fn(shape, |_, _, _| r.random())
}

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::default()
}

/// Returns the exact noise that produced `z_t` from a known clean latent.
struct TrueNoise {
    z0: Latent,
    schedule: NoiseSchedule,
}

impl Denoiser for TrueNoise {
    fn predict_noise(&self, z_t: &Latent, t: usize, _: &Conditioning) -> Result<Latent> {
        let a = self.schedule.alpha_bar(t);
        z_t.zip_map(&self.z0, |z, x| (z - a.sqrt() * x) / (1.0 - a).sqrt())
    }
}

fn inversion_oracle() -> Outcome {
    let started = Instant::now();
    let schedule = lib(NoiseSchedule::new(
        50,
        0.00085,
        0.012,
        BetaKind::ScaledLinear,
    ))?;
    let plan = lib(TimestepPlan::new(&schedule, 50, 0.0))?;
    let shape = Shape::new(4, 16, 16);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let z0 = normal_grid(shape, 1000 + seed);
        let denoiser = TrueNoise {
            z0: z0.clone(),
            schedule: schedule.clone(),
        };
        let scorer = ToyScorer::new(FeatureMap::Identity);
        let config = SamplerConfig {
            lambda: 0.0,
            seed,
            ..Default::default()
        };
        let out = lib(anonymize_latent(
            &z0,
            &Conditioning::new(Latent::zeros(shape)),
            &Latent::zeros(shape),
            &plan,
            &schedule,
            Models {
                denoiser: &denoiser,
                scorer: &scorer,
            },
            &config,
            &mut rng(seed),
            None,
        ))?;
        worst = worst.max(lib(out.max_abs_diff(&z0))?);
    }
    let elapsed = started.elapsed();
    ensure(worst < 1e-6, format!("max |z0_hat - z0| = {worst:e}"))?;
    ensure(
        elapsed < Duration::from_secs(5),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("max error {worst:.2e}"))
}

fn algebraic_round_trip() -> Outcome {
    let started = Instant::now();
    let schedule = default_schedule();
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let shape = Shape::new(3, 8, 8);
        let z0 = normal_grid(shape, 2 * i);
        let eps = normal_grid(shape, 2 * i + 1);
        let t = r.random_range(1..=schedule.total_steps());
        let z_t = lib(forward_noise(&z0, &schedule, t, &eps))?;
        let back = lib(estimate_clean(&z_t, t, &eps, &schedule))?;
        worst = worst.max(lib(back.max_abs_diff(&z0))?);
    }
    let elapsed = started.elapsed();
    ensure(worst < 1e-9, format!("max error {worst:e}"))?;
    ensure(
        elapsed < Duration::from_secs(1),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("max error {worst:.2e}"))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let shape = Shape::new(1, 8, 8);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let features = match seed % 3 {
            0 => FeatureMap::random(16, 64, seed),
            1 => FeatureMap::Pooled { block: 2 },
            _ => FeatureMap::Identity,
        };
        let scorer = ToyScorer::new(features);
        let z = normal_grid(shape, 300 + seed);
        let target = normal_grid(shape, 400 + seed);
        let err = lib(check_scorer(&scorer, &z, &target, 1e-4, TOY_GRAD_TOLERANCE))?;
        worst = worst.max(err);
    }
    let elapsed = started.elapsed();
    ensure(worst < 1e-5, format!("relative error {worst:e}"))?;
    ensure(
        elapsed < Duration::from_secs(5),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("max relative error {worst:.2e}"))
}

/// Unguided DDIM composed directly from the primitives, with the same draw order.
fn vanilla_ddim(
    z0: &Latent,
    cond: &Conditioning,
    plan: &TimestepPlan,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<Latent> {
    let mut r = rng(seed);
    let eps = standard_normal(&mut r, z0.shape());
    let mut z = forward_noise(z0, schedule, plan.first_step(), &eps)?;
    for (t, t_prev, sigma) in plan.transitions() {
        let eps_hat = denoiser.predict_noise(&z, t, cond)?;
        let clean = estimate_clean(&z, t, &eps_hat, schedule)?;
        let noise = standard_normal(&mut r, z.shape());
        z = reverse_step(schedule, t_prev, &eps_hat, &clean, sigma, &noise)?;
    }
    Ok(z)
}

struct ToySetup {
    schedule: Arc<NoiseSchedule>,
    plan: TimestepPlan,
    denoiser: ToyDenoiser,
    scorer: ToyScorer,
}

fn toy_setup(prior_variance: f64) -> std::result::Result<ToySetup, String> {
    let schedule = Arc::new(default_schedule());
    let plan = lib(TimestepPlan::new(&schedule, 45, 1.0))?;
    let denoiser = lib(
        ToyDenoiser::new(schedule.clone(), ConditioningMean::BroadcastMean)
            .with_prior_variance(prior_variance),
    )?;
    Ok(ToySetup {
        schedule,
        plan,
        denoiser,
        scorer: ToyScorer::new(ToyOptions::default().features),
    })
}

fn run_sampler(
    setup: &ToySetup,
    z0: &Latent,
    cond: &Conditioning,
    target: &Latent,
    config: SamplerConfig,
) -> Result<(Latent, Trace)> {
    Sampler {
        schedule: &setup.schedule,
        plan: &setup.plan,
        models: Models {
            denoiser: &setup.denoiser,
            scorer: &setup.scorer,
        },
        config,
    }
    .run_traced(z0, cond, target)
}

fn guidance_reduction() -> Outcome {
    let setup = toy_setup(0.5)?;
    let shape = Shape::new(3, 8, 8);
    for seed in 0..10 {
        let z0 = uniform_grid(shape, 500 + seed);
        let target = uniform_grid(shape, 600 + seed);
        let cond = Conditioning::new(uniform_grid(shape, 700 + seed));
        let vanilla = lib(vanilla_ddim(
            &z0,
            &cond,
            &setup.plan,
            &setup.schedule,
            &setup.denoiser,
            seed,
        ))?;
        let zero = SamplerConfig {
            lambda: 0.0,
            seed,
            ..Default::default()
        };
        let disabled = SamplerConfig {
            guidance_enabled: false,
            seed,
            ..Default::default()
        };
        for (name, config) in [("lambda = 0", zero), ("guidance disabled", disabled)] {
            let (out, _) = lib(run_sampler(&setup, &z0, &cond, &target, config))?;
            ensure(
                out.bit_eq(&vanilla),
                format!("{name} differs from vanilla at seed {seed}"),
            )?;
        }
    }
    Ok("10 seeds bitwise identical".into())
}

fn guidance_efficacy() -> Outcome {
    let setup = toy_setup(1.0)?;
    let shape = Shape::new(3, 8, 8);
    let mut wins = 0;
    for seed in 0..20 {
        let z0 = uniform_grid(shape, 800 + seed);
        let target = uniform_grid(shape, 900 + seed);
        let cond = Conditioning::new(z0.clone());
        let mut losses = [0.0; 2];
        for (slot, lambda) in [(0, 0.0), (1, 0.8)] {
            let config = SamplerConfig {
                lambda,
                seed,
                ..Default::default()
            };
            let (out, _) = lib(run_sampler(&setup, &z0, &cond, &target, config))?;
            losses[slot] = lib(setup.scorer.loss(&out, &target))?;
        }
        if losses[1] < losses[0] {
            wins += 1;
        }
    }
    ensure(wins >= 18, format!("guided run won {wins}/20"))?;
    Ok(format!("guided run won {wins}/20"))
}

fn guidance_linearity() -> Outcome {
    let setup = toy_setup(0.5)?;
    let shape = Shape::new(3, 8, 8);
    let z0 = uniform_grid(shape, 11);
    let target = uniform_grid(shape, 12);
    let cond = Conditioning::new(z0.clone());
    let first = |lambda: f64| -> std::result::Result<Latent, String> {
        let config = SamplerConfig {
            lambda,
            seed: 3,
            ..Default::default()
        };
        let (_, trace) = lib(run_sampler(&setup, &z0, &cond, &target, config))?;
        let step = trace.steps.first().ok_or("empty trace")?;
        Ok(step
            .guidance
            .as_ref()
            .ok_or("no guidance at first step")?
            .values
            .clone())
    };
    let (single, double) = (first(0.8)?, first(1.6)?);
    ensure(single.norm() > 0.0, "guidance term is zero")?;
    let worst = single
        .as_slice()
        .iter()
        .zip(double.as_slice())
        .map(|(a, b)| (2.0 * a - b).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-12, format!("max |2 M(λ) - M(2λ)| = {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn sigma_monotonicity() -> Outcome {
    // independent recomputation of the default schedule and plan
    let (t_total, t_prime) = (1000usize, 45usize);
    let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
    let mut alpha_bar = vec![1.0f64];
    for i in 0..t_total {
        let b = (lo + (hi - lo) * i as f64 / (t_total - 1) as f64).powi(2);
        alpha_bar.push(alpha_bar[i] * (1.0 - b));
    }
    let stride = t_total / t_prime;
    let steps: Vec<usize> = (0..t_prime).rev().map(|i| i * stride + 1).collect();
    let sigmas: Vec<f64> = steps
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let p = steps.get(k + 1).copied().unwrap_or(0);
            let (at, ap) = (alpha_bar[t], alpha_bar[p]);
            ((1.0 - ap) / (1.0 - at)).sqrt() * (1.0 - at / ap).sqrt()
        })
        .collect();
    ensure(
        sigmas.windows(2).all(|w| w[1] <= w[0]),
        "independently computed sigmas increase somewhere",
    )?;
    let plan = lib(TimestepPlan::new(&default_schedule(), t_prime, 1.0))?;
    ensure(
        plan.steps() == steps.as_slice(),
        "library timestep plan differs",
    )?;
    let worst = plan
        .sigmas()
        .iter()
        .zip(&sigmas)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(
        worst < 1e-12,
        format!("library sigmas deviate by {worst:e}"),
    )?;
    ensure(
        plan.sigmas().windows(2).all(|w| w[1] <= w[0]),
        "library sigmas increase somewhere",
    )?;
    Ok(format!(
        "{} sigmas from {:.4} to {:.4}",
        sigmas.len(),
        sigmas[0],
        sigmas[sigmas.len() - 1]
    ))
}

fn background_exactness() -> Outcome {
    let schedule = Arc::new(default_schedule());
    let backend = Backend::toy(schedule, ToyOptions::default());
    let shape = Shape::new(3, 8, 8);
    let mut checked = 0usize;
    for keep in [RegionSet::empty(), RegionSet::new(["eyes", "nose", "lips"])] {
        let config = RunConfig {
            keep_regions: keep.clone(),
            ..Default::default()
        };
        let anonymizer = lib(Anonymizer::new(config, backend.clone()))?;
        for run in 0..10 {
            let input = random_pixels(shape, 1000 + run);
            let target = random_pixels(shape, 2000 + run);
            let out = lib(anonymizer.anonymize(&input, &target, run))?;
            ensure(out.mask.editable_count() > 0, "mask is empty")?;
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        if !out.mask.is_editable(y, x) {
                            ensure(
                                out.pixels.get(c, y, x) == input.get(c, y, x),
                                format!("pixel ({c},{y},{x}) changed, keep = {keep}, run {run}"),
                            )?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{checked} background samples exact"))
}

fn mask_laws() -> Outcome {
    let lm = LabelMap::default();
    let parse = ParserLayout::face_8x8().paint();
    let full = lib(full_face_mask(&parse, &lm))?;
    let regions = ["eyes", "lips", "nose", "eyebrows"];
    for bits in 0u32..16 {
        let keep = RegionSet::new(
            regions
                .iter()
                .enumerate()
                .filter(|(i, _)| bits >> i & 1 == 1)
                .map(|(_, r)| *r),
        );
        let local = lib(localized_mask(&parse, &keep, &lm))?;
        ensure(
            local.is_subset_of(&full),
            format!("keep {keep} is not a subset"),
        )?;
    }
    for seed in 0..10 {
        let x = normal_grid(Shape::new(3, 8, 8), 40 + seed);
        let zeros = Latent::zeros(x.shape());
        let outside = lib(apply_mask(&x, &full))?;
        let inside = lib(composite(&zeros, &x, &full))?;
        let sum = lib(outside.zip_map(&inside, |a, b| a + b))?;
        ensure(sum == x, "x ⊙ (1 − M) + x ⊙ M differs from x")?;
    }
    Ok("16 subsets and partition identity".into())
}

fn metric_identities() -> Outcome {
    let x = uniform_grid(Shape::plane(32, 32), 5).map(|v| (v + 1.0) * 127.5);
    let s = lib(ssim(&x, &x, &SsimParams::default()))?;
    ensure((s - 1.0).abs() <= 1e-9, format!("ssim(x, x) = {s}"))?;

    let mut r = rng(6);
    let samples: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..6).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let p = lib(ActivationStats::from_samples(&samples))?;
    let d = lib(frechet_distance(&p, &p))?;
    ensure(d.abs() <= 1e-6, format!("frechet(p, p) = {d:e}"))?;

    let a = lib(ActivationStats::new(vec![0.0], vec![1.0], 2))?;
    let b = lib(ActivationStats::new(vec![1.0], vec![1.0], 2))?;
    let d1 = lib(frechet_distance(&a, &b))?;
    ensure((d1 - 1.0).abs() <= 1e-9, format!("1-D Fréchet = {d1}"))?;

    let sims: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for k in 0..=200 {
        let rate = lib(reid_rate_from_similarities(&sims, -1.0 + k as f64 * 0.01))?;
        ensure(
            rate <= last,
            format!("Re-ID rate rises at threshold step {k}"),
        )?;
        last = rate;
    }
    Ok(format!("ssim-1 {:.1e}, fd(p,p) {d:.1e}", s - 1.0))
}

fn write_png(path: &Path, shape: Shape, seed: u64) -> std::result::Result<(), String> {
    lib(io::save_rgb(path, &random_pixels(shape, seed)))
}

fn determinism_and_calls() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let inputs = dir.path().join("in");
    std::fs::create_dir_all(&inputs).map_err(|e| e.to_string())?;
    let shape = Shape::new(3, 8, 8);
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        write_png(&inputs.join(format!("{name}.png")), shape, 60 + i as u64)?;
    }
    let target = dir.path().join("target.png");
    write_png(&target, shape, 99)?;

    let run = |out: &str| -> std::result::Result<(String, Vec<Vec<u8>>), String> {
        let config = RunConfig {
            inputs: vec![inputs.clone()],
            target: Some(target.clone()),
            seed: 17,
            out_dir: dir.path().join(out),
            ..Default::default()
        };
        let backend = lib(faceanon::pipeline::build_backend(&config))?;
        let manifest = lib(cmd_anonymize(&config, &backend))?;
        ensure(manifest.all_ok(), "a record failed")?;
        let files = manifest
            .records
            .iter()
            .map(|r| std::fs::read(r.output_path.as_ref().unwrap()).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok((manifest.config_hash.unwrap_or_default(), files))
    };
    let (h1, f1) = run("first")?;
    let (h2, f2) = run("second")?;
    ensure(h1 == h2, "config hashes differ")?;
    ensure(f1 == f2, "outputs differ between identical runs")?;

    let setup = toy_setup(0.5)?;
    let denoiser = CountingDenoiser::new(setup.denoiser.clone());
    let scorer = CountingScorer::new(setup.scorer.clone());
    let z0 = uniform_grid(shape, 1);
    let sampler = Sampler {
        schedule: &setup.schedule,
        plan: &setup.plan,
        models: Models {
            denoiser: &denoiser,
            scorer: &scorer,
        },
        config: SamplerConfig::default(),
    };
    lib(sampler.run(&z0, &Conditioning::new(z0.clone()), &uniform_grid(shape, 2)))?;
    let (d, s) = (denoiser.calls(), scorer.calls());
    ensure(
        d == 45 && s == 45,
        format!("{d} denoiser and {s} scorer calls, expected 45 each"),
    )?;
    Ok(format!(
        "3 images reproduced, {d} denoiser / {s} scorer calls"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("sampler inversion oracle", inversion_oracle),
        ("algebraic round trip", algebraic_round_trip),
        ("gradient correctness", gradient_correctness),
        ("guidance reduction", guidance_reduction),
        ("guidance efficacy", guidance_efficacy),
        ("guidance linearity", guidance_linearity),
        ("sigma monotonicity", sigma_monotonicity),
        ("background exactness", background_exactness),
        ("mask laws", mask_laws),
        ("metric identities", metric_identities),
        ("determinism and call discipline", determinism_and_calls),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = t.elapsed().as_secs_f64() * 1e3;
        match outcome {
            Ok(detail) => println!("PASS  {name:<34} {ms:>9.1} ms  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<34} {ms:>9.1} ms  {why}");
            }
        }
    }
    let total = started.elapsed();
    if total >= Duration::from_secs(60) {
        failed += 1;
        println!("FAIL  total runtime {total:?} exceeds 60 s");
    }
    println!(
        "{} of {} criteria passed in {:.2} s",
        criteria.len() - failed.min(criteria.len()),
        criteria.len(),
        total.as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
