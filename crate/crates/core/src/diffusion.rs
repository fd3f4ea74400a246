//! Noise schedule, forward noising and the deterministic sampler pair.
//!
//! The forward process follows `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) e`
//! with a linear beta ramp. Sampling runs the deterministic (eta = 0) update
//! over an evenly strided sub-schedule; inversion runs the same update in
//! reverse so real latents can be pulled back to the noise that would have
//! produced them. Both directions are pure given the predictor closure, and
//! any non-finite state aborts with a numeric error rather than propagating.

use ndarray::Array4;

use crate::error::CoreError;
use crate::Result;

/// Precomputed linear-beta schedule. `alpha_bar(0) = 1` by convention, so
/// index `t` ranges over `0..=timesteps`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(timesteps >= 1, "schedule needs at least one step");
        assert!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0);
        let mut betas = Vec::with_capacity(timesteps);
        for t in 0..timesteps {
            let frac = if timesteps == 1 { 0.0 } else { t as f64 / (timesteps - 1) as f64 };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let mut alpha_bars = Vec::with_capacity(timesteps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative signal fraction at step `t`, with `t` in `0..=timesteps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.timesteps()).contains(&t), "beta defined for 1..=T");
        self.betas[t - 1]
    }

    /// Forward noising: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, z0: &Array4<f64>, eps: &Array4<f64>, t: usize) -> Array4<f64> {
        assert!((1..=self.timesteps()).contains(&t), "noising step out of range");
        assert_eq!(z0.dim(), eps.dim());
        let ab = self.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0 * sa + eps * sb
    }

    /// Descending source timesteps of the strided sub-schedule:
    /// `[T, T - stride, ..., stride]`. The final update targets step 0.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.timesteps();
        if steps == 0 || t_max % steps != 0 {
            return Err(CoreError::Config(format!(
                "sampler steps {steps} must divide the {t_max} schedule steps"
            )));
        }
        let stride = t_max / steps;
        Ok((1..=steps).rev().map(|k| k * stride).collect())
    }
}

/// Where the starting state of a sampling run came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoiseProvenance {
    /// Drawn from the seeded generator.
    Fresh { seed: u64 },
    /// Recovered by running the deterministic sampler backwards over
    /// reference latents.
    Inverted { steps: usize },
}

/// A latent state at a known schedule position, tagged with how its noise
/// component was obtained.
#[derive(Debug, Clone)]
pub struct NoisyLatent {
    pub data: Array4<f64>,
    pub t: usize,
    pub provenance: NoiseProvenance,
}

fn ensure_finite(x: &Array4<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numeric(format!("{what} contains non-finite values")))
    }
}

/// One deterministic update from `t_src` to `t_dst` given the predicted noise.
fn ddim_update(schedule: &NoiseSchedule, x: &Array4<f64>, eps: &Array4<f64>, t_src: usize, t_dst: usize) -> Array4<f64> {
    let ab_src = schedule.alpha_bar(t_src);
    let ab_dst = schedule.alpha_bar(t_dst);
    let x0 = (x - &(eps * (1.0 - ab_src).sqrt())) / ab_src.sqrt();
    &x0 * ab_dst.sqrt() + eps * (1.0 - ab_dst).sqrt()
}

/// Runs the deterministic sampler from `x` at step `timesteps` down to a
/// clean state. `predict` receives the current state and its source step.
pub fn ddim_sample<F>(schedule: &NoiseSchedule, x: &Array4<f64>, steps: usize, mut predict: F) -> Result<Array4<f64>>
where
    F: FnMut(&Array4<f64>, usize) -> Array4<f64>,
{
    ensure_finite(x, "sampler input")?;
    let taus = schedule.sub_schedule(steps)?;
    let stride = schedule.timesteps() / steps;
    let mut state = x.clone();
    for &t_src in &taus {
        let t_dst = t_src - stride;
        let eps = predict(&state, t_src);
        ensure_finite(&eps, "noise prediction")?;
        state = ddim_update(schedule, &state, &eps, t_src, t_dst);
        ensure_finite(&state, "sampler state")?;
    }
    Ok(state)
}

/// Runs the sampler updates in reverse, mapping clean latents up to step
/// `timesteps`. The predictor is evaluated at the source (lower) step of each
/// transition. `steps == 0` is the identity, for pipelines that skip
/// inversion entirely.
pub fn ddim_invert<F>(schedule: &NoiseSchedule, x0: &Array4<f64>, steps: usize, mut predict: F) -> Result<Array4<f64>>
where
    F: FnMut(&Array4<f64>, usize) -> Array4<f64>,
{
    if steps == 0 {
        return Ok(x0.clone());
    }
    ensure_finite(x0, "inversion input")?;
    let mut taus = schedule.sub_schedule(steps)?;
    taus.reverse(); // ascending targets: [stride, 2*stride, ..., T]
    let stride = schedule.timesteps() / steps;
    let mut state = x0.clone();
    for &t_dst in &taus {
        let t_src = t_dst - stride;
        let eps = predict(&state, t_src);
        ensure_finite(&eps, "noise prediction")?;
        state = ddim_update(schedule, &state, &eps, t_src, t_dst);
        ensure_finite(&state, "inversion state")?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02)
    }

    fn randn4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        use rand_distr::{Distribution, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_fn(dim, |_| n.sample(rng))
    }

    #[test]
    fn alpha_bar_is_monotone_and_anchored() {
        let s = toy_schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.timesteps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(s.timesteps()) < 1e-3, "terminal state must be noise-dominated");
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn add_noise_matches_closed_form() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = randn4(&mut rng, (2, 3, 4, 4));
        let eps = randn4(&mut rng, (2, 3, 4, 4));
        let t = 500;
        let out = s.add_noise(&z0, &eps, t);
        let ab = s.alpha_bar(t);
        for ((a, b), o) in z0.iter().zip(eps.iter()).zip(out.iter()) {
            assert_eq!(*o, ab.sqrt() * a + (1.0 - ab).sqrt() * b);
        }
    }

    #[test]
    fn terminal_state_is_approximately_unit_normal() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = randn4(&mut rng, (4, 4, 16, 16)).mapv(|v| v * 0.5 + 0.3);
        let eps = randn4(&mut rng, (4, 4, 16, 16));
        let x = s.add_noise(&z0, &eps, s.timesteps());
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "var {var}");
    }

    #[test]
    fn sub_schedule_strides_evenly() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02);
        assert_eq!(s.sub_schedule(5).unwrap(), vec![10, 8, 6, 4, 2]);
        assert_eq!(s.sub_schedule(10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(s.sub_schedule(3).is_err());
        assert!(s.sub_schedule(0).is_err());
    }

    #[test]
    fn zero_predictor_rescales_by_alpha_bar() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn4(&mut rng, (1, 2, 3, 3));
        let out = ddim_sample(&s, &x, 50, |_, _| Array4::zeros((1, 2, 3, 3))).unwrap();
        // With eps == 0 every update is multiplication by
        // sqrt(abar_dst / abar_src); the chain telescopes.
        let factor = 1.0 / s.alpha_bar(s.timesteps()).sqrt();
        for (a, b) in x.iter().zip(out.iter()) {
            assert!((a * factor - b).abs() < 1e-9 * factor);
        }
    }

    #[test]
    fn constant_predictor_roundtrips_exactly() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = randn4(&mut rng, (2, 2, 4, 4));
        let eps_const = randn4(&mut rng, (2, 2, 4, 4));
        let predict = |_: &Array4<f64>, _: usize| eps_const.clone();
        let inverted = ddim_invert(&s, &z0, 50, predict).unwrap();
        let recovered = ddim_sample(&s, &inverted, 50, predict).unwrap();
        let rel = (&recovered - &z0).mapv(|v| v * v).sum().sqrt() / z0.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 1e-9, "state-independent prediction must invert exactly, got {rel}");
    }

    #[test]
    fn zero_step_inversion_is_identity() {
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = randn4(&mut rng, (1, 2, 2, 2));
        let out = ddim_invert(&s, &z0, 0, |_, _| panic!("predictor must not run")).unwrap();
        assert_eq!(out, z0);
    }

    #[test]
    fn non_finite_states_become_numeric_errors() {
        let s = toy_schedule();
        let mut x = Array4::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = f64::NAN;
        let err = ddim_sample(&s, &x, 50, |_, _| Array4::zeros((1, 1, 2, 2))).unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)));

        let ok_in = Array4::zeros((1, 1, 2, 2));
        let err = ddim_sample(&s, &ok_in, 50, |_, _| {
            let mut e = Array4::zeros((1, 1, 2, 2));
            e[[0, 0, 0, 0]] = f64::INFINITY;
            e
        })
        .unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)));
    }

    #[test]
    fn inversion_steps_visit_ascending_sources() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02);
        let z0 = Array4::zeros((1, 1, 1, 1));
        let mut seen = Vec::new();
        let _ = ddim_invert(&s, &z0, 5, |_, t| {
            seen.push(t);
            Array4::zeros((1, 1, 1, 1))
        })
        .unwrap();
        assert_eq!(seen, vec![0, 2, 4, 6, 8]);
    }
}
