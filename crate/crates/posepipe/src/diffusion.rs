//! DDPM/DDIM core: noise schedules, forward noising, the training loss,
//! reverse steps, and classifier-free guidance combination.
//!
//! Timesteps are 1-based (`t` in [1, T]); index 0 denotes the clean data
//! point, with `alpha_bar(0) == 1`. Schedule tables are f64 so cumulative
//! products are exact to 1e-12; tensor math runs at the pipeline scalar.

use crate::error::{PipelineError, Result};
use crate::tensor::{Scalar, Tensor};
use crate::util::NormalSource;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_max: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Posterior variances beta-tilde_t.
    posterior_vars: Vec<f64>,
}

/// Linear beta interpolation over T steps with all derived tables.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(PipelineError::Parameter("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(PipelineError::Parameter(format!(
            "schedule needs 0 < beta_start <= beta_end < 1, got [{}, {}]",
            beta_start, beta_end
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let mut posterior_vars = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let ab_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
        posterior_vars.push((1.0 - ab_prev) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]);
    }
    let schedule = NoiseSchedule {
        t_max,
        betas,
        alphas,
        alpha_bars,
        posterior_vars,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl NoiseSchedule {
    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
    }

    fn validate(&self) -> Result<()> {
        for (i, &b) in self.betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(PipelineError::Parameter(format!(
                    "beta_{} = {} outside (0, 1)",
                    i + 1,
                    b
                )));
            }
            if i > 0 && b < self.betas[i - 1] {
                return Err(PipelineError::Parameter("betas must be non-decreasing".into()));
            }
        }
        for i in 1..self.alpha_bars.len() {
            if self.alpha_bars[i] >= self.alpha_bars[i - 1] {
                return Err(PipelineError::Parameter(
                    "alpha_bar must be strictly decreasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(PipelineError::Index(format!(
                "timestep {} outside [1, {}]",
                t, self.t_max
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// alpha_bar(0) == 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }
}

/// Closed-form forward marginal: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if z0.dims() != eps.dims() {
        return Err(PipelineError::Shape(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.dims(),
            eps.dims()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let ca = T::from_f64(ab.sqrt());
    let cb = T::from_f64((1.0 - ab).sqrt());
    let mut out = z0.scale(ca);
    out.add_scaled(eps, cb)?;
    Ok(out)
}

/// Mean squared error over all elements.
pub fn loss_simple<T: Scalar>(pred_eps: &Tensor<T>, eps: &Tensor<T>) -> Result<T> {
    if pred_eps.dims() != eps.dims() {
        return Err(PipelineError::Shape(format!(
            "loss_simple: {:?} vs {:?}",
            pred_eps.dims(),
            eps.dims()
        )));
    }
    let mut sum = T::zero();
    for (&a, &b) in pred_eps.data().iter().zip(eps.data()) {
        let d = a - b;
        sum = d.mul_add(d, sum);
    }
    Ok(sum / T::from_f64(pred_eps.numel() as f64))
}

/// One ancestral DDPM step with epsilon parameterization and Sigma fixed to
/// the posterior variance. Adds fresh noise for t > 1, none at t == 1.
pub fn ddpm_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    pred_eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    noise: &mut NormalSource,
) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(PipelineError::Parameter("ddpm_step: t must be >= 1".into()));
    }
    schedule.check_t(t)?;
    if z_t.dims() != pred_eps.dims() {
        return Err(PipelineError::Shape(format!(
            "ddpm_step: z {:?} vs pred_eps {:?}",
            z_t.dims(),
            pred_eps.dims()
        )));
    }
    let beta = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = schedule.alpha(t).sqrt().recip();
    let mut out = z_t.clone();
    out.add_scaled(pred_eps, T::from_f64(-coef))?;
    let mut out = out.scale(T::from_f64(inv_sqrt_alpha));
    if t > 1 {
        let sigma = schedule.posterior_var(t).sqrt();
        for v in out.data_mut().iter_mut() {
            *v = *v + T::from_f64(sigma * noise.next_f64());
        }
    }
    Ok(out)
}

/// One DDIM step from t to t_prev (t > t_prev >= 0). eta = 0 is
/// deterministic; eta = 1 with consecutive steps matches the DDPM posterior.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    pred_eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&mut dyn FnMut() -> f64>,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(PipelineError::Parameter(format!(
            "ddim_step: need t > t_prev, got {} -> {}",
            t, t_prev
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(PipelineError::Parameter(format!("ddim_step: eta {} outside [0, 1]", eta)));
    }
    schedule.check_t(t)?;
    if z_t.dims() != pred_eps.dims() {
        return Err(PipelineError::Shape(format!(
            "ddim_step: z {:?} vs pred_eps {:?}",
            z_t.dims(),
            pred_eps.dims()
        )));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let z0 = ddim_predict_z0(z_t, t, pred_eps, schedule)?;
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = z0.scale(T::from_f64(ab_prev.sqrt()));
    out.add_scaled(pred_eps, T::from_f64(dir_coef))?;
    if sigma > 0.0 {
        let draw = noise.ok_or_else(|| {
            PipelineError::Parameter("ddim_step: eta > 0 requires a noise source".into())
        })?;
        for v in out.data_mut().iter_mut() {
            *v = *v + T::from_f64(sigma * draw());
        }
    }
    Ok(out)
}

/// The DDIM clean-sample estimate z0_hat = (z_t - sqrt(1-ab) eps) / sqrt(ab).
pub fn ddim_predict_z0<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    pred_eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let mut out = z_t.clone();
    out.add_scaled(pred_eps, T::from_f64(-(1.0 - ab).sqrt()))?;
    Ok(out.scale(T::from_f64(ab.sqrt().recip())))
}

/// eps_uncond + scale * (eps_cond - eps_uncond). scale == 1 returns the
/// conditional prediction bit-exactly.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &Tensor<T>,
    eps_uncond: &Tensor<T>,
    scale: f64,
) -> Result<Tensor<T>> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(PipelineError::Shape(format!(
            "cfg_combine: {:?} vs {:?}",
            eps_cond.dims(),
            eps_uncond.dims()
        )));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let s = T::from_f64(scale);
    let one = T::one();
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| u.mul_add(one - s, c * s))
        .collect();
    Tensor::from_vec(eps_cond.dims(), data)
}

/// Uniform DDIM subsequence of `steps` timesteps out of [1, T], ascending.
/// Non-divisible counts round down per segment: tau_k = floor((k+1) T / steps).
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(PipelineError::Parameter(format!(
            "ddim_timesteps: steps {} outside [1, {}]",
            steps, t_max
        )));
    }
    let mut taus = Vec::with_capacity(steps);
    for k in 0..steps {
        let tau = (k + 1) * t_max / steps;
        if taus.last() != Some(&tau) {
            taus.push(tau);
        }
    }
    Ok(taus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;

    fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut src = NormalSource::from_seed(seed);
        Tensor::randn(dims, &mut src)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        // independent product loop
        let mut prod = 1.0f64;
        for t in 1..=100usize {
            let frac = (t - 1) as f64 / 99.0;
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * frac);
            assert!(
                (s.alpha_bar(t) - prod).abs() < 1e-12,
                "t={} {} vs {}",
                t,
                s.alpha_bar(t),
                prod
            );
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(10, 1e-2, 0.1).unwrap();
        let z0 = randn(&[2, 3], 1);
        let zero = Tensor::<f64>::zeros(&[2, 3]);
        for t in [1usize, 5, 10] {
            // eps = 0 -> sqrt(ab) z0
            let zt = q_sample(&z0, t, &zero, &s).unwrap();
            let want = z0.scale(s.alpha_bar(t).sqrt());
            assert!(zt.max_abs_diff(&want) < 1e-14);
            // z0 = 0 -> sqrt(1-ab) eps
            let eps = randn(&[2, 3], t as u64 + 10);
            let zt = q_sample(&zero, t, &eps, &s).unwrap();
            let want = eps.scale((1.0 - s.alpha_bar(t)).sqrt());
            assert!(zt.max_abs_diff(&want) < 1e-14);
        }
        assert!(q_sample(&z0, 11, &zero, &s).is_err());
        assert!(q_sample(&z0, 0, &zero, &s).is_err());
    }

    /// Oracle: iterate the one-step forward recursion symbolically, tracking
    /// the z0 coefficient and the accumulated noise variance, and compare
    /// with the closed-form q_sample coefficients.
    #[test]
    fn q_sample_coefficients_match_recursion_oracle() {
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let mut mean_coef = 1.0f64;
        let mut var = 0.0f64;
        for t in 1..=10usize {
            let beta = s.beta(t);
            mean_coef *= (1.0 - beta).sqrt();
            var = (1.0 - beta) * var + beta;
            assert!((mean_coef - s.alpha_bar(t).sqrt()).abs() < 1e-10, "t={t}");
            assert!((var.sqrt() - (1.0 - s.alpha_bar(t)).sqrt()).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn loss_simple_cases_and_naive_loop_oracle() {
        let a = randn(&[4, 5], 2);
        assert_eq!(loss_simple(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((loss_simple(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = randn(&[4, 5], 3);
        let mut want = 0.0;
        for i in 0..20 {
            let d = a.data()[i] - c.data()[i];
            want += d * d;
        }
        want /= 20.0;
        assert!((loss_simple(&a, &c).unwrap() - want).abs() < 1e-9);
        // symmetry
        assert_eq!(loss_simple(&a, &c).unwrap(), loss_simple(&c, &a).unwrap());
        assert!(loss_simple(&a, &randn(&[5, 4], 4)).is_err());
    }

    #[test]
    fn ddpm_single_step_inverts_q_sample() {
        // T=1 with the true eps as prediction recovers z0 algebraically.
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let z0 = randn(&[3, 3], 5);
        let eps = randn(&[3, 3], 6);
        let z1 = q_sample(&z0, 1, &eps, &s).unwrap();
        let mut noise = NormalSource::from_seed(0);
        let back = ddpm_step(&z1, 1, &eps, &s, &mut noise).unwrap();
        assert!(back.max_abs_diff(&z0) < 1e-6);
    }

    #[test]
    fn ddpm_step_final_step_is_deterministic_and_t0_rejected() {
        let s = make_schedule(5, 1e-3, 0.05).unwrap();
        let z = randn(&[2, 2], 7);
        let eps = randn(&[2, 2], 8);
        let a = ddpm_step(&z, 1, &eps, &s, &mut NormalSource::from_seed(1)).unwrap();
        let b = ddpm_step(&z, 1, &eps, &s, &mut NormalSource::from_seed(2)).unwrap();
        assert_eq!(a, b);
        assert!(ddpm_step(&z, 0, &eps, &s, &mut NormalSource::from_seed(1)).is_err());
    }

    #[test]
    fn ddpm_step_seeded_is_reproducible() {
        let s = make_schedule(5, 1e-3, 0.05).unwrap();
        let z = randn(&[2, 2], 9);
        let eps = randn(&[2, 2], 10);
        let a = ddpm_step(&z, 3, &eps, &s, &mut NormalSource::from_seed(11)).unwrap();
        let b = ddpm_step(&z, 3, &eps, &s, &mut NormalSource::from_seed(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_z0_prediction_inverts_q_sample_at_any_t() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let z0 = randn(&[2, 4], 12);
        for t in [1usize, 7, 25, 50] {
            let eps = randn(&[2, 4], 100 + t as u64);
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            let z0_hat = ddim_predict_z0(&zt, t, &eps, &s).unwrap();
            assert!(z0_hat.max_abs_diff(&z0) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn ddim_eta0_is_deterministic_and_rejects_non_monotone() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let z = randn(&[2, 2], 13);
        let eps = randn(&[2, 2], 14);
        let a = ddim_step(&z, 10, 5, &eps, &s, 0.0, None).unwrap();
        let b = ddim_step(&z, 10, 5, &eps, &s, 0.0, None).unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(&z, 5, 5, &eps, &s, 0.0, None).is_err());
        assert!(ddim_step(&z, 5, 6, &eps, &s, 0.0, None).is_err());
        assert!(ddim_step(&z, 5, 4, &eps, &s, 1.5, None).is_err());
    }

    /// eta = 1 on consecutive timesteps matches the DDPM posterior: the
    /// injected sigma^2 equals beta-tilde exactly, and Monte-Carlo moments
    /// of the two samplers agree within 2%.
    #[test]
    fn ddim_eta1_matches_ddpm_distribution() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = 50usize;
        // algebraic identity first
        let ab_t = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
        assert!((sigma2 - s.posterior_var(t)).abs() < 1e-12);

        let z = randn(&[1, 1], 15);
        let eps = randn(&[1, 1], 16);
        let n = 10_000usize;
        let mut ddpm_draws = Vec::with_capacity(n);
        let mut ddim_draws = Vec::with_capacity(n);
        let mut src_a = NormalSource::from_seed(17);
        let mut src_b = NormalSource::from_seed(18);
        for _ in 0..n {
            ddpm_draws.push(ddpm_step(&z, t, &eps, &s, &mut src_a).unwrap().data()[0]);
            let mut draw = || src_b.next_f64();
            ddim_draws.push(
                ddim_step(&z, t, t - 1, &eps, &s, 1.0, Some(&mut draw)).unwrap().data()[0],
            );
        }
        let stats = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            (m, v)
        };
        let (m_a, v_a) = stats(&ddpm_draws);
        let (m_b, v_b) = stats(&ddim_draws);
        // means agree within 2% of the noise scale, variances within 2%
        // of the beta-tilde value (allowing Monte-Carlo error).
        assert!((m_a - m_b).abs() < 0.02 * sigma2.sqrt().max(1e-9) + 0.03 * (v_a / n as f64).sqrt() * 3.0,
            "means {m_a} vs {m_b}");
        assert!((v_a - sigma2).abs() / sigma2 < 0.05, "ddpm var {v_a} vs {sigma2}");
        assert!((v_b - sigma2).abs() / sigma2 < 0.05, "ddim var {v_b} vs {sigma2}");
        assert!((v_a - v_b).abs() / sigma2 < 0.05);
    }

    #[test]
    fn cfg_combine_cases() {
        let c = randn(&[2, 3], 20);
        let u = randn(&[2, 3], 21);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let ones = Tensor::<f64>::filled(&[2, 2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 2]);
        let two = cfg_combine(&ones, &zeros, 2.0).unwrap();
        assert!(two.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        assert!(cfg_combine(&c, &randn(&[3, 2], 22), 1.0).is_err());
    }

    #[test]
    fn ddim_timestep_subsequences() {
        assert_eq!(ddim_timesteps(100, 20).unwrap().len(), 20);
        assert_eq!(ddim_timesteps(100, 20).unwrap()[0], 5);
        assert_eq!(*ddim_timesteps(100, 20).unwrap().last().unwrap(), 100);
        // round down per segment at non-divisible counts
        assert_eq!(ddim_timesteps(100, 3).unwrap(), vec![33, 66, 100]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    /// Full DDIM chain with an oracle denoiser that always returns the true
    /// injected eps reconstructs z0 within 1e-4 over 20 steps.
    #[test]
    fn full_ddim_chain_with_oracle_eps_reconstructs_z0() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let z0 = randn(&[4, 4], 30);
        let eps = randn(&[4, 4], 31);
        let mut z = q_sample(&z0, 100, &eps, &s).unwrap();
        let taus = ddim_timesteps(100, 20).unwrap();
        for i in (0..taus.len()).rev() {
            let t = taus[i];
            let t_prev = if i == 0 { 0 } else { taus[i - 1] };
            z = ddim_step(&z, t, t_prev, &eps, &s, 0.0, None).unwrap();
        }
        assert!(z.max_abs_diff(&z0) < 1e-4, "diff {}", z.max_abs_diff(&z0));
    }
}
