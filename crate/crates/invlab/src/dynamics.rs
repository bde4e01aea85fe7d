//! Forward diffusion sampling, the deterministic denoising machinery, and
//! the conversions between data and noise predictions.

use std::io::Write;

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::models::{Conditioning, NoisePredictor};
use crate::schedule::{NoiseSchedule, TimestepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Inversion,
    Denoising,
}

/// An ordered `(timestep, latent)` sequence with the predictor outputs that
/// produced each step.
///
/// Latents are stored in ascending timestep order `z(t_0) ... z(t_N)`
/// regardless of the direction the trajectory was built in. The cached noise
/// and data prediction for step `i` pair the `t_i` latent with the noise the
/// step actually used; under any affine step update those two values satisfy
/// the same relation the error extraction inverts, which is what makes the
/// cached-prediction route exact.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: TimestepGrid,
    latents: Vec<Latent>,
    cached_eps: Vec<Latent>,
    cached_data_pred: Vec<Latent>,
    direction: Direction,
    nfe_used: u64,
    per_step_calls: Vec<u64>,
}

impl Trajectory {
    pub(crate) fn from_parts(
        grid: TimestepGrid,
        latents: Vec<Latent>,
        cached_eps: Vec<Latent>,
        cached_data_pred: Vec<Latent>,
        direction: Direction,
        per_step_calls: Vec<u64>,
    ) -> Result<Self> {
        let n = grid.n_steps();
        if latents.len() != n + 1 || cached_eps.len() != n || cached_data_pred.len() != n {
            return Err(Error::InvalidParams(format!(
                "trajectory arity mismatch: {} latents, {} eps, {} data predictions for N = {n}",
                latents.len(),
                cached_eps.len(),
                cached_data_pred.len()
            )));
        }
        for (idx, z) in latents.iter().enumerate() {
            if !z.all_finite() {
                return Err(Error::NonFinite(format!("trajectory latent {idx}")));
            }
        }
        let nfe_used = per_step_calls.iter().sum();
        Ok(Self {
            grid,
            latents,
            cached_eps,
            cached_data_pred,
            direction,
            nfe_used,
            per_step_calls,
        })
    }

    pub fn grid(&self) -> &TimestepGrid {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Latent at grid position `i`, i.e. at model timestep `t_i`.
    pub fn latent(&self, i: usize) -> &Latent {
        &self.latents[i]
    }

    pub fn latents(&self) -> &[Latent] {
        &self.latents
    }

    /// Noise actually used by step `i` (`1 <= i <= N`).
    pub fn eps_used(&self, i: usize) -> &Latent {
        &self.cached_eps[i - 1]
    }

    /// Data prediction implied by the `t_i` latent and the noise step `i` used.
    pub fn data_pred(&self, i: usize) -> &Latent {
        &self.cached_data_pred[i - 1]
    }

    /// Total predictor evaluations spent building the trajectory.
    pub fn nfe_used(&self) -> u64 {
        self.nfe_used
    }

    pub fn per_step_calls(&self) -> &[u64] {
        &self.per_step_calls
    }

    /// Terminal latent: `z(t_N)` for inversions, `z(t_0)` for denoising runs.
    pub fn terminal(&self) -> &Latent {
        match self.direction {
            Direction::Inversion => self.latents.last().expect("non-empty"),
            Direction::Denoising => &self.latents[0],
        }
    }

    /// One JSON record per step: `{i, t_i, z, eps, data_pred}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 1..=self.n_steps() {
            let record = serde_json::json!({
                "i": i,
                "t_i": self.grid.timestep(i),
                "z": self.latent(i).values(),
                "eps": self.eps_used(i).values(),
                "data_pred": self.data_pred(i).values(),
            });
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Closed-form forward sample: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_marginal_sample(
    schedule: &NoiseSchedule,
    z0: &Latent,
    t: usize,
    eps: &Latent,
) -> Result<Latent> {
    z0.check_same_shape(eps)?;
    let abar = schedule.alpha_bar(t)?;
    z0.scale(abar.sqrt()).add_scaled((1.0 - abar).sqrt(), eps)
}

/// Clean-sample estimate implied by a latent and its noise prediction:
/// `(z - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
pub fn data_prediction(
    schedule: &NoiseSchedule,
    z: &Latent,
    t: usize,
    eps: &Latent,
) -> Result<Latent> {
    z.check_same_shape(eps)?;
    let abar = schedule.alpha_bar(t)?;
    if abar <= 0.0 {
        return Err(Error::AlphaZero { t });
    }
    Ok(z.add_scaled(-(1.0 - abar).sqrt(), eps)?
        .scale(1.0 / abar.sqrt()))
}

/// Noise implied by a latent and a data prediction:
/// `(z - sqrt(abar_t) * z0_hat) / sqrt(1 - abar_t)`.
pub fn noise_from_data(
    schedule: &NoiseSchedule,
    z: &Latent,
    t: usize,
    z0_hat: &Latent,
) -> Result<Latent> {
    z.check_same_shape(z0_hat)?;
    let abar = schedule.alpha_bar(t)?;
    if abar >= 1.0 {
        return Err(Error::AlphaOne { t });
    }
    Ok(z.add_scaled(-abar.sqrt(), z0_hat)?
        .scale(1.0 / (1.0 - abar).sqrt()))
}

/// One denoising update on a raw `alpha_bar` pair, given the noise evaluated
/// at the higher-noise end: `sqrt(abar_prev) * z0_hat + sqrt(1 - abar_prev) * eps`.
pub(crate) fn denoise_update(
    abar_prev: f64,
    abar_cur: f64,
    z: &Latent,
    eps: &Latent,
) -> Result<Latent> {
    let z0_hat = z
        .add_scaled(-(1.0 - abar_cur).sqrt(), eps)?
        .scale(1.0 / abar_cur.sqrt());
    z0_hat
        .scale(abar_prev.sqrt())
        .add_scaled((1.0 - abar_prev).sqrt(), eps)
}

/// One deterministic denoising step `z(t_i) -> z(t_{i-1})`, evaluating the
/// predictor once at `(z(t_i), t_i)`.
pub fn ddim_denoise_step(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_ti: &Latent,
) -> Result<Latent> {
    let (z, _eps) = denoise_step_inner(predictor, schedule, grid, i, z_ti)?;
    Ok(z)
}

fn denoise_step_inner(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_ti: &Latent,
) -> Result<(Latent, Latent)> {
    grid.check_schedule(schedule)?;
    grid.check_step(i)?;
    let t_cur = grid.timestep(i);
    let abar_prev = schedule.alpha_bar(grid.timestep(i - 1))?;
    let abar_cur = schedule.alpha_bar(t_cur)?;
    let eps = predictor.predict(z_ti, t_cur, &Conditioning::none())?;
    z_ti.check_same_shape(&eps)?;
    let z = denoise_update(abar_prev, abar_cur, z_ti, &eps)?;
    Ok((z, eps))
}

/// Full deterministic denoising sweep from `z(t_N)` down to `z(t_0)`.
/// Spends exactly one predictor evaluation per step.
pub fn ddim_denoise(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    z_tn: &Latent,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    let n = grid.n_steps();
    let mut latents = vec![z_tn.clone().with_tag(grid.timestep(n))];
    let mut eps_desc = Vec::with_capacity(n);
    let mut data_pred_desc = Vec::with_capacity(n);
    for i in (1..=n).rev() {
        let current = latents.last().expect("non-empty");
        let (z, eps) = denoise_step_inner(predictor, schedule, grid, i, current)?;
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("denoising step {i}")));
        }
        let data_pred = data_prediction(schedule, current, grid.timestep(i), &eps)?;
        latents.push(z.with_tag(grid.timestep(i - 1)));
        eps_desc.push(eps);
        data_pred_desc.push(data_pred);
    }
    latents.reverse();
    eps_desc.reverse();
    data_pred_desc.reverse();
    Trajectory::from_parts(
        grid.clone(),
        latents,
        eps_desc,
        data_pred_desc,
        Direction::Denoising,
        vec![1; n],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConstantPredictor, GaussianPredictor, GmmPredictor};
    use crate::schedule::ScheduleKind;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::sync::Arc;

    fn schedule_with(table: Vec<f64>) -> NoiseSchedule {
        NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, table).unwrap()
    }

    #[test]
    fn forward_identity_at_alpha_bar_one() {
        let s = schedule_with(vec![1.0, 0.25]);
        let z0 = Latent::from_vec(vec![2.0, -1.0]).unwrap();
        let eps = Latent::from_vec(vec![5.0, 5.0]).unwrap();
        let z = forward_marginal_sample(&s, &z0, 0, &eps).unwrap();
        assert_eq!(z.values(), z0.values());
    }

    #[test]
    fn forward_direct_arithmetic() {
        let s = schedule_with(vec![0.5, 0.25]);
        let z0 = Latent::from_vec(vec![2.0, 0.0]).unwrap();
        let eps = Latent::from_vec(vec![0.0, 2.0]).unwrap();
        let z = forward_marginal_sample(&s, &z0, 1, &eps).unwrap();
        assert_relative_eq!(z.values()[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(z.values()[1], 3.0f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn forward_then_recover_eps() {
        let s = schedule_with(vec![0.9, 0.4]);
        let mut rng = crate::seeding::rng_from(3, &[]);
        let z0 = Latent::from_vec((0..5).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let eps = Latent::from_vec((0..5).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let z = forward_marginal_sample(&s, &z0, 1, &eps).unwrap();
        let abar = s.alpha_bar(1).unwrap();
        let recovered = z
            .add_scaled(-abar.sqrt(), &z0)
            .unwrap()
            .scale(1.0 / (1.0 - abar).sqrt());
        for (a, b) in recovered.values().iter().zip(eps.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn data_prediction_inverse_pair() {
        let s = schedule_with(vec![0.8, 0.25]);
        let x = Latent::from_vec(vec![0.3, -0.7]).unwrap();
        let z = Latent::from_vec(vec![1.0, 0.5]).unwrap();
        // choose eps so that the prediction recovers x
        let abar = s.alpha_bar(1).unwrap();
        let eps = z
            .add_scaled(-abar.sqrt(), &x)
            .unwrap()
            .scale(1.0 / (1.0 - abar).sqrt());
        let got = data_prediction(&s, &z, 1, &eps).unwrap();
        for (a, b) in got.values().iter().zip(x.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn data_prediction_zero_eps() {
        let s = schedule_with(vec![0.5, 0.25]);
        let z = Latent::from_vec(vec![1.0, 1.0]).unwrap();
        let got = data_prediction(&s, &z, 1, &Latent::zeros(2)).unwrap();
        assert_relative_eq!(got.values()[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(got.values()[1], 2.0, max_relative = 1e-15);
    }

    #[test]
    fn noise_from_data_zero_noise_case() {
        let s = schedule_with(vec![0.5, 0.25]);
        let z = Latent::from_vec(vec![1.2, -0.4]).unwrap();
        let z0_hat = z.scale(1.0 / s.alpha_bar(1).unwrap().sqrt());
        let eps = noise_from_data(&s, &z, 1, &z0_hat).unwrap();
        assert!(eps.linf_norm() < 1e-14);
    }

    #[test]
    fn conversion_round_trip() {
        let s = schedule_with(vec![0.7, 0.3]);
        let mut rng = crate::seeding::rng_from(8, &[]);
        for _ in 0..10 {
            let z = Latent::from_vec((0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .unwrap();
            let eps = Latent::from_vec((0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .unwrap();
            let z0_hat = data_prediction(&s, &z, 1, &eps).unwrap();
            let back = noise_from_data(&s, &z, 1, &z0_hat).unwrap();
            for (a, b) in back.values().iter().zip(eps.values()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alpha_one_guard() {
        let s = schedule_with(vec![1.0, 0.25]);
        let z = Latent::zeros(2);
        assert!(matches!(
            noise_from_data(&s, &z, 0, &Latent::zeros(2)),
            Err(Error::AlphaOne { t: 0 })
        ));
    }

    #[test]
    fn denoise_update_equal_alpha_is_identity() {
        let z = Latent::from_vec(vec![0.4, -0.9]).unwrap();
        let eps = Latent::from_vec(vec![1.0, 2.0]).unwrap();
        let out = denoise_update(0.5, 0.5, &z, &eps).unwrap();
        for (a, b) in out.values().iter().zip(z.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn denoise_step_is_affine_combination_for_fixed_eps() {
        let s = schedule_with(vec![0.8, 0.5]);
        let g = TimestepGrid::from_indices(&s, vec![0, 1]).unwrap();
        let eps0 = Latent::from_vec(vec![0.3, -0.2]).unwrap();
        let p = ConstantPredictor::new(eps0.clone());
        let z = Latent::from_vec(vec![1.0, 1.0]).unwrap();
        let out = ddim_denoise_step(&p, &s, &g, 1, &z).unwrap();
        let z0_hat = data_prediction(&s, &z, 1, &eps0).unwrap();
        let expect = z0_hat
            .scale(0.8f64.sqrt())
            .add_scaled(0.2f64.sqrt(), &eps0)
            .unwrap();
        assert_eq!(out.values(), expect.values());
        assert_eq!(p.nfe(), 1);
    }

    #[test]
    fn denoise_step_matches_gaussian_closed_form() {
        // with the exact isotropic-Gaussian predictor each step is the linear map
        //   z -> (s_prev * s * var + u_prev * u) / (abar * var + 1 - abar) * z
        let s = Arc::new(NoiseSchedule::default_scaled_linear());
        let g = TimestepGrid::uniform(&s, 10, 1).unwrap();
        let var = 2.5;
        let p = GaussianPredictor::new(var, Arc::clone(&s)).unwrap();
        let z = Latent::from_vec(vec![1.4, -2.2, 0.3]).unwrap();
        for i in [1, 5, 10] {
            let abar_prev = s.alpha_bar(g.timestep(i - 1)).unwrap();
            let abar_cur = s.alpha_bar(g.timestep(i)).unwrap();
            let c = (abar_prev.sqrt() * abar_cur.sqrt() * var
                + ((1.0 - abar_prev) * (1.0 - abar_cur)).sqrt())
                / (abar_cur * var + 1.0 - abar_cur);
            let out = ddim_denoise_step(&p, &s, &g, i, &z).unwrap();
            let expect = z.scale(c);
            for (a, b) in out.values().iter().zip(expect.values()) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn denoise_two_forms_agree() {
        // the standard step and its rearrangement through the data prediction
        // are the same affine map
        let s = Arc::new(NoiseSchedule::default_scaled_linear());
        let g = TimestepGrid::uniform(&s, 20, 1).unwrap();
        let model = crate::models::GaussianMixture::random(3, 4, 5).unwrap();
        let p = GmmPredictor::new(model, Arc::clone(&s));
        let mut rng = crate::seeding::rng_from(11, &[]);
        for i in [1, 7, 14, 20] {
            let z = Latent::from_vec((0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .unwrap();
            let t = g.timestep(i);
            let eps = p.predict(&z, t, &Conditioning::none()).unwrap();
            let abar_prev = s.alpha_bar(g.timestep(i - 1)).unwrap();
            let abar_cur = s.alpha_bar(t).unwrap();
            let route_a = denoise_update(abar_prev, abar_cur, &z, &eps).unwrap();

            let z0_hat = data_prediction(&s, &z, t, &eps).unwrap();
            let r = ((1.0 - abar_prev) / (1.0 - abar_cur)).sqrt();
            let eta = 1.0 - (abar_cur.sqrt() / abar_prev.sqrt()) * r;
            let route_b = z
                .scale(r)
                .add_scaled(eta * abar_prev.sqrt(), &z0_hat)
                .unwrap();
            for (a, b) in route_a.values().iter().zip(route_b.values()) {
                assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn denoise_sweep_single_step_grid() {
        let s = schedule_with(vec![0.9, 0.5]);
        let g = TimestepGrid::from_indices(&s, vec![0, 1]).unwrap();
        let p = GaussianPredictor::new(1.0, Arc::new(s.clone())).unwrap();
        let z = Latent::from_vec(vec![0.5, 0.5]).unwrap();
        let traj = ddim_denoise(&p, &s, &g, &z).unwrap();
        assert_eq!(traj.n_steps(), 1);
        assert_eq!(traj.nfe_used(), 1);
        let single = ddim_denoise_step(&p, &s, &g, 1, &z).unwrap();
        assert_eq!(traj.latent(0).values(), single.values());
    }

    #[test]
    fn denoise_sweep_nfe_and_determinism() {
        let s = Arc::new(NoiseSchedule::default_scaled_linear());
        let g = TimestepGrid::uniform(&s, 50, 1).unwrap();
        let model = crate::models::GaussianMixture::random(3, 8, 21).unwrap();
        let z = Latent::from_vec(vec![0.3; 8]).unwrap();

        let p1 = GmmPredictor::new(model.clone(), Arc::clone(&s));
        let before = p1.nfe();
        let t1 = ddim_denoise(&p1, &s, &g, &z).unwrap();
        assert_eq!(p1.nfe() - before, 50);
        assert_eq!(t1.nfe_used(), 50);
        assert!(t1.terminal().all_finite());
        assert_eq!(t1.terminal().dim(), 8);

        let p2 = GmmPredictor::new(model, Arc::clone(&s));
        let t2 = ddim_denoise(&p2, &s, &g, &z).unwrap();
        for (a, b) in t1.latents().iter().zip(t2.latents()) {
            assert_eq!(a.values(), b.values(), "trajectories must be bit-identical");
        }
    }

    #[test]
    fn trajectory_jsonl_dump() {
        let s = schedule_with(vec![0.9, 0.5, 0.2]);
        let g = TimestepGrid::from_indices(&s, vec![0, 1, 2]).unwrap();
        let p = GaussianPredictor::new(1.0, Arc::new(s.clone())).unwrap();
        let z = Latent::from_vec(vec![0.7, -0.1]).unwrap();
        let traj = ddim_denoise(&p, &s, &g, &z).unwrap();
        let mut buf = Vec::new();
        traj.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec["i"], 1);
        assert_eq!(rec["t_i"], 1);
        assert_eq!(rec["z"].as_array().unwrap().len(), 2);
        assert_eq!(rec["eps"].as_array().unwrap().len(), 2);
        assert_eq!(rec["data_pred"].as_array().unwrap().len(), 2);
    }
}
