//! Continuous-state estimation for each UAV: an extended Kalman filter and
//! a bootstrap particle filter over position and velocity, plus the
//! predicted-collision check.
//!
//! State `s = [x, y, vx, vy]`. The commanded velocity `u` is tracked with a
//! first-order lag: `x' = x + dt v`, `v' = (1 - g) v + g u` with
//! `g = min(dt / tau, 1)`. Measurements are positions.

use nalgebra::{Cholesky, Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("covariance is not symmetric positive semi-definite (min eigenvalue {min_eig:.3e}, asymmetry {asym:.3e})")]
    NotPsd { min_eig: f64, asym: f64 },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("particle set is empty")]
    NoParticles,
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
}

const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContinuousState {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl ContinuousState {
    pub fn new(pos: Vec2, vel: Vec2) -> Self {
        Self { pos, vel }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.pos.x, self.pos.y, self.vel.x, self.vel.y)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self { pos: Vec2::new(v[0], v[1]), vel: Vec2::new(v[2], v[3]) }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.is_finite() && self.vel.is_finite()
    }
}

/// Serializable noise settings; [`NoiseConfig::model`] turns them into
/// per-step covariance matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per-step process standard deviation of position (m).
    pub sigma_pos: f64,
    /// Per-step process standard deviation of velocity (m/s).
    pub sigma_vel: f64,
    /// Measurement standard deviation (m).
    pub sigma_meas: f64,
    /// Velocity lag time constant (s).
    pub tau: f64,
    pub n_particles: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma_pos: 0.05, sigma_vel: 0.1, sigma_meas: 1.0, tau: 0.2, n_particles: 500, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        for (n, v) in [("sigma_pos", self.sigma_pos), ("sigma_vel", self.sigma_vel), ("sigma_meas", self.sigma_meas)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FilterError::InvalidNoise(format!("{n} must be >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(FilterError::InvalidNoise(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.n_particles == 0 {
            return Err(FilterError::InvalidNoise("n_particles must be >= 1".into()));
        }
        Ok(())
    }

    /// Matrices used by the filters. The measurement variance is floored at
    /// 1e-6 so the innovation covariance stays invertible.
    pub fn model(&self) -> NoiseModel {
        let (p, v) = (self.sigma_pos.powi(2), self.sigma_vel.powi(2));
        NoiseModel {
            q: Matrix4::from_diagonal(&Vector4::new(p, p, v, v)),
            r: Matrix2::identity() * self.sigma_meas.powi(2).max(1e-6),
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    pub tau: f64,
}

pub fn transition_matrix(dt: f64, tau: f64) -> Matrix4<f64> {
    let g = (dt / tau).min(1.0);
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f[(2, 2)] = 1.0 - g;
    f[(3, 3)] = 1.0 - g;
    f
}

pub fn control_matrix(dt: f64, tau: f64) -> Matrix4x2<f64> {
    let g = (dt / tau).min(1.0);
    let mut b = Matrix4x2::zeros();
    b[(2, 0)] = g;
    b[(3, 1)] = g;
    b
}

pub fn measurement_matrix() -> Matrix2x4<f64> {
    let mut h = Matrix2x4::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h
}

/// Noise-free transition.
pub fn propagate(s: &ContinuousState, control: Vec2, dt: f64, tau: f64) -> ContinuousState {
    let v = transition_matrix(dt, tau) * s.to_vector() + control_matrix(dt, tau) * Vector2::new(control.x, control.y);
    ContinuousState::from_vector(&v)
}

/// Mean positions over `steps` noise-free steps under a constant command.
pub fn predict_positions(s: &ContinuousState, control: Vec2, dt: f64, tau: f64, steps: usize) -> Vec<Vec2> {
    let mut cur = *s;
    (0..steps)
        .map(|_| {
            cur = propagate(&cur, control, dt, tau);
            cur.pos
        })
        .collect()
}

pub fn check_psd<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> Result<(), FilterError>
where
    nalgebra::Const<N>: nalgebra::DimMin<nalgebra::Const<N>, Output = nalgebra::Const<N>>,
    nalgebra::Const<N>: nalgebra::ToTypenum,
    nalgebra::Const<N>: nalgebra::DimSub<nalgebra::U1>,
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<<nalgebra::Const<N> as nalgebra::DimSub<nalgebra::U1>>::Output>,
{
    let scale = m.norm().max(1.0);
    let asym = (m - m.transpose()).abs().max();
    let min_eig = if m.iter().all(|x| x.is_finite()) {
        m.symmetric_eigen().eigenvalues.min()
    } else {
        f64::NAN
    };
    if asym > PSD_TOL * scale || !(min_eig >= -PSD_TOL * scale) {
        return Err(FilterError::NotPsd { min_eig, asym });
    }
    Ok(())
}

fn symmetrize(m: Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub mean: ContinuousState,
    pub cov: Matrix4<f64>,
}

impl EkfState {
    pub fn new(mean: ContinuousState, cov: Matrix4<f64>) -> Self {
        Self { mean, cov }
    }

    /// Isotropic prior with position and velocity standard deviations.
    pub fn with_std(mean: ContinuousState, pos_std: f64, vel_std: f64) -> Self {
        let (p, v) = (pos_std * pos_std, vel_std * vel_std);
        Self { mean, cov: Matrix4::from_diagonal(&Vector4::new(p, p, v, v)) }
    }
}

pub fn ekf_predict(state: &EkfState, control: Vec2, dt: f64, noise: &NoiseModel) -> Result<EkfState, FilterError> {
    check_psd(&state.cov)?;
    // The transition is linear, so its Jacobian is the transition matrix.
    let f = transition_matrix(dt, noise.tau);
    let mean = propagate(&state.mean, control, dt, noise.tau);
    let cov = symmetrize(f * state.cov * f.transpose() + noise.q);
    Ok(EkfState { mean, cov })
}

pub fn ekf_update(state: &EkfState, measurement: Vec2, noise: &NoiseModel) -> Result<EkfState, FilterError> {
    let h = measurement_matrix();
    let s = h * state.cov * h.transpose() + noise.r;
    let s_inv = s.try_inverse().ok_or(FilterError::SingularInnovation)?;
    if s.determinant().abs() < 1e-300 {
        return Err(FilterError::SingularInnovation);
    }
    let k = state.cov * h.transpose() * s_inv;
    let x = state.mean.to_vector();
    let innov = Vector2::new(measurement.x, measurement.y) - h * x;
    let mean = ContinuousState::from_vector(&(x + k * innov));
    let cov = symmetrize((Matrix4::identity() - k * h) * state.cov);
    Ok(EkfState { mean, cov })
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<Vector4<f64>>,
    pub weights: Vec<f64>,
    /// Set when the last reweighting carried no usable likelihood mass and
    /// the weights were reset to uniform.
    pub degenerate: bool,
    rng: ChaCha8Rng,
}

fn sqrt_psd(m: &Matrix4<f64>) -> Matrix4<f64> {
    if let Some(c) = Cholesky::new(*m) {
        return c.l();
    }
    let e = m.symmetric_eigen();
    let d = Matrix4::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()));
    e.eigenvectors * d
}

fn gaussian4(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    Vector4::from_fn(|_, _| rng.sample(StandardNormal))
}

impl ParticleSet {
    /// Draws `n` particles from `N(mean, cov)`.
    pub fn from_gaussian(mean: &ContinuousState, cov: &Matrix4<f64>, n: usize, seed: u64) -> Result<Self, FilterError> {
        if n == 0 {
            return Err(FilterError::NoParticles);
        }
        check_psd(cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = sqrt_psd(cov);
        let m = mean.to_vector();
        let particles = (0..n).map(|_| m + l * gaussian4(&mut rng)).collect();
        Ok(Self { particles, weights: vec![1.0 / n as f64; n], degenerate: false, rng })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn mean(&self) -> ContinuousState {
        let m = self
            .particles
            .iter()
            .zip(&self.weights)
            .fold(Vector4::zeros(), |acc, (p, w)| acc + p * *w);
        ContinuousState::from_vector(&m)
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn systematic_resample(&mut self) {
        let n = self.particles.len();
        let u0: f64 = self.rng.random_range(0.0..1.0 / n as f64);
        let mut out = Vec::with_capacity(n);
        let mut c = self.weights[0];
        let mut i = 0;
        for k in 0..n {
            let u = u0 + k as f64 / n as f64;
            while u > c && i + 1 < n {
                i += 1;
                c += self.weights[i];
            }
            out.push(self.particles[i]);
        }
        self.particles = out;
        self.weights = vec![1.0 / n as f64; n];
    }
}

/// Propagate with sampled process noise, reweight by the Gaussian position
/// likelihood, and resample systematically when ESS drops below `N/2`.
pub fn pf_step(
    set: &ParticleSet,
    control: Vec2,
    measurement: Vec2,
    noise: &NoiseModel,
    dt: f64,
) -> Result<ParticleSet, FilterError> {
    if set.is_empty() {
        return Err(FilterError::NoParticles);
    }
    let mut next = set.clone();
    let f = transition_matrix(dt, noise.tau);
    let bu = control_matrix(dt, noise.tau) * Vector2::new(control.x, control.y);
    let lq = sqrt_psd(&noise.q);
    let r_inv = noise.r.try_inverse().ok_or(FilterError::SingularInnovation)?;
    let z = Vector2::new(measurement.x, measurement.y);
    let mut logw = Vec::with_capacity(next.len());
    for (p, &w) in next.particles.iter_mut().zip(&set.weights) {
        *p = f * *p + bu + lq * gaussian4(&mut next.rng);
        let e = z - Vector2::new(p[0], p[1]);
        logw.push(w.ln() - 0.5 * (e.transpose() * r_inv * e)[(0, 0)]);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    next.degenerate = !(max > -700.0) || !max.is_finite();
    if next.degenerate {
        log::warn!("particle filter: measurement far outside the particle cloud; resetting weights");
        let n = next.len();
        next.weights = vec![1.0 / n as f64; n];
    } else {
        let ws: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = ws.iter().sum();
        next.weights = ws.into_iter().map(|w| w / total).collect();
    }
    if next.effective_sample_size() < next.len() as f64 / 2.0 {
        next.systematic_resample();
    }
    Ok(next)
}

/// Unordered UAV pairs whose predicted positions are closer than `d_min`.
pub fn predicted_collision(predictions: &[Vec2], d_min: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..predictions.len() {
        for j in (i + 1)..predictions.len() {
            if predictions[i].distance(predictions[j]) < d_min {
                out.push((i, j));
            }
        }
    }
    out
}
