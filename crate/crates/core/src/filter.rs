//! Latent-driver estimation: extended Kalman filter and particle filter.
//!
//! The model is a discrete state-space system
//!
//!   f_t = a(f_{t-1}, t-1) + w_t,   w_t ~ N(0, Q)
//!   y_t = h(f_t, t) + v_t,         v_t ~ N(0, R)
//!
//! The EKF applies the standard predict/update recursions with the drift
//! and observation Jacobians evaluated at the current mean; the particle
//! filter propagates with the same transition, reweights with the Gaussian
//! observation likelihood in the log domain, and applies stratified
//! resampling plus a small Gaussian jitter when the effective sample size
//! decays below a threshold.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("innovation covariance is numerically singular")]
    SingularInnovation,
    #[error("observation noise covariance is not positive definite")]
    BadObsNoise,
    #[error("process noise covariance is not PSD: {0}")]
    BadProcessNoise(String),
    #[error("all particle likelihoods vanished")]
    DegenerateLikelihood,
    #[error("particle filter needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

type StateFn = Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64>>;
type JacFn = Box<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64>>;
type CovFn = Box<dyn Fn(f64) -> DMatrix<f64>>;

/// Discrete nonlinear state-space model with additive Gaussian noise.
pub struct StateSpaceModel {
    pub dim_state: usize,
    pub dim_obs: usize,
    /// Discrete drift propagation a(f, t).
    pub transition: StateFn,
    /// Jacobian of the transition at (f, t).
    pub transition_jacobian: JacFn,
    /// Process noise covariance Q(t) (PSD).
    pub process_noise: CovFn,
    /// Observation map h(f, t).
    pub observation: StateFn,
    /// Jacobian of the observation at (f, t).
    pub observation_jacobian: JacFn,
    /// Observation noise covariance R(t) (PD).
    pub obs_noise: CovFn,
    /// Step size used to index time: step k happens at t = k * dt.
    pub dt: f64,
}

impl StateSpaceModel {
    /// Affine-Gaussian model: f' = A f + c, y = H f, with constant Q, R.
    pub fn affine(
        a: DMatrix<f64>,
        c: DVector<f64>,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        r: DMatrix<f64>,
        dt: f64,
    ) -> Self {
        let dim_state = a.nrows();
        let dim_obs = h.nrows();
        let a2 = a.clone();
        let h2 = h.clone();
        Self {
            dim_state,
            dim_obs,
            transition: Box::new(move |f, _| &a * f + &c),
            transition_jacobian: Box::new(move |_, _| a2.clone()),
            process_noise: Box::new(move |_| q.clone()),
            observation: Box::new(move |f, _| &h * f),
            observation_jacobian: Box::new(move |_, _| h2.clone()),
            obs_noise: Box::new(move |_| r.clone()),
            dt,
        }
    }

    /// Euler-discretized OU driver model observed through the identity map:
    /// f' = f + kappa (fbar - f) dt, y = f, diagonal Q = q dt, R = r.
    pub fn ou_identity(kappa: &DVector<f64>, fbar: &DVector<f64>, q: f64, r: f64, dt: f64) -> Self {
        let m = kappa.len();
        let mut a = DMatrix::identity(m, m);
        for i in 0..m {
            a[(i, i)] -= kappa[i] * dt;
        }
        let c = DVector::from_iterator(m, kappa.iter().zip(fbar.iter()).map(|(k, f)| k * f * dt));
        Self::affine(
            a,
            c,
            DMatrix::identity(m, m) * (q * dt),
            DMatrix::identity(m, m),
            DMatrix::identity(m, m) * r,
            dt,
        )
    }
}

/// Gaussian filtering belief.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

/// Weighted particle approximation of the posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleBelief {
    /// N x m particle states.
    pub particles: DMatrix<f64>,
    /// Normalized weights (sum 1).
    pub weights: DVector<f64>,
    /// Effective sample size 1 / sum w_i^2.
    pub ess: f64,
}

impl ParticleBelief {
    pub fn new(particles: DMatrix<f64>, weights: DVector<f64>) -> Result<Self, FilterError> {
        if particles.nrows() != weights.len() {
            return Err(FilterError::Dimension(
                "particle count and weight count differ".into(),
            ));
        }
        let total = weights.sum();
        if total <= 0.0 {
            return Err(FilterError::DegenerateLikelihood);
        }
        let weights = weights / total;
        let ess = effective_sample_size(&weights);
        Ok(Self { particles, weights, ess })
    }

    /// Equal-weight particle cloud drawn from a Gaussian.
    pub fn from_gaussian<R: Rng>(
        init: &GaussianBelief,
        n: usize,
        rng: &mut R,
    ) -> Result<Self, FilterError> {
        if n < 2 {
            return Err(FilterError::TooFewParticles(n));
        }
        let m = init.mean.len();
        let half = linalg::psd_sqrt(&init.cov, 1e-10).map_err(FilterError::BadProcessNoise)?;
        let mut particles = DMatrix::zeros(n, m);
        for i in 0..n {
            let draw = &init.mean + &half * rng::normal_vector(rng, m);
            particles.row_mut(i).copy_from(&draw.transpose());
        }
        let weights = DVector::from_element(n, 1.0 / n as f64);
        Ok(Self { ess: n as f64, particles, weights })
    }

    /// Weighted posterior mean.
    pub fn mean(&self) -> DVector<f64> {
        self.particles.transpose() * &self.weights
    }

    /// Weighted posterior covariance.
    pub fn cov(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let m = self.particles.ncols();
        let mut cov = DMatrix::zeros(m, m);
        for i in 0..self.particles.nrows() {
            let d = self.particles.row(i).transpose() - &mean;
            cov += self.weights[i] * &d * d.transpose();
        }
        cov
    }
}

pub fn effective_sample_size(weights: &DVector<f64>) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// One EKF predict/update cycle at time t:
/// mu- = a(mu), S- = A S A^T + Q, K = S- H^T (H S- H^T + R)^-1,
/// mu = mu- + K (y - h(mu-)), S = (I - K H) S-, then symmetrization.
pub fn ekf_step(
    model: &StateSpaceModel,
    belief: &GaussianBelief,
    y: &DVector<f64>,
    t: f64,
) -> Result<GaussianBelief, FilterError> {
    ekf_step_with(model, belief, y, t, false)
}

/// As [`ekf_step`] with an optional Joseph-form covariance update.
pub fn ekf_step_with(
    model: &StateSpaceModel,
    belief: &GaussianBelief,
    y: &DVector<f64>,
    t: f64,
    joseph: bool,
) -> Result<GaussianBelief, FilterError> {
    if y.len() != model.dim_obs {
        return Err(FilterError::Dimension(format!(
            "observation has dim {}, model expects {}",
            y.len(),
            model.dim_obs
        )));
    }
    let a = (model.transition_jacobian)(&belief.mean, t);
    let mean_pred = (model.transition)(&belief.mean, t);
    let cov_pred = &a * &belief.cov * a.transpose() + (model.process_noise)(t);

    let h = (model.observation_jacobian)(&mean_pred, t);
    let r = (model.obs_noise)(t);
    let innovation_cov = &h * &cov_pred * h.transpose() + &r;
    let inv = innovation_cov
        .clone()
        .try_inverse()
        .ok_or(FilterError::SingularInnovation)?;
    let gain = &cov_pred * h.transpose() * inv;
    let innovation = y - (model.observation)(&mean_pred, t);
    let mean = &mean_pred + &gain * innovation;
    let identity = DMatrix::identity(model.dim_state, model.dim_state);
    let cov = if joseph {
        let factor = &identity - &gain * &h;
        &factor * &cov_pred * factor.transpose() + &gain * &r * gain.transpose()
    } else {
        (&identity - &gain * &h) * &cov_pred
    };
    Ok(GaussianBelief::new(mean, linalg::sym_part(&cov)))
}

/// Particle-filter tuning knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PfConfig {
    /// Resample when ESS < ess_threshold * N.
    pub ess_threshold: f64,
    /// Jitter scale as a multiple of the per-dimension particle std.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self { ess_threshold: 0.5, jitter: 1e-3, seed: 0 }
    }
}

/// One particle-filter cycle: Euler-Maruyama propagation, log-domain
/// Gaussian reweighting, stratified resampling + jitter when the ESS drops
/// below the threshold. Returns the new belief and whether a resample
/// fired. The caller owns the RNG so a path stays reproducible.
pub fn pf_step<R: Rng>(
    model: &StateSpaceModel,
    belief: &ParticleBelief,
    y: &DVector<f64>,
    t: f64,
    cfg: &PfConfig,
    rng: &mut R,
) -> Result<(ParticleBelief, bool), FilterError> {
    let n = belief.particles.nrows();
    if n < 2 {
        return Err(FilterError::TooFewParticles(n));
    }
    let m = model.dim_state;
    let q = (model.process_noise)(t);
    let q_half = linalg::psd_sqrt(&q, 1e-10).map_err(FilterError::BadProcessNoise)?;
    let r = (model.obs_noise)(t);
    let r_chol = nalgebra::Cholesky::new(r).ok_or(FilterError::BadObsNoise)?;
    let log_det_r: f64 = r_chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let d_obs = model.dim_obs as f64;

    // propagate and accumulate log weights
    let mut particles = DMatrix::zeros(n, m);
    let mut log_w = DVector::zeros(n);
    for i in 0..n {
        let state = belief.particles.row(i).transpose();
        let propagated = (model.transition)(&state, t) + &q_half * rng::normal_vector(rng, m);
        particles.row_mut(i).copy_from(&propagated.transpose());
        let innov = y - (model.observation)(&propagated, t);
        let maha = innov.dot(&r_chol.solve(&innov));
        let loglik = -0.5 * (maha + log_det_r + d_obs * (2.0 * std::f64::consts::PI).ln());
        log_w[i] = belief.weights[i].max(f64::MIN_POSITIVE).ln() + loglik;
    }

    let max_lw = log_w.max();
    if !max_lw.is_finite() {
        return Err(FilterError::DegenerateLikelihood);
    }
    let mut weights = DVector::from_iterator(n, log_w.iter().map(|lw| (lw - max_lw).exp()));
    let total = weights.sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(FilterError::DegenerateLikelihood);
    }
    weights /= total;

    let ess = effective_sample_size(&weights);
    let mut resampled = false;
    if ess < cfg.ess_threshold * n as f64 {
        resampled = true;
        particles = stratified_resample(&particles, &weights, rng);
        // additive jitter scaled by the per-dimension spread
        if cfg.jitter > 0.0 {
            let stds: Vec<f64> = (0..m)
                .map(|j| {
                    let col = particles.column(j);
                    let mean = col.sum() / n as f64;
                    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
                })
                .collect();
            for i in 0..n {
                for j in 0..m {
                    particles[(i, j)] +=
                        cfg.jitter * stds[j] * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
        }
        weights = DVector::from_element(n, 1.0 / n as f64);
    }
    let ess = effective_sample_size(&weights);
    Ok((ParticleBelief { particles, weights, ess }, resampled))
}

/// Stratified resampling: one uniform per stratum (k + U_k)/N.
fn stratified_resample<R: Rng>(
    particles: &DMatrix<f64>,
    weights: &DVector<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = particles.nrows();
    let mut out = DMatrix::zeros(n, particles.ncols());
    let mut cumulative = 0.0;
    let mut idx = 0usize;
    let mut cum_weights = Vec::with_capacity(n);
    for w in weights.iter() {
        cumulative += w;
        cum_weights.push(cumulative);
    }
    for k in 0..n {
        let u = (k as f64 + rng.random::<f64>()) / n as f64;
        while idx < n - 1 && cum_weights[idx] < u {
            idx += 1;
        }
        out.row_mut(k).copy_from(&particles.row(idx));
    }
    out
}

/// Which filter backs a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Pf,
}

/// Full-run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub n_particles: usize,
    pub ess_threshold: f64,
    pub jitter: f64,
    pub seed: u64,
    /// Joseph-form EKF covariance update.
    pub joseph: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::Ekf,
            n_particles: 1000,
            ess_threshold: 0.5,
            jitter: 1e-3,
            seed: 0,
            joseph: false,
        }
    }
}

/// Posterior path summary: per-step mean and covariance, plus the ESS
/// series and resample count for particle runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorPath {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub ess: Vec<f64>,
    pub resample_count: usize,
    pub kind: FilterKind,
}

impl PosteriorPath {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Stack the posterior means into a T x m matrix.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        if self.means.is_empty() {
            return DMatrix::zeros(0, 0);
        }
        let m = self.means[0].len();
        DMatrix::from_fn(self.means.len(), m, |i, j| self.means[i][j])
    }
}

/// Run the chosen filter over a T x d_Y observation block.
pub fn run_filter(
    model: &StateSpaceModel,
    observations: &DMatrix<f64>,
    init: &GaussianBelief,
    cfg: &FilterConfig,
) -> Result<PosteriorPath, FilterError> {
    let t_len = observations.nrows();
    let mut means = Vec::with_capacity(t_len);
    let mut covs = Vec::with_capacity(t_len);
    let mut ess = Vec::new();
    let mut resample_count = 0usize;

    match cfg.kind {
        FilterKind::Ekf => {
            let mut belief = GaussianBelief::new(init.mean.clone(), init.cov.clone());
            for k in 0..t_len {
                let y = observations.row(k).transpose();
                belief = ekf_step_with(model, &belief, &y, k as f64 * model.dt, cfg.joseph)?;
                means.push(belief.mean.clone());
                covs.push(belief.cov.clone());
            }
        }
        FilterKind::Pf => {
            let pf_cfg = PfConfig {
                ess_threshold: cfg.ess_threshold,
                jitter: cfg.jitter,
                seed: cfg.seed,
            };
            let mut rng_init = rng::stream_rng(cfg.seed, 20);
            let mut rng_steps = rng::stream_rng(cfg.seed, 21);
            let mut belief = ParticleBelief::from_gaussian(init, cfg.n_particles, &mut rng_init)?;
            for k in 0..t_len {
                let y = observations.row(k).transpose();
                let (next, fired) =
                    pf_step(model, &belief, &y, k as f64 * model.dt, &pf_cfg, &mut rng_steps)?;
                belief = next;
                if fired {
                    resample_count += 1;
                }
                means.push(belief.mean());
                covs.push(belief.cov());
                ess.push(belief.ess);
            }
        }
    }
    Ok(PosteriorPath { means, covs, ess, resample_count, kind: cfg.kind })
}
