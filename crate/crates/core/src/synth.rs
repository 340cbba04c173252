//! Synthetic markets with known ground truth.
//!
//! Two generators back the test suite: a mean-reverting multi-driver OU
//! market (drivers follow dF = kappa(fbar - F)dt + Sigma_F^{1/2} dW, assets
//! load linearly on the drivers) and an i.i.d. linear-Gaussian star-DAG in
//! which conditional independence of assets given the drivers holds by
//! construction.
//!
//! Output is bit-reproducible from the seed: each noise source (driver,
//! asset, observation) draws from its own counter-based stream.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance {name} is not PSD: {detail}")]
    NotPsd { name: &'static str, detail: String },
    #[error("kappa must be positive-stable (eigenvalue real part {0:.3e} < 0)")]
    KappaUnstable(f64),
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
}

/// Specification of the OU multi-driver market.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OUMarketSpec {
    /// Driver count.
    pub m: usize,
    /// Asset count.
    pub n: usize,
    /// m x m mean-reversion matrix; eigenvalues must have nonnegative real
    /// part (zero degenerates to a random walk).
    pub kappa: DMatrix<f64>,
    /// Long-run driver mean.
    pub fbar: DVector<f64>,
    /// m x m PSD driver diffusion covariance.
    pub sigma_f: DMatrix<f64>,
    /// n x m loading matrix.
    pub b: DMatrix<f64>,
    /// n x n PSD idiosyncratic covariance.
    pub sigma_eps: DMatrix<f64>,
    /// d_Y x d_Y PSD observation noise covariance (d_Y = m for the default
    /// identity observation map).
    pub obs_noise: DMatrix<f64>,
    /// Step size in years.
    pub dt: f64,
    /// Number of steps.
    pub steps: usize,
    pub seed: u64,
}

/// Generated synthetic market block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOutput {
    /// T x m driver path (state after each step).
    pub drivers: DMatrix<f64>,
    /// T x n asset excess-return increments.
    pub assets: DMatrix<f64>,
    /// T x d_Y observation increments.
    pub observations: DMatrix<f64>,
    /// True n x m loadings.
    pub true_betas: DMatrix<f64>,
}

fn check_psd(name: &'static str, m: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthError> {
    linalg::psd_sqrt(m, 1e-10).map_err(|detail| SynthError::NotPsd { name, detail })
}

/// Euler-Maruyama simulation of the OU multi-driver market.
///
/// Driver path: F_{t+1} = F_t + kappa (fbar - F_t) dt + Sigma_F^{1/2} sqrt(dt) xi.
/// Asset increments: dA_t = B F_t dt + Sigma_eps^{1/2} sqrt(dt) xi^A.
/// Observation increments: dY_t = F_t dt + R^{1/2} sqrt(dt) xi^V (identity
/// observation map).
pub fn gen_ou_market(spec: &OUMarketSpec) -> Result<SynthOutput, SynthError> {
    if spec.dt <= 0.0 {
        return Err(SynthError::BadDt(spec.dt));
    }
    if spec.kappa.nrows() != spec.m || spec.kappa.ncols() != spec.m {
        return Err(SynthError::Dimension(format!(
            "kappa is {}x{}, expected {}x{}",
            spec.kappa.nrows(),
            spec.kappa.ncols(),
            spec.m,
            spec.m
        )));
    }
    if spec.b.nrows() != spec.n || spec.b.ncols() != spec.m {
        return Err(SynthError::Dimension(format!(
            "B is {}x{}, expected {}x{}",
            spec.b.nrows(),
            spec.b.ncols(),
            spec.n,
            spec.m
        )));
    }
    if spec.fbar.len() != spec.m {
        return Err(SynthError::Dimension("fbar length".into()));
    }
    // positive-stable check; zero eigenvalues (random walk) are allowed
    let eigs = spec.kappa.complex_eigenvalues();
    if let Some(re) = eigs.iter().map(|c| c.re).reduce(f64::min) {
        if re < -1e-12 {
            return Err(SynthError::KappaUnstable(re));
        }
    }
    let sf_half = check_psd("sigma_f", &spec.sigma_f)?;
    let se_half = check_psd("sigma_eps", &spec.sigma_eps)?;
    let obs_half = check_psd("obs_noise", &spec.obs_noise)?;
    let d_y = spec.obs_noise.nrows();

    let mut rng_f = rng::stream_rng(spec.seed, 0);
    let mut rng_a = rng::stream_rng(spec.seed, 1);
    let mut rng_v = rng::stream_rng(spec.seed, 2);

    let sqrt_dt = spec.dt.sqrt();
    let mut f = spec.fbar.clone();
    let mut drivers = DMatrix::zeros(spec.steps, spec.m);
    let mut assets = DMatrix::zeros(spec.steps, spec.n);
    let mut observations = DMatrix::zeros(spec.steps, d_y);

    for t in 0..spec.steps {
        let da = &spec.b * &f * spec.dt + &se_half * rng::normal_vector(&mut rng_a, spec.n) * sqrt_dt;
        assets.row_mut(t).copy_from(&da.transpose());
        // identity observation map h(F) = F (padded/truncated to d_Y)
        let mut dy = DVector::zeros(d_y);
        for k in 0..d_y.min(spec.m) {
            dy[k] = f[k] * spec.dt;
        }
        dy += &obs_half * rng::normal_vector(&mut rng_v, d_y) * sqrt_dt;
        observations.row_mut(t).copy_from(&dy.transpose());

        let drift = &spec.kappa * (&spec.fbar - &f) * spec.dt;
        f += drift + &sf_half * rng::normal_vector(&mut rng_f, spec.m) * sqrt_dt;
        drivers.row_mut(t).copy_from(&f.transpose());
    }

    Ok(SynthOutput {
        drivers,
        assets,
        observations,
        true_betas: spec.b.clone(),
    })
}

/// Linear-Gaussian star-DAG: D_t ~ N(0, Sigma_D) i.i.d.,
/// A_{i,t} = beta_i^T D_t + eps_{i,t} with diagonal Gaussian noise.
///
/// Conditional on the drivers the assets are independent by construction,
/// so residual cross-correlation after regressing on D vanishes in
/// probability.
pub fn gen_gaussian_scm(
    m: usize,
    n: usize,
    t: usize,
    betas: &DMatrix<f64>,
    sigma_d: &DMatrix<f64>,
    psi: &DVector<f64>,
    seed: u64,
) -> Result<SynthOutput, SynthError> {
    if betas.nrows() != n || betas.ncols() != m {
        return Err(SynthError::Dimension(format!(
            "betas is {}x{}, expected {}x{}",
            betas.nrows(),
            betas.ncols(),
            n,
            m
        )));
    }
    if sigma_d.nrows() != m || sigma_d.ncols() != m {
        return Err(SynthError::Dimension("sigma_d shape".into()));
    }
    if psi.len() != n {
        return Err(SynthError::Dimension("psi length".into()));
    }
    if psi.iter().any(|&v| v <= 0.0) {
        return Err(SynthError::NotPositive("psi"));
    }
    let sd_half = check_psd("sigma_d", sigma_d)?;
    let psi_half = DVector::from_iterator(n, psi.iter().map(|v| v.sqrt()));

    let mut rng_d = rng::stream_rng(seed, 0);
    let mut rng_e = rng::stream_rng(seed, 1);

    let mut drivers = DMatrix::zeros(t, m);
    let mut assets = DMatrix::zeros(t, n);
    for row in 0..t {
        let d = &sd_half * rng::normal_vector(&mut rng_d, m);
        let eps = rng::normal_vector(&mut rng_e, n);
        let a = betas * &d
            + DVector::from_iterator(n, eps.iter().zip(psi_half.iter()).map(|(e, s)| e * s));
        drivers.row_mut(row).copy_from(&d.transpose());
        assets.row_mut(row).copy_from(&a.transpose());
    }
    Ok(SynthOutput {
        observations: drivers.clone(),
        drivers,
        assets,
        true_betas: betas.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_spec(kappa: f64, seed: u64, steps: usize, dt: f64) -> OUMarketSpec {
        OUMarketSpec {
            m: 1,
            n: 2,
            kappa: DMatrix::from_element(1, 1, kappa),
            fbar: DVector::zeros(1),
            sigma_f: DMatrix::identity(1, 1),
            b: DMatrix::from_column_slice(2, 1, &[1.0, 0.5]),
            sigma_eps: DMatrix::identity(2, 2) * 0.1,
            obs_noise: DMatrix::identity(1, 1) * 0.01,
            dt,
            steps,
            seed,
        }
    }

    #[test]
    fn zero_kappa_gives_random_walk_variance() {
        // var(F_T) should be T*dt within 5 standard errors across seeds
        let steps = 400;
        let dt = 0.01;
        let n_seeds = 400;
        let finals: Vec<f64> = (0..n_seeds)
            .map(|s| {
                let out = gen_ou_market(&scalar_spec(0.0, s as u64, steps, dt)).unwrap();
                out.drivers[(steps - 1, 0)]
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / n_seeds as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_seeds - 1) as f64;
        let expected = steps as f64 * dt;
        // sd of the sample variance of a Gaussian: sigma^2 sqrt(2/(K-1))
        let se = expected * (2.0 / (n_seeds as f64 - 1.0)).sqrt();
        assert!(
            (var - expected).abs() < 5.0 * se,
            "var {var} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn positive_kappa_matches_stationary_variance() {
        // long-horizon variance ~ Sigma_F / (2 kappa) over 10 seeds
        let kappa = 2.0;
        let steps = 20_000;
        let dt = 0.01;
        let mut values = Vec::new();
        for seed in 0..10u64 {
            let out = gen_ou_market(&scalar_spec(kappa, seed, steps, dt)).unwrap();
            // discard burn-in, then pool path values
            for t in steps / 4..steps {
                values.push(out.drivers[(t, 0)]);
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        let expected = 1.0 / (2.0 * kappa);
        // autocorrelated draws: effective sample size ~ len * dt * kappa
        let ess = values.len() as f64 * dt * kappa;
        let se = expected * (2.0 / ess).sqrt();
        assert!(
            (var - expected).abs() < 5.0 * se,
            "var {var} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = scalar_spec(1.0, 99, 64, 0.02);
        let a = gen_ou_market(&spec).unwrap();
        let b = gen_ou_market(&spec).unwrap();
        assert_eq!(a.drivers, b.drivers);
        assert_eq!(a.assets, b.assets);
        assert_eq!(a.observations, b.observations);
    }

    #[test]
    fn negative_kappa_rejected() {
        let spec = scalar_spec(-0.5, 1, 10, 0.01);
        assert!(matches!(
            gen_ou_market(&spec),
            Err(SynthError::KappaUnstable(_))
        ));
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let mut spec = scalar_spec(1.0, 1, 10, 0.01);
        spec.sigma_f = DMatrix::from_element(1, 1, -1.0);
        assert!(matches!(gen_ou_market(&spec), Err(SynthError::NotPsd { .. })));
    }

    #[test]
    fn scm_zero_betas_give_independent_assets() {
        let t = 4000;
        let betas = DMatrix::zeros(3, 1);
        let out = gen_gaussian_scm(
            1,
            3,
            t,
            &betas,
            &DMatrix::identity(1, 1),
            &DVector::from_element(3, 1.0),
            42,
        )
        .unwrap();
        let bound = 4.0 / (t as f64).sqrt();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let ci: Vec<f64> = out.assets.column(i).iter().copied().collect();
                let cj: Vec<f64> = out.assets.column(j).iter().copied().collect();
                let corr = crate::linalg::pearson(&ci, &cj).unwrap();
                assert!(corr.abs() < bound, "corr({i},{j}) = {corr}");
            }
        }
    }

    #[test]
    fn scm_shared_driver_gives_expected_correlation() {
        // beta1 = beta2 = 1, Sigma_D = 1, psi = 1 -> corr = 0.5
        let t = 20_000;
        let betas = DMatrix::from_element(2, 1, 1.0);
        let out = gen_gaussian_scm(
            1,
            2,
            t,
            &betas,
            &DMatrix::identity(1, 1),
            &DVector::from_element(2, 1.0),
            7,
        )
        .unwrap();
        let c0: Vec<f64> = out.assets.column(0).iter().copied().collect();
        let c1: Vec<f64> = out.assets.column(1).iter().copied().collect();
        let corr = crate::linalg::pearson(&c0, &c1).unwrap();
        // se of a correlation estimate ~ (1 - rho^2)/sqrt(T)
        let se = (1.0 - 0.25) / (t as f64).sqrt();
        assert!((corr - 0.5).abs() < 5.0 * se, "corr = {corr}");
    }

    #[test]
    fn scm_conditional_residuals_are_uncorrelated() {
        let t = 5000;
        let betas = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, 0.8, -0.5, -0.2, 1.1]);
        let out = gen_gaussian_scm(
            2,
            3,
            t,
            &betas,
            &DMatrix::identity(2, 2),
            &DVector::from_element(3, 1.0),
            13,
        )
        .unwrap();
        // regress each asset on true drivers, inspect residual correlations
        let x = &out.drivers;
        let xtx = x.transpose() * x;
        let chol = nalgebra::Cholesky::new(xtx).unwrap();
        let mut residuals = DMatrix::zeros(t, 3);
        for i in 0..3 {
            let y = out.assets.column(i).into_owned();
            let beta = chol.solve(&(x.transpose() * &y));
            residuals.set_column(i, &(y - x * beta));
        }
        let bound = 4.0 / (t as f64).sqrt();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let ci: Vec<f64> = residuals.column(i).iter().copied().collect();
                let cj: Vec<f64> = residuals.column(j).iter().copied().collect();
                let corr = crate::linalg::pearson(&ci, &cj).unwrap();
                assert!(corr.abs() < bound, "residual corr({i},{j}) = {corr}");
            }
        }
    }

    #[test]
    fn scm_determinism() {
        let betas = DMatrix::from_element(2, 1, 1.0);
        let args = (
            1usize,
            2usize,
            50usize,
            &betas,
            DMatrix::identity(1, 1),
            DVector::from_element(2, 1.0),
        );
        let a = gen_gaussian_scm(args.0, args.1, args.2, args.3, &args.4, &args.5, 5).unwrap();
        let b = gen_gaussian_scm(args.0, args.1, args.2, args.3, &args.4, &args.5, 5).unwrap();
        assert_eq!(a.assets, b.assets);
        assert_relative_eq!(a.drivers[(0, 0)], b.drivers[(0, 0)]);
    }
}
