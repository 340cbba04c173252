//! Common-driver identification screens.
//!
//! Three screens select m drivers from a T x M candidate library:
//!
//! - residual-commonality minimization ("combo"): greedy forward selection
//!   on the mean absolute pairwise residual correlation Psi(S);
//! - marginal correlation with breadth and redundancy control ("corr"):
//!   lexicographic (Repetition, Strength) ranking with a pairwise
//!   redundancy cap;
//! - evidence screen ("bayes"): per-asset Gaussian BIC summed across
//!   assets, smallest total scores win.
//!
//! On top of the screens sit the screening-off objective in its residual
//! covariance form, an event-partition form (k-means cells), the
//! coverage/overlap surrogate J, and a condition-number guard that picks
//! the driver cardinality.
//!
//! All screens standardize library columns in-window first, so they are
//! invariant to per-column affine rescaling of the library.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng;

/// sigma^2 floor for degenerate regression fits in the BIC screen.
const SIGMA2_FLOOR: f64 = 1e-12;
/// Event-partition cells with fewer points than this are skipped.
const MIN_CELL_COUNT: usize = 10;
/// Maximum Lloyd iterations for the event partition.
const KMEANS_MAX_ITER: usize = 50;
/// Psi reductions below this count as zero (duplicate columns reduce Psi
/// by exactly zero in exact arithmetic, +-1e-16 in floats).
const REDUCTION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("window length {t} too short for |S| = {k} (need t > k + 2)")]
    WindowTooShort { t: usize, k: usize },
    #[error("residual column {0} has zero variance (degenerate fit)")]
    ZeroVarianceResidual(usize),
    #[error("candidate column {0} has zero variance")]
    ZeroVarianceColumn(usize),
    #[error("selection set is empty")]
    EmptySelection,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("library has {m_lib} candidates, need at least {m}")]
    NotEnoughCandidates { m_lib: usize, m: usize },
}

/// Which screen produced a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreenMethod {
    Combo,
    Corr,
    Bayes,
}

/// Tuning knobs for the screens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    /// Target driver count.
    pub m: usize,
    /// Coverage correlation threshold tau > 0.
    pub tau: f64,
    /// Redundancy cap rho_max in (0, 1].
    pub rho_max: f64,
    /// epsilon-SCCS tolerance; G > m*epsilon is reported via a flag.
    pub epsilon: f64,
    /// Surrogate-J weight on G.
    pub alpha: f64,
    /// Surrogate-J weight on coverage.
    pub beta: f64,
    /// Surrogate-J weight on overlap.
    pub gamma: f64,
    /// Condition-number cap kappa_max > 1 for the guard.
    pub kappa_max: f64,
    /// Marginal screening-improvement threshold eta > 0 for the guard.
    pub eta: f64,
    /// Number of event-partition cells L >= 2.
    pub bins: usize,
    /// Ridge weight for residual regressions.
    pub ridge: f64,
    /// Seed for the k-means event partition.
    pub seed: u64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            m: 3,
            tau: 0.3,
            rho_max: 0.9,
            epsilon: 0.05,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            kappa_max: 1e4,
            eta: 1e-3,
            bins: 5,
            ridge: 1e-8,
            seed: 0,
        }
    }
}

impl ScreenConfig {
    fn validate(&self) -> Result<(), SelectError> {
        if self.tau <= 0.0 {
            return Err(SelectError::BadConfig("tau must be > 0".into()));
        }
        if !(self.rho_max > 0.0 && self.rho_max <= 1.0) {
            return Err(SelectError::BadConfig("rho_max must lie in (0, 1]".into()));
        }
        if self.kappa_max <= 1.0 {
            return Err(SelectError::BadConfig("kappa_max must be > 1".into()));
        }
        if self.eta <= 0.0 {
            return Err(SelectError::BadConfig("eta must be > 0".into()));
        }
        if self.bins < 2 {
            return Err(SelectError::BadConfig("bins must be >= 2".into()));
        }
        if self.ridge < 0.0 {
            return Err(SelectError::BadConfig("ridge must be >= 0".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(SelectError::BadConfig("J weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of a screen: ordered selected columns plus summary scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriverSelection {
    /// Selected library column indices, in selection order.
    pub indices: Vec<usize>,
    /// Psi after each greedy step (combo only; empty otherwise).
    pub psi_path: Vec<f64>,
    /// Residual-covariance screening objective of the final set.
    pub g_value: f64,
    /// Coverage/overlap surrogate of the final set.
    pub j_value: f64,
    /// Condition number of B^T B for the fitted sensitivities.
    pub kappa: f64,
    pub method: ScreenMethod,
    /// True when the screen stopped short of the requested m.
    pub truncated: bool,
    /// True when G exceeds m * epsilon (reported, never enforced).
    pub epsilon_flag: bool,
}

/// Ridge regression of every return column on the selected library columns.
/// Returns are centered; the selected columns are assumed standardized.
/// With an empty selection the residuals are the centered returns.
fn residuals_on(
    returns: &DMatrix<f64>,
    lib_std: &DMatrix<f64>,
    s: &[usize],
    ridge: f64,
) -> Result<DMatrix<f64>, SelectError> {
    let t = returns.nrows();
    if t <= s.len() + 2 {
        return Err(SelectError::WindowTooShort { t, k: s.len() });
    }
    let mut y = returns.clone();
    linalg::center_columns(&mut y);
    if s.is_empty() {
        return Ok(y);
    }
    let x = lib_std.select_columns(s.iter());
    let mut xtx = x.transpose() * &x;
    for i in 0..s.len() {
        xtx[(i, i)] += ridge;
    }
    let xty = x.transpose() * &y;
    let coefs = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| SelectError::BadConfig("singular ridge system".into()))?;
    Ok(y - x * coefs)
}

/// OLS sensitivities B (n x |S|) of returns on the selected columns,
/// computed via the pseudoinverse so duplicated columns stay well defined.
fn sensitivities_on(returns: &DMatrix<f64>, lib_std: &DMatrix<f64>, s: &[usize]) -> DMatrix<f64> {
    let x = lib_std.select_columns(s.iter());
    let mut y = returns.clone();
    linalg::center_columns(&mut y);
    (linalg::pinv(&x, 1e-12) * y).transpose()
}

/// Mean absolute pairwise residual correlation Psi(S) in [0, 1].
pub fn psi_residual(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    s: &[usize],
    ridge: f64,
) -> Result<f64, SelectError> {
    let (lib_std, _) = linalg::standardize_columns(library);
    psi_residual_std(returns, &lib_std, s, ridge)
}

fn psi_residual_std(
    returns: &DMatrix<f64>,
    lib_std: &DMatrix<f64>,
    s: &[usize],
    ridge: f64,
) -> Result<f64, SelectError> {
    let res = residuals_on(returns, lib_std, s, ridge)?;
    let n = res.ncols();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| res.column(j).iter().copied().collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            match linalg::pearson(&cols[i], &cols[j]) {
                Some(c) => total += c.abs(),
                None => {
                    let var_i: f64 = {
                        let mean = cols[i].iter().sum::<f64>() / cols[i].len() as f64;
                        cols[i].iter().map(|v| (v - mean).powi(2)).sum()
                    };
                    let bad = if var_i <= 0.0 { i } else { j };
                    return Err(SelectError::ZeroVarianceResidual(bad));
                }
            }
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok(total / pairs as f64)
}

/// Residual-covariance form of the screening objective:
/// G_cov(S) = sum over i<j of |Cov(res_i, res_j)|.
pub fn g_cov(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    s: &[usize],
    ridge: f64,
) -> Result<f64, SelectError> {
    let (lib_std, _) = linalg::standardize_columns(library);
    g_cov_std(returns, &lib_std, s, ridge)
}

fn g_cov_std(
    returns: &DMatrix<f64>,
    lib_std: &DMatrix<f64>,
    s: &[usize],
    ridge: f64,
) -> Result<f64, SelectError> {
    let res = residuals_on(returns, lib_std, s, ridge)?;
    let t = res.nrows() as f64;
    let n = res.ncols();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let cov = res.column(i).dot(&res.column(j)) / t;
            total += cov.abs();
        }
    }
    Ok(total)
}

/// Number of distinct asset pairs for an n-asset panel.
pub fn pair_count(n: usize) -> usize {
    n * (n - 1) / 2
}

fn coverage_set(lib_std: &DMatrix<f64>, returns: &DMatrix<f64>, k: usize, tau: f64) -> Vec<bool> {
    let cand: Vec<f64> = lib_std.column(k).iter().copied().collect();
    (0..returns.ncols())
        .map(|i| {
            let asset: Vec<f64> = returns.column(i).iter().copied().collect();
            linalg::pearson(&cand, &asset)
                .map(|c| c.abs() >= tau)
                .unwrap_or(false)
        })
        .collect()
}

/// Coverage/overlap surrogate
/// J(S) = alpha G_cov(S) - beta sum_k Cov(D_k) + gamma sum_{k<l} Overlap(D_k, D_l).
pub fn surrogate_j(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    s: &[usize],
    cfg: &ScreenConfig,
) -> Result<f64, SelectError> {
    cfg.validate()?;
    if s.is_empty() {
        return Err(SelectError::EmptySelection);
    }
    let (lib_std, _) = linalg::standardize_columns(library);
    surrogate_j_std(returns, &lib_std, s, cfg)
}

fn surrogate_j_std(
    returns: &DMatrix<f64>,
    lib_std: &DMatrix<f64>,
    s: &[usize],
    cfg: &ScreenConfig,
) -> Result<f64, SelectError> {
    let g = g_cov_std(returns, lib_std, s, cfg.ridge)?;
    let covers: Vec<Vec<bool>> = s
        .iter()
        .map(|&k| coverage_set(lib_std, returns, k, cfg.tau))
        .collect();
    let coverage: usize = covers.iter().map(|c| c.iter().filter(|&&b| b).count()).sum();
    let mut overlap = 0usize;
    for a in 0..covers.len() {
        for b in (a + 1)..covers.len() {
            overlap += covers[a]
                .iter()
                .zip(covers[b].iter())
                .filter(|(&x, &y)| x && y)
                .count();
        }
    }
    Ok(cfg.alpha * g - cfg.beta * coverage as f64 + cfg.gamma * overlap as f64)
}

fn finish_selection(
    returns: &DMatrix<f64>,
    lib_std: &DMatrix<f64>,
    indices: Vec<usize>,
    psi_path: Vec<f64>,
    method: ScreenMethod,
    truncated: bool,
    cfg: &ScreenConfig,
) -> Result<DriverSelection, SelectError> {
    let (g_value, j_value, kappa) = if indices.is_empty() {
        (g_cov_std(returns, lib_std, &[], cfg.ridge)?, 0.0, f64::INFINITY)
    } else {
        let g = g_cov_std(returns, lib_std, &indices, cfg.ridge)?;
        let j = surrogate_j_std(returns, lib_std, &indices, cfg)?;
        let b = sensitivities_on(returns, lib_std, &indices);
        let kappa = linalg::condition_number_sym(&(b.transpose() * &b));
        (g, j, kappa)
    };
    let epsilon_flag = g_value > cfg.epsilon * indices.len().max(1) as f64;
    Ok(DriverSelection {
        indices,
        psi_path,
        g_value,
        j_value,
        kappa,
        method,
        truncated,
        epsilon_flag,
    })
}

/// Greedy forward selection on Psi: at each step add the candidate with the
/// largest Psi reduction (ties broken by lowest column index). Stops early
/// with `truncated = true` when no candidate yields a positive reduction.
pub fn greedy_combo(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    cfg: &ScreenConfig,
) -> Result<DriverSelection, SelectError> {
    cfg.validate()?;
    let m_lib = library.ncols();
    if m_lib < cfg.m {
        return Err(SelectError::NotEnoughCandidates { m_lib, m: cfg.m });
    }
    let (lib_std, _) = linalg::standardize_columns(library);
    let mut selected: Vec<usize> = Vec::new();
    let mut psi_path = Vec::new();
    let mut psi_current = psi_residual_std(returns, &lib_std, &selected, cfg.ridge)?;
    let mut truncated = false;

    while selected.len() < cfg.m {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..m_lib {
            if selected.contains(&k) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(k);
            // candidates that degenerate the fit are skipped, not fatal
            let psi_trial = match psi_residual_std(returns, &lib_std, &trial, cfg.ridge) {
                Ok(p) => p,
                Err(SelectError::ZeroVarianceResidual(_)) => continue,
                Err(e) => return Err(e),
            };
            let reduction = psi_current - psi_trial;
            let better = match best {
                None => true,
                Some((_, best_red)) => reduction > best_red,
            };
            if better {
                best = Some((k, reduction));
            }
        }
        match best {
            Some((k, reduction)) if reduction > REDUCTION_TOL => {
                selected.push(k);
                psi_current -= reduction;
                psi_path.push(psi_current);
            }
            _ => {
                truncated = true;
                break;
            }
        }
    }
    finish_selection(returns, &lib_std, selected, psi_path, ScreenMethod::Combo, truncated, cfg)
}

/// Breadth/strength ranking with a redundancy filter.
///
/// Candidates are ranked lexicographically by (Repetition, Strength), both
/// computed from |corr| >= tau against the assets, then scanned in rank
/// order; a candidate is accepted only when its absolute correlation with
/// every previously accepted candidate stays within rho_max. Constant
/// candidates carry no signal and are excluded from the ranking.
pub fn corr_screen(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    cfg: &ScreenConfig,
) -> Result<DriverSelection, SelectError> {
    cfg.validate()?;
    let (lib_std, stds) = linalg::standardize_columns(library);
    let n = returns.ncols();
    let asset_cols: Vec<Vec<f64>> = (0..n)
        .map(|i| returns.column(i).iter().copied().collect())
        .collect();

    struct Ranked {
        idx: usize,
        repetition: usize,
        strength: f64,
    }
    let mut ranked: Vec<Ranked> = Vec::new();
    for k in 0..library.ncols() {
        if stds[k] == 0.0 {
            continue;
        }
        let cand: Vec<f64> = lib_std.column(k).iter().copied().collect();
        let mut repetition = 0usize;
        let mut strength = 0.0;
        for asset in &asset_cols {
            if let Some(c) = linalg::pearson(&cand, asset) {
                if c.abs() >= cfg.tau {
                    repetition += 1;
                    strength += c.abs();
                }
            }
        }
        ranked.push(Ranked { idx: k, repetition, strength });
    }
    ranked.sort_by(|a, b| {
        b.repetition
            .cmp(&a.repetition)
            .then(b.strength.partial_cmp(&a.strength).unwrap())
            .then(a.idx.cmp(&b.idx))
    });

    let mut accepted: Vec<usize> = Vec::new();
    for r in &ranked {
        if accepted.len() == cfg.m {
            break;
        }
        let cand: Vec<f64> = lib_std.column(r.idx).iter().copied().collect();
        let redundant = accepted.iter().any(|&a| {
            let prev: Vec<f64> = lib_std.column(a).iter().copied().collect();
            linalg::pearson(&cand, &prev)
                .map(|c| c.abs() > cfg.rho_max)
                .unwrap_or(false)
        });
        if !redundant {
            accepted.push(r.idx);
        }
    }
    let truncated = accepted.len() < cfg.m;
    finish_selection(returns, &lib_std, accepted, Vec::new(), ScreenMethod::Corr, truncated, cfg)
}

/// Per-candidate evidence score: Score(x) = sum_i BIC_i(x) with
/// BIC_i = -2 lhat_i + 2 log T from the Gaussian MLE of r_i = a + b x + u.
/// The m candidates with the smallest total scores are selected.
pub fn bic_screen(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    cfg: &ScreenConfig,
) -> Result<DriverSelection, SelectError> {
    cfg.validate()?;
    let t = returns.nrows();
    if t < 4 {
        return Err(SelectError::WindowTooShort { t, k: 1 });
    }
    let m_lib = library.ncols();
    if m_lib < cfg.m {
        return Err(SelectError::NotEnoughCandidates { m_lib, m: cfg.m });
    }
    let (lib_std, stds) = linalg::standardize_columns(library);
    let tf = t as f64;
    let mut scores: Vec<(f64, usize)> = Vec::with_capacity(m_lib);
    for k in 0..m_lib {
        if stds[k] == 0.0 {
            return Err(SelectError::ZeroVarianceColumn(k));
        }
        let x = lib_std.column(k);
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let mut score = 0.0;
        for i in 0..returns.ncols() {
            let y = returns.column(i);
            let ybar = y.sum() / tf;
            let sxy: f64 = x.iter().zip(y.iter()).map(|(xv, yv)| xv * (yv - ybar)).sum();
            let beta = sxy / sxx;
            let mut ssr = 0.0;
            for (xv, yv) in x.iter().zip(y.iter()) {
                let resid = yv - ybar - beta * xv;
                ssr += resid * resid;
            }
            let sigma2 = (ssr / tf).max(SIGMA2_FLOOR);
            let loglik = -0.5 * tf * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
            score += -2.0 * loglik + 2.0 * tf.ln();
        }
        scores.push((score, k));
    }
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let indices: Vec<usize> = scores.iter().take(cfg.m).map(|&(_, k)| k).collect();
    finish_selection(returns, &lib_std, indices, Vec::new(), ScreenMethod::Bayes, false, cfg)
}

/// Run the screen selected by `method`.
pub fn run_screen(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    method: ScreenMethod,
    cfg: &ScreenConfig,
) -> Result<DriverSelection, SelectError> {
    match method {
        ScreenMethod::Combo => greedy_combo(returns, library, cfg),
        ScreenMethod::Corr => corr_screen(returns, library, cfg),
        ScreenMethod::Bayes => bic_screen(returns, library, cfg),
    }
}

/// Event-form screening statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventGStats {
    /// Sum over cells and asset pairs of |P(Ei,Ej|C) - P(Ei|C) P(Ej|C)|.
    pub total: f64,
    /// Number of (cell, pair) terms that entered the sum.
    pub terms: usize,
    /// Cells that met the minimum occupancy requirement.
    pub cells_used: usize,
}

impl EventGStats {
    /// Average deviation per counted (cell, pair) term.
    pub fn per_pair_mean(&self) -> f64 {
        if self.terms == 0 {
            0.0
        } else {
            self.total / self.terms as f64
        }
    }
}

/// Event-form screening objective over a k-means partition of the selected
/// driver block. Events are E_i = { A_i > median(A_i) }; cells with fewer
/// than 10 points are skipped.
pub fn event_g(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    s: &[usize],
    cfg: &ScreenConfig,
) -> Result<f64, SelectError> {
    event_g_stats(returns, library, s, cfg).map(|st| st.total)
}

/// As [`event_g`], returning occupancy statistics as well.
pub fn event_g_stats(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    s: &[usize],
    cfg: &ScreenConfig,
) -> Result<EventGStats, SelectError> {
    cfg.validate()?;
    if s.is_empty() {
        return Err(SelectError::EmptySelection);
    }
    let (lib_std, _) = linalg::standardize_columns(library);
    let d = lib_std.select_columns(s.iter());
    let assignments = kmeans_labels(&d, cfg.bins, cfg.seed);

    let t = returns.nrows();
    let n = returns.ncols();
    let mut events = vec![vec![false; n]; t];
    for i in 0..n {
        let mut col: Vec<f64> = returns.column(i).iter().copied().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = linalg::quantile_sorted(&col, 0.5);
        for (row, flags) in events.iter_mut().enumerate() {
            flags[i] = returns[(row, i)] > median;
        }
    }

    let mut total = 0.0;
    let mut terms = 0usize;
    let mut cells_used = 0usize;
    for cell in 0..cfg.bins {
        let members: Vec<usize> = (0..t).filter(|&row| assignments[row] == cell).collect();
        if members.len() < MIN_CELL_COUNT {
            continue;
        }
        cells_used += 1;
        let count = members.len() as f64;
        let mut p_single = vec![0.0; n];
        for &row in &members {
            for i in 0..n {
                if events[row][i] {
                    p_single[i] += 1.0;
                }
            }
        }
        for p in p_single.iter_mut() {
            *p /= count;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let joint = members
                    .iter()
                    .filter(|&&row| events[row][i] && events[row][j])
                    .count() as f64
                    / count;
                total += (joint - p_single[i] * p_single[j]).abs();
                terms += 1;
            }
        }
    }
    Ok(EventGStats { total, terms, cells_used })
}

/// Seeded k-means with k-means++ initialization; returns row labels.
fn kmeans_labels(points: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let t = points.nrows();
    let mut rng = rng::stream_rng(seed, 100);
    let mut centroids: Vec<DVector<f64>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.random_range(0..t)).transpose());
    let mut dist2 = vec![0.0f64; t];
    while centroids.len() < k {
        let mut total = 0.0;
        for row in 0..t {
            let p = points.row(row).transpose();
            let d = centroids
                .iter()
                .map(|c| (&p - c).norm_squared())
                .fold(f64::INFINITY, f64::min);
            dist2[row] = d;
            total += d;
        }
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = t - 1;
            for (row, &d) in dist2.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    chosen = row;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..t)
        };
        centroids.push(points.row(pick).transpose());
    }

    let mut labels = vec![0usize; t];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for row in 0..t {
            let p = points.row(row).transpose();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = (&p - centroid).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[row] != best {
                labels[row] = best;
                changed = true;
            }
        }
        let mut sums = vec![DVector::<f64>::zeros(points.ncols()); k];
        let mut counts = vec![0usize; k];
        for row in 0..t {
            sums[labels[row]] += points.row(row).transpose();
            counts[labels[row]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = &sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Per-cardinality record produced by the guard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardEntry {
    pub m: usize,
    pub kappa: f64,
    pub delta_g: f64,
    pub g_value: f64,
}

/// Result of the condition-number guard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionGuard {
    pub chosen_m: usize,
    pub entries: Vec<GuardEntry>,
    /// False when neither stopping rule fired and max(grid) was returned.
    pub triggered: bool,
}

/// Cardinality selection: for each m in the grid run the screen, fit
/// sensitivities, and stop at the smallest m with Delta G < eta or
/// kappa > kappa_max. Returns max(grid) with `triggered = false` when the
/// rule never fires.
pub fn condition_guard(
    returns: &DMatrix<f64>,
    library: &DMatrix<f64>,
    method: ScreenMethod,
    cfg: &ScreenConfig,
    m_grid: &[usize],
) -> Result<ConditionGuard, SelectError> {
    cfg.validate()?;
    if m_grid.is_empty() || m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SelectError::BadConfig("m grid must be strictly increasing".into()));
    }
    let (lib_std, _) = linalg::standardize_columns(library);
    let mut g_prev = g_cov_std(returns, &lib_std, &[], cfg.ridge)?;
    let mut entries = Vec::with_capacity(m_grid.len());
    let mut chosen: Option<usize> = None;
    for &m in m_grid {
        let mut cfg_m = cfg.clone();
        cfg_m.m = m;
        let sel = run_screen(returns, library, method, &cfg_m)?;
        let g = sel.g_value;
        let delta_g = g_prev - g;
        entries.push(GuardEntry { m, kappa: sel.kappa, delta_g, g_value: g });
        if chosen.is_none() && (delta_g < cfg.eta || sel.kappa > cfg.kappa_max) {
            chosen = Some(m);
        }
        g_prev = g;
    }
    Ok(ConditionGuard {
        chosen_m: chosen.unwrap_or(*m_grid.last().unwrap()),
        triggered: chosen.is_some(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn shared_driver_scm(t: usize, seed: u64) -> synth::SynthOutput {
        let betas = DMatrix::from_element(2, 1, 1.0);
        synth::gen_gaussian_scm(
            1,
            2,
            t,
            &betas,
            &DMatrix::identity(1, 1),
            &DVector::from_element(2, 1.0),
            seed,
        )
        .unwrap()
    }

    /// Library = [true driver, independent noise columns].
    fn library_with_noise(drivers: &DMatrix<f64>, extra: usize, seed: u64) -> DMatrix<f64> {
        let t = drivers.nrows();
        let mut rng = crate::rng::stream_rng(seed, 7);
        let noise = crate::rng::normal_matrix(&mut rng, t, extra);
        let mut lib = DMatrix::zeros(t, drivers.ncols() + extra);
        lib.columns_mut(0, drivers.ncols()).copy_from(drivers);
        lib.columns_mut(drivers.ncols(), extra).copy_from(&noise);
        lib
    }

    #[test]
    fn psi_identical_assets_is_one() {
        let mut rng = crate::rng::stream_rng(1, 0);
        let col = crate::rng::normal_vector(&mut rng, 100);
        let mut returns = DMatrix::zeros(100, 2);
        returns.set_column(0, &col);
        returns.set_column(1, &col);
        let library = DMatrix::zeros(100, 0);
        let psi = psi_residual(&returns, &library, &[], 0.0).unwrap();
        assert_relative_eq!(psi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn psi_conditioning_on_true_driver_screens_off() {
        let out = shared_driver_scm(5000, 3);
        let lib = library_with_noise(&out.drivers, 1, 3);
        let psi_true = psi_residual(&out.assets, &lib, &[0], 1e-8).unwrap();
        assert!(psi_true < 0.05, "psi(true) = {psi_true}");
        let psi_none = psi_residual(&out.assets, &lib, &[], 1e-8).unwrap();
        assert!((psi_none - 0.5).abs() < 0.05, "psi(empty) = {psi_none}");
    }

    #[test]
    fn greedy_selects_true_driver_over_noise() {
        let mut hits = 0;
        for seed in 0..20u64 {
            let out = shared_driver_scm(1000, seed);
            let lib = library_with_noise(&out.drivers, 1, seed + 1000);
            let cfg = ScreenConfig { m: 1, ..Default::default() };
            let sel = greedy_combo(&out.assets, &lib, &cfg).unwrap();
            if sel.indices == vec![0] {
                hits += 1;
            }
        }
        assert!(hits >= 19, "true driver picked in {hits}/20 seeds");
    }

    #[test]
    fn greedy_m_equals_library_selects_all() {
        // both drivers induce cross-asset correlation, so each reduces Psi
        let betas = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.5, 0.0, 1.0, 0.5, 1.0]);
        let out2 = synth::gen_gaussian_scm(
            2,
            4,
            2000,
            &betas,
            &DMatrix::identity(2, 2),
            &DVector::from_element(4, 1.0),
            5,
        )
        .unwrap();
        let cfg = ScreenConfig { m: 2, ..Default::default() };
        let sel = greedy_combo(&out2.assets, &out2.drivers, &cfg).unwrap();
        assert_eq!(sel.indices.len(), 2);
        assert!(!sel.truncated);
        // psi path non-increasing
        for w in sel.psi_path.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn greedy_duplicate_candidates_selects_one() {
        let out = shared_driver_scm(800, 9);
        let t = out.drivers.nrows();
        let mut lib = DMatrix::zeros(t, 2);
        lib.set_column(0, &out.drivers.column(0).into_owned());
        lib.set_column(1, &out.drivers.column(0).into_owned());
        let cfg = ScreenConfig { m: 2, ..Default::default() };
        let sel = greedy_combo(&out.assets, &lib, &cfg).unwrap();
        assert_eq!(sel.indices, vec![0], "duplicate must be skipped");
        assert!(sel.truncated);
    }

    #[test]
    fn corr_screen_repetition_and_strength() {
        // driver correlated ~0.9 with both of 2 assets
        let t = 4000;
        let out = shared_driver_scm(t, 11);
        // asset = driver + small noise so corr is high
        let mut returns = DMatrix::zeros(t, 2);
        let mut rng = crate::rng::stream_rng(11, 3);
        for row in 0..t {
            let d = out.drivers[(row, 0)];
            returns[(row, 0)] = d + 0.48 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            returns[(row, 1)] = d + 0.48 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let lib = library_with_noise(&out.drivers, 2, 12);
        let cfg = ScreenConfig { m: 1, tau: 0.5, ..Default::default() };
        let sel = corr_screen(&returns, &lib, &cfg).unwrap();
        assert_eq!(sel.indices, vec![0]);
    }

    #[test]
    fn corr_screen_skips_redundant_copy() {
        let t = 1000;
        let out = shared_driver_scm(t, 13);
        let mut lib = DMatrix::zeros(t, 3);
        lib.set_column(0, &out.drivers.column(0).into_owned());
        lib.set_column(1, &out.drivers.column(0).into_owned()); // exact copy
        let mut rng = crate::rng::stream_rng(14, 0);
        lib.set_column(2, &crate::rng::normal_vector(&mut rng, t));
        let cfg = ScreenConfig { m: 2, rho_max: 0.95, tau: 0.2, ..Default::default() };
        let sel = corr_screen(&out.assets, &lib, &cfg).unwrap();
        assert_eq!(sel.indices[0], 0);
        assert_ne!(sel.indices.get(1), Some(&1), "exact copy must be skipped");
    }

    #[test]
    fn corr_screen_sign_flip_invariant() {
        let out = shared_driver_scm(600, 17);
        let lib = library_with_noise(&out.drivers, 2, 18);
        let mut flipped = lib.clone();
        for v in flipped.column_mut(0).iter_mut() {
            *v = -*v;
        }
        let cfg = ScreenConfig { m: 2, tau: 0.2, ..Default::default() };
        let a = corr_screen(&out.assets, &lib, &cfg).unwrap();
        let b = corr_screen(&out.assets, &flipped, &cfg).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn bic_prefers_true_driver() {
        let mut hits = 0;
        for seed in 0..20u64 {
            let out = shared_driver_scm(2000, seed + 100);
            let lib = library_with_noise(&out.drivers, 1, seed + 200);
            let cfg = ScreenConfig { m: 1, ..Default::default() };
            let sel = bic_screen(&out.assets, &lib, &cfg).unwrap();
            if sel.indices == vec![0] {
                hits += 1;
            }
        }
        assert!(hits >= 19, "true driver won in {hits}/20 seeds");
    }

    #[test]
    fn bic_identical_candidates_same_score() {
        let out = shared_driver_scm(500, 23);
        let t = out.drivers.nrows();
        let mut lib = DMatrix::zeros(t, 2);
        lib.set_column(0, &out.drivers.column(0).into_owned());
        lib.set_column(1, &out.drivers.column(0).into_owned());
        let cfg = ScreenConfig { m: 2, ..Default::default() };
        let sel = bic_screen(&out.assets, &lib, &cfg).unwrap();
        // ties broken by index
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn bic_degenerate_fit_hits_sigma_floor() {
        // candidate exactly equals the single asset's returns
        let t = 100;
        let mut rng = crate::rng::stream_rng(31, 0);
        let col = crate::rng::normal_vector(&mut rng, t);
        let returns = DMatrix::from_columns(&[col.clone()]);
        let lib = DMatrix::from_columns(&[col]);
        let cfg = ScreenConfig { m: 1, ..Default::default() };
        let sel = bic_screen(&returns, &lib, &cfg).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert!(sel.g_value.is_finite());
    }

    #[test]
    fn event_g_identical_events_single_cell() {
        // two identical assets; constant driver puts everything in one cell
        let t = 40;
        let vals: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let mut returns = DMatrix::zeros(t, 2);
        for (i, v) in vals.iter().enumerate() {
            returns[(i, 0)] = *v;
            returns[(i, 1)] = *v;
        }
        let library = DMatrix::from_element(t, 1, 1.0);
        let cfg = ScreenConfig { bins: 2, ..Default::default() };
        let stats = event_g_stats(&returns, &library, &[0], &cfg).unwrap();
        assert_eq!(stats.cells_used, 1);
        assert_relative_eq!(stats.total, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn event_g_empty_selection_errors() {
        let returns = DMatrix::zeros(50, 2);
        let library = DMatrix::zeros(50, 1);
        assert!(matches!(
            event_g(&returns, &library, &[], &ScreenConfig::default()),
            Err(SelectError::EmptySelection)
        ));
    }

    #[test]
    fn event_g_small_conditional_dependence_on_scm() {
        let betas = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.7, -0.4, -0.3, 0.9]);
        let out = synth::gen_gaussian_scm(
            2,
            3,
            5000,
            &betas,
            &DMatrix::identity(2, 2),
            &DVector::from_element(3, 1.0),
            41,
        )
        .unwrap();
        let cfg = ScreenConfig { bins: 5, ..Default::default() };
        let stats = event_g_stats(&out.assets, &out.drivers, &[0, 1], &cfg).unwrap();
        assert!(stats.per_pair_mean() < 0.05, "mean dev = {}", stats.per_pair_mean());
    }

    #[test]
    fn surrogate_alpha_only_equals_g() {
        let out = shared_driver_scm(500, 51);
        let cfg = ScreenConfig { alpha: 1.0, beta: 0.0, gamma: 0.0, ..Default::default() };
        let j = surrogate_j(&out.assets, &out.drivers, &[0], &cfg).unwrap();
        let g = g_cov(&out.assets, &out.drivers, &[0], cfg.ridge).unwrap();
        assert_relative_eq!(j, g, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_rewards_disjoint_coverage() {
        // 4 assets; drivers (0,1) cover disjoint halves, (2,3) both cover the
        // same half. With a large overlap penalty the disjoint pair wins.
        let t = 2000;
        let mut rng = crate::rng::stream_rng(61, 0);
        let d = crate::rng::normal_matrix(&mut rng, t, 4);
        let mut returns = DMatrix::zeros(t, 4);
        for row in 0..t {
            let noise: Vec<f64> = (0..4)
                .map(|_| 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            returns[(row, 0)] = d[(row, 0)] + noise[0];
            returns[(row, 1)] = d[(row, 0)] + noise[1];
            returns[(row, 2)] = d[(row, 1)] + noise[2];
            returns[(row, 3)] = d[(row, 1)] + noise[3];
        }
        let mut lib = DMatrix::zeros(t, 4);
        lib.set_column(0, &d.column(0).into_owned());
        lib.set_column(1, &d.column(1).into_owned());
        // two noisy copies of driver 0: they cover the same first half
        for row in 0..t {
            lib[(row, 2)] = d[(row, 0)] + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            lib[(row, 3)] = d[(row, 0)] + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let cfg = ScreenConfig { gamma: 10.0, ..Default::default() };
        let j_disjoint = surrogate_j(&returns, &lib, &[0, 1], &cfg).unwrap();
        let j_same = surrogate_j(&returns, &lib, &[2, 3], &cfg).unwrap();
        assert!(j_disjoint < j_same, "{j_disjoint} vs {j_same}");
    }

    #[test]
    fn surrogate_large_beta_goes_negative() {
        let out = shared_driver_scm(2000, 71);
        let cfg = ScreenConfig { beta: 100.0, tau: 0.2, ..Default::default() };
        let j = surrogate_j(&out.assets, &out.drivers, &[0], &cfg).unwrap();
        assert!(j < 0.0, "j = {j}");
    }

    #[test]
    fn guard_duplicate_column_trips_kappa() {
        let out = shared_driver_scm(500, 81);
        let t = out.drivers.nrows();
        let mut lib = DMatrix::zeros(t, 2);
        lib.set_column(0, &out.drivers.column(0).into_owned());
        lib.set_column(1, &out.drivers.column(0).into_owned());
        // bayes keeps both duplicates, so kappa(B^T B) blows up at m = 2
        let cfg = ScreenConfig::default();
        let guard = condition_guard(&out.assets, &lib, ScreenMethod::Bayes, &cfg, &[1, 2]).unwrap();
        assert!(guard.entries[1].kappa > cfg.kappa_max);
    }

    #[test]
    fn guard_orthonormal_equal_loadings_kappa_one() {
        // two orthogonal drivers feeding disjoint assets with equal loadings
        let t = 4000;
        let betas = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let out = synth::gen_gaussian_scm(
            2,
            2,
            t,
            &betas,
            &DMatrix::identity(2, 2),
            &DVector::from_element(2, 0.01),
            91,
        )
        .unwrap();
        let cfg = ScreenConfig { m: 2, ..Default::default() };
        let sel = bic_screen(&out.assets, &out.drivers, &cfg).unwrap();
        assert!(sel.kappa < 1.1, "kappa = {}", sel.kappa);
    }

    #[test]
    fn guard_finds_true_cardinality_on_scm() {
        let mut in_range = 0;
        for seed in 0..20u64 {
            let t = 1500;
            // 3 strong orthogonal drivers, 6 assets
            let betas = DMatrix::from_row_slice(
                6,
                3,
                &[
                    1.0, 0.0, 0.0, //
                    1.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, //
                    0.0, 1.0, 0.0, //
                    0.0, 0.0, 1.0, //
                    0.0, 0.0, 1.0,
                ],
            );
            let out = synth::gen_gaussian_scm(
                3,
                6,
                t,
                &betas,
                &DMatrix::identity(3, 3),
                &DVector::from_element(6, 1.0),
                seed + 300,
            )
            .unwrap();
            let lib = library_with_noise(&out.drivers, 3, seed + 400);
            let cfg = ScreenConfig { eta: 0.05 * pair_count(6) as f64, ..Default::default() };
            let guard =
                condition_guard(&out.assets, &lib, ScreenMethod::Combo, &cfg, &[1, 2, 3, 4, 5, 6])
                    .unwrap();
            if guard.chosen_m == 3 || guard.chosen_m == 4 {
                in_range += 1;
            }
        }
        assert!(in_range >= 18, "chosen m in range for {in_range}/20 seeds");
    }

    #[test]
    fn screens_invariant_to_affine_library_rescaling() {
        let out = shared_driver_scm(800, 101);
        let lib = library_with_noise(&out.drivers, 2, 102);
        let mut scaled = lib.clone();
        let scales = [3.0, -0.5, 10.0];
        let shifts = [1.0, -2.0, 0.25];
        for j in 0..3 {
            for v in scaled.column_mut(j).iter_mut() {
                *v = scales[j] * *v + shifts[j];
            }
        }
        let cfg = ScreenConfig { m: 2, tau: 0.2, ..Default::default() };
        for method in [ScreenMethod::Combo, ScreenMethod::Corr, ScreenMethod::Bayes] {
            let a = run_screen(&out.assets, &lib, method, &cfg).unwrap();
            let b = run_screen(&out.assets, &scaled, method, &cfg).unwrap();
            assert_eq!(a.indices, b.indices, "{method:?} selection changed under rescale");
            assert_relative_eq!(a.g_value, b.g_value, epsilon = 1e-8);
        }
    }
}
