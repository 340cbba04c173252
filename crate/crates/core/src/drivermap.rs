//! Driver-to-return maps g: R^m -> R^n and their in-window mean Jacobians.
//!
//! Three fit routes:
//! - ridge OLS (exact Jacobian = coefficient matrix);
//! - tanh MLP trained with a Huber loss by full-batch gradient descent with
//!   momentum;
//! - the same MLP plus a Jacobian-smoothness penalty, the mean squared
//!   Frobenius variation of the analytic Jacobian over nearest-neighbor
//!   sample pairs.
//!
//! No autodiff framework is used: forward, data-loss backprop, the network
//! Jacobian, and the penalty gradient are all written out for the fixed
//! tanh architecture (linear output layer, biases everywhere).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Weight-record schema version for serialized maps.
pub const MAP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("need T > {required} samples for {what}, got {actual}")]
    TooFewSamples {
        required: usize,
        actual: usize,
        what: &'static str,
    },
    #[error("ridge system is singular at lambda = 0; raise the ridge weight")]
    SingularSystem,
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    DivergentTraining { epoch: usize, loss: f64 },
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("window is empty")]
    EmptyWindow,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Which architecture produced the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapVariant {
    Linear,
    Mlp,
    Pinn,
}

/// Hyperparameters for the neural fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralMapSpec {
    /// Hidden layer widths (empty = plain linear map trained by GD).
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Huber transition point (large values make the loss quadratic).
    pub huber_delta: f64,
    /// Weight on the Jacobian-smoothness penalty (0 disables it).
    pub smooth_weight: f64,
    /// Early-stop patience on the validation loss, in epochs.
    pub patience: usize,
    pub seed: u64,
}

impl Default for NeuralMapSpec {
    fn default() -> Self {
        Self {
            hidden: vec![8],
            epochs: 400,
            learning_rate: 0.05,
            huber_delta: 1.0,
            smooth_weight: 0.0,
            patience: 40,
            seed: 0,
        }
    }
}

impl NeuralMapSpec {
    fn validate(&self) -> Result<(), MapError> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(MapError::BadSpec("hidden widths must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(MapError::BadSpec("learning rate must be positive".into()));
        }
        if self.huber_delta <= 0.0 {
            return Err(MapError::BadSpec("huber_delta must be positive".into()));
        }
        if self.smooth_weight < 0.0 {
            return Err(MapError::BadSpec("smooth_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// Feedforward tanh network with a linear output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

struct ForwardCache {
    /// a_0 = input, a_k = tanh(z_k) for hidden layers, a_L = output.
    activations: Vec<DVector<f64>>,
    /// d_k = 1 - a_k^2 for hidden layers (index k-1).
    tanh_derivs: Vec<DVector<f64>>,
}

impl Mlp {
    fn init(dims: &[usize], seed: u64) -> Self {
        let mut rng = rng::stream_rng(seed, 40);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 1..dims.len() {
            let fan_in = dims[k - 1] as f64;
            let scale = 1.0 / fan_in.sqrt();
            let w = rng::normal_matrix(&mut rng, dims[k], dims[k - 1]) * scale;
            layers.push(Dense { w, b: DVector::zeros(dims[k]) });
        }
        Self { layers }
    }

    fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn forward(&self, x: &DVector<f64>) -> ForwardCache {
        let l = self.n_layers();
        let mut activations = Vec::with_capacity(l + 1);
        let mut tanh_derivs = Vec::with_capacity(l.saturating_sub(1));
        activations.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = &layer.w * activations.last().unwrap() + &layer.b;
            if k + 1 < l {
                let a = z.map(f64::tanh);
                tanh_derivs.push(a.map(|v| 1.0 - v * v));
                activations.push(a);
            } else {
                activations.push(z);
            }
        }
        ForwardCache { activations, tanh_derivs }
    }

    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward(x).activations.last().unwrap().clone()
    }

    /// Analytic network Jacobian J(x) = W_L D_{L-1} W_{L-1} ... D_1 W_1.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let cache = self.forward(x);
        self.jacobian_from_cache(&cache)
    }

    fn jacobian_from_cache(&self, cache: &ForwardCache) -> DMatrix<f64> {
        let mut j = self.layers[0].w.clone();
        for k in 1..self.n_layers() {
            let d = &cache.tanh_derivs[k - 1];
            let mut scaled = j;
            for (row, dv) in d.iter().enumerate() {
                for v in scaled.row_mut(row).iter_mut() {
                    *v *= dv;
                }
            }
            j = &self.layers[k].w * scaled;
        }
        j
    }
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

struct Grads {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

impl Grads {
    fn zeros_like(net: &Mlp) -> Self {
        Self {
            w: net.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect(),
            b: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }
}

/// Huber data loss and its parameter gradient for one sample, scaled by
/// `scale` (1 / (T*n) for a mean loss). Returns the sample loss (unscaled
/// by T but scaled per output).
fn accumulate_data_grads(
    net: &Mlp,
    cache: &ForwardCache,
    y: &DVector<f64>,
    delta: f64,
    scale: f64,
    grads: &mut Grads,
) -> f64 {
    let l = net.n_layers();
    let out = cache.activations.last().unwrap();
    let residual = out - y;
    let loss: f64 = residual.iter().map(|&r| huber(r, delta)).sum();
    let mut delta_vec = residual.map(|r| huber_grad(r, delta) * scale);
    for k in (0..l).rev() {
        let a_prev = &cache.activations[k];
        grads.w[k] += &delta_vec * a_prev.transpose();
        grads.b[k] += &delta_vec;
        if k > 0 {
            let back = net.layers[k].w.transpose() * &delta_vec;
            delta_vec = DVector::from_iterator(
                back.len(),
                back.iter().zip(cache.tanh_derivs[k - 1].iter()).map(|(b, d)| b * d),
            );
        }
    }
    loss
}

/// Gradient of phi(x) = <M, J(x)> with respect to all weights and biases,
/// added into `grads`. Uses the product structure of the tanh Jacobian:
/// the explicit occurrence of each W_k plus the implicit dependence through
/// the activation derivatives.
fn accumulate_jacobian_contraction_grads(
    net: &Mlp,
    cache: &ForwardCache,
    m_matrix: &DMatrix<f64>,
    grads: &mut Grads,
) {
    let l = net.n_layers();
    // rho_k: derivative flow from the input up to (and including) D_k W_k
    let input_dim = net.layers[0].w.ncols();
    let mut rho: Vec<DMatrix<f64>> = Vec::with_capacity(l);
    rho.push(DMatrix::identity(input_dim, input_dim));
    for k in 0..l - 1 {
        let mut next = &net.layers[k].w * rho.last().unwrap();
        for (row, dv) in cache.tanh_derivs[k].iter().enumerate() {
            for v in next.row_mut(row).iter_mut() {
                *v *= dv;
            }
        }
        rho.push(next);
    }
    // left products: aprime[j] = W_L D_{L-1} W_{L-1} ... W_{j+1} (n x h_j)
    // built top-down; aprime[l-1] = W_L
    let mut aprime: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); l];
    aprime[l - 1] = net.layers[l - 1].w.clone();
    for j in (1..l - 1).rev() {
        let mut scaled = net.layers[j].w.clone();
        for (row, dv) in cache.tanh_derivs[j].iter().enumerate() {
            for v in scaled.row_mut(row).iter_mut() {
                *v *= dv;
            }
        }
        aprime[j] = &aprime[j + 1] * scaled;
    }

    // explicit occurrence of the top layer: J = W_L rho_{L-1}
    grads.w[l - 1] += m_matrix * rho[l - 1].transpose();
    // explicit occurrence of inner layers: J = A'_k D_k W_k rho_{k-1}
    for k in 0..l - 1 {
        let mut g = aprime[k + 1].transpose() * m_matrix * rho[k].transpose();
        for (row, dv) in cache.tanh_derivs[k].iter().enumerate() {
            for v in g.row_mut(row).iter_mut() {
                *v *= dv;
            }
        }
        grads.w[k] += g;
    }

    if l == 1 {
        return; // purely linear map: no activation dependence
    }

    // implicit dependence through D_j = diag(1 - a_j^2): seed per-layer
    // z-gradients and backpropagate them to lower layers
    let mut totals: Vec<DVector<f64>> = vec![DVector::zeros(0); l - 1];
    for j in (0..l - 1).rev() {
        let wr = &net.layers[j].w * &rho[j]; // h_{j+1}... (W_j rho_{j-1})
        let inner = aprime[j + 1].transpose() * m_matrix * wr.transpose();
        let a_j = &cache.activations[j + 1];
        let d_j = &cache.tanh_derivs[j];
        let mut u = DVector::zeros(d_j.len());
        for i in 0..u.len() {
            u[i] = inner[(i, i)] * (-2.0 * a_j[i] * d_j[i]);
        }
        if j + 1 < l - 1 {
            let back = net.layers[j + 1].w.transpose() * &totals[j + 1];
            for i in 0..u.len() {
                u[i] += d_j[i] * back[i];
            }
        }
        totals[j] = u;
    }
    for j in 0..l - 1 {
        grads.w[j] += &totals[j] * cache.activations[j].transpose();
        grads.b[j] += &totals[j];
    }
}

/// Fitted driver-to-return map with its in-window mean Jacobian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JacobianMap {
    pub schema_version: u32,
    /// In-window mean Jacobian (n x m).
    pub b: DMatrix<f64>,
    pub variant: MapVariant,
    pub fit_loss: f64,
    kind: MapKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MapKind {
    Linear { coef: DMatrix<f64> },
    Neural { net: Mlp },
}

impl JacobianMap {
    pub fn predict(&self, f: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            MapKind::Linear { coef } => coef * f,
            MapKind::Neural { net } => net.predict(f),
        }
    }

    /// Pointwise Jacobian of the fitted map.
    pub fn jacobian_at(&self, f: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            MapKind::Linear { coef } => coef.clone(),
            MapKind::Neural { net } => net.jacobian(f),
        }
    }

    /// Fitted values for a T x m driver block (T x n).
    pub fn fitted_values(&self, drivers: &DMatrix<f64>) -> DMatrix<f64> {
        let t = drivers.nrows();
        let n = self.b.nrows();
        let mut out = DMatrix::zeros(t, n);
        for row in 0..t {
            let pred = self.predict(&drivers.row(row).transpose());
            out.row_mut(row).copy_from(&pred.transpose());
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Ridge OLS map: B solves (X^T X + lambda I) B^T = X^T Y. For a linear
/// map the mean Jacobian is B itself.
pub fn fit_linear_map(
    drivers: &DMatrix<f64>,
    returns: &DMatrix<f64>,
    ridge: f64,
) -> Result<JacobianMap, MapError> {
    let t = drivers.nrows();
    let m = drivers.ncols();
    if returns.nrows() != t {
        return Err(MapError::Dimension("drivers and returns row counts differ".into()));
    }
    if t <= m {
        return Err(MapError::TooFewSamples { required: m, actual: t, what: "ridge OLS" });
    }
    let mut xtx = drivers.transpose() * drivers;
    for i in 0..m {
        xtx[(i, i)] += ridge;
    }
    let xty = drivers.transpose() * returns;
    let coef_t = xtx.lu().solve(&xty).ok_or(MapError::SingularSystem)?;
    let coef = coef_t.transpose();
    let fitted = drivers * coef.transpose();
    let resid = returns - fitted;
    let fit_loss = resid.iter().map(|r| r * r).sum::<f64>() / (t * returns.ncols()) as f64;
    Ok(JacobianMap {
        schema_version: MAP_SCHEMA_VERSION,
        b: coef.clone(),
        variant: MapVariant::Linear,
        fit_loss,
        kind: MapKind::Linear { coef },
    })
}

/// Nearest-neighbor index for every sample (euclidean in driver space).
fn nearest_neighbors(drivers: &DMatrix<f64>) -> Vec<usize> {
    let t = drivers.nrows();
    let mut nn = vec![0usize; t];
    for i in 0..t {
        let mut best = f64::INFINITY;
        for j in 0..t {
            if i == j {
                continue;
            }
            let d = (drivers.row(i) - drivers.row(j)).norm_squared();
            if d < best {
                best = d;
                nn[i] = j;
            }
        }
    }
    nn
}

/// Train a tanh MLP with Huber loss (and optional Jacobian-smoothness
/// penalty) by full-batch gradient descent with momentum; early stop on a
/// stalling validation loss. Returns the map with B = in-window mean of
/// the analytic Jacobians.
pub fn fit_neural_map(
    drivers: &DMatrix<f64>,
    returns: &DMatrix<f64>,
    spec: &NeuralMapSpec,
) -> Result<JacobianMap, MapError> {
    spec.validate()?;
    let t = drivers.nrows();
    let m = drivers.ncols();
    let n = returns.ncols();
    if returns.nrows() != t {
        return Err(MapError::Dimension("drivers and returns row counts differ".into()));
    }
    if t <= 10 * m {
        return Err(MapError::TooFewSamples { required: 10 * m, actual: t, what: "neural fit" });
    }

    let mut dims = vec![m];
    dims.extend_from_slice(&spec.hidden);
    dims.push(n);
    let mut net = Mlp::init(&dims, spec.seed);

    // chronological split: last 20% validates, min 1 row
    let val_len = (t / 5).max(1);
    let train_len = t - val_len;
    let pairs: Vec<(usize, usize)> = if spec.smooth_weight > 0.0 {
        let sub = drivers.rows(0, train_len).into_owned();
        nearest_neighbors(&sub).into_iter().enumerate().collect()
    } else {
        Vec::new()
    };

    let mut velocity_w: Vec<DMatrix<f64>> =
        net.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect();
    let mut velocity_b: Vec<DVector<f64>> =
        net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect();
    let momentum = 0.9;

    let val_loss = |net: &Mlp| -> f64 {
        let mut loss = 0.0;
        for row in train_len..t {
            let out = net.predict(&drivers.row(row).transpose());
            let y = returns.row(row).transpose();
            loss += (out - y).iter().map(|&r| huber(r, spec.huber_delta)).sum::<f64>();
        }
        loss / (val_len * n) as f64
    };

    let mut best_val = val_loss(&net);
    let mut best_net = net.clone();
    let mut stall = 0usize;
    let mut train_loss = f64::NAN;

    for epoch in 0..spec.epochs {
        let mut grads = Grads::zeros_like(&net);
        let scale = 1.0 / (train_len * n) as f64;
        let mut loss = 0.0;
        let mut caches: Vec<ForwardCache> = Vec::with_capacity(train_len);
        for row in 0..train_len {
            let x = drivers.row(row).transpose();
            let cache = net.forward(&x);
            loss += accumulate_data_grads(
                &net,
                &cache,
                &returns.row(row).transpose(),
                spec.huber_delta,
                scale,
                &mut grads,
            );
            caches.push(cache);
        }
        loss *= scale;

        if spec.smooth_weight > 0.0 && !pairs.is_empty() {
            let jacs: Vec<DMatrix<f64>> =
                caches.iter().map(|c| net.jacobian_from_cache(c)).collect();
            let pair_scale = spec.smooth_weight / pairs.len() as f64;
            let mut penalty = 0.0;
            for &(a, b) in &pairs {
                let diff = &jacs[a] - &jacs[b];
                penalty += diff.norm_squared();
                let m_matrix = diff * (2.0 * pair_scale);
                accumulate_jacobian_contraction_grads(&net, &caches[a], &m_matrix, &mut grads);
                let m_neg = -m_matrix;
                accumulate_jacobian_contraction_grads(&net, &caches[b], &m_neg, &mut grads);
            }
            loss += pair_scale * penalty;
        }

        if !loss.is_finite() {
            return Err(MapError::DivergentTraining { epoch, loss });
        }
        train_loss = loss;

        for k in 0..net.layers.len() {
            velocity_w[k] = &velocity_w[k] * momentum - &grads.w[k] * spec.learning_rate;
            velocity_b[k] = &velocity_b[k] * momentum - &grads.b[k] * spec.learning_rate;
            net.layers[k].w += &velocity_w[k];
            net.layers[k].b += &velocity_b[k];
        }

        let v = val_loss(&net);
        if v.is_finite() && v < best_val - 1e-12 {
            best_val = v;
            best_net = net.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= spec.patience {
                break;
            }
        }
    }
    let net = best_net;

    let variant = if spec.smooth_weight > 0.0 { MapVariant::Pinn } else { MapVariant::Mlp };
    let mut mean_jac = DMatrix::zeros(n, m);
    for row in 0..t {
        mean_jac += net.jacobian(&drivers.row(row).transpose());
    }
    mean_jac /= t as f64;
    Ok(JacobianMap {
        schema_version: MAP_SCHEMA_VERSION,
        b: mean_jac,
        variant,
        fit_loss: if train_loss.is_nan() { best_val } else { train_loss },
        kind: MapKind::Neural { net },
    })
}

/// Average of the pointwise Jacobians over a driver window; equals B for
/// linear maps.
pub fn mean_jacobian(map: &JacobianMap, drivers: &DMatrix<f64>) -> Result<DMatrix<f64>, MapError> {
    if drivers.nrows() == 0 {
        return Err(MapError::EmptyWindow);
    }
    let mut acc = map.jacobian_at(&drivers.row(0).transpose());
    for row in 1..drivers.nrows() {
        acc += map.jacobian_at(&drivers.row(row).transpose());
    }
    Ok(acc / drivers.nrows() as f64)
}
