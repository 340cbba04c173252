//! Price/return panels and robust in-window moment estimation.
//!
//! Ingestion is CSV-based (wide format: a `date` column followed by one
//! column per series). Rows with any missing cell are dropped and counted;
//! prices must be strictly positive and dates strictly increasing.

use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unparseable date '{0}' (expected YYYY-MM-DD)")]
    BadDate(String),
    #[error("non-positive price {value} for asset '{asset}' on {date}")]
    NonPositivePrice {
        asset: String,
        date: NaiveDate,
        value: f64,
    },
    #[error("dates are not strictly increasing at {0}")]
    NonIncreasingDates(NaiveDate),
    #[error("need at least {required} rows, got {actual}")]
    TooFewRows { required: usize, actual: usize },
    #[error("winsorize quantile must lie in (0, 0.5), got {0}")]
    BadQuantile(f64),
    #[error("EWMA halflife must be positive, got {0}")]
    BadHalflife(f64),
    #[error("csv header must start with a date column followed by series columns")]
    BadHeader,
}

/// Dated T x n panel of strictly positive prices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricePanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// T x n adjusted closes, row t aligned with `dates[t]`.
    pub prices: DMatrix<f64>,
}

/// Dated T x n panel of simple returns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub returns: DMatrix<f64>,
}

/// Robust in-window moments: winsorized/EWMA mean and shrunk covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Window of row indices [start, end) the moments were estimated on.
    pub window: (usize, usize),
    /// Ledoit-Wolf shrinkage intensity used for `cov`.
    pub shrinkage: f64,
}

/// Result of panel ingestion: the clean panel plus the number of rows
/// dropped because of missing cells.
#[derive(Debug, Clone)]
pub struct PanelLoad {
    pub panel: PricePanel,
    pub dropped_rows: usize,
}

/// Load a wide CSV (`date,asset1,asset2,...`) into a [`PricePanel`].
///
/// Rows with an empty/unparseable price cell are dropped and counted. A
/// non-positive price is an error, as is a non-increasing date order.
pub fn load_panel<P: AsRef<Path>>(path: P) -> Result<PanelLoad, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(DataError::BadHeader);
    }
    let assets: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = assets.len();

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        let date_str = record.get(0).unwrap_or("").trim().to_string();
        let date = NaiveDate::parse_from_str(&date_str, "%Y-%m-%d")
            .map_err(|_| DataError::BadDate(date_str.clone()))?;
        if record.len() != n + 1 {
            dropped += 1;
            continue;
        }
        let mut row = Vec::with_capacity(n);
        let mut complete = true;
        for (j, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            if field.is_empty() {
                complete = false;
                break;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    if v <= 0.0 {
                        return Err(DataError::NonPositivePrice {
                            asset: assets[j].clone(),
                            date,
                            value: v,
                        });
                    }
                    row.push(v);
                }
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            dropped += 1;
            continue;
        }
        if let Some(&last) = dates.last() {
            if date <= last {
                return Err(DataError::NonIncreasingDates(date));
            }
        }
        dates.push(date);
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(DataError::TooFewRows {
            required: 2,
            actual: rows.len(),
        });
    }
    let t = rows.len();
    let prices = DMatrix::from_fn(t, n, |i, j| rows[i][j]);
    Ok(PanelLoad {
        panel: PricePanel {
            dates,
            assets,
            prices,
        },
        dropped_rows: dropped,
    })
}

/// Simple returns r_t = p_t / p_{t-1} - 1; output has T-1 rows.
pub fn compute_returns(panel: &PricePanel) -> Result<ReturnPanel, DataError> {
    let t = panel.prices.nrows();
    if t < 2 {
        return Err(DataError::TooFewRows {
            required: 2,
            actual: t,
        });
    }
    let n = panel.prices.ncols();
    let returns = DMatrix::from_fn(t - 1, n, |i, j| {
        panel.prices[(i + 1, j)] / panel.prices[(i, j)] - 1.0
    });
    Ok(ReturnPanel {
        dates: panel.dates[1..].to_vec(),
        assets: panel.assets.clone(),
        returns,
    })
}

/// Per-column winsorization at the q / 1-q empirical quantiles.
///
/// Thresholds are order statistics (the scipy convention): with
/// g = floor(q*T), values below x_(g+1) are raised to it and values above
/// x_(T-g) are lowered to it. Using actual order statistics makes the
/// operation idempotent, which an interpolated threshold would not be.
pub fn winsorize(x: &DMatrix<f64>, q: f64) -> Result<DMatrix<f64>, DataError> {
    if !(q > 0.0 && q < 0.5) {
        return Err(DataError::BadQuantile(q));
    }
    let t = x.nrows();
    if t < 2 {
        return Err(DataError::TooFewRows {
            required: 2,
            actual: t,
        });
    }
    let g = (q * t as f64).floor() as usize;
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let mut col: Vec<f64> = x.column(j).iter().copied().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = col[g];
        let hi = col[t - 1 - g];
        for v in out.column_mut(j).iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Exponentially weighted column means with decay 2^(-1/halflife).
///
/// The most recent row carries the largest weight; weights are normalized
/// to sum to one.
pub fn ewma_mean(x: &DMatrix<f64>, halflife: f64) -> Result<DVector<f64>, DataError> {
    if !(halflife > 0.0) {
        return Err(DataError::BadHalflife(halflife));
    }
    let t = x.nrows();
    if t == 0 {
        return Err(DataError::TooFewRows {
            required: 1,
            actual: 0,
        });
    }
    let lambda = 2f64.powf(-1.0 / halflife);
    // weights[i] proportional to lambda^(T-1-i); built backwards for stability
    let mut weights = vec![0.0; t];
    let mut w = 1.0;
    let mut total = 0.0;
    for i in (0..t).rev() {
        weights[i] = w;
        total += w;
        w *= lambda;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    let mut mean = DVector::zeros(x.ncols());
    for j in 0..x.ncols() {
        mean[j] = x
            .column(j)
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| v * w)
            .sum();
    }
    Ok(mean)
}

/// Ledoit-Wolf shrinkage toward the scaled identity target tr(S)/n * I.
///
/// Returns the shrunk covariance and the data-driven intensity delta in
/// [0, 1].
pub fn shrink_cov(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), DataError> {
    let t = x.nrows();
    let n = x.ncols();
    if t < 2 {
        return Err(DataError::TooFewRows {
            required: 2,
            actual: t,
        });
    }
    let mut centered = x.clone();
    crate::linalg::center_columns(&mut centered);
    let tf = t as f64;
    let s = centered.transpose() * &centered / (tf - 1.0);

    let mu = s.trace() / n as f64;
    // d^2 = ||S - mu I||_F^2 / n
    let mut d2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { mu } else { 0.0 };
            let diff = s[(i, j)] - target;
            d2 += diff * diff;
        }
    }
    d2 /= n as f64;

    // b^2 = (1/T^2) sum_t ||x_t x_t^T - S||_F^2 / n, capped at d^2
    let mut b2_sum = 0.0;
    for trow in 0..t {
        let row = centered.row(trow);
        let mut frob = 0.0;
        for i in 0..n {
            for j in 0..n {
                let diff = row[i] * row[j] - s[(i, j)];
                frob += diff * diff;
            }
        }
        b2_sum += frob / n as f64;
    }
    let b2 = (b2_sum / (tf * tf)).min(d2);

    let delta = if d2 > 0.0 { (b2 / d2).clamp(0.0, 1.0) } else { 0.0 };
    let mut cov = s * (1.0 - delta);
    for i in 0..n {
        cov[(i, i)] += delta * mu;
    }
    Ok((linalg::sym_part(&cov), delta))
}

/// Robust moments for a window of a return panel: winsorize, EWMA mean,
/// Ledoit-Wolf covariance.
pub fn robust_moments(
    returns: &DMatrix<f64>,
    window: (usize, usize),
    winsor_q: f64,
    halflife: f64,
) -> Result<RobustMoments, DataError> {
    let slice = returns.rows(window.0, window.1 - window.0).into_owned();
    let clean = winsorize(&slice, winsor_q)?;
    let mean = ewma_mean(&clean, halflife)?;
    let (cov, shrinkage) = shrink_cov(&clean)?;
    Ok(RobustMoments {
        mean,
        cov,
        window,
        shrinkage,
    })
}

/// Write a dated panel to the wide CSV dialect used by [`load_panel`].
pub fn write_panel_csv<P: AsRef<Path>>(
    path: P,
    dates: &[NaiveDate],
    names: &[String],
    values: &DMatrix<f64>,
) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend_from_slice(names);
    writer.write_record(&header)?;
    for (i, date) in dates.iter().enumerate() {
        let mut record = vec![date.format("%Y-%m-%d").to_string()];
        for j in 0..values.ncols() {
            record.push(format!("{}", values[(i, j)]));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
