//! Per-row similarity kernels with hand-derived gradients.
//!
//! Each kernel compares row `i` of `A` with row `i` of `B` and yields one
//! score. Degenerate rows (zero norm for cosine, zero variance for
//! Pearson) score 0 with zero gradient.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSimilarity {
    Cosine,
    Covariance,
    Pearson,
    /// `exp(-max(MMD², 0))` with an RBF kernel over the row entries.
    Mmd,
}

impl RowSimilarity {
    pub fn name(self) -> &'static str {
        match self {
            RowSimilarity::Cosine => "cosine",
            RowSimilarity::Covariance => "covariance",
            RowSimilarity::Pearson => "pearson",
            RowSimilarity::Mmd => "mmd",
        }
    }

    /// Minimum row width the statistic needs.
    pub fn min_width(self) -> usize {
        match self {
            RowSimilarity::Cosine => 1,
            _ => 2,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn centered(a: &[f64]) -> Vec<f64> {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|x| x - mean).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log_degenerate("cosine", "zero-norm row");
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn cosine_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let s = dot(a, b) / (na * nb);
    for k in 0..a.len() {
        da[k] += g * (b[k] / (na * nb) - s * a[k] / (na * na));
        db[k] += g * (a[k] / (na * nb) - s * b[k] / (nb * nb));
    }
}

/// Unbiased sample covariance of the two rows' entries.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let ca = centered(a);
    let cb = centered(b);
    dot(&ca, &cb) / (a.len() - 1) as f64
}

fn covariance_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    let ca = centered(a);
    let cb = centered(b);
    let scale = g / (a.len() - 1) as f64;
    for k in 0..a.len() {
        da[k] += scale * cb[k];
        db[k] += scale * ca[k];
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ca = centered(a);
    let cb = centered(b);
    let na = dot(&ca, &ca).sqrt();
    let nb = dot(&cb, &cb).sqrt();
    if na == 0.0 || nb == 0.0 {
        log_degenerate("pearson", "zero-variance row");
        return 0.0;
    }
    dot(&ca, &cb) / (na * nb)
}

fn pearson_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    // Cosine of the centred rows; the cosine gradient is already mean-free,
    // so the centring projection leaves it unchanged.
    let ca = centered(a);
    let cb = centered(b);
    cosine_backward(&ca, &cb, g, da, db);
}

/// Median of pairwise absolute distances over the pooled entries of both
/// rows; falls back to 1.0 when the median is zero.
pub fn median_bandwidth(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push((pooled[i] - pooled[j]).abs());
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

fn rbf(x: f64, y: f64, bandwidth: f64) -> f64 {
    let d = x - y;
    (-(d * d) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Unbiased MMD² treating each entry of a row as a scalar sample.
pub fn mmd_squared(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let d = a.len() as f64;
    let within = |x: &[f64]| {
        let mut s = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    s += rbf(x[i], x[j], bandwidth);
                }
            }
        }
        s / (d * (d - 1.0))
    };
    let mut cross = 0.0;
    for &x in a {
        for &y in b {
            cross += rbf(x, y, bandwidth);
        }
    }
    within(a) + within(b) - 2.0 * cross / (d * d)
}

pub fn mmd_similarity(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    (-mmd_squared(a, b, bandwidth).max(0.0)).exp()
}

fn mmd_backward(a: &[f64], b: &[f64], bandwidth: f64, g: f64, da: &mut [f64], db: &mut [f64]) {
    let m2 = mmd_squared(a, b, bandwidth);
    if m2 <= 0.0 {
        return;
    }
    let score = (-m2).exp();
    let dm = -score * g;
    let d = a.len() as f64;
    let s2 = bandwidth * bandwidth;
    // ∂k(x, y)/∂x = -k · (x - y) / σ²
    let dk = |x: f64, y: f64| -rbf(x, y, bandwidth) * (x - y) / s2;
    let within_scale = 2.0 / (d * (d - 1.0));
    let cross_scale = 2.0 / (d * d);
    for i in 0..a.len() {
        let mut ga = 0.0;
        for j in 0..a.len() {
            if i != j {
                ga += within_scale * dk(a[i], a[j]);
            }
        }
        for &y in b {
            ga -= cross_scale * dk(a[i], y);
        }
        da[i] += dm * ga;
    }
    for i in 0..b.len() {
        let mut gb = 0.0;
        for j in 0..b.len() {
            if i != j {
                gb += within_scale * dk(b[i], b[j]);
            }
        }
        for &x in a {
            gb -= cross_scale * dk(b[i], x);
        }
        db[i] += dm * gb;
    }
}

pub(crate) fn forward(kind: RowSimilarity, a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    match kind {
        RowSimilarity::Cosine => cosine(a, b),
        RowSimilarity::Covariance => covariance(a, b),
        RowSimilarity::Pearson => pearson(a, b),
        RowSimilarity::Mmd => mmd_similarity(a, b, bandwidth),
    }
}

pub(crate) fn backward(
    kind: RowSimilarity,
    a: &[f64],
    b: &[f64],
    bandwidth: f64,
    g: f64,
    da: &mut [f64],
    db: &mut [f64],
) {
    match kind {
        RowSimilarity::Cosine => cosine_backward(a, b, g, da, db),
        RowSimilarity::Covariance => covariance_backward(a, b, g, da, db),
        RowSimilarity::Pearson => pearson_backward(a, b, g, da, db),
        RowSimilarity::Mmd => mmd_backward(a, b, bandwidth, g, da, db),
    }
}

fn log_degenerate(kind: &str, what: &str) {
    log::warn!("{kind} similarity: {what}, score set to 0");
}
