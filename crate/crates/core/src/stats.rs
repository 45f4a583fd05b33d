//! Small statistics helpers for Monte-Carlo checks and training metrics.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

/// `(mean, standard error)`.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    (mean(xs), std_error(xs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]` of the sample. A degenerate range is widened by 0.5
    /// on each side.
    pub fn from_samples(xs: &[f64], bins: usize) -> Histogram {
        let bins = bins.max(1);
        let (mut lo, mut hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi <= lo {
            lo -= 0.5;
            hi += 0.5;
        }
        let edges: Vec<f64> = (0..=bins)
            .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
            .collect();
        Self::with_edges(xs, edges)
    }

    pub fn with_edges(xs: &[f64], edges: Vec<f64>) -> Histogram {
        let bins = edges.len() - 1;
        let mut counts = vec![0u64; bins];
        let (lo, hi) = (edges[0], edges[bins]);
        for &x in xs {
            let idx = if x <= lo {
                0
            } else if x >= hi {
                bins - 1
            } else {
                // first edge strictly above x, minus one
                edges.partition_point(|&e| e <= x) - 1
            };
            counts[idx.min(bins - 1)] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// Fit of `y ≈ c₂·a + c₃·b` (no intercept) with `c₂, c₃ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoTermFit {
    pub c2: f64,
    pub c3: f64,
    pub r_squared: f64,
}

/// Nonnegative least squares over two basis columns, by checking the unconstrained
/// solution and the two single-column solutions.
pub fn nonneg_two_term_fit(a: &[f64], b: &[f64], y: &[f64]) -> TwoTermFit {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let (aa, ab, bb) = (dot(a, a), dot(a, b), dot(b, b));
    let (ay, by) = (dot(a, y), dot(b, y));
    let sse = |c2: f64, c3: f64| {
        a.iter()
            .zip(b)
            .zip(y)
            .map(|((p, q), r)| (r - c2 * p - c3 * q).powi(2))
            .sum::<f64>()
    };
    let mut candidates = vec![(0.0, 0.0)];
    let det = aa * bb - ab * ab;
    if det.abs() > 1e-300 {
        let c2 = (ay * bb - by * ab) / det;
        let c3 = (by * aa - ay * ab) / det;
        if c2 >= 0.0 && c3 >= 0.0 {
            candidates.push((c2, c3));
        }
    }
    if aa > 0.0 {
        candidates.push(((ay / aa).max(0.0), 0.0));
    }
    if bb > 0.0 {
        candidates.push((0.0, (by / bb).max(0.0)));
    }
    let (c2, c3) = candidates
        .into_iter()
        .min_by(|p, q| sse(p.0, p.1).total_cmp(&sse(q.0, q.1)))
        .unwrap();
    let my = mean(y);
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    TwoTermFit {
        c2,
        c3,
        r_squared: 1.0 - sse(c2, c3) / sst,
    }
}
