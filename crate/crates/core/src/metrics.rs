//! Exact interval metrics computed on plain slices.
//!
//! Widths are `u − l` taken as-is: crossed bounds contribute negative widths
//! and are reported separately through [`crossing_rate`].

use std::io::Write;

use crate::error::{config_err, Error, Result};

/// Fraction of samples with `l ≤ y ≤ u` (inclusive on both ends).
pub fn picp_exact(l: &[f64], u: &[f64], y: &[f64]) -> f64 {
    check_lengths(l, u, y);
    if y.is_empty() {
        return 0.0;
    }
    let hits = l
        .iter()
        .zip(u)
        .zip(y)
        .filter(|((&l, &u), &y)| l <= y && y <= u)
        .count();
    hits as f64 / y.len() as f64
}

/// Linear-interpolation quantile between order statistics.
///
/// The rank is `h = (n − 1)p`, counted from zero, interpolated between the
/// neighbouring order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `q(0.95) − q(0.05)` of the targets.
pub fn quantile_range(y: &[f64]) -> f64 {
    assert!(!y.is_empty(), "quantile range of an empty sample");
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, 0.95) - quantile_sorted(&sorted, 0.05)
}

/// [`quantile_range`] checked for use as a width normalizer.
pub fn width_normalizer(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return config_err("cannot normalize widths by an empty target sample");
    }
    let r = quantile_range(y);
    if !(r > 0.0 && r.is_finite()) {
        return config_err(format!("quantile range {r} is not a positive normalizer"));
    }
    Ok(r)
}

pub fn widths(l: &[f64], u: &[f64]) -> Vec<f64> {
    assert_eq!(l.len(), u.len(), "lower/upper length mismatch");
    u.iter().zip(l).map(|(u, l)| u - l).collect()
}

/// Mean width divided by `r_quantile`.
pub fn pinaw(l: &[f64], u: &[f64], r_quantile: f64) -> f64 {
    let w = widths(l, u);
    if w.is_empty() {
        return 0.0;
    }
    w.iter().sum::<f64>() / (w.len() as f64 * r_quantile)
}

/// Mean of the `floor((1 − p)N)` largest widths divided by `r_quantile`.
pub fn pinalw(l: &[f64], u: &[f64], p: f64, r_quantile: f64) -> Result<f64> {
    let mut w = widths(l, u);
    let k = ((1.0 - p) * w.len() as f64).floor() as usize;
    if k == 0 {
        return config_err(format!("pinalw(p={p}) selects no samples out of {}", w.len()));
    }
    w.sort_by(|a, b| b.total_cmp(a));
    Ok(w[..k].iter().sum::<f64>() / (k as f64 * r_quantile))
}

/// Winkler interval score, averaged and divided by `r_quantile`.
pub fn winkler(l: &[f64], u: &[f64], y: &[f64], delta: f64, r_quantile: f64) -> f64 {
    check_lengths(l, u, y);
    if y.is_empty() {
        return 0.0;
    }
    let total: f64 = l
        .iter()
        .zip(u)
        .zip(y)
        .map(|((&l, &u), &y)| {
            let mut s = (u - l).abs();
            // both penalties can apply when the bounds are crossed
            if y < l {
                s += 2.0 / delta * (l - y);
            }
            if y > u {
                s += 2.0 / delta * (y - u);
            }
            s
        })
        .sum();
    total / (y.len() as f64 * r_quantile)
}

/// Fraction of samples whose upper bound lies below the lower bound.
pub fn crossing_rate(l: &[f64], u: &[f64]) -> f64 {
    assert_eq!(l.len(), u.len(), "lower/upper length mismatch");
    if l.is_empty() {
        return 0.0;
    }
    l.iter().zip(u).filter(|(l, u)| u < l).count() as f64 / l.len() as f64
}

/// Fixed-edge width histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 60;

impl Histogram {
    /// Uniform bins over `[0, max(widths)]`.
    ///
    /// Negative widths land in the first bin and the maximum in the last,
    /// so every sample is counted.
    pub fn of_widths(widths: &[f64], bins: usize) -> Histogram {
        assert!(bins > 0, "histogram needs at least one bin");
        let max = widths.iter().copied().fold(0.0_f64, f64::max);
        let span = if max > 0.0 { max } else { 1.0 };
        let edges = (0..=bins).map(|i| span * i as f64 / bins as f64).collect();
        let mut counts = vec![0u64; bins];
        for &w in widths {
            let b = ((w / span) * bins as f64).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Two-column CSV `bin_left,count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_left,count")?;
        for (left, c) in self.edges.iter().zip(&self.counts) {
            writeln!(out, "{left},{c}")?;
        }
        Ok(())
    }
}

/// Every exact metric for one set of intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub picp: f64,
    pub pinaw: f64,
    /// PINALW at `p = 0.5`.
    pub pinalw: f64,
    pub winkler: f64,
    pub crossing_rate: f64,
    pub width_histogram: Histogram,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 5] = ["picp", "pinaw", "pinalw_p50", "winkler", "crossing_rate"];

    pub fn compute(l: &[f64], u: &[f64], y: &[f64], delta: f64, r_quantile: f64) -> Result<Self> {
        if l.len() != y.len() || u.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "metrics",
                lhs: (l.len(), u.len()),
                rhs: (y.len(), 1),
            });
        }
        Ok(MetricsReport {
            picp: picp_exact(l, u, y),
            pinaw: pinaw(l, u, r_quantile),
            pinalw: pinalw(l, u, 0.5, r_quantile)?,
            winkler: winkler(l, u, y, delta, r_quantile),
            crossing_rate: crossing_rate(l, u),
            width_histogram: Histogram::of_widths(&widths(l, u), HISTOGRAM_BINS),
        })
    }

    /// Values in [`MetricsReport::CSV_COLUMNS`] order.
    pub fn csv_values(&self) -> [f64; 5] {
        [self.picp, self.pinaw, self.pinalw, self.winkler, self.crossing_rate]
    }
}

fn check_lengths(l: &[f64], u: &[f64], y: &[f64]) {
    assert!(
        l.len() == y.len() && u.len() == y.len(),
        "interval/target length mismatch: {} {} {}",
        l.len(),
        u.len(),
        y.len()
    );
}
