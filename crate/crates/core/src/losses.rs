//! Interval losses recorded on an autodiff graph.
//!
//! Every builder takes `l`, `u` and `y` as N×1 nodes and returns a scalar
//! node. [`interval_loss`] dispatches on a [`LossConfig`] starting from the
//! raw N×2 network output.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{config_err, Error, Result};
use crate::metrics;
use crate::model::IntervalBatch;

/// Default softening factor for the tanh count.
pub const TANH_S: f64 = 50.0;
/// Default softening factor for the sigmoid count.
pub const SIGMOID_S: f64 = 100.0;
/// Slope of the sigmoid gate on the coverage deficit in [`dic_loss`].
pub const DIC_GATE_SLOPE: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossFamily {
    SumK,
    QdEq,
    CwcQuanEq,
    CwcShriEq,
    CwcLiEq,
    Dic,
    Pinball,
    Mve,
}

impl LossFamily {
    pub const ALL: [LossFamily; 8] = [
        LossFamily::SumK,
        LossFamily::QdEq,
        LossFamily::CwcQuanEq,
        LossFamily::CwcShriEq,
        LossFamily::CwcLiEq,
        LossFamily::Dic,
        LossFamily::Pinball,
        LossFamily::Mve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::SumK => "sum_k",
            LossFamily::QdEq => "qd_eq",
            LossFamily::CwcQuanEq => "cwc_quan_eq",
            LossFamily::CwcShriEq => "cwc_shri_eq",
            LossFamily::CwcLiEq => "cwc_li_eq",
            LossFamily::Dic => "dic",
            LossFamily::Pinball => "pinball",
            LossFamily::Mve => "mve",
        }
    }

    /// Whether γ trades coverage against width for this family.
    pub fn has_gamma(self) -> bool {
        !matches!(self, LossFamily::Pinball | LossFamily::Mve | LossFamily::Dic)
    }

    /// The CWC variants put γ inside an exponential.
    pub fn is_cwc(self) -> bool {
        matches!(self, LossFamily::CwcQuanEq | LossFamily::CwcShriEq | LossFamily::CwcLiEq)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match key.as_str() {
            "sumk" => "sum_k",
            "qd" => "qd_eq",
            "cwc_quan" => "cwc_quan_eq",
            "cwc_shri" => "cwc_shri_eq",
            "cwc_li" => "cwc_li_eq",
            "qr" => "pinball",
            other => other,
        };
        LossFamily::ALL
            .into_iter()
            .find(|f| f.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown loss family '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountKind {
    /// `σ(s(y−l))·σ(s(u−y))`
    Sigmoid,
    /// `½·max(0, tanh(s(y−l)) + tanh(s(u−y)))`
    Tanh,
}

/// Smooth replacement for the coverage indicator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothCountKind {
    pub kind: CountKind,
    pub s: f64,
}

impl SmoothCountKind {
    pub fn tanh(s: f64) -> Self {
        SmoothCountKind { kind: CountKind::Tanh, s }
    }

    pub fn sigmoid(s: f64) -> Self {
        SmoothCountKind { kind: CountKind::Sigmoid, s }
    }
}

impl Default for SmoothCountKind {
    fn default() -> Self {
        SmoothCountKind::tanh(TANH_S)
    }
}

/// Hyperparameters of one loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub family: LossFamily,
    /// Target miscoverage; the nominal coverage is `1 − delta`.
    pub delta: f64,
    pub gamma: f64,
    /// Fraction of each batch treated as large widths (sum-k).
    pub k: f64,
    /// Relative weight of the narrow widths (sum-k).
    pub lambda: f64,
    pub count: SmoothCountKind,
    pub alpha: f64,
    pub beta: f64,
    /// Width normalizer taken from the training targets.
    pub r_quantile: f64,
}

impl LossConfig {
    /// Defaults for `family`: δ = 0.1, k = 0.3, λ = 0.1, tanh count with
    /// s = 50, α = 1, β = 2, and γ = 1/δ for DIC (1 otherwise).
    pub fn new(family: LossFamily, r_quantile: f64) -> Self {
        let delta = 0.1;
        LossConfig {
            family,
            delta,
            gamma: if family == LossFamily::Dic { 1.0 / delta } else { 1.0 },
            k: 0.3,
            lambda: 0.1,
            count: SmoothCountKind::default(),
            alpha: 1.0,
            beta: 2.0,
            r_quantile,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return config_err(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return config_err(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.r_quantile > 0.0 && self.r_quantile.is_finite()) {
            return config_err(format!("r_quantile must be positive, got {}", self.r_quantile));
        }
        if !(self.count.s > 0.0) {
            return config_err(format!("softening factor must be positive, got {}", self.count.s));
        }
        if self.family == LossFamily::SumK {
            if !(self.k > 0.0 && self.k < 1.0) {
                return config_err(format!("k must lie in (0,1), got {}", self.k));
            }
            if !(self.lambda > 0.0) {
                return config_err(format!("lambda must be positive, got {}", self.lambda));
            }
        }
        Ok(())
    }

    /// Number of large widths for a batch of `n` rows: `max(1, floor(k·n))`.
    pub fn large_count(&self, n: usize) -> usize {
        ((self.k * n as f64).floor() as usize).max(1)
    }
}

fn scaled_diff(g: &mut Graph, a: NodeId, b: NodeId, s: f64) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    g.scale(d, s)
}

/// Per-sample `σ(s(y−l))·σ(s(u−y))`.
pub fn count_sigmoid(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, s: f64) -> Result<NodeId> {
    let a = scaled_diff(g, y, l, s)?;
    let b = scaled_diff(g, u, y, s)?;
    let sa = g.sigmoid(a)?;
    let sb = g.sigmoid(b)?;
    g.mul(sa, sb)
}

/// Per-sample `½·max(0, tanh(s(y−l)) + tanh(s(u−y)))`.
pub fn count_tanh(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, s: f64) -> Result<NodeId> {
    let a = scaled_diff(g, y, l, s)?;
    let b = scaled_diff(g, u, y, s)?;
    let ta = g.tanh(a)?;
    let tb = g.tanh(b)?;
    let xi = g.add(ta, tb)?;
    let clamped = g.relu(xi)?;
    g.scale(clamped, 0.5)
}

pub fn soft_count(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, kind: SmoothCountKind) -> Result<NodeId> {
    match kind.kind {
        CountKind::Sigmoid => count_sigmoid(g, l, u, y, kind.s),
        CountKind::Tanh => count_tanh(g, l, u, y, kind.s),
    }
}

/// Mean soft coverage.
pub fn picp_smooth(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, kind: SmoothCountKind) -> Result<NodeId> {
    let c = soft_count(g, l, u, y, kind)?;
    g.mean(c)
}

/// `max(0, (1−δ) − picp)`.
fn coverage_deficit(g: &mut Graph, picp: NodeId, delta: f64) -> Result<NodeId> {
    let neg = g.neg(picp)?;
    let d = g.shift(neg, 1.0 - delta)?;
    g.relu(d)
}

/// Mean of `widths` divided by `r_quantile`.
fn normalized_mean(g: &mut Graph, widths: NodeId, r_quantile: f64) -> Result<NodeId> {
    let m = g.mean(widths)?;
    g.scale(m, 1.0 / r_quantile)
}

fn width(g: &mut Graph, l: NodeId, u: NodeId) -> Result<NodeId> {
    g.sub(u, l)
}

/// Mean of the `k` largest widths plus `lambda` times the mean of the rest,
/// divided by `r_quantile`.
pub fn sumk_width(g: &mut Graph, widths: NodeId, k: usize, lambda: f64, r_quantile: f64) -> Result<NodeId> {
    let n = g.value(widths).len();
    if k == 0 || k >= n {
        return config_err(format!("sum-k needs 1 <= K < N, got K={k}, N={n}"));
    }
    if !(r_quantile > 0.0) {
        return config_err(format!("r_quantile must be positive, got {r_quantile}"));
    }
    let top = g.top_k_sum(widths, k)?;
    let total = g.sum(widths)?;
    let rest = g.sub(total, top)?;
    let a = g.scale(top, 1.0 / (k as f64 * r_quantile))?;
    let b = g.scale(rest, lambda / ((n - k) as f64 * r_quantile))?;
    g.add(a, b)
}

/// `max(0, (1−δ) − PICP_soft) + γ·W`, with `K = max(1, floor(k·N))`.
pub fn sumk_loss(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let n = g.value(y).len();
    let picp = picp_smooth(g, l, u, y, cfg.count)?;
    let deficit = coverage_deficit(g, picp, cfg.delta)?;
    let w = width(g, l, u)?;
    let wk = sumk_width(g, w, cfg.large_count(n), cfg.lambda, cfg.r_quantile)?;
    let pen = g.scale(wk, cfg.gamma)?;
    g.add(deficit, pen)
}

/// Width averaged over softly covered samples, divided by `r_quantile`.
///
/// Soft counts act as weights normalized by their sum. When the total weight
/// is zero the term is the constant 0.
pub fn pinaw_captured(g: &mut Graph, widths: NodeId, counts: NodeId, r_quantile: f64) -> Result<NodeId> {
    let mass = g.sum(counts)?;
    if g.item(mass) <= 0.0 {
        return g.scalar(0.0);
    }
    let weighted = g.mul(widths, counts)?;
    let num = g.sum(weighted)?;
    let avg = g.div(num, mass)?;
    g.scale(avg, 1.0 / r_quantile)
}

/// `max(0, (1−δ) − PICP_soft)² + γ·PINAW_capt`.
pub fn qd_loss_eq(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let c = soft_count(g, l, u, y, cfg.count)?;
    let picp = g.mean(c)?;
    let deficit = coverage_deficit(g, picp, cfg.delta)?;
    let d2 = g.square(deficit)?;
    let w = width(g, l, u)?;
    let capt = pinaw_captured(g, w, c, cfg.r_quantile)?;
    let pen = g.scale(capt, cfg.gamma)?;
    g.add(d2, pen)
}

/// `sqrt(mean(w²)) / r_quantile`.
pub fn pinrw(g: &mut Graph, widths: NodeId, r_quantile: f64) -> Result<NodeId> {
    let sq = g.square(widths)?;
    let m = g.mean(sq)?;
    let r = g.sqrt(m)?;
    g.scale(r, 1.0 / r_quantile)
}

/// `exp(γ·max(0, (1−δ) − PICP_soft))`.
fn exp_penalty(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let picp = picp_smooth(g, l, u, y, cfg.count)?;
    let deficit = coverage_deficit(g, picp, cfg.delta)?;
    let z = g.scale(deficit, cfg.gamma)?;
    g.exp(z)
}

/// `PINRW·(1 + exp(γ·max(0, (1−δ) − PICP_soft)))`.
pub fn cwc_quan_eq(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let e = exp_penalty(g, l, u, y, cfg)?;
    let w = width(g, l, u)?;
    let r = pinrw(g, w, cfg.r_quantile)?;
    let f = g.shift(e, 1.0)?;
    g.mul(r, f)
}

/// `PINAW + exp(γ·max(0, (1−δ) − PICP_soft))`.
pub fn cwc_shri_eq(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let e = exp_penalty(g, l, u, y, cfg)?;
    let w = width(g, l, u)?;
    let p = normalized_mean(g, w, cfg.r_quantile)?;
    g.add(p, e)
}

/// `(β/2)·PINAW + (α + (β/2)·PINAW)·exp(γ·max(0, (1−δ) − PICP_soft))`.
pub fn cwc_li_eq(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let e = exp_penalty(g, l, u, y, cfg)?;
    let w = width(g, l, u)?;
    let p = normalized_mean(g, w, cfg.r_quantile)?;
    let half = g.scale(p, cfg.beta / 2.0)?;
    let a = g.shift(half, cfg.alpha)?;
    let ae = g.mul(a, e)?;
    g.add(half, ae)
}

/// `PINAW + gate·γ·[Σ(l−y)⁺ + Σ(y−u)⁺]`, where the gate is a steep sigmoid
/// of the soft coverage deficit `(1−δ) − PICP_soft`.
pub fn dic_loss(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let picp = picp_smooth(g, l, u, y, cfg.count)?;
    let neg = g.neg(picp)?;
    let d = g.shift(neg, 1.0 - cfg.delta)?;
    let z = g.scale(d, DIC_GATE_SLOPE)?;
    let gate = g.sigmoid(z)?;

    let below = g.sub(l, y)?;
    let below = g.relu(below)?;
    let above = g.sub(y, u)?;
    let above = g.relu(above)?;
    let miss = g.add(below, above)?;
    let miss = g.sum(miss)?;
    let pun = g.scale(miss, cfg.gamma)?;
    let gated = g.mul(gate, pun)?;

    let w = width(g, l, u)?;
    let p = normalized_mean(g, w, cfg.r_quantile)?;
    g.add(p, gated)
}

/// `ρ_α(r) = max(αr, (α−1)r)` summed over `r` elementwise.
fn pinball_sum(g: &mut Graph, r: NodeId, alpha: f64) -> Result<NodeId> {
    // max(αr, (α−1)r) = (α−1)r + max(0, r)
    let lin = g.scale(r, alpha - 1.0)?;
    let pos = g.relu(r)?;
    let v = g.add(lin, pos)?;
    g.sum(v)
}

/// Mean of `ρ_{δ/2}(y−l) + ρ_{1−δ/2}(y−u)`.
pub fn pinball_pair_loss(g: &mut Graph, l: NodeId, u: NodeId, y: NodeId, delta: f64) -> Result<NodeId> {
    let n = g.value(y).len();
    if n == 0 {
        return config_err("pinball loss on an empty batch");
    }
    let rl = g.sub(y, l)?;
    let ru = g.sub(y, u)?;
    let a = pinball_sum(g, rl, delta / 2.0)?;
    let b = pinball_sum(g, ru, 1.0 - delta / 2.0)?;
    let s = g.add(a, b)?;
    g.scale(s, 1.0 / n as f64)
}

/// `½·Σ(log σ² + (y−μ)²/σ²)`.
pub fn mve_loss(g: &mut Graph, mu: NodeId, sigma2: NodeId, y: NodeId) -> Result<NodeId> {
    let logv = g.log(sigma2)?;
    let r = g.sub(y, mu)?;
    let r2 = g.square(r)?;
    let q = g.div(r2, sigma2)?;
    let t = g.add(logv, q)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5)
}

/// Standard normal quantile at `1 − δ/2`.
pub fn z_score(delta: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("unit normal")
        .inverse_cdf(1.0 - delta / 2.0)
}

/// `μ ± z_{1−δ/2}·σ`.
pub fn mve_to_interval(mu: &[f64], sigma2: &[f64], delta: f64) -> IntervalBatch {
    let z = z_score(delta);
    let (lower, upper) = mu
        .iter()
        .zip(sigma2)
        .map(|(&m, &v)| {
            let h = z * v.sqrt();
            (m - h, m + h)
        })
        .unzip();
    IntervalBatch { lower, upper }
}

/// `PINAW·(1 + exp(γ·max(0, (1−δ) − PICP)))` with exact PICP; evaluation only.
pub fn cwc_ori(l: &[f64], u: &[f64], y: &[f64], gamma: f64, delta: f64, r_quantile: f64) -> f64 {
    let picp = metrics::picp_exact(l, u, y);
    let p = metrics::pinaw(l, u, r_quantile);
    p * (1.0 + (gamma * (1.0 - delta - picp).max(0.0)).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Converts a raw two-column output into an interval.
///
/// For MVE the columns are the mean and the pre-softplus variance; every
/// other family emits (lower, upper) directly.
pub fn output_to_interval(raw: IntervalBatch, cfg: &LossConfig) -> IntervalBatch {
    match cfg.family {
        LossFamily::Mve => {
            let var: Vec<f64> = raw.upper.iter().map(|&v| softplus(v)).collect();
            mve_to_interval(&raw.lower, &var, cfg.delta)
        }
        _ => raw,
    }
}

/// Loss of `cfg.family` on an N×2 output node against N×1 targets `y`.
pub fn interval_loss(g: &mut Graph, output: NodeId, y: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let (n, c) = g.value(output).shape();
    if c != 2 || g.value(y).shape() != (n, 1) {
        return Err(Error::ShapeMismatch {
            op: "interval_loss",
            lhs: (n, c),
            rhs: g.value(y).shape(),
        });
    }
    let a = g.column(output, 0)?;
    let b = g.column(output, 1)?;
    match cfg.family {
        LossFamily::SumK => sumk_loss(g, a, b, y, cfg),
        LossFamily::QdEq => qd_loss_eq(g, a, b, y, cfg),
        LossFamily::CwcQuanEq => cwc_quan_eq(g, a, b, y, cfg),
        LossFamily::CwcShriEq => cwc_shri_eq(g, a, b, y, cfg),
        LossFamily::CwcLiEq => cwc_li_eq(g, a, b, y, cfg),
        LossFamily::Dic => dic_loss(g, a, b, y, cfg),
        LossFamily::Pinball => pinball_pair_loss(g, a, b, y, cfg.delta),
        LossFamily::Mve => {
            let var = g.softplus(b)?;
            mve_loss(g, a, var, y)
        }
    }
}
