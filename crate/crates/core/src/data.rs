//! Synthetic data-generating processes, splitting and dataset CSV I/O.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{config_err, Error, Result};
use crate::model::Inputs;
use crate::tensor::Tensor;

/// Seed fixing the ground-truth parameters shared by every trial.
pub const MASTER_SEED: u64 = 0x5eed_0001;

/// Centres of the Gaussian bumps in the sum-of-Gaussian process.
pub const SUM_GAUSSIAN_CENTRES: [f64; 4] = [-2.4, -0.8, 0.8, 2.4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dgp {
    SumGaussian,
    Polynomial,
    Sinusoid,
    Multivariate,
}

impl Dgp {
    pub const ALL: [Dgp; 4] = [Dgp::SumGaussian, Dgp::Polynomial, Dgp::Sinusoid, Dgp::Multivariate];

    pub fn name(self) -> &'static str {
        match self {
            Dgp::SumGaussian => "sum_gaussian",
            Dgp::Polynomial => "polynomial",
            Dgp::Sinusoid => "sinusoid",
            Dgp::Multivariate => "multivariate",
        }
    }

    pub fn n_samples(self) -> usize {
        match self {
            Dgp::SumGaussian => 2000,
            _ => 1000,
        }
    }

    pub fn n_features(self) -> usize {
        match self {
            Dgp::Multivariate => 5,
            _ => 1,
        }
    }
}

impl fmt::Display for Dgp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dgp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Dgp::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown dgp '{s}'")))
    }
}

/// A process together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpSpec {
    pub dgp: Dgp,
    pub n_samples: usize,
    pub master_seed: u64,
    /// `β₀..β₄` for the sum-of-Gaussian mean; empty otherwise.
    pub beta: Vec<f64>,
}

impl DgpSpec {
    pub fn new(dgp: Dgp) -> Self {
        DgpSpec::with_master_seed(dgp, MASTER_SEED)
    }

    pub fn with_master_seed(dgp: Dgp, master_seed: u64) -> Self {
        let beta = match dgp {
            Dgp::SumGaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
                let n = Normal::new(1.0, 1.0).expect("unit normal");
                (0..=SUM_GAUSSIAN_CENTRES.len()).map(|_| n.sample(&mut rng)).collect()
            }
            _ => Vec::new(),
        };
        DgpSpec {
            dgp,
            n_samples: dgp.n_samples(),
            master_seed,
            beta,
        }
    }

    /// Noise-free mean at `x`.
    pub fn mean(&self, x: &[f64]) -> f64 {
        match self.dgp {
            Dgp::SumGaussian => {
                self.beta[0]
                    + SUM_GAUSSIAN_CENTRES
                        .iter()
                        .zip(&self.beta[1..])
                        .map(|(m, b)| b * (-(x[0] - m).powi(2) / 2.0).exp())
                        .sum::<f64>()
            }
            Dgp::Polynomial => x[0].powi(3),
            Dgp::Sinusoid => (4.0 * PI * x[0]).sin(),
            Dgp::Multivariate => {
                10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
            }
        }
    }

    /// Noise standard deviation at `x`.
    pub fn noise_std(&self, x: &[f64]) -> f64 {
        match self.dgp {
            Dgp::SumGaussian => {
                let sign = (x[0].abs() - 1.5).signum();
                (2.0 * sign.max(0.0)).sqrt() + 0.2
            }
            Dgp::Polynomial => 2.0 * x[0].abs() + x[0].exp(),
            Dgp::Sinusoid => 0.5 + 0.3 * (4.0 * PI * x[0]).sin(),
            Dgp::Multivariate => 3.0 * x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    fn x_range(&self) -> (f64, f64) {
        match self.dgp {
            Dgp::SumGaussian | Dgp::Polynomial => (-4.0, 4.0),
            Dgp::Sinusoid => (-0.5, 0.5),
            Dgp::Multivariate => (0.0, 1.0),
        }
    }

    /// One noise trial. Inputs and noise come from `trial_seed` only.
    pub fn generate(&self, trial_seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let p = self.dgp.n_features();
        let (lo, hi) = self.x_range();
        let ux = Uniform::new(lo, hi);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut xs = Vec::with_capacity(self.n_samples * p);
        let mut ys = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            let x: Vec<f64> = (0..p).map(|_| ux.sample(&mut rng)).collect();
            let e: f64 = std_normal.sample(&mut rng);
            ys.push(self.mean(&x) + self.noise_std(&x) * e);
            xs.extend(x);
        }
        Dataset {
            name: self.dgp.name().to_string(),
            trial_seed,
            x: Tensor::from_vec(self.n_samples, p, xs).expect("consistent sizes"),
            future: Vec::new(),
            y: Tensor::column(ys),
            split: vec![Split::Train; self.n_samples],
        }
    }
}

pub fn gen_sum_gaussian(trial_seed: u64) -> Dataset {
    DgpSpec::new(Dgp::SumGaussian).generate(trial_seed)
}

pub fn gen_polynomial(trial_seed: u64) -> Dataset {
    DgpSpec::new(Dgp::Polynomial).generate(trial_seed)
}

pub fn gen_sinusoid(trial_seed: u64) -> Dataset {
    DgpSpec::new(Dgp::Sinusoid).generate(trial_seed)
}

pub fn gen_multivariate(trial_seed: u64) -> Dataset {
    DgpSpec::new(Dgp::Multivariate).generate(trial_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => config_err(format!("unknown split '{other}'")),
        }
    }
}

/// Rows of features, optional per-horizon future blocks, targets and split
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub trial_seed: u64,
    /// N×p features (lagged targets for time series).
    pub x: Tensor,
    /// One N×f block per horizon; empty for single-output data.
    pub future: Vec<Tensor>,
    /// N×H targets.
    pub y: Tensor,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizons(&self) -> usize {
        self.y.cols()
    }

    pub fn is_multi_horizon(&self) -> bool {
        !self.future.is_empty()
    }

    pub fn inputs(&self) -> Inputs<'_> {
        if self.future.is_empty() {
            Inputs::Single(&self.x)
        } else {
            Inputs::MultiHorizon {
                lagged: &self.x,
                future: &self.future,
            }
        }
    }

    /// Targets of horizon `h` (zero-based).
    pub fn target(&self, h: usize) -> Vec<f64> {
        self.y.col(h)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            trial_seed: self.trial_seed,
            x: self.x.select_rows(idx),
            future: self.future.iter().map(|f| f.select_rows(idx)).collect(),
            y: self.y.select_rows(idx),
            split: idx.iter().map(|&i| self.split[i]).collect(),
        }
    }

    pub fn part(&self, split: Split) -> Dataset {
        self.select(&self.indices(split))
    }

    /// Random split with `round(train_fraction·N)` training rows and the
    /// rest for validation.
    pub fn split(mut self, train_fraction: f64, seed: u64) -> Result<Dataset> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return config_err(format!("train fraction must lie in (0,1), got {train_fraction}"));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train_fraction * n as f64).round() as usize;
        self.split = vec![Split::Validation; n];
        for &i in &order[..n_train] {
            self.split[i] = Split::Train;
        }
        Ok(self)
    }

    /// Contiguous train/validation/test blocks in row order.
    pub fn split_chronological(mut self, train_fraction: f64, val_fraction: f64) -> Result<Dataset> {
        if !(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction <= 1.0) {
            return config_err(format!(
                "invalid chronological split fractions {train_fraction}, {val_fraction}"
            ));
        }
        let n = self.len();
        let a = (train_fraction * n as f64).round() as usize;
        let b = ((train_fraction + val_fraction) * n as f64).round() as usize;
        self.split = (0..n)
            .map(|i| {
                if i < a {
                    Split::Train
                } else if i < b {
                    Split::Validation
                } else {
                    Split::Test
                }
            })
            .collect();
        Ok(self)
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.x.cols()).map(|j| format!("x{j}")).collect();
        for (b, block) in self.future.iter().enumerate() {
            h.extend((1..=block.cols()).map(|j| format!("f{}_{j}", b + 1)));
        }
        h.push("y".into());
        h.extend((2..=self.horizons()).map(|k| format!("y_h{k}")));
        h.push("split".into());
        h
    }

    /// Writes `#`-prefixed `comments`, a header row and one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = (0..self.x.cols()).map(|j| fmt_f64(self.x.get(i, j))).collect();
            for block in &self.future {
                rec.extend((0..block.cols()).map(|j| fmt_f64(block.get(i, j))));
            }
            rec.extend((0..self.horizons()).map(|h| fmt_f64(self.y.get(i, h))));
            rec.push(self.split[i].name().into());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`Dataset::write_csv`]; `#` lines are skipped.
    pub fn read_csv<R: Read>(input: R, name: &str) -> Result<Dataset> {
        let table = CsvTable::read(input)?;
        let col_of = |h: &str| table.headers.iter().position(|c| c == h);
        let mut x_cols = Vec::new();
        while let Some(c) = col_of(&format!("x{}", x_cols.len() + 1)) {
            x_cols.push(c);
        }
        let mut future_cols: Vec<Vec<usize>> = Vec::new();
        loop {
            let b = future_cols.len() + 1;
            let mut cols = Vec::new();
            while let Some(c) = col_of(&format!("f{b}_{}", cols.len() + 1)) {
                cols.push(c);
            }
            if cols.is_empty() {
                break;
            }
            future_cols.push(cols);
        }
        let Some(y0) = col_of("y") else {
            return Err(Error::Data { line: table.header_line, msg: "missing 'y' column".into() });
        };
        let mut y_cols = vec![y0];
        while let Some(c) = col_of(&format!("y_h{}", y_cols.len() + 1)) {
            y_cols.push(c);
        }
        let split_col = col_of("split");

        let n = table.rows.len();
        let mut x = Vec::with_capacity(n * x_cols.len());
        let mut future: Vec<Vec<f64>> = vec![Vec::new(); future_cols.len()];
        let mut y = Vec::with_capacity(n * y_cols.len());
        let mut split = Vec::with_capacity(n);
        for (r, row) in table.rows.iter().enumerate() {
            let line = table.lines[r];
            for &c in &x_cols {
                x.push(table.number(r, c)?);
            }
            for (b, cols) in future_cols.iter().enumerate() {
                for &c in cols {
                    future[b].push(table.number(r, c)?);
                }
            }
            for &c in &y_cols {
                y.push(table.number(r, c)?);
            }
            split.push(match split_col {
                Some(c) => row[c].parse().map_err(|e: Error| Error::Data { line, msg: e.to_string() })?,
                None => Split::Train,
            });
        }
        Ok(Dataset {
            name: name.to_string(),
            trial_seed: 0,
            x: Tensor::from_vec(n, x_cols.len(), x)?,
            future: future
                .into_iter()
                .zip(&future_cols)
                .map(|(v, c)| Tensor::from_vec(n, c.len(), v))
                .collect::<Result<_>>()?,
            y: Tensor::from_vec(n, y_cols.len(), y)?,
            split,
        })
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A rectangular CSV table with source line numbers.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub header_line: u64,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

impl CsvTable {
    /// Reads a headed CSV, skipping `#` comment lines. Rows whose field
    /// count differs from the header are reported with their line number.
    pub fn read<R: Read>(input: R) -> Result<CsvTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let header_line = rdr.position().line();
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != headers.len() {
                return Err(Error::Data {
                    line,
                    msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            rows.push(rec.iter().map(str::to_string).collect());
            lines.push(line);
        }
        Ok(CsvTable {
            headers,
            header_line,
            rows,
            lines,
        })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data { line: self.header_line, msg: format!("missing column '{name}'") })
    }

    pub fn number(&self, row: usize, col: usize) -> Result<f64> {
        let s = &self.rows[row][col];
        s.parse::<f64>().map_err(|_| Error::Data {
            line: self.lines[row],
            msg: format!("column '{}': '{s}' is not a number", self.headers[col]),
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        (0..self.rows.len()).map(|r| self.number(r, c)).collect()
    }
}

/// How a time-series table maps onto multi-horizon samples.
///
/// For a forecast origin at row `t`, the lagged inputs are the target at
/// rows `t−lags..t−1`, horizon `h` (one-based) targets row `t+h−1`, and its
/// future block holds `future_columns[h−1]` read at row `t+h−1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesMapping {
    pub target: String,
    pub lags: usize,
    pub horizons: usize,
    pub future_columns: Vec<Vec<String>>,
}

impl SeriesMapping {
    pub fn validate(&self) -> Result<()> {
        if self.lags == 0 {
            return config_err("series mapping needs at least one lag");
        }
        if self.horizons == 0 {
            return config_err("series mapping needs at least one horizon");
        }
        if self.future_columns.len() != self.horizons {
            return config_err(format!(
                "mapping declares {} horizons but {} future blocks",
                self.horizons,
                self.future_columns.len()
            ));
        }
        Ok(())
    }

    /// Builds samples from a table; rows are taken in file order.
    pub fn build(&self, table: &CsvTable, name: &str) -> Result<Dataset> {
        self.validate()?;
        let target = table.column(&self.target)?;
        let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
        for cols in &self.future_columns {
            for c in cols {
                if !cache.contains_key(c.as_str()) {
                    cache.insert(c, table.column(c)?);
                }
            }
        }
        build_series(
            name,
            &target,
            self.lags,
            self.horizons,
            |h, t| self.future_columns[h].iter().map(|c| cache[c.as_str()][t]).collect(),
            self.future_columns.iter().map(Vec::len).collect(),
        )
    }
}

fn build_series(
    name: &str,
    target: &[f64],
    lags: usize,
    horizons: usize,
    future_at: impl Fn(usize, usize) -> Vec<f64>,
    widths: Vec<usize>,
) -> Result<Dataset> {
    if target.len() < lags + horizons {
        return config_err(format!(
            "series of length {} is too short for {lags} lags and {horizons} horizons",
            target.len()
        ));
    }
    let origins: Vec<usize> = (lags..=target.len() - horizons).collect();
    let n = origins.len();
    let mut x = Vec::with_capacity(n * lags);
    let mut y = Vec::with_capacity(n * horizons);
    let mut future: Vec<Vec<f64>> = vec![Vec::new(); horizons];
    for &t in &origins {
        x.extend_from_slice(&target[t - lags..t]);
        for h in 0..horizons {
            y.push(target[t + h]);
            future[h].extend(future_at(h, t + h));
        }
    }
    Ok(Dataset {
        name: name.to_string(),
        trial_seed: 0,
        x: Tensor::from_vec(n, lags, x)?,
        future: future
            .into_iter()
            .zip(widths)
            .map(|(v, w)| Tensor::from_vec(n, w, v))
            .collect::<Result<_>>()?,
        y: Tensor::from_vec(n, horizons, y)?,
        split: vec![Split::Train; n],
    })
}

/// Parameters of the synthetic autoregressive series.
///
/// `z_t = φ·z_{t−1} + c·d_t + σ_t·ε_t` with a daily-periodic driver
/// `d_t = sin(2πt/period)` and noise scale `σ_t = σ₀ + σ₁·|d_t|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArSeriesSpec {
    pub length: usize,
    pub phi: f64,
    pub drive: f64,
    pub period: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub lags: usize,
    pub horizons: usize,
}

impl Default for ArSeriesSpec {
    fn default() -> Self {
        ArSeriesSpec {
            length: 1200,
            phi: 0.7,
            drive: 1.0,
            period: 24.0,
            sigma0: 0.2,
            sigma1: 0.6,
            lags: 8,
            horizons: 4,
        }
    }
}

impl ArSeriesSpec {
    fn driver(&self, t: usize) -> f64 {
        (2.0 * PI * t as f64 / self.period).sin()
    }

    /// The raw series with its two known-ahead covariates per step:
    /// the driver and its quadrature companion.
    pub fn series(&self, seed: u64) -> (Vec<f64>, Vec<[f64; 2]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::with_capacity(self.length);
        let mut cov = Vec::with_capacity(self.length);
        let mut prev = 0.0;
        for t in 0..self.length {
            let d = self.driver(t);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let v = self.phi * prev + self.drive * d + (self.sigma0 + self.sigma1 * d.abs()) * e;
            z.push(v);
            cov.push([d, (2.0 * PI * t as f64 / self.period).cos()]);
            prev = v;
        }
        (z, cov)
    }

    /// Multi-horizon samples; each future block is the two covariates at
    /// the target step.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let (z, cov) = self.series(seed);
        let mut d = build_series(
            "ar_series",
            &z,
            self.lags,
            self.horizons,
            |_, t| cov[t].to_vec(),
            vec![2; self.horizons],
        )?;
        d.trial_seed = seed;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_law_examples() {
        let sg = DgpSpec::new(Dgp::SumGaussian);
        assert!((sg.noise_std(&[0.0]) - 0.2).abs() < 1e-15);
        assert!((sg.noise_std(&[2.0]) - (2f64.sqrt() + 0.2)).abs() < 1e-15);
        assert!((sg.noise_std(&[-2.0]) - 1.6142).abs() < 1e-4);

        let poly = DgpSpec::new(Dgp::Polynomial);
        assert_eq!(poly.noise_std(&[0.0]), 1.0);
        assert_eq!(poly.mean(&[2.0]), 8.0);
        assert!((poly.noise_std(&[4.0]) - 62.598).abs() < 1e-3);

        let sin = DgpSpec::new(Dgp::Sinusoid);
        assert_eq!(sin.mean(&[0.0]), 0.0);
        assert_eq!(sin.noise_std(&[0.0]), 0.5);
        assert!((sin.noise_std(&[0.125]) - 0.8).abs() < 1e-12);

        let mv = DgpSpec::new(Dgp::Multivariate);
        assert!((mv.mean(&[0.5; 5]) - 14.571).abs() < 1e-3);
        assert!((mv.noise_std(&[0.5; 5]) - 3.354).abs() < 1e-3);
        assert!((mv.mean(&[0.0; 5]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sizes_and_ranges() {
        for dgp in Dgp::ALL {
            let d = DgpSpec::new(dgp).generate(3);
            assert_eq!(d.len(), dgp.n_samples());
            assert_eq!(d.x.cols(), dgp.n_features());
            let (lo, hi) = DgpSpec::new(dgp).x_range();
            assert!(d.x.data().iter().all(|&v| v >= lo && v < hi));
        }
    }

    #[test]
    fn ground_truth_is_shared_across_trials() {
        let a = DgpSpec::new(Dgp::SumGaussian);
        let b = DgpSpec::new(Dgp::SumGaussian);
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.beta.len(), 5);
        assert_eq!(a.generate(1), b.generate(1));
        assert_ne!(a.generate(1).y, a.generate(2).y);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = gen_sinusoid(0);
        let s = d.clone().split(0.8, 7).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 800);
        assert_eq!(s.indices(Split::Validation).len(), 200);
        assert_eq!(s.split, d.clone().split(0.8, 7).unwrap().split);
        assert_ne!(s.split, d.split(0.8, 8).unwrap().split);
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_multivariate(5).split(0.8, 1).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, &["seed=5".to_string()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=5\nx1,x2,x3,x4,x5,y,split\n"));
        let back = Dataset::read_csv(&buf[..], "multivariate").unwrap();
        assert_eq!(back.x, d.x);
        assert_eq!(back.y, d.y);
        assert_eq!(back.split, d.split);
    }

    #[test]
    fn multi_horizon_csv_round_trip() {
        let spec = ArSeriesSpec { length: 60, ..Default::default() };
        let d = spec.generate(2).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, &[]).unwrap();
        let back = Dataset::read_csv(&buf[..], "ar").unwrap();
        assert_eq!(back.future, d.future);
        assert_eq!(back.y, d.y);
        assert_eq!(back.horizons(), 4);
    }

    #[test]
    fn ragged_row_reports_line() {
        let text = "# comment\nx1,y,split\n1,2,train\n3,4\n";
        match Dataset::read_csv(text.as_bytes(), "t") {
            Err(Error::Data { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected data error, got {other:?}"),
        }
        let bad = "x1,y\n1,abc\n";
        assert!(matches!(Dataset::read_csv(bad.as_bytes(), "t"), Err(Error::Data { line: 2, .. })));
    }

    #[test]
    fn series_mapping_layout() {
        let text = "z,c\n0,10\n1,11\n2,12\n3,13\n4,14\n";
        let table = CsvTable::read(text.as_bytes()).unwrap();
        let m = SeriesMapping {
            target: "z".into(),
            lags: 2,
            horizons: 2,
            future_columns: vec![vec!["c".into()], vec!["c".into()]],
        };
        let d = m.build(&table, "s").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.x.data(), &[0., 1., 1., 2.]);
        assert_eq!(d.y.data(), &[2., 3., 3., 4.]);
        assert_eq!(d.future[0].data(), &[12., 13.]);
        assert_eq!(d.future[1].data(), &[13., 14.]);

        let missing = SeriesMapping { future_columns: vec![vec!["c".into()]], ..m.clone() };
        assert!(matches!(missing.build(&table, "s"), Err(Error::Config(_))));
        let unknown = SeriesMapping { target: "nope".into(), ..m };
        assert!(matches!(unknown.build(&table, "s"), Err(Error::Data { .. })));
    }

    #[test]
    fn chronological_split_blocks() {
        let d = ArSeriesSpec::default().generate(0).unwrap().split_chronological(0.6, 0.2).unwrap();
        let n = d.len();
        let tr = d.indices(Split::Train);
        assert_eq!(tr, (0..tr.len()).collect::<Vec<_>>());
        assert_eq!(*d.indices(Split::Test).last().unwrap(), n - 1);
        assert!(!d.indices(Split::Validation).is_empty());
    }
}
