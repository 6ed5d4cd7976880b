//! Trial protocol: sweeps over γ, γ selection, controlled-coverage
//! comparison and the artifacts each of them writes.
//!
//! Every (method, γ, trial) cell is independent. Cells run on a bounded
//! worker pool and results are collected in cell order, so outputs do not
//! depend on the worker count.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ini::Ini;
use rayon::prelude::*;

use crate::data::{CsvTable, Dataset, Dgp, DgpSpec, SeriesMapping, Split};
use crate::error::{config_err, Error, Result};
use crate::losses::{CountKind, LossConfig, LossFamily, SmoothCountKind};
use crate::metrics::{Histogram, MetricsReport, HISTOGRAM_BINS};
use crate::model::{MlpSpec, Model, ModelSpec, MultiHorizonSpec};
use crate::stats;
use crate::trainer::{self, TrainConfig};

/// Sections whose keys live in the flat namespace.
const BASE_SECTIONS: [&str; 4] = ["experiment", "train", "loss", "series"];

/// Every recognised key with its section and default value.
const KEYS: [(&str, &str, &str); 30] = [
    ("experiment", "dgp", "sinusoid"),
    ("experiment", "csv", ""),
    ("experiment", "trials", "100"),
    ("experiment", "delta", "0.1"),
    ("experiment", "seed", "0"),
    ("experiment", "master_seed", "1592590337"),
    ("experiment", "train_fraction", "0.8"),
    ("experiment", "workers", "0"),
    ("experiment", "out_dir", "out"),
    ("experiment", "methods", "sum_k,qd_eq"),
    ("experiment", "gammas", "0.1"),
    ("experiment", "hidden", "100,100,100"),
    ("experiment", "batch_norm", "true"),
    ("train", "max_epochs", "2000"),
    ("train", "patience", "100"),
    ("train", "batch_size", "auto"),
    ("train", "learning_rate", "auto"),
    ("loss", "gamma", "auto"),
    ("loss", "k", "0.3"),
    ("loss", "lambda", "0.1"),
    ("loss", "count", "tanh"),
    ("loss", "s", "50"),
    ("loss", "alpha", "1"),
    ("loss", "beta", "2"),
    ("series", "target", "y"),
    ("series", "lags", "8"),
    ("series", "horizons", "1"),
    ("series", "future", ""),
    ("series", "val_fraction", "0.2"),
    ("series", "test_fraction", "0.2"),
];

/// Keys a method section may override.
const METHOD_KEYS: [&str; 9] = ["gammas", "gamma", "learning_rate", "k", "lambda", "count", "s", "alpha", "beta"];

/// Raw key/value settings before resolution.
///
/// Base keys are stored bare (`trials`); per-method overrides as
/// `method.key` (`sum_k.gamma`). Command-line flags use the same names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Names accepted as `--name value` flags for base keys.
    pub fn base_keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(_, k, _)| *k)
    }

    /// Section and default value of a base key.
    pub fn key_info(key: &str) -> Option<(&'static str, &'static str)> {
        KEYS.iter().find(|(_, k, _)| *k == key).map(|(s, _, d)| (*s, *d))
    }

    pub fn method_keys() -> &'static [&'static str] {
        &METHOD_KEYS
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut s = Settings::default();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    None => k.to_string(),
                    Some(sec) if BASE_SECTIONS.contains(&sec) => {
                        if !KEYS.iter().any(|(s2, k2, _)| *s2 == sec && *k2 == k) {
                            return config_err(format!("unknown key '{k}' in section [{sec}]"));
                        }
                        k.to_string()
                    }
                    Some(method) => format!("{method}.{k}"),
                };
                s.set(&key, v)?;
            }
        }
        Ok(s)
    }

    pub fn from_ini_file(path: &Path) -> Result<Self> {
        Settings::from_ini_str(&fs::read_to_string(path)?)
    }

    /// Sets one key, rejecting unknown names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = match key.split_once('.') {
            None if KEYS.iter().any(|(_, k, _)| *k == key) => key.to_string(),
            Some((method, k)) if METHOD_KEYS.contains(&k) => match method.parse::<LossFamily>() {
                Ok(family) => format!("{}.{k}", family.name()),
                Err(_) => return config_err(format!("unknown configuration key '{key}'")),
            },
            _ => return config_err(format!("unknown configuration key '{key}'")),
        };
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        if let Some(v) = self.values.get(key) {
            return v;
        }
        KEYS.iter().find(|(_, k, _)| *k == key).map_or("", |(_, _, d)| d)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(key, self.get(key))
    }

    fn method_value<'a>(&'a self, method: LossFamily, key: &str) -> &'a str {
        self.values
            .get(&format!("{}.{key}", method.name()))
            .map(String::as_str)
            .unwrap_or_else(|| self.get(key))
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_settings(self)
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Dgp(Dgp),
    /// A dataset CSV in the layout of [`Dataset::write_csv`], or a raw
    /// time series when `mapping` is set.
    Csv { path: PathBuf, mapping: Option<SeriesMapping> },
}

/// Loss and optimizer settings of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    /// Template with `r_quantile` filled in per trial.
    pub loss: LossConfig,
    pub learning_rate: Option<f64>,
    /// Sweep grid, strictly positive and ascending.
    pub gammas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: Source,
    pub methods: Vec<MethodConfig>,
    pub trials: usize,
    pub delta: f64,
    /// Trial `t` uses seed `seed + t` for data, split, initialization and
    /// batch order.
    pub seed: u64,
    pub master_seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub train: TrainConfig,
    /// The settings this config was resolved from.
    pub settings: Settings,
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{s}'"))))
        .collect()
}

fn parse_auto<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "auto" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
}

impl ExperimentConfig {
    fn from_settings(s: &Settings) -> Result<Self> {
        let delta: f64 = s.parse("delta")?;
        let csv = s.get("csv");
        let source = if csv.is_empty() {
            Source::Dgp(s.get("dgp").parse()?)
        } else {
            let future = s.get("future");
            let mapping = if future.is_empty() && s.parse::<usize>("horizons")? == 1 && s.get("target") == "y" {
                None
            } else {
                Some(SeriesMapping {
                    target: s.get("target").to_string(),
                    lags: s.parse("lags")?,
                    horizons: s.parse("horizons")?,
                    future_columns: future
                        .split(';')
                        .filter(|b| !b.trim().is_empty())
                        .map(|b| b.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect())
                        .collect(),
                })
            };
            Source::Csv { path: PathBuf::from(csv), mapping }
        };

        let families: Vec<LossFamily> = s.parse_list("methods")?;
        if families.is_empty() {
            return config_err("at least one method is required");
        }
        let mut methods = Vec::new();
        for family in families {
            let mut loss = LossConfig::new(family, 1.0);
            loss.delta = delta;
            if family == LossFamily::Dic {
                loss.gamma = 1.0 / delta;
            }
            let mv = |k: &str| s.method_value(family, k);
            if let Some(g) = parse_auto::<f64>("gamma", mv("gamma"))? {
                loss.gamma = g;
            }
            loss.k = parse_auto("k", mv("k"))?.unwrap_or(loss.k);
            loss.lambda = parse_auto("lambda", mv("lambda"))?.unwrap_or(loss.lambda);
            loss.alpha = parse_auto("alpha", mv("alpha"))?.unwrap_or(loss.alpha);
            loss.beta = parse_auto("beta", mv("beta"))?.unwrap_or(loss.beta);
            let kind = match mv("count") {
                "tanh" => CountKind::Tanh,
                "sigmoid" => CountKind::Sigmoid,
                other => return config_err(format!("unknown count kind '{other}'")),
            };
            loss.count = SmoothCountKind {
                kind,
                s: parse_auto("s", mv("s"))?.unwrap_or(50.0),
            };
            loss.validate()?;
            let gammas: Vec<f64> = parse_list("gammas", mv("gammas"))?;
            if gammas.is_empty() {
                return config_err(format!("gamma grid of {family} is empty"));
            }
            if gammas.iter().any(|g| !(*g > 0.0)) || gammas.windows(2).any(|w| w[0] >= w[1]) {
                return config_err(format!("gamma grid of {family} must be strictly positive and ascending"));
            }
            methods.push(MethodConfig {
                loss,
                learning_rate: parse_auto("learning_rate", mv("learning_rate"))?,
                gammas,
            });
        }

        let trials: usize = s.parse("trials")?;
        if trials == 0 {
            return config_err("trial count must be at least 1");
        }
        let hidden: Vec<usize> = s.parse_list("hidden")?;
        let train = TrainConfig {
            max_epochs: s.parse("max_epochs")?,
            patience: s.parse("patience")?,
            batch_size: parse_auto("batch_size", s.get("batch_size"))?,
            learning_rate: parse_auto("learning_rate", s.get("learning_rate"))?,
            ..TrainConfig::default()
        };
        train.validate()?;
        let cfg = ExperimentConfig {
            source,
            methods,
            trials,
            delta,
            seed: s.parse("seed")?,
            master_seed: s.parse("master_seed")?,
            train_fraction: s.parse("train_fraction")?,
            val_fraction: s.parse("val_fraction")?,
            test_fraction: s.parse("test_fraction")?,
            workers: s.parse("workers")?,
            out_dir: PathBuf::from(s.get("out_dir")),
            hidden,
            batch_norm: s.parse("batch_norm")?,
            train,
            settings: s.clone(),
        };
        if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
            return config_err(format!("delta must lie in (0,1), got {}", cfg.delta));
        }
        if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
            return config_err("hidden layer widths must be positive and non-empty");
        }
        Ok(cfg)
    }

    /// The fully resolved configuration as `key = value` lines, every key
    /// included.
    pub fn resolved_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = KEYS
            .iter()
            .map(|(sec, k, _)| format!("{sec}.{k} = {}", self.settings.get(k)))
            .collect();
        for m in &self.methods {
            let l = &m.loss;
            let lr = self.train.learning_rate.or(m.learning_rate).unwrap_or_else(|| trainer::default_learning_rate(l.family));
            let count = match l.count.kind {
                CountKind::Tanh => "tanh",
                CountKind::Sigmoid => "sigmoid",
            };
            let grid: Vec<String> = m.gammas.iter().map(|g| g.to_string()).collect();
            let values = [
                ("gammas", grid.join(",")),
                ("gamma", l.gamma.to_string()),
                ("learning_rate", lr.to_string()),
                ("k", l.k.to_string()),
                ("lambda", l.lambda.to_string()),
                ("count", count.to_string()),
                ("s", l.count.s.to_string()),
                ("alpha", l.alpha.to_string()),
                ("beta", l.beta.to_string()),
            ];
            lines.extend(values.iter().map(|(k, v)| format!("{}.{k} = {v}", l.family)));
        }
        lines
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    pub fn dataset_name(&self) -> String {
        match &self.source {
            Source::Dgp(d) => d.name().to_string(),
            Source::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned()),
        }
    }

    fn header_lines(&self, extra: &[String]) -> Vec<String> {
        let mut h = self.resolved_lines();
        h.push(format!(
            "trial seeds = {}..={}",
            self.trial_seed(0),
            self.trial_seed(self.trials - 1)
        ));
        h.extend(extra.iter().cloned());
        h
    }

    /// Split dataset for one trial.
    pub fn trial_data(&self, trial: usize) -> Result<Dataset> {
        let seed = self.trial_seed(trial);
        match &self.source {
            Source::Dgp(d) => DgpSpec::with_master_seed(*d, self.master_seed)
                .generate(seed)
                .split(self.train_fraction, seed),
            Source::Csv { path, mapping } => {
                let name = self.dataset_name();
                let file = File::open(path)?;
                match mapping {
                    Some(m) => {
                        let table = CsvTable::read(file)?;
                        m.build(&table, &name)?
                            .split_chronological(1.0 - self.val_fraction - self.test_fraction, self.val_fraction)
                    }
                    None => {
                        let d = Dataset::read_csv(file, &name)?;
                        if d.indices(Split::Validation).is_empty() {
                            d.split(self.train_fraction, seed)
                        } else {
                            Ok(d)
                        }
                    }
                }
            }
        }
    }

    /// Architecture for `data` initialized from `seed`.
    pub fn model_spec(&self, data: &Dataset, seed: u64) -> ModelSpec {
        if data.is_multi_horizon() {
            let mut s = MultiHorizonSpec::standard(data.x.cols(), data.future.iter().map(|f| f.cols()).collect(), seed);
            s.batch_norm = self.batch_norm;
            ModelSpec::MultiHorizon(s)
        } else {
            let mut s = MlpSpec::interval(data.x.cols(), &self.hidden, seed);
            s.batch_norm = self.batch_norm;
            ModelSpec::Mlp(s)
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

/// Outcome of one (method, γ, trial) cell on the validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub dataset: String,
    pub method: LossFamily,
    pub gamma: f64,
    pub trial: usize,
    pub seed: u64,
    /// One report per horizon.
    pub reports: Vec<MetricsReport>,
    /// Validation widths pooled over horizons.
    pub widths: Vec<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
}

/// Column order of per-cell result CSVs.
pub const RESULT_COLUMNS: &str = "dataset,method,gamma,trial,split,picp,pinaw,pinalw_p50,winkler,crossing_rate";

/// Trains and evaluates one cell.
pub fn run_cell(cfg: &ExperimentConfig, method: &MethodConfig, gamma: f64, trial: usize) -> Result<CellResult> {
    let data = cfg.trial_data(trial)?;
    let seed = cfg.trial_seed(trial);
    let mut loss = method.loss.clone();
    loss.gamma = gamma;
    loss.r_quantile = trainer::training_normalizer(&data)?;
    let mut model = Model::build(&cfg.model_spec(&data, seed))?;
    trainer::init_output_bias(&mut model, &data, &loss)?;
    let tc = TrainConfig {
        seed,
        learning_rate: cfg.train.learning_rate.or(method.learning_rate),
        ..cfg.train.clone()
    };
    let (model, history) = trainer::train(model, &loss, &data, &tc)?;
    let val = data.part(Split::Validation);
    let intervals = trainer::predict(&model, &val, &loss)?;
    let reports = trainer::evaluate(&model, &val, &loss)?;
    Ok(CellResult {
        dataset: data.name.clone(),
        method: loss.family,
        gamma,
        trial,
        seed,
        reports,
        widths: intervals.iter().flat_map(|iv| iv.widths()).collect(),
        epochs: history.epochs(),
        best_epoch: history.best_epoch,
    })
}

/// Runs `cells` on the configured pool, keeping their order.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[(usize, f64, usize)]) -> Result<Vec<CellResult>> {
    let pool = cfg.pool()?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, gamma, trial)| run_cell(cfg, &cfg.methods[m], gamma, trial))
            .collect()
    })
}

fn mean_report_field(cells: &[&CellResult], f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
    cells
        .iter()
        .map(|c| stats::mean(&c.reports.iter().map(&f).collect::<Vec<_>>()))
        .collect()
}

/// One point of a trade-off curve: means over trials.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: LossFamily,
    pub gamma: f64,
    pub picp: f64,
    pub pinaw: f64,
    pub pinalw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    /// Grouped by method, γ ascending within each method.
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellResult>,
}

fn write_with_header(path: &Path, header: &[String], body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for line in header {
        writeln!(w, "# {line}")?;
    }
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_cells(w: &mut dyn Write, cells: &[CellResult]) -> Result<()> {
    writeln!(w, "{RESULT_COLUMNS}")?;
    for c in cells {
        for r in &c.reports {
            let v = r.csv_values();
            writeln!(
                w,
                "{},{},{:?},{},val,{:?},{:?},{:?},{:?},{:?}",
                c.dataset, c.method, c.gamma, c.trial, v[0], v[1], v[2], v[3], v[4]
            )?;
        }
    }
    Ok(())
}

/// Aggregates cells into trade-off rows.
pub fn sweep_rows(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for m in &cfg.methods {
        for &gamma in &m.gammas {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.method == m.loss.family && c.gamma == gamma)
                .collect();
            if group.is_empty() {
                continue;
            }
            rows.push(SweepRow {
                method: m.loss.family,
                gamma,
                picp: stats::mean(&mean_report_field(&group, |r| r.picp)),
                pinaw: stats::mean(&mean_report_field(&group, |r| r.pinaw)),
                pinalw: stats::mean(&mean_report_field(&group, |r| r.pinalw)),
            });
        }
    }
    rows
}

/// Trains every method at every γ of the grid for every trial.
///
/// Writes `sweep.csv` (means per method and γ) and `sweep_cells.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    let mut cells = Vec::new();
    for (m, method) in cfg.methods.iter().enumerate() {
        for &g in &method.gammas {
            for t in 0..cfg.trials {
                cells.push((m, g, t));
            }
        }
    }
    let cells = run_cells(cfg, &cells)?;
    let rows = sweep_rows(cfg, &cells);
    let header = cfg.header_lines(&[]);
    write_with_header(&cfg.out_dir.join("sweep.csv"), &header, |w| {
        writeln!(w, "dataset,method,gamma,picp_mean,pinaw_mean,pinalw_p50_mean")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{:?}",
                cfg.dataset_name(),
                r.method,
                r.gamma,
                r.picp,
                r.pinaw,
                r.pinalw
            )?;
        }
        Ok(())
    })?;
    write_with_header(&cfg.out_dir.join("sweep_cells.csv"), &header, |w| write_cells(w, &cells))?;
    Ok(SweepOutput { rows, cells })
}

/// γ whose PICP is closest to `target`; ties go to the smaller γ.
pub fn select_gamma(candidates: &[(f64, f64)], target: f64) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(gamma, picp) in candidates {
        let d = (picp - target).abs();
        best = match best {
            None => Some((gamma, d)),
            Some((bg, bd)) if d < bd || (d == bd && gamma < bg) => Some((gamma, d)),
            keep => keep,
        };
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::Config("no γ candidates to choose from".into()))
}

/// Sweeps the grid and picks, per method, the γ whose mean validation PICP
/// is closest to `1 − δ`. Writes `tuned_gamma.csv`.
pub fn cmd_tune_gamma(cfg: &ExperimentConfig) -> Result<Vec<(LossFamily, f64)>> {
    let sweep = cmd_sweep(cfg)?;
    let mut chosen = Vec::new();
    for m in &cfg.methods {
        let cand: Vec<(f64, f64)> = sweep
            .rows
            .iter()
            .filter(|r| r.method == m.loss.family)
            .map(|r| (r.gamma, r.picp))
            .collect();
        chosen.push((m.loss.family, select_gamma(&cand, 1.0 - cfg.delta)?));
    }
    write_with_header(&cfg.out_dir.join("tuned_gamma.csv"), &cfg.header_lines(&[]), |w| {
        writeln!(w, "method,gamma")?;
        for (m, g) in &chosen {
            writeln!(w, "{m},{g:?}")?;
        }
        Ok(())
    })?;
    Ok(chosen)
}

/// Mean and sample standard deviation over trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        MeanStd {
            mean: stats::mean(v),
            std: stats::std_dev(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub method: LossFamily,
    pub gamma: f64,
    pub picp: MeanStd,
    pub pinaw: MeanStd,
    pub pinalw: MeanStd,
    pub winkler: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellResult>,
    /// Pooled validation widths per method.
    pub histograms: Vec<(LossFamily, Histogram)>,
}

impl ResultTable {
    /// One row per method from its cells.
    pub fn from_cells(cfg: &ExperimentConfig, cells: Vec<CellResult>) -> Self {
        let mut rows = Vec::new();
        let mut histograms = Vec::new();
        for m in &cfg.methods {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.method == m.loss.family).collect();
            if group.is_empty() {
                continue;
            }
            rows.push(ResultRow {
                dataset: group[0].dataset.clone(),
                method: m.loss.family,
                gamma: group[0].gamma,
                picp: MeanStd::of(&mean_report_field(&group, |r| r.picp)),
                pinaw: MeanStd::of(&mean_report_field(&group, |r| r.pinaw)),
                pinalw: MeanStd::of(&mean_report_field(&group, |r| r.pinalw)),
                winkler: MeanStd::of(&mean_report_field(&group, |r| r.winkler)),
            });
            let pooled: Vec<f64> = group.iter().flat_map(|c| c.widths.iter().copied()).collect();
            histograms.push((m.loss.family, Histogram::of_widths(&pooled, HISTOGRAM_BINS)));
        }
        ResultTable { rows, cells, histograms }
    }

    pub fn row(&self, method: LossFamily) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_table<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "dataset,method,gamma,picp_mean,picp_std,pinaw_mean,pinaw_std,pinalw_p50_mean,pinalw_p50_std,winkler_mean,winkler_std"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.dataset,
                r.method,
                r.gamma,
                r.picp.mean,
                r.picp.std,
                r.pinaw.mean,
                r.pinaw.std,
                r.pinalw.mean,
                r.pinalw.std,
                r.winkler.mean,
                r.winkler.std
            )?;
        }
        Ok(())
    }
}

/// Trains every method at its configured γ for every trial.
///
/// Writes `table.csv`, `results.csv` and one `hist_<method>.csv` per method.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let cells: Vec<(usize, f64, usize)> = (0..cfg.methods.len())
        .flat_map(|m| (0..cfg.trials).map(move |t| (m, cfg.methods[m].loss.gamma, t)))
        .collect();
    let table = ResultTable::from_cells(cfg, run_cells(cfg, &cells)?);
    let header = cfg.header_lines(&[]);
    write_with_header(&cfg.out_dir.join("table.csv"), &header, |w| table.write_table(w))?;
    write_with_header(&cfg.out_dir.join("results.csv"), &header, |w| write_cells(w, &table.cells))?;
    for (m, h) in &table.histograms {
        write_with_header(&cfg.out_dir.join(format!("hist_{m}.csv")), &header, |w| h.write_csv(w))?;
    }
    Ok(table)
}

/// Writes one dataset CSV per trial into `out_dir`.
pub fn cmd_generate(dgp: Dgp, trials: usize, master_seed: u64, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if trials == 0 {
        return config_err("trial count must be at least 1");
    }
    fs::create_dir_all(out_dir)?;
    let spec = DgpSpec::with_master_seed(dgp, master_seed);
    let mut paths = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_seed = seed.wrapping_add(t as u64);
        let data = spec.generate(trial_seed);
        let path = out_dir.join(format!("{}_trial{:03}.csv", dgp.name(), t));
        let header = vec![
            format!("dgp = {}", dgp.name()),
            format!("master_seed = {master_seed}"),
            format!("trial = {t}"),
            format!("trial_seed = {trial_seed}"),
            format!("ground_truth = {:?}", spec.beta),
        ];
        let mut w = BufWriter::new(File::create(&path)?);
        data.write_csv(&mut w, &header)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Trains the first configured method on a CSV source, saves the
/// checkpoint to `out_dir/model.skpt` and writes per-horizon metrics on the
/// validation (and test, when present) splits to `metrics.csv`.
pub fn cmd_train_csv(cfg: &ExperimentConfig) -> Result<Vec<(Split, Vec<MetricsReport>)>> {
    if !matches!(cfg.source, Source::Csv { .. }) {
        return config_err("train-csv needs a csv source");
    }
    let data = cfg.trial_data(0)?;
    let seed = cfg.trial_seed(0);
    let method = &cfg.methods[0];
    let mut loss = method.loss.clone();
    loss.r_quantile = trainer::training_normalizer(&data)?;
    let mut model = Model::build(&cfg.model_spec(&data, seed))?;
    trainer::init_output_bias(&mut model, &data, &loss)?;
    let tc = TrainConfig {
        seed,
        learning_rate: cfg.train.learning_rate.or(method.learning_rate),
        ..cfg.train.clone()
    };
    let (model, history) = trainer::train(model, &loss, &data, &tc)?;
    fs::create_dir_all(&cfg.out_dir)?;
    model.save(&cfg.out_dir.join("model.skpt"))?;
    let header = cfg.header_lines(&[format!("r_quantile = {:?}", loss.r_quantile)]);
    write_with_header(&cfg.out_dir.join("history.csv"), &header, |w| history.write_csv(w))?;

    let mut out = Vec::new();
    for split in [Split::Validation, Split::Test] {
        let part = data.part(split);
        if part.is_empty() {
            continue;
        }
        out.push((split, trainer::evaluate(&model, &part, &loss)?));
    }
    write_with_header(&cfg.out_dir.join("metrics.csv"), &header, |w| write_reports(w, &cfg.dataset_name(), loss.family, &out))?;
    Ok(out)
}

fn write_reports(w: &mut dyn Write, dataset: &str, method: LossFamily, reports: &[(Split, Vec<MetricsReport>)]) -> Result<()> {
    writeln!(w, "dataset,method,split,horizon,picp,pinaw,pinalw_p50,winkler,crossing_rate")?;
    for (split, rs) in reports {
        for (h, r) in rs.iter().enumerate() {
            let v = r.csv_values();
            writeln!(
                w,
                "{dataset},{method},{},{},{:?},{:?},{:?},{:?},{:?}",
                split.name(),
                h + 1,
                v[0],
                v[1],
                v[2],
                v[3],
                v[4]
            )?;
        }
    }
    Ok(())
}

/// Evaluates a saved checkpoint on the non-training rows of a dataset CSV.
///
/// The width normalizer is recomputed from the file's training rows.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<(Split, Vec<MetricsReport>)>> {
    let model = Model::load(checkpoint)?;
    let data = cfg.trial_data(0)?;
    let mut loss = cfg.methods[0].loss.clone();
    loss.r_quantile = trainer::training_normalizer(&data)?;
    let mut out = Vec::new();
    for split in [Split::Validation, Split::Test] {
        let part = data.part(split);
        if !part.is_empty() {
            out.push((split, trainer::evaluate(&model, &part, &loss)?));
        }
    }
    let header = cfg.header_lines(&[format!("checkpoint = {}", checkpoint.display())]);
    write_with_header(&cfg.out_dir.join("eval.csv"), &header, |w| write_reports(w, &cfg.dataset_name(), loss.family, &out))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MASTER_SEED;

    #[test]
    fn default_master_seed_matches_data() {
        let cfg = Settings::default().resolve().unwrap();
        assert_eq!(cfg.master_seed, MASTER_SEED);
    }

    #[test]
    fn gamma_selection_rules() {
        assert_eq!(select_gamma(&[(0.1, 0.93), (0.3, 0.905), (0.5, 0.88)], 0.9).unwrap(), 0.3);
        assert_eq!(select_gamma(&[(0.5, 0.92), (0.2, 0.88)], 0.9).unwrap(), 0.2);
        assert!(select_gamma(&[], 0.9).is_err());
    }

    #[test]
    fn settings_reject_unknown_keys() {
        assert!(Settings::from_ini_str("[experiment]\nbogus = 1\n").is_err());
        let mut s = Settings::default();
        assert!(s.set("sum_k.gamma", "0.2").is_ok());
        assert!(s.set("nope.gamma", "0.2").is_err());
        assert!(s.set("sum_k.hidden", "1").is_err());
    }

    #[test]
    fn resolve_with_method_overrides() {
        let text = "[experiment]\ndgp = polynomial\ntrials = 3\nmethods = sum_k, qd, dic\ngammas = 0.1, 0.2\n[sumk]\ngamma = 0.4\ngammas = 0.3\n[train]\nmax_epochs = 50\npatience = 5\n";
        let cfg = Settings::from_ini_str(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.source, Source::Dgp(Dgp::Polynomial));
        assert_eq!(cfg.methods[0].loss.gamma, 0.4);
        assert_eq!(cfg.methods[1].loss.family, LossFamily::QdEq);
        assert_eq!(cfg.methods[2].loss.gamma, 10.0);
        assert_eq!(cfg.methods[0].gammas, vec![0.3]);
        assert_eq!(cfg.methods[1].gammas, vec![0.1, 0.2]);
        assert_eq!(cfg.train.max_epochs, 50);
        assert!(cfg.resolved_lines().iter().any(|l| l == "experiment.trials = 3"));
    }

    #[test]
    fn invalid_grids_and_counts() {
        let bad = |t: &str| Settings::from_ini_str(t).unwrap().resolve().is_err();
        assert!(bad("[experiment]\ngammas = 0.2, 0.1\n"));
        assert!(bad("[experiment]\ngammas = 0, 0.1\n"));
        assert!(bad("[experiment]\ntrials = 0\n"));
        assert!(bad("[sum_k]\ngammas = 0.3, 0.3\n"));
        assert!(bad("[experiment]\nmethods = nope\n"));
    }

    #[test]
    fn one_trial_table_equals_cell() {
        let text = "[experiment]\ntrials = 1\nmethods = pinball\nhidden = 4\n[train]\nmax_epochs = 3\npatience = 1\n";
        let cfg = Settings::from_ini_str(text).unwrap().resolve().unwrap();
        let cells = run_cells(&cfg, &[(0, 1.0, 0)]).unwrap();
        let t = ResultTable::from_cells(&cfg, cells.clone());
        assert_eq!(t.rows[0].picp.mean, cells[0].reports[0].picp);
        assert_eq!(t.rows[0].pinalw.mean, cells[0].reports[0].pinalw);
        assert_eq!(t.rows[0].picp.std, 0.0);
        assert_eq!(t.histograms[0].1.total(), 200);
    }
}
