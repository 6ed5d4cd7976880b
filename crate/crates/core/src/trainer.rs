//! Minibatch Adam training with early stopping on validation loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::data::{Dataset, Split};
use crate::error::{config_err, Error, Result};
use crate::losses::{interval_loss, output_to_interval, LossConfig, LossFamily};
use crate::metrics::{self, MetricsReport};
use crate::model::{IntervalBatch, Mode, Model};
use crate::tensor::Tensor;

/// Training sets up to this size are trained full-batch by default.
pub const FULL_BATCH_LIMIT: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Rows per minibatch; `None` picks full-batch up to
    /// [`FULL_BATCH_LIMIT`] rows and `0.3·N` beyond.
    pub batch_size: Option<usize>,
    /// `None` picks a per-family default, see [`default_learning_rate`].
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds minibatch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 2000,
            patience: 100,
            batch_size: None,
            learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return config_err("max_epochs must be at least 1");
        }
        if self.patience >= self.max_epochs {
            return config_err(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return config_err(format!("learning rate must be positive, got {lr}"));
            }
        }
        if self.batch_size == Some(0) {
            return config_err("batch size must be positive");
        }
        Ok(())
    }

    pub fn resolved_batch_size(&self, n_train: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n_train),
            None if n_train <= FULL_BATCH_LIMIT => n_train,
            None => ((0.3 * n_train as f64).ceil() as usize).max(1),
        }
    }

    pub fn resolved_learning_rate(&self, family: LossFamily) -> f64 {
        self.learning_rate.unwrap_or_else(|| default_learning_rate(family))
    }
}

/// 1e-4 for the exponential-penalty losses (CWC variants and DIC),
/// 1e-3 otherwise.
pub fn default_learning_rate(family: LossFamily) -> f64 {
    if family.is_cwc() || family == LossFamily::Dic {
        1e-4
    } else {
        1e-3
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Tensor::zeros(r, c), Tensor::zeros(r, c)))
            .unzip();
        AdamState { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_picp: Vec<f64>,
    /// Zero-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }

    /// CSV with columns `epoch,train_loss,val_loss,val_picp`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,val_loss,val_picp")?;
        for e in 0..self.epochs() {
            writeln!(
                out,
                "{},{:?},{:?},{:?}",
                e, self.train_loss[e], self.val_loss[e], self.val_picp[e]
            )?;
        }
        Ok(())
    }
}

/// `r_quantile` of the training targets pooled over all horizons.
pub fn training_normalizer(data: &Dataset) -> Result<f64> {
    let train = data.part(Split::Train);
    metrics::width_normalizer(train.y.data())
}

/// Starts every horizon's output at the marginal interval of its training
/// targets: biases `q(δ/2)` and `q(1 − δ/2)`. For MVE the biases are the
/// target mean and the pre-softplus target variance.
///
/// Without this a fresh network can emit crossed bounds for every sample,
/// where the smooth counts have zero gradient.
pub fn init_output_bias(model: &mut Model, data: &Dataset, cfg: &LossConfig) -> Result<()> {
    let train = data.part(Split::Train);
    if train.is_empty() {
        return config_err("output initialization needs training rows");
    }
    for h in 0..model.horizons() {
        let y = train.target(h);
        let bias = match cfg.family {
            LossFamily::Mve => {
                let var = crate::stats::std_dev(&y).powi(2).max(1e-12);
                // softplus⁻¹(v) = ln(eᵛ − 1)
                let raw = if var > 30.0 { var } else { var.exp_m1().ln() };
                [crate::stats::mean(&y), raw]
            }
            _ => [metrics::quantile(&y, cfg.delta / 2.0), metrics::quantile(&y, 1.0 - cfg.delta / 2.0)],
        };
        model.set_output_bias(h, bias)?;
    }
    Ok(())
}

fn as_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteOutput { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

/// Total loss over every horizon of `data` recorded on `g`.
fn total_loss(g: &mut Graph, model: &mut Model, data: &Dataset, cfg: &LossConfig, mode: Mode) -> Result<(NodeId, Vec<NodeId>)> {
    let fwd = model.forward(g, &data.inputs(), mode)?;
    let mut total: Option<NodeId> = None;
    for (h, &out) in fwd.outputs.iter().enumerate() {
        let y = g.constant(Tensor::column(data.target(h)))?;
        let l = interval_loss(g, out, y, cfg)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("model has no outputs".into()))?;
    Ok((total, fwd.params))
}

/// Equal-sized contiguous batches covering `order`.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let n = order.len();
    let nb = n.div_ceil(batch_size).max(1);
    let mut out = Vec::with_capacity(nb);
    let mut start = 0;
    for b in 0..nb {
        let end = (b + 1) * n / nb;
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Loss on `data` in eval mode, full batch.
pub fn evaluate_loss(model: &Model, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    let mut m = model.clone();
    let mut g = Graph::new();
    let (loss, _) = total_loss(&mut g, &mut m, data, cfg, Mode::Eval)?;
    Ok(g.item(loss))
}

/// Interval predictions per horizon, with MVE outputs converted.
pub fn predict(model: &Model, data: &Dataset, cfg: &LossConfig) -> Result<Vec<IntervalBatch>> {
    Ok(model
        .predict_inputs(&data.inputs())?
        .into_iter()
        .map(|raw| output_to_interval(raw, cfg))
        .collect())
}

/// Exact metrics per horizon on `data`.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &LossConfig) -> Result<Vec<MetricsReport>> {
    predict(model, data, cfg)?
        .iter()
        .enumerate()
        .map(|(h, iv)| MetricsReport::compute(&iv.lower, &iv.upper, &data.target(h), cfg.delta, cfg.r_quantile))
        .collect()
}

fn mean_picp(intervals: &[IntervalBatch], data: &Dataset) -> f64 {
    let s: f64 = intervals
        .iter()
        .enumerate()
        .map(|(h, iv)| metrics::picp_exact(&iv.lower, &iv.upper, &data.target(h)))
        .sum();
    s / intervals.len() as f64
}

/// Trains `model` on the training split and early-stops on the validation
/// split. Returns the parameters of the best validation epoch.
///
/// For multi-horizon models the loss is the sum of the per-horizon losses.
pub fn train(mut model: Model, loss_cfg: &LossConfig, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if model.horizons() != data.horizons() {
        return config_err(format!(
            "model has {} horizons, data has {}",
            model.horizons(),
            data.horizons()
        ));
    }
    let train_set = data.part(Split::Train);
    let val_set = data.part(Split::Validation);
    if train_set.is_empty() || val_set.is_empty() {
        return config_err("training needs non-empty train and validation splits");
    }
    let batch_size = cfg.resolved_batch_size(train_set.len());
    if loss_cfg.family == LossFamily::SumK {
        let b = batch_size.min(train_set.len());
        let need = (1.0 / loss_cfg.k).ceil() as usize;
        if b < need || loss_cfg.large_count(b) >= b {
            return config_err(format!("batch size {b} too small for k={}; need at least {need}", loss_cfg.k));
        }
    }
    let lr = cfg.resolved_learning_rate(loss_cfg.family);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params().iter().map(|p| p.shape()));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let parts = batches(&order, batch_size);
        for (b, idx) in parts.iter().enumerate() {
            let batch = (parts.len() > 1).then(|| train_set.select(idx));
            let batch_ref = batch.as_ref().unwrap_or(&train_set);
            let mut g = Graph::new();
            let (loss, params) =
                total_loss(&mut g, &mut model, batch_ref, loss_cfg, Mode::Train).map_err(|e| as_divergence(e, epoch, b))?;
            let v = g.item(loss);
            if !v.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            g.backward(loss).map_err(|e| as_divergence(e, epoch, b))?;
            let grads: Vec<Tensor> = params.iter().map(|&p| g.grad_or_zero(p)).collect();
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::Divergence { epoch, batch: b });
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam, lr, cfg);
            epoch_loss += v * idx.len() as f64;
        }
        history.train_loss.push(epoch_loss / train_set.len() as f64);

        let nb = parts.len();
        let val_loss = evaluate_loss(&model, &val_set, loss_cfg).map_err(|e| as_divergence(e, epoch, nb))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: nb });
        }
        let iv = predict(&model, &val_set, loss_cfg).map_err(|e| as_divergence(e, epoch, nb))?;
        history.val_loss.push(val_loss);
        history.val_picp.push(mean_picp(&iv, &val_set));

        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    Ok((best, history))
}

/// [`train`] for a multi-horizon model; the data must carry one future
/// block per horizon.
pub fn train_multi_horizon(
    model: Model,
    loss_cfg: &LossConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if !data.is_multi_horizon() || data.future.len() != model.horizons() {
        return config_err(format!(
            "multi-horizon training needs {} future blocks, data has {}",
            model.horizons(),
            data.future.len()
        ));
    }
    train(model, loss_cfg, data, cfg)
}
