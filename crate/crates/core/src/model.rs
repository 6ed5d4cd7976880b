//! Interval-output feedforward networks.
//!
//! A single-horizon model maps features to two outputs, column 0 the lower
//! bound and column 1 the upper bound. A multi-horizon model runs lagged
//! regressors through a shared common stack, then feeds the common
//! representation concatenated with each lead time's future regressors into
//! a per-horizon head that emits that horizon's two bounds.
//!
//! Hidden layers are `linear → batch-norm (optional) → relu`; the output
//! layer is linear. Outputs are never reordered or clamped.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, NodeId};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

/// Fully connected stack, input width first, output width last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
    pub seed: u64,
}

impl MlpSpec {
    /// `[inputs, hidden.., 2]` with batch-norm, the paper-scale default.
    pub fn interval(inputs: usize, hidden: &[usize], seed: u64) -> Self {
        let mut layer_sizes = vec![inputs];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(2);
        MlpSpec {
            layer_sizes,
            activation: Activation::Relu,
            batch_norm: true,
            seed,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return config_err("an interval network needs at least one hidden layer");
        }
        if self.layer_sizes[1..].contains(&0) || self.layer_sizes[0] == 0 {
            return config_err(format!("zero-width layer in {:?}", self.layer_sizes));
        }
        if *self.layer_sizes.last().unwrap() != 2 {
            return config_err("single-horizon output width must be 2 (lower, upper)");
        }
        Ok(())
    }
}

/// Shared common stack plus one head per lead time.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHorizonSpec {
    pub lagged_inputs: usize,
    /// Hidden widths of the common stack; its last width is the shared
    /// representation handed to every head.
    pub common_hidden: Vec<usize>,
    /// Number of future-regressor columns for each lead time; its length is H.
    pub future_inputs: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub batch_norm: bool,
    pub seed: u64,
}

impl MultiHorizonSpec {
    /// Two hidden layers of 100 in both the common stack and each head.
    pub fn standard(lagged_inputs: usize, future_inputs: Vec<usize>, seed: u64) -> Self {
        MultiHorizonSpec {
            lagged_inputs,
            common_hidden: vec![100, 100],
            future_inputs,
            head_hidden: vec![100, 100],
            batch_norm: true,
            seed,
        }
    }

    pub fn horizons(&self) -> usize {
        self.future_inputs.len()
    }

    fn validate(&self) -> Result<()> {
        if self.future_inputs.is_empty() {
            return config_err("multi-horizon model needs at least one horizon");
        }
        if self.common_hidden.is_empty() || self.head_hidden.is_empty() {
            return config_err("common stack and heads need at least one hidden layer");
        }
        if self.lagged_inputs == 0 || self.common_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return config_err("zero-width layer in multi-horizon spec");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Mlp(MlpSpec),
    MultiHorizon(MultiHorizonSpec),
}

impl ModelSpec {
    pub fn seed(&self) -> u64 {
        match self {
            ModelSpec::Mlp(s) => s.seed,
            ModelSpec::MultiHorizon(s) => s.seed,
        }
    }

    pub fn horizons(&self) -> usize {
        match self {
            ModelSpec::Mlp(_) => 1,
            ModelSpec::MultiHorizon(s) => s.horizons(),
        }
    }

    /// Trainable parameter count computed from the widths alone.
    pub fn analytic_param_count(&self) -> usize {
        fn stack(sizes: &[usize], bn: bool, output_layer: bool) -> usize {
            let mut total = 0;
            let last = sizes.len() - 1;
            for i in 0..last {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                total += fan_in * fan_out + fan_out;
                let hidden = !(output_layer && i + 1 == last);
                if bn && hidden {
                    total += 2 * fan_out;
                }
            }
            total
        }
        match self {
            ModelSpec::Mlp(s) => stack(&s.layer_sizes, s.batch_norm, true),
            ModelSpec::MultiHorizon(s) => {
                let mut common = vec![s.lagged_inputs];
                common.extend(&s.common_hidden);
                let rep = *s.common_hidden.last().unwrap();
                let mut total = stack(&common, s.batch_norm, false);
                for &f in &s.future_inputs {
                    let mut head = vec![rep + f];
                    head.extend(&s.head_hidden);
                    head.push(2);
                    total += stack(&head, s.batch_norm, true);
                }
                total
            }
        }
    }

    /// Plain-text `key=value` rendering, used as the checkpoint sidecar.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        match self {
            ModelSpec::Mlp(s) => {
                let _ = writeln!(out, "kind=mlp");
                let _ = writeln!(out, "layer_sizes={}", join(&s.layer_sizes));
                let _ = writeln!(out, "activation=relu");
                let _ = writeln!(out, "batch_norm={}", s.batch_norm);
                let _ = writeln!(out, "seed={}", s.seed);
            }
            ModelSpec::MultiHorizon(s) => {
                let _ = writeln!(out, "kind=multi_horizon");
                let _ = writeln!(out, "lagged_inputs={}", s.lagged_inputs);
                let _ = writeln!(out, "common_hidden={}", join(&s.common_hidden));
                let _ = writeln!(out, "future_inputs={}", join(&s.future_inputs));
                let _ = writeln!(out, "head_hidden={}", join(&s.head_hidden));
                let _ = writeln!(out, "batch_norm={}", s.batch_norm);
                let _ = writeln!(out, "seed={}", s.seed);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("bad spec line: {line}"));
            };
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Config(format!("spec missing {k}")));
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad integer in {k}"))))
                .collect()
        };
        let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| Error::Config(format!("bad bool {k}"))) };
        let seed: u64 = get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?;
        match get("kind")?.as_str() {
            "mlp" => Ok(ModelSpec::Mlp(MlpSpec {
                layer_sizes: list("layer_sizes")?,
                activation: Activation::Relu,
                batch_norm: flag("batch_norm")?,
                seed,
            })),
            "multi_horizon" => Ok(ModelSpec::MultiHorizon(MultiHorizonSpec {
                lagged_inputs: get("lagged_inputs")?.parse().map_err(|_| Error::Config("bad lagged_inputs".into()))?,
                common_hidden: list("common_hidden")?,
                future_inputs: list("future_inputs")?,
                head_hidden: list("head_hidden")?,
                batch_norm: flag("batch_norm")?,
                seed,
            })),
            other => config_err(format!("unknown model kind {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    weight: Tensor,
    bias: Tensor,
    bn: Option<BatchNorm>,
    activate: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct Stack {
    layers: Vec<Dense>,
}

impl Stack {
    /// He-uniform weights, zero biases, unit batch-norm scale.
    fn init(sizes: &[usize], bn: bool, output_layer: bool, rng: &mut ChaCha8Rng) -> Self {
        let last = sizes.len() - 1;
        let layers = (0..last)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                let hidden = !(output_layer && i + 1 == last);
                Dense {
                    weight: Tensor::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(1, fan_out),
                    bn: (bn && hidden).then(|| BatchNorm {
                        gamma: Tensor::filled(1, fan_out, 1.0),
                        beta: Tensor::zeros(1, fan_out),
                        running_mean: vec![0.0; fan_out],
                        running_var: vec![1.0; fan_out],
                    }),
                    activate: hidden,
                }
            })
            .collect();
        Stack { layers }
    }

    fn inputs(&self) -> usize {
        self.layers[0].weight.rows()
    }

    fn forward(
        &self,
        g: &mut Graph,
        mut x: NodeId,
        mode: Mode,
        params: &mut Vec<NodeId>,
        stats: &mut Vec<(BatchStats, usize)>,
    ) -> Result<NodeId> {
        for layer in &self.layers {
            let w = g.param(layer.weight.clone())?;
            let b = g.param(layer.bias.clone())?;
            params.extend([w, b]);
            x = g.affine(x, w, b)?;
            if let Some(bn) = &layer.bn {
                let gamma = g.param(bn.gamma.clone())?;
                let beta = g.param(bn.beta.clone())?;
                params.extend([gamma, beta]);
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some((&bn.running_mean[..], &bn.running_var[..])),
                };
                let rows = g.value(x).rows();
                let (out, batch) = g.batch_norm(x, gamma, beta, BN_EPS, running)?;
                if let Some(batch) = batch {
                    stats.push((batch, rows));
                }
                x = out;
            }
            if layer.activate {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Folds batch statistics (in layer order) into the running estimates.
    fn update_running<'s>(&mut self, stats: &mut impl Iterator<Item = &'s (BatchStats, usize)>) {
        for bn in self.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
            let Some((batch, rows)) = stats.next() else { return };
            let n = *rows as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for j in 0..batch.mean.len() {
                bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * batch.mean[j];
                bn.running_var[j] = (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * batch.var[j] * unbias;
            }
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.weight, &l.bias]);
            if let Some(bn) = &l.bn {
                out.extend([&bn.gamma, &bn.beta]);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layer{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}layer{i}.bias"), l.bias.clone()));
            if let Some(bn) = &l.bn {
                out.push((format!("{prefix}layer{i}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("{prefix}layer{i}.bn.beta"), bn.beta.clone()));
                out.push((format!("{prefix}layer{i}.bn.running_mean"), Tensor::row(bn.running_mean.clone())));
                out.push((format!("{prefix}layer{i}.bn.running_var"), Tensor::row(bn.running_var.clone())));
            }
        }
        out
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Vec<f64>, (usize, usize))> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let ws = l.weight.shape();
            let bs = l.bias.shape();
            out.push((format!("{prefix}layer{i}.weight"), tensor_vec(&mut l.weight), ws));
            out.push((format!("{prefix}layer{i}.bias"), tensor_vec(&mut l.bias), bs));
            if let Some(bn) = &mut l.bn {
                let c = bn.running_mean.len();
                out.push((format!("{prefix}layer{i}.bn.gamma"), tensor_vec(&mut bn.gamma), (1, c)));
                out.push((format!("{prefix}layer{i}.bn.beta"), tensor_vec(&mut bn.beta), (1, c)));
                out.push((format!("{prefix}layer{i}.bn.running_mean"), &mut bn.running_mean, (1, c)));
                out.push((format!("{prefix}layer{i}.bn.running_var"), &mut bn.running_var, (1, c)));
            }
        }
        out
    }
}

fn tensor_vec(t: &mut Tensor) -> &mut Vec<f64> {
    t.buffer_mut()
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Single(Stack),
    MultiHorizon { common: Stack, heads: Vec<Stack> },
}

/// A built network together with its spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    body: Body,
}

/// Lower and upper bounds for a batch of rows.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IntervalBatch {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntervalBatch {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    fn from_output(out: &Tensor) -> Result<Self> {
        for r in 0..out.rows() {
            if !(out.get(r, 0).is_finite() && out.get(r, 1).is_finite()) {
                return Err(Error::NonFiniteOutput { row: r });
            }
        }
        Ok(IntervalBatch {
            lower: out.col(0),
            upper: out.col(1),
        })
    }
}

/// Inputs for one forward pass.
#[derive(Clone, Debug)]
pub enum Inputs<'a> {
    Single(&'a Tensor),
    MultiHorizon { lagged: &'a Tensor, future: &'a [Tensor] },
}

impl<'a> Inputs<'a> {
    pub fn rows(&self) -> usize {
        match self {
            Inputs::Single(x) => x.rows(),
            Inputs::MultiHorizon { lagged, .. } => lagged.rows(),
        }
    }
}

/// Result of a forward pass recorded on a graph.
pub struct Forward {
    /// One N×2 output node per horizon.
    pub outputs: Vec<NodeId>,
    /// Parameter nodes, aligned with [`Model::params_mut`].
    pub params: Vec<NodeId>,
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
        let body = match spec {
            ModelSpec::Mlp(s) => {
                s.validate()?;
                Body::Single(Stack::init(&s.layer_sizes, s.batch_norm, true, &mut rng))
            }
            ModelSpec::MultiHorizon(s) => {
                s.validate()?;
                let mut sizes = vec![s.lagged_inputs];
                sizes.extend(&s.common_hidden);
                let common = Stack::init(&sizes, s.batch_norm, false, &mut rng);
                let rep = *s.common_hidden.last().unwrap();
                let heads = s
                    .future_inputs
                    .iter()
                    .map(|&f| {
                        let mut sizes = vec![rep + f];
                        sizes.extend(&s.head_hidden);
                        sizes.push(2);
                        Stack::init(&sizes, s.batch_norm, true, &mut rng)
                    })
                    .collect();
                Body::MultiHorizon { common, heads }
            }
        };
        Ok(Model { spec: spec.clone(), body })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn horizons(&self) -> usize {
        self.spec.horizons()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match &self.body {
            Body::Single(s) => s.params(),
            Body::MultiHorizon { common, heads } => {
                let mut out = common.params();
                heads.iter().for_each(|h| out.extend(h.params()));
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.body {
            Body::Single(s) => s.params_mut(),
            Body::MultiHorizon { common, heads } => {
                let mut out = common.params_mut();
                heads.iter_mut().for_each(|h| out.extend(h.params_mut()));
                out
            }
        }
    }

    /// Parameters of the shared common stack (empty for single-horizon models).
    pub fn common_param_len(&self) -> usize {
        match &self.body {
            Body::Single(_) => 0,
            Body::MultiHorizon { common, .. } => common.params().len(),
        }
    }

    /// Zeroes the weights and biases of every output layer.
    pub fn zero_output_layer(&mut self) {
        let zero = |s: &mut Stack| {
            let l = s.layers.last_mut().unwrap();
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            l.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        };
        match &mut self.body {
            Body::Single(s) => zero(s),
            Body::MultiHorizon { heads, .. } => heads.iter_mut().for_each(zero),
        }
    }

    /// Sets the two output biases of horizon `h` (zero-based).
    pub fn set_output_bias(&mut self, h: usize, bias: [f64; 2]) -> Result<()> {
        let stack = match &mut self.body {
            Body::Single(s) if h == 0 => s,
            Body::MultiHorizon { heads, .. } if h < heads.len() => &mut heads[h],
            _ => return config_err(format!("no output for horizon {h}")),
        };
        let l = stack.layers.last_mut().expect("non-empty stack");
        l.bias.data_mut().copy_from_slice(&bias);
        Ok(())
    }

    /// Records a forward pass on `g`. In train mode batch-norm uses batch
    /// statistics and folds them into the running estimates.
    pub fn forward(&mut self, g: &mut Graph, inputs: &Inputs<'_>, mode: Mode) -> Result<Forward> {
        let mut stats = Vec::new();
        let fwd = self.forward_impl(g, inputs, mode, &mut stats)?;
        let mut it = stats.iter();
        match &mut self.body {
            Body::Single(s) => s.update_running(&mut it),
            Body::MultiHorizon { common, heads } => {
                common.update_running(&mut it);
                heads.iter_mut().for_each(|h| h.update_running(&mut it));
            }
        }
        Ok(fwd)
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        inputs: &Inputs<'_>,
        mode: Mode,
        stats: &mut Vec<(BatchStats, usize)>,
    ) -> Result<Forward> {
        let mut params = Vec::new();
        let outputs = match (&self.body, inputs) {
            (Body::Single(stack), Inputs::Single(x)) => {
                if x.cols() != stack.inputs() {
                    return Err(Error::ShapeMismatch {
                        op: "predict_interval",
                        lhs: x.shape(),
                        rhs: (stack.inputs(), 2),
                    });
                }
                let xn = g.constant((*x).clone())?;
                vec![stack.forward(g, xn, mode, &mut params, stats)?]
            }
            (Body::MultiHorizon { common, heads }, Inputs::MultiHorizon { lagged, future }) => {
                if future.len() != heads.len() {
                    return config_err(format!("expected {} future blocks, got {}", heads.len(), future.len()));
                }
                if lagged.cols() != common.inputs() {
                    return Err(Error::ShapeMismatch { op: "common_model", lhs: lagged.shape(), rhs: (common.inputs(), 0) });
                }
                let xn = g.constant((*lagged).clone())?;
                let shared = common.forward(g, xn, mode, &mut params, stats)?;
                let rep = g.value(shared).cols();
                let mut outs = Vec::with_capacity(heads.len());
                for (head, block) in heads.iter().zip(future.iter()) {
                    if block.rows() != lagged.rows() || rep + block.cols() != head.inputs() {
                        return Err(Error::ShapeMismatch {
                            op: "future_block",
                            lhs: block.shape(),
                            rhs: (lagged.rows(), head.inputs().saturating_sub(rep)),
                        });
                    }
                    let input = if block.cols() == 0 {
                        shared
                    } else {
                        let f = g.constant(block.clone())?;
                        g.concat_cols(&[shared, f])?
                    };
                    outs.push(head.forward(g, input, mode, &mut params, stats)?);
                }
                outs
            }
            _ => return config_err("inputs do not match the model topology"),
        };
        Ok(Forward { outputs, params })
    }

    /// Eval-mode bounds, one batch per horizon.
    pub fn predict_inputs(&self, inputs: &Inputs<'_>) -> Result<Vec<IntervalBatch>> {
        let mut g = Graph::unchecked();
        let fwd = self.forward_impl(&mut g, inputs, Mode::Eval, &mut Vec::new())?;
        fwd.outputs.iter().map(|&o| IntervalBatch::from_output(g.value(o))).collect()
    }

    /// Raw eval-mode bounds for a single-horizon model.
    pub fn predict_interval(&self, x: &Tensor) -> Result<IntervalBatch> {
        Ok(self.predict_inputs(&Inputs::Single(x))?.remove(0))
    }

    /// Eval-mode bounds for every horizon of a multi-horizon model, all
    /// derived from one common-stack pass.
    pub fn predict_multi_horizon(&self, lagged: &Tensor, future: &[Tensor]) -> Result<Vec<IntervalBatch>> {
        if future.len() != self.horizons() {
            return config_err(format!("expected {} future blocks, got {}", self.horizons(), future.len()));
        }
        self.predict_inputs(&Inputs::MultiHorizon { lagged, future })
    }

    /// All stored tensors (trainable and running statistics) with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        match &self.body {
            Body::Single(s) => s.named(""),
            Body::MultiHorizon { common, heads } => {
                let mut out = common.named("common.");
                for (i, h) in heads.iter().enumerate() {
                    out.extend(h.named(&format!("head{i}.")));
                }
                out
            }
        }
    }

    /// Writes the binary tensor container to `path` and the spec sidecar to
    /// `path` with `.spec` appended.
    ///
    /// Container layout, all integers little-endian:
    /// `b"SKPT"`, `u32` version (1), `u32` tensor count, then per tensor
    /// `u32` name length, UTF-8 name, `u64` rows, `u64` cols and
    /// rows·cols `f64` values in row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SKPT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let tensors = self.named_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        std::fs::write(sidecar_path(path), self.spec.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec = ModelSpec::from_text(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut model = Model::build(&spec)?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let tensors = read_container(&bytes)?;
        let mut slots = match &mut model.body {
            Body::Single(s) => s.named_mut(""),
            Body::MultiHorizon { common, heads } => {
                let mut out = common.named_mut("common.");
                for (i, h) in heads.iter_mut().enumerate() {
                    out.extend(h.named_mut(&format!("head{i}.")));
                }
                out
            }
        };
        if slots.len() != tensors.len() {
            return config_err(format!("checkpoint holds {} tensors, spec expects {}", tensors.len(), slots.len()));
        }
        for (name, t) in tensors {
            let Some(slot) = slots.iter_mut().find(|s| s.0 == name) else {
                return config_err(format!("unexpected tensor {name}"));
            };
            if slot.2 != t.shape() {
                return Err(Error::ShapeMismatch { op: "load", lhs: slot.2, rhs: t.shape() });
            }
            *slot.1 = t.into_vec();
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".spec");
    s.into()
}

fn read_container(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::Config(format!("corrupt checkpoint: {msg}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != b"SKPT" {
        return Err(bad("magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != 1 {
        return Err(bad("version"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name"))?;
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    Ok(out)
}
