//! A small ReLU multilayer perceptron with hand-written backprop, and the
//! two-stage training loop: cross-entropy pre-training on ID data, then
//! fine-tuning with cross-entropy plus the DNE losses on paired ID/outlier
//! batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::dne::{cross_entropy_with_grad, total_loss_and_grad, DneConfig, LossBreakdown};
use crate::energy::LogitBatch;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Fully connected layer, `weights` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let (n, out, inp) = (x.rows(), self.out_dim(), self.in_dim());
        let mut z = Matrix::zeros(n, out);
        for i in 0..n {
            let xi = x.row(i);
            let zi = z.row_mut(i);
            for o in 0..out {
                let w = self.weights.row(o);
                let mut acc = self.bias[o];
                for t in 0..inp {
                    acc += w[t] * xi[t];
                }
                zi[o] = acc;
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Per-layer parameter gradients, same shapes as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    fn zeros_like(model: &Mlp) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Layer inputs and hidden pre-activations from one forward pass.
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output logits.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Trace {
    pub fn logits(&self) -> &Matrix {
        self.inputs.last().expect("trace has at least the input")
    }

    /// Sign pattern of every hidden pre-activation.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre
            .iter()
            .flat_map(|z| z.as_slice().iter().map(|v| *v > 0.0))
            .collect()
    }
}

impl Mlp {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization for weights and biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "layer dims need an input and an output, all positive: {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let bound = 1.0 / (inp as f64).sqrt();
                let weights = (0..inp * out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                let bias = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
                Dense {
                    weights: Matrix::from_vec(out, inp, weights).expect("sized above"),
                    bias,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("an MLP needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape {
                    expected: l.out_dim(),
                    found: l.bias.len(),
                });
            }
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape {
                    expected: w[0].out_dim(),
                    found: w[1].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(last);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(inputs.last().expect("non-empty"));
            if l == last {
                inputs.push(z);
            } else {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                pre.push(z);
                inputs.push(a);
            }
        }
        Ok(Trace { inputs, pre })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.inputs.pop().expect("non-empty"))
    }

    /// Backprop from `dL/dlogits`. Layers below `first_layer` get zero gradients and
    /// are not visited.
    pub fn backward_trace(&self, trace: &Trace, upstream: &Matrix, first_layer: usize) -> Result<MlpGrads> {
        let logits = trace.logits();
        if upstream.rows() != logits.rows() || upstream.cols() != logits.cols() {
            return Err(Error::Shape {
                expected: logits.rows() * logits.cols(),
                found: upstream.rows() * upstream.cols(),
            });
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = upstream.clone();
        for l in (first_layer..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a = &trace.inputs[l];
            let (n, out, inp) = (a.rows(), layer.out_dim(), layer.in_dim());
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for i in 0..n {
                let d = delta.row(i);
                let ai = a.row(i);
                for o in 0..out {
                    let dv = d[o];
                    gb[o] += dv;
                    let row = gw.row_mut(o);
                    for t in 0..inp {
                        row[t] += dv * ai[t];
                    }
                }
            }
            if l == first_layer {
                break;
            }
            let z_prev = &trace.pre[l - 1];
            let mut next = Matrix::zeros(n, inp);
            for i in 0..n {
                let d = delta.row(i);
                let nr = next.row_mut(i);
                for o in 0..out {
                    let w = layer.weights.row(o);
                    let dv = d[o];
                    for t in 0..inp {
                        nr[t] += dv * w[t];
                    }
                }
                for (t, v) in nr.iter_mut().enumerate() {
                    if z_prev[(i, t)] <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    /// Parameter gradients for `dL/dlogits = upstream` at `inputs`.
    pub fn backward(&self, inputs: &Matrix, upstream: &Matrix) -> Result<MlpGrads> {
        let trace = self.forward_trace(inputs)?;
        self.backward_trace(&trace, upstream, 0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer: weights row-major then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape {
                expected: self.num_params(),
                found: params.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Cosine annealing from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidInput(format!(
            "cosine schedule step {step} outside 0..={total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_pretrain: usize,
    pub b_in: usize,
    pub b_out: usize,
    pub momentum: f64,
    /// Update every layer during fine-tuning instead of only the output layer.
    pub finetune_all_layers: bool,
    pub dne_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_pretrain: 20,
            epochs_finetune: 10,
            lr_pretrain: 0.1,
            lr_finetune: 0.05,
            batch_pretrain: 64,
            b_in: 128,
            b_out: 256,
            momentum: 0.9,
            finetune_all_layers: false,
            dne_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pretrain == 0 || self.b_in == 0 || self.b_out == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    /// Step-averaged losses; the DNE terms are zero during pre-training.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub log: Vec<EpochLog>,
    pub stage: Stage,
}

struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
}

impl Sgd {
    fn new(n: usize, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; n],
            momentum,
        }
    }

    fn step(&mut self, model: &mut Mlp, grads: &MlpGrads, lr: f64, first_layer: usize) {
        let mut at = 0;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let params = layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(grads.weights[l].as_slice())
                .chain(layer.bias.iter_mut().zip(&grads.biases[l]));
            for (p, g) in params {
                if l >= first_layer {
                    let v = &mut self.velocity[at];
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
                at += 1;
            }
        }
    }
}

/// Batches of indices for one epoch; drops a ragged tail when at least one full batch exists.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n <= batch {
        return vec![order];
    }
    order
        .chunks_exact(batch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Endless reshuffled cursor over the outlier set.
struct Cycler {
    order: Vec<usize>,
    at: usize,
}

impl Cycler {
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = n.min(self.order.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.at == self.order.len() {
                self.order.shuffle(rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

fn id_labels(set: &SampleSet) -> Result<Vec<usize>> {
    set.labels
        .iter()
        .map(|&y| {
            usize::try_from(y)
                .map_err(|_| Error::InvalidInput(format!("ID sample with label {y}")))
        })
        .collect()
}

fn diverged(step: usize, reason: &str) -> Error {
    Error::Diverged {
        step,
        reason: reason.to_string(),
    }
}

fn mean_breakdown(acc: LossBreakdown, steps: usize) -> LossBreakdown {
    let n = steps.max(1) as f64;
    LossBreakdown {
        total: acc.total / n,
        ce: acc.ce / n,
        dne_c: acc.dne_c / n,
        dne_s: acc.dne_s / n,
    }
}

/// Two-stage training. Stage 1 fits cross-entropy on `id_data` alone; stage 2
/// fits cross-entropy plus DNE on paired ID/outlier batches, by default
/// updating only the output layer.
pub fn train(
    mut model: Mlp,
    id_data: &SampleSet,
    outlier_data: &SampleSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = id_labels(id_data)?;
    let k = model.output_dim();
    for set in [id_data, outlier_data] {
        if !set.is_empty() && set.features.cols() != model.input_dim() {
            return Err(Error::Shape {
                expected: model.input_dim(),
                found: set.features.cols(),
            });
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for a {k}-class model"
        )));
    }
    let needs_id = cfg.epochs_pretrain + cfg.epochs_finetune > 0;
    if needs_id && id_data.len() == 0 {
        return Err(Error::InsufficientData("no ID training samples".into()));
    }
    if cfg.epochs_finetune > 0 && outlier_data.len() == 0 {
        return Err(Error::InsufficientData(
            "fine-tuning needs outlier samples".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut stage = Stage::Init;
    let mut global_step = 0usize;

    // stage 1: cross-entropy on ID only
    if cfg.epochs_pretrain > 0 {
        let per_epoch = epoch_batches(id_data.len(), cfg.batch_pretrain, &mut rng.clone()).len();
        let total_steps = per_epoch * cfg.epochs_pretrain;
        let mut opt = Sgd::new(model.num_params(), cfg.momentum);
        let mut t = 0;
        for epoch in 0..cfg.epochs_pretrain {
            let mut acc = LossBreakdown::default();
            let batches = epoch_batches(id_data.len(), cfg.batch_pretrain, &mut rng);
            for idx in &batches {
                let x = id_data.features.select_rows(idx);
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let trace = model.forward_trace(&x)?;
                let (ce, grad) = cross_entropy_with_grad(trace.logits(), &y)?;
                if !ce.is_finite() {
                    return Err(diverged(global_step, "non-finite cross-entropy"));
                }
                let grads = model.backward_trace(&trace, &grad, 0)?;
                opt.step(&mut model, &grads, cosine_lr(t, total_steps, cfg.lr_pretrain)?, 0);
                if !model.all_finite() {
                    return Err(diverged(global_step, "non-finite parameters"));
                }
                acc.ce += ce;
                acc.total += ce;
                t += 1;
                global_step += 1;
            }
            log.push(EpochLog {
                stage: Stage::Pretrain,
                epoch,
                steps: batches.len(),
                loss: mean_breakdown(acc, batches.len()),
            });
        }
        stage = Stage::Pretrain;
    }

    // stage 2: cross-entropy + DNE on paired batches
    if cfg.epochs_finetune > 0 {
        let first_layer = if cfg.finetune_all_layers {
            0
        } else {
            model.layers.len() - 1
        };
        let per_epoch = epoch_batches(id_data.len(), cfg.b_in, &mut rng.clone()).len();
        let total_steps = per_epoch * cfg.epochs_finetune;
        let mut opt = Sgd::new(model.num_params(), cfg.momentum);
        let mut outliers = Cycler {
            order: (0..outlier_data.len()).collect(),
            at: outlier_data.len(),
        };
        let mut t = 0;
        for epoch in 0..cfg.epochs_finetune {
            let mut acc = LossBreakdown::default();
            let batches = epoch_batches(id_data.len(), cfg.b_in, &mut rng);
            for idx in &batches {
                let out_idx = outliers.take(cfg.b_out, &mut rng);
                let x = id_data
                    .features
                    .select_rows(idx)
                    .vstack(&outlier_data.features.select_rows(&out_idx))?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let trace = model.forward_trace(&x)?;
                let logits = trace.logits();
                let all: Vec<usize> = (0..logits.rows()).collect();
                let batch = LogitBatch::new(
                    logits.select_rows(&all[..idx.len()]),
                    logits.select_rows(&all[idx.len()..]),
                )
                .map_err(|_| diverged(global_step, "non-finite logits"))?;
                let dne_cfg =
                    DneConfig::new(k, idx.len(), out_idx.len())?.with_dne_weight(cfg.dne_weight);
                let (loss, grad) = total_loss_and_grad(&batch, &y, &dne_cfg)?;
                if !loss.total.is_finite() {
                    return Err(diverged(global_step, "non-finite total loss"));
                }
                let grads = model.backward_trace(&trace, &grad, first_layer)?;
                let lr = cosine_lr(t, total_steps, cfg.lr_finetune)?;
                opt.step(&mut model, &grads, lr, first_layer);
                if !model.all_finite() {
                    return Err(diverged(global_step, "non-finite parameters"));
                }
                acc.total += loss.total;
                acc.ce += loss.ce;
                acc.dne_c += loss.dne_c;
                acc.dne_s += loss.dne_s;
                t += 1;
                global_step += 1;
            }
            log.push(EpochLog {
                stage: Stage::Finetune,
                epoch,
                steps: batches.len(),
                loss: mean_breakdown(acc, batches.len()),
            });
        }
        stage = Stage::Finetune;
    }

    Ok(TrainOutcome { model, log, stage })
}

/// Serialized model: layer dims, row-major weights and biases per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub stage: Stage,
}

impl Checkpoint {
    pub fn capture(model: &Mlp, seed: u64, stage: Stage) -> Self {
        Self {
            layer_dims: model.layer_dims(),
            weights: model
                .layers
                .iter()
                .map(|l| l.weights.as_slice().to_vec())
                .collect(),
            biases: model.layers.iter().map(|l| l.bias.clone()).collect(),
            seed,
            stage,
        }
    }

    pub fn to_model(&self) -> Result<Mlp> {
        let dims = &self.layer_dims;
        if dims.len() < 2 || self.weights.len() != dims.len() - 1 || self.biases.len() != dims.len() - 1 {
            return Err(Error::Format(format!(
                "checkpoint has {} dims, {} weight blocks and {} bias blocks",
                dims.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(self.weights.iter().zip(&self.biases))
            .map(|(w, (weights, bias))| {
                Ok(Dense {
                    weights: Matrix::from_vec(w[1], w[0], weights.clone())?,
                    bias: bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = Mlp::new(&[3, 4, 2], 0).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_flat_params(&zeros).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        assert!(m.forward(&x).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let m = Mlp::from_layers(vec![Dense {
            weights: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.25, 0.5, -0.75]]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let m = Mlp::new(&[3, 2], 0).unwrap();
        assert!(matches!(
            m.forward(&Matrix::zeros(2, 4)),
            Err(Error::Shape { expected: 3, found: 4 })
        ));
        assert!(m.backward(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).is_err());
        assert!(Mlp::new(&[3], 0).is_err());
        assert!(Mlp::new(&[3, 0, 2], 0).is_err());
        let bad = vec![
            Dense { weights: Matrix::zeros(4, 3), bias: vec![0.0; 4] },
            Dense { weights: Matrix::zeros(2, 5), bias: vec![0.0; 2] },
        ];
        assert!(Mlp::from_layers(bad).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = Mlp::new(&[3, 5, 2], 7).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.1, -0.5]]).unwrap();
        let g = m.backward(&x, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_sum_of_logits_gradient() {
        let m = Mlp::new(&[3, 2], 1).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.25, -0.5], [2.0, 0.0, 1.0]]).unwrap();
        let ones = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let g = m.backward(&x, &ones).unwrap();
        let col_sums = [3.5, -1.75, 3.5];
        for o in 0..2 {
            assert_eq!(g.weights[0].row(o), &col_sums);
        }
        assert_eq!(g.biases[0], vec![3.0, 3.0]);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(10, 10, 0.1).unwrap().abs() < 1e-17);
        assert_relative_eq!(cosine_lr(5, 10, 0.1).unwrap(), 0.05, max_relative = 1e-15);
        assert!(cosine_lr(11, 10, 0.1).is_err());
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::new(&[4, 6, 3], 11).unwrap();
        let ck = Checkpoint::capture(&m, 11, Stage::Init);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);

        let mut broken = ck.clone();
        broken.weights.pop();
        assert!(broken.to_model().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { momentum: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { b_out: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
