//! Local training (plain and proximal), distillation training, and weighted
//! parameter averaging.
//!
//! Every op is a pure function of its inputs and seed: mini-batch order comes
//! from a stream derived from the config seed, so two runs agree bit-exactly.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::engine::{Engine, ModelState};
use super::loss::{cross_entropy_grad, distill_grad};
use super::Real;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{LogitMatrix, Tensor};

/// A labelled mini-dataset held in memory: `[B, C, H, W]` inputs plus labels.
#[derive(Debug, Clone)]
pub struct LabelledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabelledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::InputShape {
                expected: vec![labels.len()],
                got: vec![inputs.rows()],
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the selected examples into a new batch.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices
                .iter()
                .map(|&i| self.labels.get(i).copied().ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.labels.len(),
                }))
                .collect::<Result<_>>()?,
        })
    }
}

/// Supervised / proximal local-training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// SGD momentum; 0 disables the velocity buffer update semantics change.
    #[serde(default)]
    pub momentum: f32,
    /// FedProx proximal coefficient; only `train_fedprox` reads it.
    #[serde(default)]
    pub proximal_mu: f32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.proximal_mu < 0.0 {
            return Err(Error::InvalidConfig("proximal_mu must be >= 0".into()));
        }
        Ok(())
    }
}

/// Distillation-training settings. Temperature 1 is plain softmax matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub rng_seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default)]
    pub momentum: f32,
}

fn default_temperature() -> f32 {
    1.0
}

/// Mean cross-entropy over a batch; accumulates the parameter gradient.
pub fn batch_ce_loss_grad<F: Real>(
    engine: &Engine<F>,
    inputs: &[Vec<F>],
    labels: &[usize],
    d_params: &mut [F],
) -> F {
    let scale = F::one() / F::from_f64(inputs.len() as f64);
    let mut total = F::zero();
    for (x, &label) in inputs.iter().zip(labels) {
        let trace = engine.forward_trace(x);
        let logits = trace.last().unwrap();
        let mut d_logits = vec![F::zero(); logits.len()];
        total += cross_entropy_grad(logits, label, &mut d_logits) * scale;
        for g in d_logits.iter_mut() {
            *g = *g * scale;
        }
        engine.backward(&trace, &d_logits, d_params);
    }
    total
}

/// Mean distillation loss over a batch; accumulates the parameter gradient.
pub fn batch_distill_loss_grad<F: Real>(
    engine: &Engine<F>,
    inputs: &[Vec<F>],
    teacher_probs: &[Vec<F>],
    temperature: F,
    d_params: &mut [F],
) -> F {
    let scale = F::one() / F::from_f64(inputs.len() as f64);
    let mut total = F::zero();
    for (x, teacher) in inputs.iter().zip(teacher_probs) {
        let trace = engine.forward_trace(x);
        let logits = trace.last().unwrap();
        let mut d_logits = vec![F::zero(); logits.len()];
        total += distill_grad(logits, teacher, temperature, &mut d_logits) * scale;
        for g in d_logits.iter_mut() {
            *g = *g * scale;
        }
        engine.backward(&trace, &d_logits, d_params);
    }
    total
}

/// `(mu/2) * ||w - anchor||^2` and its gradient contribution.
pub fn prox_loss_grad<F: Real>(params: &[F], anchor: &[F], mu: F, d_params: &mut [F]) -> F {
    let half = F::from_f64(0.5);
    let mut acc = F::zero();
    for i in 0..params.len() {
        let diff = params[i] - anchor[i];
        acc += diff * diff;
        d_params[i] += mu * diff;
    }
    half * mu * acc
}

fn gather_rows_f<F: Real>(t: &Tensor, idx: &[usize]) -> Vec<Vec<F>> {
    idx.iter()
        .map(|&i| t.row(i).iter().map(|&v| F::from_f32(v)).collect())
        .collect()
}

fn apply_update(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) {
    if momentum == 0.0 {
        for (w, &g) in params.iter_mut().zip(grads) {
            *w -= lr * g;
        }
    } else {
        for ((w, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

fn check_batch(model: &ModelState, data: &LabelledBatch, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData(format!("{what}: no training examples")));
    }
    let arch = model.arch();
    let shape = data.inputs.shape();
    let want: Vec<usize> = std::iter::once(data.len())
        .chain(arch.input_shape.iter().copied())
        .collect();
    if shape != want.as_slice() {
        return Err(Error::InputShape {
            expected: want,
            got: shape.to_vec(),
        });
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= arch.num_classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {} classes",
            arch.num_classes
        )));
    }
    Ok(())
}

fn train_local(
    model: &ModelState,
    data: &LabelledBatch,
    cfg: &TrainConfig,
    anchor: Option<&ModelState>,
) -> Result<ModelState> {
    cfg.validate()?;
    check_batch(model, data, "local training")?;
    let mu = anchor.map(|_| cfg.proximal_mu).unwrap_or(0.0);
    let anchor_params: Option<Vec<f32>> = anchor.map(|a| a.params().data().to_vec());

    let mut engine: Engine<f32> = Engine::new(model.arch(), model.params().data())?;
    let n = data.len();
    let batch_size = cfg.batch_size.min(n);
    let mut velocity = vec![0.0f32; engine.param_count()];
    let mut grads = vec![0.0f32; engine.param_count()];
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.rng_seed, Purpose::Shuffle, &[epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            grads.fill(0.0);
            let xs: Vec<Vec<f32>> = gather_rows_f(&data.inputs, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            batch_ce_loss_grad(&engine, &xs, &labels, &mut grads);
            if mu > 0.0 {
                prox_loss_grad(
                    engine.params(),
                    anchor_params.as_ref().unwrap(),
                    mu,
                    &mut grads,
                );
            }
            apply_update(
                engine.params_mut(),
                &grads,
                &mut velocity,
                cfg.learning_rate,
                cfg.momentum,
            );
        }
    }

    let params = Tensor::new(vec![engine.param_count()], engine.params().to_vec())?;
    params.ensure_finite("local training")?;
    ModelState::from_params(model.arch().clone(), params)
}

/// Mini-batch SGD on softmax cross-entropy over the private shard.
pub fn train_supervised(
    model: &ModelState,
    data: &LabelledBatch,
    cfg: &TrainConfig,
) -> Result<ModelState> {
    train_local(model, data, cfg, None)
}

/// Like `train_supervised` with the loss augmented by
/// `(mu/2) * ||w - w_anchor||^2`. With `mu == 0` the result is bit-identical
/// to plain supervised training under the same seed.
pub fn train_fedprox(
    model: &ModelState,
    data: &LabelledBatch,
    anchor: &ModelState,
    cfg: &TrainConfig,
) -> Result<ModelState> {
    if anchor.arch() != model.arch() {
        return Err(Error::IncompatibleArchitecture(
            "fedprox anchor architecture differs from model".into(),
        ));
    }
    train_local(model, data, cfg, Some(anchor))
}

/// Runs `steps` SGD steps minimizing `T^2 * KL(softmax(target) || softmax(logits))`
/// over the patch set; targets are raw teacher logits, one row per patch.
pub fn distill(
    model: &ModelState,
    patches: &Tensor,
    targets: &LogitMatrix,
    steps: usize,
    cfg: &DistillConfig,
) -> Result<ModelState> {
    let n = patches.rows();
    if targets.rows() != n {
        return Err(Error::MisalignedTargets(format!(
            "{} target rows for {} patches",
            targets.rows(),
            n
        )));
    }
    if targets.cols() != model.arch().num_classes {
        return Err(Error::MisalignedTargets(format!(
            "{} target columns for {} classes",
            targets.cols(),
            model.arch().num_classes
        )));
    }
    if steps == 0 {
        return Ok(model.clone());
    }
    if n == 0 {
        return Err(Error::EmptyData("distillation: no patches".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || !(cfg.temperature > 0.0) {
        return Err(Error::InvalidConfig(
            "distill: learning_rate, batch_size and temperature must be positive".into(),
        ));
    }

    // Teacher distributions are fixed for the whole run.
    let temp = cfg.temperature;
    let teacher_probs: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let row: Vec<f32> = targets.row(i).iter().map(|&v| v / temp).collect();
            let mut p = vec![0.0f32; row.len()];
            super::loss::softmax_into(&row, &mut p);
            p
        })
        .collect();

    let mut engine: Engine<f32> = Engine::new(model.arch(), model.params().data())?;
    let batch_size = cfg.batch_size.min(n);
    let mut velocity = vec![0.0f32; engine.param_count()];
    let mut grads = vec![0.0f32; engine.param_count()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force shuffle on first step
    let mut pass = 0u64;

    for _ in 0..steps {
        if cursor + batch_size > n {
            let mut rng = stream(cfg.rng_seed, Purpose::Distill, &[pass]);
            order.shuffle(&mut rng);
            pass += 1;
            cursor = 0;
        }
        let chunk = &order[cursor..cursor + batch_size];
        cursor += batch_size;

        grads.fill(0.0);
        let xs: Vec<Vec<f32>> = gather_rows_f(patches, chunk);
        let probs: Vec<Vec<f32>> = chunk.iter().map(|&i| teacher_probs[i].clone()).collect();
        batch_distill_loss_grad(&engine, &xs, &probs, temp, &mut grads);
        apply_update(
            engine.params_mut(),
            &grads,
            &mut velocity,
            cfg.learning_rate,
            cfg.momentum,
        );
    }

    let params = Tensor::new(vec![engine.param_count()], engine.params().to_vec())?;
    params.ensure_finite("distillation")?;
    ModelState::from_params(model.arch().clone(), params)
}

/// `params = sum(w_i * p_i) / sum(w_i)`; accumulation in f64.
pub fn weighted_average(models: &[&ModelState], weights: &[f64]) -> Result<ModelState> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::InvalidConfig(format!(
            "weighted_average: {} models, {} weights",
            models.len(),
            weights.len()
        )));
    }
    let arch = models[0].arch();
    for m in &models[1..] {
        if m.arch() != arch {
            return Err(Error::IncompatibleArchitecture(
                "weighted_average over mixed architectures".into(),
            ));
        }
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig(
            "weighted_average: weights must be non-negative and finite".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }

    let n = arch.param_count();
    let mut acc = vec![0.0f64; n];
    for (m, &w) in models.iter().zip(weights) {
        let scale = w / total;
        for (a, &p) in acc.iter_mut().zip(m.params().data()) {
            *a += scale * p as f64;
        }
    }
    let params: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    let t = Tensor::new(vec![n], params)?;
    t.ensure_finite("weighted_average")?;
    ModelState::from_params(arch.clone(), t)
}
