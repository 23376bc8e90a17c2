//! Optimization loop, metrics and the ablation driver.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{ModelConfig, PreparedExample, ScenaFuseModel, Variant};
use crate::params::{derive_seed, Grads, ParamStore};

pub const LR_GRID: [f64; 4] = [1e-5, 2e-5, 3e-5, 5e-5];
pub const BATCH_GRID: [usize; 3] = [16, 32, 64];
pub const DROPOUT_GRID: [f64; 3] = [0.1, 0.2, 0.3];
pub const CLIP_GRID: [f64; 3] = [7.0, 10.0, 15.0];
pub const WARMUP_FRACTION: f64 = 0.1;
pub const WEIGHT_DECAY: f64 = 1e-8;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Permits values outside the standard grids.
    pub allow_off_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            warmup_fraction: WARMUP_FRACTION,
            weight_decay: WEIGHT_DECAY,
            batch_size: 32,
            dropout: 0.1,
            grad_clip: 10.0,
            epochs: 10,
            seed: 0,
            allow_off_grid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.dropout) || self.grad_clip <= 0.0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if self.allow_off_grid {
            return Ok(());
        }
        let on = |grid: &[f64], v: f64| grid.iter().any(|&g| (g - v).abs() <= 1e-12 * g.abs());
        let mut off = Vec::new();
        if !on(&LR_GRID, self.learning_rate) {
            off.push(format!("learning_rate {}", self.learning_rate));
        }
        if !BATCH_GRID.contains(&self.batch_size) {
            off.push(format!("batch_size {}", self.batch_size));
        }
        if !on(&DROPOUT_GRID, self.dropout) {
            off.push(format!("dropout {}", self.dropout));
        }
        if !on(&CLIP_GRID, self.grad_clip) {
            off.push(format!("grad_clip {}", self.grad_clip));
        }
        if !on(&[WARMUP_FRACTION], self.warmup_fraction) {
            off.push(format!("warmup_fraction {}", self.warmup_fraction));
        }
        if !on(&[WEIGHT_DECAY], self.weight_decay) {
            off.push(format!("weight_decay {}", self.weight_decay));
        }
        if off.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "off-grid values without allow_off_grid: {}",
                off.join(", ")
            )))
        }
    }

    /// Sets one field from text; shared by config files and flags.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "warmup_fraction" => self.warmup_fraction = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "allow_off_grid" => self.allow_off_grid = num(key, value)?,
            _ => return Err(format!("unknown training key {key:?}")),
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay:
/// `p -= lr * (m̂ / (√v̂ + ε) + wd * p)`.
pub fn adamw_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState, lr: f64, weight_decay: f64) {
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, t) in store.tensors_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.0[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            *p -= lr * (update + weight_decay * *p);
        }
    }
}

/// Linear warm-up over the first `warmup_fraction` of steps, then linear decay
/// to zero at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Value(format!("step {step} beyond {total_steps}")));
    }
    let warm = (warmup_fraction * total_steps as f64).round() as usize;
    let lr = if step < warm {
        base_lr * step as f64 / warm as f64
    } else if warm == total_steps {
        base_lr
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warm) as f64
    };
    Ok(lr)
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the applied factor.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.scale(s);
        s
    } else {
        1.0
    }
}

/// Confusion counts, `[true][predicted]`.
pub type Confusion = [[usize; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub confusion: Confusion,
}

impl Metrics {
    /// Classes never predicted (or never present) score zero precision (recall).
    pub fn from_confusion(c: &Confusion) -> Result<Self> {
        let total: usize = c.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Value("no predictions to score".into()));
        }
        let tp: Vec<usize> = (0..3).map(|i| c[i][i]).collect();
        let predicted: Vec<usize> = (0..3).map(|j| (0..3).map(|i| c[i][j]).sum()).collect();
        let actual: Vec<usize> = (0..3).map(|i| c[i].iter().sum()).collect();
        let correct: usize = tp.iter().sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok(Metrics {
            accuracy: ratio(correct, total),
            micro_precision: ratio(correct, predicted.iter().sum()),
            micro_recall: ratio(correct, actual.iter().sum()),
            macro_precision: (0..3).map(|k| ratio(tp[k], predicted[k])).sum::<f64>() / 3.0,
            macro_recall: (0..3).map(|k| ratio(tp[k], actual[k])).sum::<f64>() / 3.0,
            confusion: *c,
        })
    }

    /// Exact equality of micro precision, micro recall and accuracy.
    pub fn micro_identity_holds(&self) -> bool {
        self.micro_precision == self.accuracy && self.micro_recall == self.accuracy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

fn argmax(l: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if l[k] > l[best] {
            best = k;
        }
    }
    best
}

fn log_softmax_at(l: &[f64; 3], k: usize) -> f64 {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    l[k] - lse
}

/// Argmax predictions over a split; per-example forwards run in parallel and
/// are merged in example order.
pub fn evaluate(model: &ScenaFuseModel, data: &[PreparedExample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Value("cannot evaluate an empty split".into()));
    }
    let logits = exec::map_ordered(data, |_, ex| model.logits(ex));
    let mut confusion = [[0usize; 3]; 3];
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    for (ex, l) in data.iter().zip(logits) {
        let l = l?;
        let p = argmax(&l);
        confusion[ex.label][p] += 1;
        loss -= log_softmax_at(&l, ex.label);
        predictions.push(p);
    }
    let metrics = Metrics::from_confusion(&confusion)?;
    if !metrics.micro_identity_holds() {
        return Err(Error::Value(format!("micro metrics diverged from accuracy: {metrics:?}")));
    }
    Ok(Evaluation {
        metrics,
        loss: loss / data.len() as f64,
        predictions,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub split: String,
    pub epoch: usize,
    pub acc: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub macro_p: f64,
    pub macro_r: f64,
}

impl MetricsRecord {
    pub fn new(variant: Variant, split: &str, epoch: usize, m: &Metrics) -> Self {
        MetricsRecord {
            variant: variant.name().to_string(),
            split: split.to_string(),
            epoch,
            acc: m.accuracy,
            micro_p: m.micro_precision,
            micro_r: m.micro_recall,
            macro_p: m.macro_precision,
            macro_r: m.macro_recall,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Evaluation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochSummary>,
    /// Epoch whose parameters were kept; 0 is the initialization.
    pub best_epoch: usize,
    pub best_dev: Evaluation,
}

/// Mean loss and gradient over one batch. Example gradients are computed in
/// parallel and summed in batch order, so the result does not depend on the
/// thread count.
pub fn batch_gradient(
    model: &ScenaFuseModel,
    batch: &[&PreparedExample],
    dropout: f64,
    seeds: &[u64],
) -> Result<(f64, Grads)> {
    let jobs: Vec<(&PreparedExample, u64)> = batch.iter().copied().zip(seeds.iter().copied()).collect();
    let results = exec::map_ordered(&jobs, |_, (ex, seed)| model.loss_and_grads(ex, dropout, Some(*seed)));
    sum_gradients(model, results)
}

/// Sequential reference for [`batch_gradient`].
pub fn batch_gradient_sequential(
    model: &ScenaFuseModel,
    batch: &[&PreparedExample],
    dropout: f64,
    seeds: &[u64],
) -> Result<(f64, Grads)> {
    let jobs: Vec<(&PreparedExample, u64)> = batch.iter().copied().zip(seeds.iter().copied()).collect();
    let results = exec::map_sequential(&jobs, |_, (ex, seed)| model.loss_and_grads(ex, dropout, Some(*seed)));
    sum_gradients(model, results)
}

fn sum_gradients(model: &ScenaFuseModel, results: Vec<Result<(f64, Grads, [f64; 3])>>) -> Result<(f64, Grads)> {
    let n = results.len();
    let mut total = Grads::zeros_like(&model.store);
    let mut loss = 0.0;
    for r in results {
        let (l, g, _) = r?;
        loss += l;
        total.add_assign(&g);
    }
    total.scale(1.0 / n as f64);
    Ok((loss / n as f64, total))
}

fn better(a: &Evaluation, b: &Evaluation) -> bool {
    a.metrics.accuracy > b.metrics.accuracy || (a.metrics.accuracy == b.metrics.accuracy && a.loss < b.loss)
}

/// Trains `model` in place and leaves it holding the best-dev parameters.
/// When `checkpoint` is given, the best parameters are also written there
/// each time they improve.
pub fn train(
    model: &mut ScenaFuseModel,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Value("empty training split".into()));
    }
    let steps = cfg.steps_per_epoch(train_set.len());
    let total = steps * cfg.epochs;
    let mut state = AdamState::new(&model.store);
    let mut best_dev = evaluate(model, dev_set)?;
    let mut best_store = model.store.clone();
    let mut best_epoch = 0;
    if let Some(p) = checkpoint {
        best_store.save(p)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(cfg.seed, &[4, epoch as u64, s as u64, i as u64]))
                .collect();
            let (loss, mut grads) = batch_gradient(model, &batch, cfg.dropout, &seeds)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {s}"
                )));
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            let global = (epoch - 1) * steps + s;
            // shifted by one so neither the first nor the last update is wasted at lr 0
            let lr = lr_at_step(global + 1, total + 1, cfg.learning_rate, cfg.warmup_fraction)?;
            adamw_step(&mut model.store, &grads, &mut state, lr, cfg.weight_decay);
            loss_sum += loss * chunk.len() as f64;
        }
        let dev = evaluate(model, dev_set)?;
        let summary = EpochSummary {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            dev,
        };
        on_epoch(&summary);
        if better(&summary.dev, &best_dev) {
            best_dev = summary.dev.clone();
            best_store = model.store.clone();
            best_epoch = epoch;
            if let Some(p) = checkpoint {
                best_store.save(p)?;
            }
        }
        history.push(summary);
    }
    model.store = best_store;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_dev,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub dev: Metrics,
    pub test: Metrics,
}

/// One row per variant with test accuracy, micro-P and micro-R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const COLUMNS: [&'static str; 3] = ["acc", "micro_p", "micro_r"];

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn values(&self) -> Vec<(Variant, [f64; 3])> {
        self.rows
            .iter()
            .map(|r| (r.variant, [r.test.accuracy, r.test.micro_precision, r.test.micro_recall]))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8} {:>8}\n", "variant", "acc", "micro_p", "micro_r");
        for (v, [a, p, r]) in self.values() {
            s.push_str(&format!("{:<10} {:>8.4} {:>8.4} {:>8.4}\n", v.name(), a, p, r));
        }
        s
    }
}

/// Trains every requested variant from the same seed and configuration.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
    test_set: &[PreparedExample],
    variants: &[Variant],
    mut on_epoch: impl FnMut(Variant, &EpochSummary),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut model = ScenaFuseModel::new(model_cfg, v, train_cfg.seed)?;
        let out = train(&mut model, train_set, dev_set, train_cfg, None, |e| on_epoch(v, e))?;
        let test = evaluate(&model, test_set)?;
        rows.push(AblationRow {
            variant: v,
            best_epoch: out.best_epoch,
            dev: out.best_dev.metrics,
            test: test.metrics,
        });
    }
    Ok(AblationTable { rows })
}
