//! Adam fine-tuning of multi-exit and single-exit models plus the
//! random-search and model-selection protocol.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::calibration::{argmax, Calibration};
use crate::encoder::{Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::multi_exit::{Example, MultiExitModel};
use crate::par::{self, Execution};
use crate::routing::{accuracy_by_threshold, collect_exit_logits, default_thresholds};

/// Instances per gradient task; fixed so that gradient sums do not depend on
/// the thread count.
const GRAD_CHUNK: usize = 4;

/// Architecture and label set; the multi-exit/baseline distinction is the
/// number of exit blocks in `config`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub config: EncoderConfig,
    pub labels: Vec<String>,
}

impl ModelSpec {
    pub fn init(&self, seed: u64) -> Result<MultiExitModel> {
        MultiExitModel::new(self.config.clone(), self.labels.clone(), seed)
    }

    /// The standard baseline: one classifier after the last block.
    pub fn single_exit(&self) -> ModelSpec {
        let mut config = self.config.clone();
        config.exit_blocks = vec![config.n_blocks];
        ModelSpec { config, labels: self.labels.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub learning_rate: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub exec: Execution,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            learning_rate: 1e-3,
            seed: 0,
            epochs: 5,
            batch_size: 32,
            dropout: 0.1,
            adam: AdamConfig::default(),
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub trials: usize,
    /// Seeds drawn in order; when shorter than `trials`, the rest are random.
    pub seeds: Vec<u64>,
    pub selection_thresholds: Vec<f64>,
    pub dropout: f64,
    pub adam: AdamConfig,
    /// Seeds the draws of (learning rate, seed) pairs.
    pub search_seed: u64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: vec![5e-4, 1e-3, 2e-3],
            epochs: 5,
            batch_size: 32,
            trials: 10,
            seeds: Vec::new(),
            selection_thresholds: default_thresholds(),
            dropout: 0.1,
            adam: AdamConfig::default(),
            search_seed: 0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("random search needs at least one trial".into()));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be positive: {:?}",
                self.learning_rates
            )));
        }
        if self.selection_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("selection thresholds must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size 0".into()));
        }
        Ok(())
    }

    fn trial(&self, learning_rate: f64, seed: u64) -> TrialConfig {
        TrialConfig {
            learning_rate,
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            adam: self.adam,
            exec: self.exec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Final-exit validation accuracy after each epoch.
    pub epoch_val_accuracy: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Whole-run wall time in seconds.
    pub wall_time: f64,
    /// Routing accuracy on validation per selection threshold (multi-exit).
    pub val_by_threshold: Vec<(f64, f64)>,
    pub chosen_trial: Option<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy,seconds\n");
        for i in 0..self.epoch_losses.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                i + 1,
                self.epoch_losses[i],
                self.epoch_val_accuracy[i],
                self.epoch_seconds[i]
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let loss = self.epoch_losses.last().copied().unwrap_or(f64::NAN);
        let acc = self.epoch_val_accuracy.last().copied().unwrap_or(f64::NAN);
        let trial = self.chosen_trial.map_or("-".to_string(), |t| t.to_string());
        format!(
            "epochs={} final_loss={loss} final_val_accuracy={acc} wall_time_s={} chosen_trial={trial}",
            self.epoch_losses.len(),
            self.wall_time
        )
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    config: AdamConfig,
}

impl Adam {
    fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0, config }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.get_mut(id).values_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                w[i] -= lr * (update + weight_decay * w[i]);
            }
        }
    }
}

/// Mean loss and gradient of the summed per-exit loss over `batch`.
///
/// `stream_base` offsets the dropout streams so that every instance of a run
/// draws an independent, reproducible mask.
pub fn batch_gradient(
    model: &MultiExitModel,
    batch: &[Example],
    dropout: f64,
    seed: u64,
    stream_base: u64,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<(usize, &[Example])> = batch.chunks(GRAD_CHUNK).enumerate().collect();
    let parts = par::map(exec, &chunks, |&(c, chunk)| -> Result<(f64, Gradients)> {
        let mut acc = Gradients::zeros_like(&model.store);
        let mut loss = 0.0;
        for (k, ex) in chunk.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + (c * GRAD_CHUNK + k) as u64);
            let mut g = Graph::new(&model.store);
            let mut drop = (dropout > 0.0).then(|| Dropout { rate: dropout, rng: &mut rng });
            let l = model.instance_loss(&mut g, ex, &mut drop)?;
            loss += g.scalar(l);
            g.backward_into(l, scale, &mut acc)?;
        }
        Ok((loss, acc))
    });
    let mut total = Gradients::zeros_like(&model.store);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    Ok((loss * scale, total))
}

/// Accuracy of the final exit.
pub fn final_exit_accuracy(model: &MultiExitModel, data: &[Example], exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let last = model.num_exits() - 1;
    let hits = par::map(exec, data, |ex| -> Result<bool> {
        let stack = model.encode(&ex.tokens, model.config.n_blocks)?;
        Ok(argmax(&model.exit_logits(&stack, &model.exits[last])?) == ex.gold)
    });
    let mut correct = 0;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a freshly initialised model; no early exits are taken, every exit's
/// loss contributes to every step.
pub fn train(
    spec: &ModelSpec,
    train_set: &[Example],
    val_set: &[Example],
    trial: &TrialConfig,
) -> Result<(MultiExitModel, TrainReport)> {
    let start = Instant::now();
    let mut model = spec.init(trial.seed)?;
    if trial.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    if trial.epochs > 0 && train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut adam = Adam::new(&model.store, trial.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(trial.seed ^ 0x5eed_5eed);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        epoch_val_accuracy: Vec::new(),
        epoch_seconds: Vec::new(),
        wall_time: 0.0,
        val_by_threshold: Vec::new(),
        chosen_trial: None,
    };
    let mut step = 0usize;
    let mut seen = 0u64;
    for epoch in 0..trial.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(trial.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) =
                batch_gradient(&model, &batch, trial.dropout, trial.seed, seen, trial.exec)?;
            if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, step, loss });
            }
            adam.step(&mut model.store, &grads, trial.learning_rate);
            seen += batch.len() as u64;
            sum += loss;
            batches += 1;
            step += 1;
        }
        report.epoch_losses.push(sum / batches as f64);
        report.epoch_val_accuracy.push(final_exit_accuracy(&model, val_set, trial.exec)?);
        report.epoch_seconds.push(t0.elapsed().as_secs_f64());
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Highest validation score; ties keep the earliest trial.
pub fn select_baseline(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Highest validation accuracy averaged across all thresholds explored.
pub fn select_multi_exit(per_threshold: &[Vec<f64>]) -> Option<usize> {
    let means: Vec<f64> = per_threshold
        .iter()
        .map(|s| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 })
        .collect();
    select_baseline(&means)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub learning_rate: f64,
    pub seed: u64,
    /// `None` when the trial diverged.
    pub score: Option<f64>,
    pub per_threshold: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: MultiExitModel,
    pub calibration: Calibration,
    pub report: TrainReport,
    pub trials: Vec<TrialOutcome>,
    pub chosen: usize,
}

/// Draws `trials` (learning rate, seed) pairs, trains each and keeps the best
/// by validation accuracy: final-exit accuracy for single-exit models, the
/// mean over `selection_thresholds` of calibrated routing accuracy for
/// multi-exit models.
pub fn random_search(
    spec: &ModelSpec,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<SearchOutcome> {
    config.validate()?;
    if val_set.is_empty() {
        return Err(Error::InvalidArgument("random search needs a validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.search_seed);
    let draws: Vec<(f64, u64)> = (0..config.trials)
        .map(|i| {
            let lr = *config.learning_rates.choose(&mut rng).expect("validated non-empty");
            let drawn: u64 = rng.gen::<u32>() as u64;
            (lr, config.seeds.get(i).copied().unwrap_or(drawn))
        })
        .collect();
    let multi = spec.config.exit_blocks.len() > 1;
    let golds: Vec<usize> = val_set.iter().map(|e| e.gold).collect();

    // trials run side by side; each trial is sequential inside
    let runs = par::map(config.exec, &draws, |&(lr, seed)| {
        let mut trial = config.trial(lr, seed);
        trial.exec = Execution::Sequential;
        let (model, mut report) = match train(spec, train_set, val_set, &trial) {
            Ok(r) => r,
            Err(Error::Diverged { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let logits = collect_exit_logits(val_set, &model, Execution::Sequential)?;
        let per_exit = transpose(&logits);
        let calibration = Calibration::fit(&per_exit, &golds, Execution::Sequential)?;
        let per_threshold = if multi {
            accuracy_by_threshold(&logits, &golds, &calibration, &config.selection_thresholds)?
        } else {
            Vec::new()
        };
        report.val_by_threshold =
            config.selection_thresholds.iter().copied().zip(per_threshold.iter().copied()).collect();
        Ok(Some((model, calibration, report, per_threshold)))
    });
    let runs: Vec<_> = runs.into_iter().collect::<Result<_>>()?;

    let trials: Vec<TrialOutcome> = runs
        .iter()
        .zip(&draws)
        .map(|(run, &(learning_rate, seed))| TrialOutcome {
            learning_rate,
            seed,
            score: run.as_ref().map(|(_, _, r, pt)| {
                if multi {
                    pt.iter().sum::<f64>() / pt.len().max(1) as f64
                } else {
                    r.epoch_val_accuracy.last().copied().unwrap_or(f64::NAN)
                }
            }),
            per_threshold: run.as_ref().map(|r| r.3.clone()).unwrap_or_default(),
        })
        .collect();
    let chosen = if multi {
        let table: Vec<Vec<f64>> = trials
            .iter()
            .map(|t| if t.score.is_some() { t.per_threshold.clone() } else { Vec::new() })
            .collect();
        select_multi_exit(&table)
    } else {
        let scores: Vec<f64> = trials.iter().map(|t| t.score.unwrap_or(f64::NAN)).collect();
        select_baseline(&scores)
    }
    .ok_or_else(|| Error::InvalidArgument("every random-search trial diverged".into()))?;

    let (model, calibration, mut report, _) =
        runs.into_iter().nth(chosen).flatten().expect("chosen trial finished");
    report.chosen_trial = Some(chosen);
    Ok(SearchOutcome { model, calibration, report, trials, chosen })
}

/// `[instance][exit]` → `[exit][instance]`.
pub fn transpose(logits: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let exits = logits.first().map_or(0, Vec::len);
    (0..exits).map(|e| logits.iter().map(|zs| zs[e].clone()).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeComparison {
    pub multi_exit_s: f64,
    pub baseline_s: f64,
    /// multi_exit_s / baseline_s.
    pub ratio: f64,
}

impl TimeComparison {
    pub fn to_csv(&self) -> String {
        format!(
            "model,wall_time_s\nmulti_exit,{}\nbaseline,{}\nratio,{}\n",
            self.multi_exit_s, self.baseline_s, self.ratio
        )
    }
}

pub fn training_time_report(
    multi_exit: Option<&TrainReport>,
    baseline: Option<&TrainReport>,
) -> Result<TimeComparison> {
    let (Some(m), Some(b)) = (multi_exit, baseline) else {
        return Err(Error::InvalidArgument("training time comparison needs both reports".into()));
    };
    Ok(TimeComparison { multi_exit_s: m.wall_time, baseline_s: b.wall_time, ratio: m.wall_time / b.wall_time })
}
