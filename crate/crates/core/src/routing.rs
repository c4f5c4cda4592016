//! Sequential early-exit inference, analytic cost accounting, threshold
//! sweeps and the oracle bound.

use std::fmt;
use std::time::Instant;

use crate::calibration::{argmax, calibrated_confidence, Calibration};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::multi_exit::{Example, MultiExitModel};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingPolicy {
    threshold: f64,
}

impl RoutingPolicy {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(RoutingPolicy { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Strict comparison: λ = 0 always exits (confidence > 0), λ = 1 never
    /// does (confidence ≤ 1), even when rounding makes a confidence 1.0.
    pub fn takes_exit(&self, confidence: f64) -> bool {
        confidence > self.threshold
    }

    /// Walks exits in order and returns the first one taken; the final exit
    /// always answers and its threshold is never consulted.
    pub fn choose<F>(&self, num_exits: usize, mut confidence_at: F) -> Result<(usize, f64)>
    where
        F: FnMut(usize) -> Result<f64>,
    {
        for e in 0..num_exits {
            let c = confidence_at(e)?;
            if e + 1 == num_exits || self.takes_exit(c) {
                return Ok((e, c));
            }
        }
        Err(Error::InvalidArgument("routing over zero exits".into()))
    }
}

/// Thresholds 0.0 and 0.55..=1.00 in steps of 0.05.
pub fn default_thresholds() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((55..=100).step_by(5).map(|p| p as f64 / 100.0))
        .collect()
}

/// Applies `policy` to precomputed raw logits of every exit
/// (`logits[e]`), returning `(exit, prediction, confidence)`.
pub fn route_logits(
    logits: &[Vec<f64>],
    calibration: &Calibration,
    policy: RoutingPolicy,
) -> Result<(usize, usize, f64)> {
    if calibration.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} temperatures for {} exits",
            calibration.len(),
            logits.len()
        )));
    }
    let mut prediction = 0;
    let (exit, conf) = policy.choose(logits.len(), |e| {
        let c = calibrated_confidence(&logits[e], calibration.temperature(e));
        prediction = c.prediction;
        Ok(c.confidence)
    })?;
    Ok((exit, prediction, conf))
}

/// Routing accuracy at each threshold, computed from precomputed logits
/// `[instance][exit]`.
pub fn accuracy_by_threshold(
    logits: &[Vec<Vec<f64>>],
    golds: &[usize],
    calibration: &Calibration,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    thresholds
        .iter()
        .map(|&t| {
            let policy = RoutingPolicy::new(t)?;
            let mut correct = 0;
            for (zs, &g) in logits.iter().zip(golds) {
                if route_logits(zs, calibration, policy)?.1 == g {
                    correct += 1;
                }
            }
            Ok(correct as f64 / golds.len().max(1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult {
    pub prediction: usize,
    pub exit_index: usize,
    pub confidence: f64,
    pub cost_units: f64,
    pub wall_time: f64,
    pub blocks_executed: usize,
}

/// Multiply-accumulate count of answering at `exit_index` for a sequence of
/// `seq_len` tokens:
///
/// ```text
/// Σ_{b=1..B} [ 2n(4d² + 2·d·f) + 4n²d ]  +  Σ_{e' ≤ exit} [ (b_{e'}+1)·d + d·C ]
/// ```
///
/// where B is the exit's attach block, d = d_model and f = ffn_dim. Every head
/// up to and including the chosen one is charged because routing evaluates
/// them in turn.
pub fn cost_units(config: &EncoderConfig, num_classes: usize, exit_index: usize, seq_len: usize) -> f64 {
    let n = seq_len as f64;
    let d = config.d_model as f64;
    let f = config.ffn_dim as f64;
    let attach = config.exit_blocks[exit_index] as f64;
    let block = 2.0 * n * (4.0 * d * d + 2.0 * d * f) + 4.0 * n * n * d;
    let heads: f64 = config.exit_blocks[..=exit_index]
        .iter()
        .map(|&b| (b as f64 + 1.0) * d + d * num_classes as f64)
        .sum();
    attach * block + heads
}

pub fn route(
    tokens: &[usize],
    model: &MultiExitModel,
    calibration: &Calibration,
    policy: RoutingPolicy,
) -> Result<RoutingResult> {
    if calibration.len() != model.num_exits() {
        return Err(Error::Shape(format!(
            "{} temperatures for {} exits",
            calibration.len(),
            model.num_exits()
        )));
    }
    let start = Instant::now();
    let mut stack = model.encode(tokens, 0)?;
    let mut prediction = 0;
    let (exit_index, confidence) = policy.choose(model.num_exits(), |e| {
        let head = &model.exits[e];
        if stack.computed_to() < head.attach_block {
            stack = model.extend(stack.clone(), head.attach_block)?;
        }
        let z = model.exit_logits(&stack, head)?;
        let c = calibrated_confidence(&z, calibration.temperature(e));
        prediction = c.prediction;
        Ok(c.confidence)
    })?;
    let wall_time = start.elapsed().as_secs_f64();
    Ok(RoutingResult {
        prediction,
        exit_index,
        confidence,
        cost_units: cost_units(&model.config, model.num_classes, exit_index, tokens.len()),
        wall_time,
        blocks_executed: stack.blocks_executed(),
    })
}

pub fn route_all(
    dataset: &[Example],
    model: &MultiExitModel,
    calibration: &Calibration,
    policy: RoutingPolicy,
    exec: Execution,
) -> Result<Vec<RoutingResult>> {
    par::map(exec, dataset, |ex| route(&ex.tokens, model, calibration, policy))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    Oracle,
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(v) => write!(f, "{v}"),
            Threshold::Oracle => f.write_str("oracle"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    pub threshold: Threshold,
    pub accuracy: f64,
    pub mean_cost_fraction: f64,
    pub runtime_mean: f64,
    pub runtime_std: f64,
    /// Wall time of each timed pass, in seconds.
    pub runtimes: Vec<f64>,
    pub exit_histogram: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Timed passes per point.
    pub repeats: usize,
    /// Used for the untimed deterministic pass; timed passes are sequential.
    pub exec: Execution,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { repeats: 5, exec: Execution::default() }
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy, histogram and cost of assignments `(exit, prediction)`.
pub(crate) fn summarize<I>(
    threshold: Threshold,
    assignments: I,
    golds: &[usize],
    costs: impl Fn(usize, usize) -> f64,
    final_cost: impl Fn(usize) -> f64,
    num_exits: usize,
) -> TradeoffPoint
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut hist = vec![0; num_exits];
    let mut correct = 0usize;
    let mut spent = 0.0;
    let mut full = 0.0;
    for (i, (exit, pred)) in assignments.into_iter().enumerate() {
        hist[exit] += 1;
        if pred == golds[i] {
            correct += 1;
        }
        spent += costs(i, exit);
        full += final_cost(i);
    }
    TradeoffPoint {
        threshold,
        accuracy: correct as f64 / golds.len() as f64,
        mean_cost_fraction: spent / full,
        runtime_mean: 0.0,
        runtime_std: 0.0,
        runtimes: Vec::new(),
        exit_histogram: hist,
    }
}

fn timed_passes<F>(repeats: usize, mut pass: F) -> Result<Vec<f64>>
where
    F: FnMut() -> Result<()>,
{
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        pass()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(times)
}

pub fn sweep(
    dataset: &[Example],
    model: &MultiExitModel,
    calibration: &Calibration,
    thresholds: &[f64],
    options: SweepOptions,
) -> Result<Vec<TradeoffPoint>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("sweep over an empty dataset".into()));
    }
    if options.repeats == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one repeat".into()));
    }
    let golds: Vec<usize> = dataset.iter().map(|e| e.gold).collect();
    let last = model.num_exits() - 1;
    let final_cost =
        |i: usize| cost_units(&model.config, model.num_classes, last, dataset[i].tokens.len());
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let policy = RoutingPolicy::new(t)?;
        let results = route_all(dataset, model, calibration, policy, options.exec)?;
        let mut point = summarize(
            Threshold::Value(t),
            results.iter().map(|r| (r.exit_index, r.prediction)),
            &golds,
            |i, _| results[i].cost_units,
            final_cost,
            model.num_exits(),
        );
        // batch size 1, one instance after another
        let times = timed_passes(options.repeats, || {
            for ex in dataset {
                route(&ex.tokens, model, calibration, policy)?;
            }
            Ok(())
        })?;
        (point.runtime_mean, point.runtime_std) = mean_std(&times);
        point.runtimes = times;
        points.push(point);
    }
    Ok(points)
}

/// Earliest exit that is correct, or exit 0 when none is.
pub fn oracle_assign(per_exit_correct: &[bool]) -> Result<usize> {
    if per_exit_correct.is_empty() {
        return Err(Error::InvalidArgument("oracle over zero exits".into()));
    }
    Ok(per_exit_correct.iter().position(|&c| c).unwrap_or(0))
}

/// Raw logits of every exit for every instance: `[instance][exit]`.
pub fn collect_exit_logits(
    dataset: &[Example],
    model: &MultiExitModel,
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    par::map(exec, dataset, |ex| model.all_exit_logits(&ex.tokens))
        .into_iter()
        .collect()
}

/// Accuracy of each exit used on its own.
pub fn exit_accuracies(per_instance_logits: &[Vec<Vec<f64>>], golds: &[usize]) -> Vec<f64> {
    let num_exits = per_instance_logits.first().map_or(0, Vec::len);
    (0..num_exits)
        .map(|e| {
            let correct = per_instance_logits
                .iter()
                .zip(golds)
                .filter(|(z, &g)| argmax(&z[e]) == g)
                .count();
            correct as f64 / golds.len() as f64
        })
        .collect()
}

pub fn oracle_eval(
    dataset: &[Example],
    model: &MultiExitModel,
    options: SweepOptions,
) -> Result<TradeoffPoint> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("oracle over an empty dataset".into()));
    }
    let logits = collect_exit_logits(dataset, model, options.exec)?;
    let golds: Vec<usize> = dataset.iter().map(|e| e.gold).collect();
    let assigned: Vec<(usize, usize)> = logits
        .iter()
        .zip(&golds)
        .map(|(zs, &g)| {
            let preds: Vec<usize> = zs.iter().map(|z| argmax(z)).collect();
            let correct: Vec<bool> = preds.iter().map(|&p| p == g).collect();
            let e = oracle_assign(&correct)?;
            Ok((e, preds[e]))
        })
        .collect::<Result<_>>()?;
    let last = model.num_exits() - 1;
    let mut point = summarize(
        Threshold::Oracle,
        assigned.iter().copied(),
        &golds,
        |i, e| cost_units(&model.config, model.num_classes, e, dataset[i].tokens.len()),
        |i| cost_units(&model.config, model.num_classes, last, dataset[i].tokens.len()),
        model.num_exits(),
    );
    let times = timed_passes(options.repeats.max(1), || {
        for (ex, &(e, _)) in dataset.iter().zip(&assigned) {
            let stack = model.encode(&ex.tokens, model.exits[e].attach_block)?;
            for head in &model.exits[..=e] {
                model.exit_logits(&stack, head)?;
            }
        }
        Ok(())
    })?;
    (point.runtime_mean, point.runtime_std) = mean_std(&times);
    point.runtimes = times;
    Ok(point)
}
