//! Difficulty analyses over per-instance, per-exit predictions: rank
//! correlations of confidence against length and metadata, agreement across
//! exits, and per-label confidence and F1 profiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::calibration::{calibrated_confidence, Calibration};
use crate::data::Dataset;
use crate::error::{Error, Result, StatsError};
use crate::multi_exit::MultiExitModel;
use crate::par::Execution;
use crate::routing::collect_exit_logits;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRecord {
    pub gold: usize,
    pub predictions: Vec<usize>,
    /// Calibrated confidence of each exit's prediction.
    pub confidences: Vec<f64>,
    pub length: usize,
    pub meta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisInput {
    pub records: Vec<AnalysisRecord>,
    pub num_exits: usize,
    pub labels: Vec<String>,
}

impl AnalysisInput {
    /// Builds records from raw logits `[instance][exit]`.
    pub fn from_logits(
        logits: &[Vec<Vec<f64>>],
        golds: &[usize],
        lengths: &[usize],
        metas: &[BTreeMap<String, f64>],
        calibration: &Calibration,
        labels: Vec<String>,
    ) -> Result<Self> {
        let num_exits = calibration.len();
        let records = logits
            .iter()
            .enumerate()
            .map(|(i, zs)| {
                if zs.len() != num_exits {
                    return Err(Error::Shape(format!(
                        "instance {i} has {} exits, calibration {num_exits}",
                        zs.len()
                    )));
                }
                let cal: Vec<_> = zs
                    .iter()
                    .enumerate()
                    .map(|(e, z)| calibrated_confidence(z, calibration.temperature(e)))
                    .collect();
                Ok(AnalysisRecord {
                    gold: golds[i],
                    predictions: cal.iter().map(|c| c.prediction).collect(),
                    confidences: cal.iter().map(|c| c.confidence).collect(),
                    length: lengths[i],
                    meta: metas[i].clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(AnalysisInput { records, num_exits, labels })
    }

    pub fn from_model(
        model: &MultiExitModel,
        dataset: &Dataset,
        calibration: &Calibration,
        exec: Execution,
    ) -> Result<Self> {
        let logits = collect_exit_logits(&dataset.examples(), model, exec)?;
        let lengths: Vec<usize> = dataset.instances.iter().map(|i| i.tokens.len()).collect();
        let metas: Vec<_> = dataset.instances.iter().map(|i| i.meta.clone()).collect();
        Self::from_logits(&logits, &dataset.golds(), &lengths, &metas, calibration, model.labels.clone())
    }

    fn check_exit(&self, exit: usize) -> Result<()> {
        if exit >= self.num_exits {
            return Err(Error::InvalidArgument(format!(
                "exit {exit} out of range for {} exits",
                self.num_exits
            )));
        }
        Ok(())
    }

    fn confidences(&self, exit: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.confidences[exit]).collect()
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew(x.len()));
    }
    // ranks are symmetric in argument order, so ρ(x, y) == ρ(y, x) bitwise
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let a = pearson(&rx, &ry)?;
    let b = pearson(&ry, &rx)?;
    Ok(if a == b { a } else { 0.5 * (a + b) })
}

/// ρ between exit confidence and token length.
pub fn length_correlation(input: &AnalysisInput, exit: usize) -> Result<f64> {
    input.check_exit(exit)?;
    let lengths: Vec<f64> = input.records.iter().map(|r| r.length as f64).collect();
    Ok(spearman(&input.confidences(exit), &lengths)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    /// Whether all exits predicted the same label.
    pub consistent: Vec<bool>,
    /// ρ between exit-0 confidence and consistency encoded true = 1, false = 0.
    pub correlation: Result<f64, StatsError>,
}

pub fn consistency(input: &AnalysisInput) -> Result<Consistency> {
    if input.num_exits < 2 {
        return Err(Error::InvalidArgument("consistency needs at least two exits".into()));
    }
    let consistent: Vec<bool> = input
        .records
        .iter()
        .map(|r| r.predictions.iter().all(|&p| p == r.predictions[0]))
        .collect();
    let coded: Vec<f64> = consistent.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let correlation = spearman(&input.confidences(0), &coded);
    Ok(Consistency { consistent, correlation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfidence {
    pub label: usize,
    pub count: usize,
    pub mean_confidence: f64,
    /// Share of predictions with confidence ≥ τ.
    pub high_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfidenceReport {
    pub labels: Vec<LabelConfidence>,
    /// Labels never predicted at this exit.
    pub omitted: Vec<usize>,
}

/// Groups by predicted label.
pub fn per_label_confidence(input: &AnalysisInput, exit: usize, tau: f64) -> Result<LabelConfidenceReport> {
    input.check_exit(exit)?;
    let n_labels = input.labels.len();
    let mut sum = vec![0.0; n_labels];
    let mut high = vec![0usize; n_labels];
    let mut count = vec![0usize; n_labels];
    for r in &input.records {
        let p = r.predictions[exit];
        let c = r.confidences[exit];
        count[p] += 1;
        sum[p] += c;
        if c >= tau {
            high[p] += 1;
        }
    }
    let mut report = LabelConfidenceReport { labels: Vec::new(), omitted: Vec::new() };
    for l in 0..n_labels {
        if count[l] == 0 {
            report.omitted.push(l);
            continue;
        }
        report.labels.push(LabelConfidence {
            label: l,
            count: count[l],
            mean_confidence: sum[l] / count[l] as f64,
            high_fraction: high[l] as f64 / count[l] as f64,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelF1 {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// One-vs-rest F1 with each gold label as the positive class.
pub fn per_label_f1(input: &AnalysisInput, exit: usize) -> Result<Vec<LabelF1>> {
    input.check_exit(exit)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..input.labels.len())
        .map(|l| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for r in &input.records {
                match (r.predictions[exit] == l, r.gold == l) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelF1 { label: l, precision, recall, f1, tp, fp, fn_ }
        })
        .collect())
}

/// Micro-averaged F1 from per-label counts.
pub fn micro_f1(scores: &[LabelF1]) -> f64 {
    let tp: usize = scores.iter().map(|s| s.tp).sum();
    let fp: usize = scores.iter().map(|s| s.fp).sum();
    let fn_: usize = scores.iter().map(|s| s.fn_).sum();
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaCorrelation {
    pub rho: f64,
    pub used: usize,
    pub skipped: usize,
}

/// ρ between exit confidence and a metadata field; records lacking the field
/// are skipped and counted.
pub fn metadata_correlation(input: &AnalysisInput, exit: usize, field: &str) -> Result<MetaCorrelation> {
    input.check_exit(exit)?;
    let (conf, vals): (Vec<f64>, Vec<f64>) = input
        .records
        .iter()
        .filter_map(|r| r.meta.get(field).map(|&v| (r.confidences[exit], v)))
        .unzip();
    if conf.is_empty() {
        return Err(Error::InvalidArgument(format!("metadata field {field:?} absent on every record")));
    }
    let rho = spearman(&conf, &vals)?;
    Ok(MetaCorrelation { rho, used: conf.len(), skipped: input.records.len() - conf.len() })
}

fn fmt_rho(r: &Result<f64, StatsError>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => format!("undefined ({e})"),
    }
}

/// CSV blocks, each introduced by a `# section:` line.
pub fn report(input: &AnalysisInput, tau: f64) -> String {
    let mut s = String::new();
    s.push_str("# section: length_correlation\nexit,spearman_rho\n");
    for e in 0..input.num_exits {
        let _ = writeln!(s, "{e},{}", fmt_rho(&length_correlation(input, e).map_err(to_stats)));
    }

    s.push_str("# section: consistency (consistent=1, inconsistent=0; rho against exit-0 confidence)\n");
    s.push_str("consistent_fraction,spearman_rho\n");
    if let Ok(c) = consistency(input) {
        let frac = c.consistent.iter().filter(|&&b| b).count() as f64 / c.consistent.len().max(1) as f64;
        let _ = writeln!(s, "{frac},{}", fmt_rho(&c.correlation));
    }

    let mut fields: Vec<&String> = input.records.iter().flat_map(|r| r.meta.keys()).collect();
    fields.sort();
    fields.dedup();
    s.push_str("# section: metadata_correlation\nexit,field,spearman_rho,used,skipped\n");
    for e in 0..input.num_exits {
        for f in &fields {
            match metadata_correlation(input, e, f) {
                Ok(m) => {
                    let _ = writeln!(s, "{e},{f},{},{},{}", m.rho, m.used, m.skipped);
                }
                Err(err) => {
                    let _ = writeln!(s, "{e},{f},undefined ({err}),,");
                }
            }
        }
    }

    let _ = writeln!(s, "# section: per_label_confidence (grouped by predicted label, tau={tau})");
    s.push_str("exit,label,count,mean_confidence,high_confidence_fraction\n");
    for e in 0..input.num_exits {
        if let Ok(r) = per_label_confidence(input, e, tau) {
            for l in &r.labels {
                let _ = writeln!(
                    s,
                    "{e},{},{},{},{}",
                    input.labels[l.label], l.count, l.mean_confidence, l.high_fraction
                );
            }
            for &l in &r.omitted {
                let _ = writeln!(s, "{e},{},0,,", input.labels[l]);
            }
        }
    }

    s.push_str("# section: per_label_f1 (gold label as positive class)\nexit,label,precision,recall,f1\n");
    for e in 0..input.num_exits {
        if let Ok(scores) = per_label_f1(input, e) {
            for l in scores {
                let _ = writeln!(s, "{e},{},{},{},{}", input.labels[l.label], l.precision, l.recall, l.f1);
            }
        }
    }
    s
}

fn to_stats(e: Error) -> StatsError {
    match e {
        Error::Undefined(s) => s,
        _ => StatsError::TooFew(0),
    }
}
