//! Per-exit logit traces: a header line followed by one JSON record per
//! instance. Routing, calibration and analysis run on traces exactly as on a
//! live model, so logits exported from any layered classifier can be used.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisInput;
use crate::calibration::{argmax, Calibration};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::multi_exit::MultiExitModel;
use crate::par::{self, Execution};
use crate::routing::{cost_units, oracle_assign, route_logits, summarize, RoutingPolicy, Threshold, TradeoffPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub num_exits: usize,
    pub num_classes: usize,
    pub labels: Vec<String>,
    pub producer: String,
    /// Cost of answering at each exit; uniform `(e + 1) / num_exits` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_costs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub gold: usize,
    /// Raw logits, one vector per exit in attach order.
    pub exits: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.num_exits == 0 || h.num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "trace header needs at least one exit and two classes, got {} and {}",
                h.num_exits, h.num_classes
            )));
        }
        if h.labels.len() != h.num_classes {
            return Err(Error::InvalidInput(format!(
                "{} label names for {} classes",
                h.labels.len(),
                h.num_classes
            )));
        }
        if let Some(c) = &h.exit_costs {
            if c.len() != h.num_exits {
                return Err(Error::InvalidInput(format!("{} exit costs for {} exits", c.len(), h.num_exits)));
            }
        }
        for r in &self.records {
            if r.gold >= h.num_classes {
                return Err(Error::InvalidInput(format!("record {}: gold {} out of range", r.id, r.gold)));
            }
            if r.exits.len() != h.num_exits || r.exits.iter().any(|z| z.len() != h.num_classes) {
                return Err(Error::Shape(format!(
                    "record {} does not have {} exits of width {}",
                    r.id, h.num_exits, h.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str, source: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: source.display().to_string(), line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| err(1, "empty trace file".into()))?;
        let header: TraceHeader = serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
            .collect::<Result<Vec<TraceRecord>>>()?;
        let trace = TraceFile { header, records };
        trace.validate()?;
        Ok(trace)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }

    pub fn golds(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.gold).collect()
    }

    /// Logits regrouped as `[exit][instance]`.
    pub fn per_exit_logits(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.header.num_exits)
            .map(|e| self.records.iter().map(|r| r.exits[e].clone()).collect())
            .collect()
    }

    fn exit_cost(&self, e: usize) -> f64 {
        match &self.header.exit_costs {
            Some(c) => c[e],
            None => (e + 1) as f64 / self.header.num_exits as f64,
        }
    }
}

/// Raw logits of every exit for every instance of `dataset`. Each record's
/// meta carries the instance metadata plus its token `length`.
pub fn trace_model(model: &MultiExitModel, dataset: &Dataset, exec: Execution) -> Result<TraceFile> {
    let records = par::map(exec, &dataset.instances, |inst| {
        let exits = model.all_exit_logits(&inst.tokens)?;
        let mut meta = inst.meta.clone();
        meta.insert("length".into(), inst.tokens.len() as f64);
        Ok(TraceRecord { id: inst.id.clone(), gold: inst.label, exits, meta })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mean_len = if dataset.is_empty() {
        1
    } else {
        let total: usize = dataset.instances.iter().map(|i| i.tokens.len()).sum();
        (total as f64 / dataset.len() as f64).round().max(1.0) as usize
    };
    let exit_costs = (0..model.num_exits())
        .map(|e| cost_units(&model.config, model.num_classes, e, mean_len))
        .collect();
    Ok(TraceFile {
        header: TraceHeader {
            num_exits: model.num_exits(),
            num_classes: model.num_classes,
            labels: model.labels.clone(),
            producer: format!(
                "early-exit {} d_model={} n_blocks={} exit_blocks={:?}",
                env!("CARGO_PKG_VERSION"),
                model.config.d_model,
                model.config.n_blocks,
                model.config.exit_blocks
            ),
            exit_costs: Some(exit_costs),
        },
        records,
    })
}

pub fn dump_traces(model: &MultiExitModel, dataset: &Dataset, path: &Path, exec: Execution) -> Result<TraceFile> {
    let trace = trace_model(model, dataset, exec)?;
    trace.write(path)?;
    Ok(trace)
}

/// Temperatures fitted on a dev trace.
pub fn fit_calibration(dev: &TraceFile, exec: Execution) -> Result<Calibration> {
    Calibration::fit(&dev.per_exit_logits(), &dev.golds(), exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRoute {
    pub id: String,
    pub exit_index: usize,
    pub prediction: usize,
    pub confidence: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `routes[t][i]`: record `i` under threshold `t`.
    pub routes: Vec<Vec<SimulatedRoute>>,
    pub points: Vec<TradeoffPoint>,
}

pub fn simulate(trace: &TraceFile, calibration: &Calibration, thresholds: &[f64], exec: Execution) -> Result<Simulation> {
    trace.validate()?;
    if calibration.len() != trace.header.num_exits {
        return Err(Error::Shape(format!(
            "calibration has {} exits, trace has {}",
            calibration.len(),
            trace.header.num_exits
        )));
    }
    if trace.records.is_empty() {
        return Err(Error::InvalidArgument("simulate over an empty trace".into()));
    }
    let golds = trace.golds();
    let last = trace.header.num_exits - 1;
    let mut routes = Vec::with_capacity(thresholds.len());
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let policy = RoutingPolicy::new(t)?;
        let rs = par::map(exec, &trace.records, |r| {
            let (exit_index, prediction, confidence) = route_logits(&r.exits, calibration, policy)?;
            Ok(SimulatedRoute { id: r.id.clone(), exit_index, prediction, confidence, cost: trace.exit_cost(exit_index) })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        points.push(summarize(
            Threshold::Value(t),
            rs.iter().map(|r| (r.exit_index, r.prediction)),
            &golds,
            |_, e| trace.exit_cost(e),
            |_| trace.exit_cost(last),
            trace.header.num_exits,
        ));
        routes.push(rs);
    }
    Ok(Simulation { routes, points })
}

/// Oracle-routed accuracy and cost of a trace.
pub fn oracle_point(trace: &TraceFile) -> Result<TradeoffPoint> {
    trace.validate()?;
    let golds = trace.golds();
    let assigned = trace
        .records
        .iter()
        .map(|r| {
            let preds: Vec<usize> = r.exits.iter().map(|z| argmax(z)).collect();
            let correct: Vec<bool> = preds.iter().map(|&p| p == r.gold).collect();
            let e = oracle_assign(&correct)?;
            Ok((e, preds[e]))
        })
        .collect::<Result<Vec<_>>>()?;
    let last = trace.header.num_exits - 1;
    Ok(summarize(
        Threshold::Oracle,
        assigned,
        &golds,
        |_, e| trace.exit_cost(e),
        |_| trace.exit_cost(last),
        trace.header.num_exits,
    ))
}

/// Analysis records from a trace; length is read from `meta.length` (0 when absent).
pub fn analysis_input(trace: &TraceFile, calibration: &Calibration) -> Result<AnalysisInput> {
    trace.validate()?;
    let logits: Vec<Vec<Vec<f64>>> = trace.records.iter().map(|r| r.exits.clone()).collect();
    let lengths: Vec<usize> =
        trace.records.iter().map(|r| r.meta.get("length").map_or(0, |&l| l as usize)).collect();
    let metas: Vec<_> = trace.records.iter().map(|r| r.meta.clone()).collect();
    AnalysisInput::from_logits(&logits, &trace.golds(), &lengths, &metas, calibration, trace.header.labels.clone())
}
