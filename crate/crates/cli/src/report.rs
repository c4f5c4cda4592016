//! CSV tables written and read by the command-line tool.

use std::fmt::Write as _;

use early_exit::routing::{Threshold, TradeoffPoint};

use crate::svg::PlotPoint;

pub fn sweep_header(num_exits: usize) -> String {
    let mut h = String::from("threshold,accuracy,mean_cost_fraction,runtime_mean_s,runtime_std_s");
    for e in 0..num_exits {
        let _ = write!(h, ",exit_hist_{e}");
    }
    h
}

pub fn sweep_csv(points: &[TradeoffPoint], num_exits: usize) -> String {
    let mut s = sweep_header(num_exits);
    s.push('\n');
    for p in points {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            p.threshold, p.accuracy, p.mean_cost_fraction, p.runtime_mean, p.runtime_std
        );
        for h in &p.exit_histogram {
            let _ = write!(s, ",{h}");
        }
        s.push('\n');
    }
    s
}

/// Reads the threshold, accuracy and cost columns of a sweep table.
pub fn read_sweep_csv(text: &str) -> Result<Vec<PlotPoint>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty sweep table")?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| cols.iter().position(|c| *c == name).ok_or(format!("sweep table lacks column {name}"));
    let (ti, ai, ci) = (find("threshold")?, find("accuracy")?, find("mean_cost_fraction")?);
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |k: usize| -> Result<f64, String> {
                f.get(k)
                    .ok_or(format!("row {}: missing column", i + 2))?
                    .parse()
                    .map_err(|e| format!("row {}: {e}", i + 2))
            };
            let label = f.get(ti).ok_or(format!("row {}: missing threshold", i + 2))?.to_string();
            Ok(PlotPoint { oracle: label == "oracle", label, cost: num(ci)?, accuracy: num(ai)? })
        })
        .collect()
}

pub fn is_oracle(p: &TradeoffPoint) -> bool {
    p.threshold == Threshold::Oracle
}
