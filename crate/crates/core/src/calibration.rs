//! Per-exit temperature scaling fitted on held-out logits.
//!
//! Temperatures only shape the confidences used to decide whether to exit;
//! predictions always come from the raw logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const T_MIN: f64 = 0.01;
pub const T_MAX: f64 = 100.0;
const MAX_ITERS: usize = 200;
/// Bracket width on ln T at which the search stops.
const BRACKET_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedExit {
    pub exit_index: usize,
    pub temperature: f64,
}

/// One temperature per exit, in exit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub exits: Vec<CalibratedExit>,
}

impl Calibration {
    pub fn identity(num_exits: usize) -> Self {
        Calibration {
            exits: (0..num_exits)
                .map(|exit_index| CalibratedExit { exit_index, temperature: 1.0 })
                .collect(),
        }
    }

    pub fn from_temperatures(temps: &[f64]) -> Result<Self> {
        let exits = temps
            .iter()
            .enumerate()
            .map(|(exit_index, &temperature)| {
                if !(T_MIN..=T_MAX).contains(&temperature) {
                    return Err(Error::InvalidArgument(format!(
                        "temperature {temperature} outside [{T_MIN}, {T_MAX}]"
                    )));
                }
                Ok(CalibratedExit { exit_index, temperature })
            })
            .collect::<Result<_>>()?;
        Ok(Calibration { exits })
    }

    /// Fits every exit independently; `per_exit[e][i]` are the logits of
    /// instance i at exit e.
    pub fn fit(per_exit: &[Vec<Vec<f64>>], golds: &[usize], exec: Execution) -> Result<Self> {
        let fitted = par::map_range(exec, per_exit.len(), |e| {
            fit_temperature(e, &per_exit[e], golds)
        });
        Ok(Calibration { exits: fitted.into_iter().collect::<Result<_>>()? })
    }

    pub fn len(&self) -> usize {
        self.exits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exits.is_empty()
    }

    pub fn temperature(&self, exit: usize) -> f64 {
        self.exits[exit].temperature
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.exits.iter().map(|c| c.temperature).collect()
    }
}

/// Mean negative log-likelihood of the gold class under softmax(z / T).
pub fn nll(logits: &[Vec<f64>], golds: &[usize], temperature: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("nll over an empty set".into()));
    }
    if logits.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            golds.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    let mut total = 0.0;
    for (z, &gold) in logits.iter().zip(golds) {
        if gold >= z.len() {
            return Err(Error::InvalidArgument(format!("gold {gold} with {} classes", z.len())));
        }
        let top = argmax(z);
        let max = z[top];
        // ln(1 + Σ_{i≠top} e^{(z_i - max)/T}) keeps tiny tail mass visible
        let tail: f64 = z
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, v)| ((v - max) / temperature).exp())
            .sum();
        total += tail.ln_1p() - (z[gold] - max) / temperature;
    }
    Ok(total / logits.len() as f64)
}

/// Golden-section search on ln T over [T_MIN, T_MAX].
///
/// The endpoints and T = 1 are always candidates, so the result never scores
/// worse than the uncalibrated model. A flat objective (every row constant)
/// yields T = 1.
pub fn fit_temperature(exit_index: usize, logits: &[Vec<f64>], golds: &[usize]) -> Result<CalibratedExit> {
    let f = |ln_t: f64| nll(logits, golds, ln_t.exp());
    let at_one = f(0.0)?;
    let flat = logits
        .iter()
        .all(|z| z.iter().all(|&v| v == z[0]));
    if flat {
        return Ok(CalibratedExit { exit_index, temperature: 1.0 });
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..MAX_ITERS {
        if b - a < BRACKET_TOL {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }

    let mid = 0.5 * (a + b);
    let mut best = (1.0, at_one);
    for t in [mid.exp(), T_MIN, T_MAX] {
        let v = nll(logits, golds, t)?;
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(CalibratedExit { exit_index, temperature: best.0.clamp(T_MIN, T_MAX) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub probabilities: Vec<f64>,
    pub confidence: f64,
    pub prediction: usize,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Probabilities under softmax(z / T); prediction is taken from the raw
/// logits, confidence is the calibrated probability of that prediction.
pub fn calibrated_confidence(z: &[f64], temperature: f64) -> Calibrated {
    let prediction = argmax(z);
    let mut probabilities = z.to_vec();
    crate::tensor::softmax_in_place(&mut probabilities, temperature);
    Calibrated { confidence: probabilities[prediction], probabilities, prediction }
}
