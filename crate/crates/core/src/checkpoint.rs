//! Text checkpoint container.
//!
//! ```text
//! early-exit-checkpoint 1
//! config <EncoderConfig as one JSON line>
//! labels <JSON array of label names>
//! tensor <name> <dim>,<dim>,...
//! <space-separated values>
//! ...
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a load returns
//! bit-identical parameters. Per-exit temperatures appear as scalar tensors
//! named `calibration.<exit>.T`.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::calibration::Calibration;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::multi_exit::MultiExitModel;
use crate::tensor::Tensor;

const MAGIC: &str = "early-exit-checkpoint 1";

pub fn to_string(model: &MultiExitModel, calibration: Option<&Calibration>) -> Result<String> {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("config {}\n", serde_json::to_string(&model.config)?));
    s.push_str(&format!("labels {}\n", serde_json::to_string(&model.labels)?));
    let mut push = |name: &str, t: &Tensor| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("tensor {name} {}\n", dims.join(",")));
        let vals: Vec<String> = t.values().iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    };
    for (name, t) in model.store.iter() {
        push(name, t);
    }
    if let Some(c) = calibration {
        for (i, t) in c.temperatures().into_iter().enumerate() {
            push(&format!("calibration.{i}.T"), &Tensor::new(vec![1], vec![t])?);
        }
    }
    Ok(s)
}

pub fn save(path: &Path, model: &MultiExitModel, calibration: Option<&Calibration>) -> Result<()> {
    let text = to_string(model, calibration)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn from_str(text: &str, source: &Path) -> Result<(MultiExitModel, Option<Calibration>)> {
    let err = |line: usize, msg: String| Error::Parse { path: source.display().to_string(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(err(1, format!("expected header {MAGIC:?}"))),
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (n, l) = lines.next().ok_or_else(|| err(0, format!("missing {key} line")))?;
        let rest = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| err(n, format!("expected {key} line")))?;
        Ok((n, rest.to_string()))
    };
    let (n, cfg) = field("config")?;
    let config: EncoderConfig = serde_json::from_str(&cfg).map_err(|e| err(n, e.to_string()))?;
    let (n, lab) = field("labels")?;
    let labels: Vec<String> = serde_json::from_str(&lab).map_err(|e| err(n, e.to_string()))?;

    let mut store = ParamStore::new();
    let mut temps: Vec<Option<f64>> = Vec::new();
    while let Some((n, head)) = lines.next() {
        if head.is_empty() {
            continue;
        }
        let parts: Vec<&str> = head.split(' ').collect();
        if parts.len() != 3 || parts[0] != "tensor" {
            return Err(err(n, "expected `tensor <name> <dims>`".into()));
        }
        let shape = parts[2]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(n, format!("bad shape: {e}")))?;
        let (vn, body) = lines.next().ok_or_else(|| err(n + 1, "missing values line".into()))?;
        let values = body
            .split_ascii_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(vn, format!("bad value: {e}")))?;
        let tensor = Tensor::new(shape, values).map_err(|e| err(vn, e.to_string()))?;
        if let Some(rest) = parts[1].strip_prefix("calibration.") {
            let idx = rest
                .strip_suffix(".T")
                .and_then(|i| i.parse::<usize>().ok())
                .ok_or_else(|| err(n, format!("bad calibration entry {}", parts[1])))?;
            if temps.len() <= idx {
                temps.resize(idx + 1, None);
            }
            temps[idx] = Some(tensor.values()[0]);
        } else {
            store.insert(parts[1], tensor).map_err(|e| err(n, e.to_string()))?;
        }
    }
    let model = MultiExitModel::from_store(config, labels, store)?;
    let calibration = if temps.is_empty() {
        None
    } else {
        let t: Option<Vec<f64>> = temps.into_iter().collect();
        let t = t.ok_or_else(|| err(0, "calibration entries are not contiguous".into()))?;
        if t.len() != model.num_exits() {
            return Err(err(0, format!("{} temperatures for {} exits", t.len(), model.num_exits())));
        }
        Some(Calibration::from_temperatures(&t)?)
    };
    Ok((model, calibration))
}

pub fn load(path: &Path) -> Result<(MultiExitModel, Option<Calibration>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MultiExitModel {
        let config = EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_seq_len: 8,
            exit_blocks: vec![1, 2],
        };
        MultiExitModel::new(config, vec!["a".into(), "b".into()], 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let c = Calibration::from_temperatures(&[0.7, 1.3]).unwrap();
        let text = to_string(&m, Some(&c)).unwrap();
        let (back, cal) = from_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(cal.unwrap().temperatures(), vec![0.7, 1.3]);
        assert_eq!(to_string(&back, Some(&c)).unwrap(), text);
        assert!(text.contains("tensor block.1.ffn.w1 8,16\n"));
        assert!(text.contains("tensor calibration.1.T 1\n"));
    }

    #[test]
    fn without_calibration() {
        let m = small();
        let (_, cal) = from_str(&to_string(&m, None).unwrap(), Path::new("mem")).unwrap();
        assert!(cal.is_none());
    }

    #[test]
    fn rejects_truncated() {
        let text = to_string(&small(), None).unwrap();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(from_str(&cut, Path::new("mem")).is_err());
        assert!(matches!(from_str("nope\n", Path::new("x")), Err(Error::Parse { line: 1, .. })));
    }
}
