//! Flat `key = value` settings file with command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use early_exit::encoder::EncoderConfig;
use early_exit::routing::default_thresholds;
use early_exit::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub encoder: EncoderConfig,
    /// Upper bound on the vocabulary built from training text.
    pub max_vocab: usize,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub dropout: f64,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    pub repeats: usize,
    pub n_per_class: usize,
    pub easy_fraction: f64,
    pub tau: f64,
    pub baseline: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        Settings {
            encoder: EncoderConfig::default(),
            max_vocab: 5000,
            learning_rates: train.learning_rates,
            epochs: train.epochs,
            batch_size: train.batch_size,
            trials: train.trials,
            dropout: train.dropout,
            seed: 0,
            thresholds: default_thresholds(),
            repeats: 5,
            n_per_class: 2000,
            easy_fraction: 0.5,
            tau: 0.9,
            baseline: false,
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| format!("bad list entry {t:?}: {e}")))
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("bad value for {key}: {v:?} ({e})"))
}

impl Settings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "vocab_size" => self.encoder.vocab_size = parse(key, v)?,
            "d_model" => self.encoder.d_model = parse(key, v)?,
            "n_blocks" => self.encoder.n_blocks = parse(key, v)?,
            "n_heads" => self.encoder.n_heads = parse(key, v)?,
            "ffn_dim" => self.encoder.ffn_dim = parse(key, v)?,
            "max_seq_len" => self.encoder.max_seq_len = parse(key, v)?,
            "exit_blocks" => self.encoder.exit_blocks = parse_list(v)?,
            "max_vocab" => self.max_vocab = parse(key, v)?,
            "lr_grid" | "learning_rates" => self.learning_rates = parse_list(v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "thresholds" => self.thresholds = parse_list(v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "n_per_class" => self.n_per_class = parse(key, v)?,
            "easy_fraction" => self.easy_fraction = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "baseline" => self.baseline = parse(key, v)?,
            _ => return Err(format!("unknown setting {key:?}")),
        }
        Ok(())
    }

    pub fn read_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (key, value) in parse_pairs(&text).map_err(|e| format!("{}: {e}", path.display()))? {
            self.set(&key, &value).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rates: self.learning_rates.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            trials: self.trials,
            dropout: self.dropout,
            search_seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
