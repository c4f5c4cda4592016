//! Trains the default multi-exit model on the synthetic easy/hard task and
//! prints its speed/accuracy tradeoff.

use std::time::Instant;

use early_exit::calibration::Calibration;
use early_exit::data::{gen_synthetic, SplitRatios};
use early_exit::encoder::EncoderConfig;
use early_exit::routing::{collect_exit_logits, default_thresholds, exit_accuracies, sweep, SweepOptions};
use early_exit::training::{train, transpose, ModelSpec, TrialConfig};
use early_exit::Execution;

fn main() -> early_exit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let data = gen_synthetic(2000, 0.5, 17)?;
    let splits = data.partition(SplitRatios::default(), 17)?;
    let spec = ModelSpec { config: EncoderConfig::default(), labels: data.labels.clone() };
    let trial = TrialConfig { epochs, learning_rate: lr, seed: 1, ..Default::default() };

    let t = Instant::now();
    let (model, report) = train(&spec, &splits.train.examples(), &splits.val.examples(), &trial)?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    println!("{}", report.to_csv());

    let val = splits.val.examples();
    let logits = collect_exit_logits(&val, &model, Execution::default())?;
    let calibration = Calibration::fit(&transpose(&logits), &splits.val.golds(), Execution::default())?;
    println!("temperatures {:?}", calibration.temperatures());

    let test = splits.test.examples();
    let tl = collect_exit_logits(&test, &model, Execution::default())?;
    println!("exit accuracies {:?}", exit_accuracies(&tl, &splits.test.golds()));
    let points = sweep(&test, &model, &calibration, &default_thresholds(), SweepOptions { repeats: 1, ..Default::default() })?;
    for p in points {
        println!(
            "{:>5} acc={:.3} cost={:.3} t={:.3}s hist={:?}",
            p.threshold.to_string(),
            p.accuracy,
            p.mean_cost_fraction,
            p.runtime_mean,
            p.exit_histogram
        );
    }
    Ok(())
}
