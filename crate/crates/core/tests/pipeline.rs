use early_exit::calibration::Calibration;
use early_exit::checkpoint;
use early_exit::data::{gen_synthetic, SplitRatios};
use early_exit::encoder::EncoderConfig;
use early_exit::routing::collect_exit_logits;
use early_exit::training::{final_exit_accuracy, train, transpose, ModelSpec, TrialConfig};
use early_exit::Execution;

#[test]
fn easy_only_data_is_learned_in_five_epochs() {
    let data = gen_synthetic(500, 1.0, 31).unwrap();
    let splits = data.partition(SplitRatios::default(), 31).unwrap();
    let spec = ModelSpec { config: EncoderConfig::default(), labels: data.labels.clone() };
    let trial = TrialConfig { epochs: 5, seed: 2, ..Default::default() };
    let (model, report) = train(&spec, &splits.train.examples(), &splits.val.examples(), &trial).unwrap();
    assert_eq!(report.epoch_losses.len(), 5);
    let acc = final_exit_accuracy(&model, &splits.val.examples(), Execution::default()).unwrap();
    assert!(acc >= 0.95, "final-exit val accuracy {acc}");

    let logits = collect_exit_logits(&splits.val.examples(), &model, Execution::default()).unwrap();
    let cal = Calibration::fit(&transpose(&logits), &splits.val.golds(), Execution::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &model, Some(&cal)).unwrap();
    let (back, back_cal) = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back_cal.unwrap(), cal);
    let again = collect_exit_logits(&splits.val.examples(), &back, Execution::default()).unwrap();
    assert_eq!(again, logits);
}

#[test]
fn sequential_and_parallel_training_agree() {
    let data = gen_synthetic(40, 0.5, 6).unwrap();
    let splits = data.partition(SplitRatios::default(), 6).unwrap();
    let config = EncoderConfig { d_model: 16, n_blocks: 2, n_heads: 2, ffn_dim: 32, exit_blocks: vec![1, 2], ..Default::default() };
    let spec = ModelSpec { config, labels: data.labels.clone() };
    let run = |exec| {
        let trial = TrialConfig { epochs: 2, seed: 8, batch_size: 10, exec, ..Default::default() };
        train(&spec, &splits.train.examples(), &splits.val.examples(), &trial).unwrap().0
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
