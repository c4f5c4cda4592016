//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use early_exit::analysis::spearman;
use early_exit::calibration::{argmax, calibrated_confidence, nll, Calibration};
use early_exit::data::{gen_synthetic, SplitRatios, Splits};
use early_exit::encoder::EncoderConfig;
use early_exit::gradcheck::{finite_diff_check, Selection};
use early_exit::multi_exit::{model_param_count, param_overhead, Example, MultiExitModel};
use early_exit::routing::{
    collect_exit_logits, default_thresholds, exit_accuracies, mean_std, oracle_eval, route, route_all, route_logits,
    sweep, RoutingPolicy, SweepOptions, TradeoffPoint,
};
use early_exit::tensor::Tensor;
use early_exit::traces::{dump_traces, simulate, TraceFile};
use early_exit::training::{
    random_search, select_baseline, select_multi_exit, train, transpose, ModelSpec, TrainConfig, TrialConfig,
};
use early_exit::{Execution, StatsError};

type Check = early_exit::Result<(bool, String)>;

struct Trained {
    model: MultiExitModel,
    calibration: Calibration,
    splits: Splits,
    train_secs: f64,
}

fn reference_run() -> early_exit::Result<Trained> {
    let data = gen_synthetic(2000, 0.5, 17)?;
    let splits = data.partition(SplitRatios::default(), 17)?;
    let spec = ModelSpec { config: EncoderConfig::default(), labels: data.labels.clone() };
    let trial = TrialConfig { learning_rate: 3e-3, epochs: 12, seed: 1, ..Default::default() };
    let t = Instant::now();
    let (model, _) = train(&spec, &splits.train.examples(), &splits.val.examples(), &trial)?;
    let logits = collect_exit_logits(&splits.val.examples(), &model, Execution::default())?;
    let calibration = Calibration::fit(&transpose(&logits), &splits.val.golds(), Execution::default())?;
    Ok(Trained { model, calibration, splits, train_secs: t.elapsed().as_secs_f64() })
}

fn gradient_fidelity() -> Check {
    let config = EncoderConfig {
        vocab_size: 24,
        d_model: 8,
        n_blocks: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_seq_len: 12,
        exit_blocks: vec![1, 2],
    };
    let model = MultiExitModel::new(config, vec!["a".into(), "b".into(), "c".into()], 11)?;
    let example = Example { tokens: vec![1, 5, 9, 3, 17, 22, 0, 0], gold: 2 };
    let t = Instant::now();
    let r = finite_diff_check(&model, &example, &Selection::All, 1e-4, 1e-4)?;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        r.max_rel_error < 1e-4 && r.failures == 0 && r.checked == model.parameter_count() && secs < 60.0,
        format!("{} coords, max rel error {:.2e}, {secs:.1}s", r.checked, r.max_rel_error),
    ))
}

fn calibration_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    for set in 0..30 {
        let c = 2 + set % 4;
        let scale = [0.1, 1.0, 5.0, 40.0][set % 4];
        let n = 50 + 10 * set;
        let logits: Vec<Vec<f64>> =
            (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).collect();
        let golds: Vec<usize> = logits
            .iter()
            .map(|z| if rng.gen_bool(0.7) { argmax(z) } else { rng.gen_range(0..c) })
            .collect();
        let cal = Calibration::fit(&[logits.clone()], &golds, Execution::Sequential)?;
        worst = worst.max(nll(&logits, &golds, cal.temperature(0))? - nll(&logits, &golds, 1.0)?);
    }
    let mut changed = 0;
    for _ in 0..10_000 {
        let c = rng.gen_range(2..8);
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let t = 10f64.powf(rng.gen_range(-2.0..2.0));
        let cc = calibrated_confidence(&z, t);
        if cc.prediction != argmax(&z) || argmax(&cc.probabilities) != argmax(&z) {
            changed += 1;
        }
    }
    Ok((
        worst <= 1e-9 && changed == 0,
        format!("max NLL(T*) - NLL(1) = {worst:.3e} over 30 sets; {changed}/10000 argmax changes"),
    ))
}

fn endpoint_semantics(tr: &Trained) -> Check {
    let test = tr.splits.test.examples();
    let last = tr.model.num_exits() - 1;
    let lo = route_all(&test, &tr.model, &tr.calibration, RoutingPolicy::new(0.0)?, Execution::default())?;
    let hi = route_all(&test, &tr.model, &tr.calibration, RoutingPolicy::new(1.0)?, Execution::default())?;
    let mut ok = lo.iter().all(|r| r.exit_index == 0) && hi.iter().all(|r| r.exit_index == last);

    // every exit saturated to confidence exactly 1.0
    let mut loud = tr.model.clone();
    for head in loud.exits.clone() {
        *loud.store.get_mut(head.bias) = Tensor::new(vec![2], vec![1e6, -1e6])?;
    }
    let mut saturated = 0;
    for ex in test.iter().take(100) {
        let r0 = route(&ex.tokens, &loud, &tr.calibration, RoutingPolicy::new(0.0)?)?;
        let r1 = route(&ex.tokens, &loud, &tr.calibration, RoutingPolicy::new(1.0)?)?;
        if r1.confidence == 1.0 {
            saturated += 1;
        }
        ok &= r0.exit_index == 0 && r1.exit_index == last && r1.blocks_executed == loud.config.n_blocks;
    }
    for z in [vec![745.0, -745.0], vec![1e300, -1e300], vec![0.0, 0.0], vec![f64::MAX, 0.0]] {
        let logits = vec![z; 4];
        let cal = Calibration::from_temperatures(&[0.01, 1.0, 100.0, 1.0])?;
        ok &= route_logits(&logits, &cal, RoutingPolicy::new(0.0)?)?.0 == 0;
        ok &= route_logits(&logits, &cal, RoutingPolicy::new(1.0)?)?.0 == 3;
    }
    ok &= saturated == 100;
    Ok((ok, format!("{} instances per endpoint; {saturated}/100 saturated at conf 1.0", test.len())))
}

fn monotone_cost(tr: &Trained, points: &[TradeoffPoint]) -> Check {
    let test = tr.splits.test.examples();
    let mut per_threshold = Vec::new();
    for &t in &default_thresholds() {
        per_threshold.push(route_all(&test, &tr.model, &tr.calibration, RoutingPolicy::new(t)?, Execution::default())?);
    }
    let mut violations = 0;
    for i in 0..test.len() {
        for w in per_threshold.windows(2) {
            if w[1][i].exit_index < w[0][i].exit_index {
                violations += 1;
            }
        }
    }
    let costs: Vec<f64> = points.iter().map(|p| p.mean_cost_fraction).collect();
    let cost_ok = costs.windows(2).all(|w| w[0] <= w[1]);
    Ok((
        violations == 0 && cost_ok,
        format!("{violations} exit-index decreases; cost fractions {:?}", costs.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>()),
    ))
}

fn oracle_dominance(tr: &Trained) -> Check {
    let mut ok = true;
    let mut details = Vec::new();
    for ds in [&tr.splits.val, &tr.splits.test] {
        let ex = ds.examples();
        let golds = ds.golds();
        let logits = collect_exit_logits(&ex, &tr.model, Execution::default())?;
        let oracle = oracle_eval(&ex, &tr.model, SweepOptions { repeats: 1, ..Default::default() })?;
        let mut union = BTreeSet::new();
        for (i, zs) in logits.iter().enumerate() {
            if zs.iter().any(|z| argmax(z) == golds[i]) {
                union.insert(i);
            }
        }
        let exact = oracle.accuracy == union.len() as f64 / ex.len() as f64;
        let exits = exit_accuracies(&logits, &golds);
        let points = sweep(&ex, &tr.model, &tr.calibration, &default_thresholds(), SweepOptions { repeats: 1, ..Default::default() })?;
        let dominates = exits.iter().all(|&a| oracle.accuracy >= a) && points.iter().all(|p| oracle.accuracy >= p.accuracy);
        ok &= exact && dominates;
        details.push(format!("{}: oracle {:.4} exits max {:.4}", ds.split.name(), oracle.accuracy, exits.iter().cloned().fold(0.0, f64::max)));
    }
    Ok((ok, details.join("; ")))
}

fn computation_reuse(tr: &Trained) -> Check {
    let test = tr.splits.test.examples();
    let mut mismatch = 0;
    for &t in &default_thresholds() {
        let rs = route_all(&test, &tr.model, &tr.calibration, RoutingPolicy::new(t)?, Execution::default())?;
        mismatch += rs.iter().filter(|r| r.blocks_executed != tr.model.config.exit_blocks[r.exit_index]).count();
    }
    let mut unequal = 0;
    for ex in &test {
        let direct = tr.model.encode(&ex.tokens, 8)?;
        for start in [1, 2, 4] {
            let mut stack = tr.model.encode(&ex.tokens, start)?;
            for next in [2usize, 4, 8].into_iter().filter(|&b| b > start) {
                stack = tr.model.extend(stack, next)?;
            }
            let same = stack.states().iter().zip(direct.states()).all(|(a, b)| {
                a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            if !same || stack.blocks_executed() != 8 {
                unequal += 1;
            }
        }
    }
    Ok((
        mismatch == 0 && unequal == 0,
        format!("{mismatch} counter mismatches over 11 thresholds; {unequal} prefix-extension differences"),
    ))
}

fn premise(tr: &Trained, points: &[TradeoffPoint], sweep_secs: f64) -> Check {
    let test = &tr.splits.test;
    let rs = route_all(&test.examples(), &tr.model, &tr.calibration, RoutingPolicy::new(0.9)?, Execution::default())?;
    let (mut easy, mut hard) = (Vec::new(), Vec::new());
    for (inst, r) in test.instances.iter().zip(&rs) {
        let block = tr.model.config.exit_blocks[r.exit_index] as f64;
        if inst.meta["is_easy"] == 1.0 { easy.push(block) } else { hard.push(block) }
    }
    let (easy_mean, hard_mean) = (mean_std(&easy).0, mean_std(&hard).0);
    let final_acc = points.last().expect("grid ends at 1.0").accuracy;
    let best = points
        .iter()
        .filter(|p| p.mean_cost_fraction <= 0.7 && p.accuracy >= 0.95 * final_acc)
        .min_by(|a, b| a.mean_cost_fraction.total_cmp(&b.mean_cost_fraction));
    let total = tr.train_secs + sweep_secs;
    Ok((
        easy_mean < hard_mean && best.is_some() && total < 900.0,
        format!(
            "mean exit block easy {easy_mean:.3} < hard {hard_mean:.3}; final acc {final_acc:.4}; {}; {total:.0}s",
            best.map_or("no point at <=70% cost".into(), |p| format!(
                "lambda={} acc {:.4} at cost {:.3}",
                p.threshold, p.accuracy, p.mean_cost_fraction
            ))
        ),
    ))
}

fn parameter_overhead() -> Check {
    let config = EncoderConfig::default();
    let o = param_overhead(&config, 2);
    let mut single = config.clone();
    single.exit_blocks = vec![8];
    let count_diff = model_param_count(&config, 2) - model_param_count(&single, 2);
    let labels = vec!["0".to_string(), "1".to_string()];
    let real_diff = MultiExitModel::new(config, labels.clone(), 0)?.parameter_count()
        - MultiExitModel::new(single, labels, 0)?.parameter_count();
    // d·C + C + (b+1) + 1 for each non-final head at blocks 1, 2, 4
    let closed: usize = [1usize, 2, 4].iter().map(|b| 64 * 2 + 2 + (b + 1) + 1).sum();
    Ok((
        o.extra == 403 && closed == 403 && count_diff == 403 && real_diff == 403 && o.fraction < 0.005,
        format!("extra {} of {} ({:.4}%)", o.extra, o.total, 100.0 * o.fraction),
    ))
}

fn training_time_parity() -> Check {
    let data = gen_synthetic(400, 0.5, 4)?;
    let splits = data.partition(SplitRatios::default(), 4)?;
    let spec = ModelSpec { config: EncoderConfig::default(), labels: data.labels.clone() };
    let base = spec.single_exit();
    let trial = TrialConfig { epochs: 1, seed: 3, ..Default::default() };
    let (train_set, val_set) = (splits.train.examples(), splits.val.examples());
    let (mut multi, mut single) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..3 {
        multi = multi.min(train(&spec, &train_set, &val_set, &trial)?.1.wall_time);
        single = single.min(train(&base, &train_set, &val_set, &trial)?.1.wall_time);
    }
    let ratio = multi / single;
    Ok((ratio <= 1.3, format!("multi {multi:.2}s, single {single:.2}s, ratio {ratio:.3}")))
}

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (brute_ranks(x), brute_ranks(y));
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (rx.iter().sum(), ry.iter().sum());
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|b| b * b).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn statistics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst, mut disagreements, mut undefined) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(3..60);
        let levels = rng.gen_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..levels) as f64 } else { rng.gen::<f64>() }).collect();
        match (spearman(&x, &y), brute_spearman(&x, &y)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(StatsError::Constant), None) => undefined += 1,
            _ => disagreements += 1,
        }
    }
    let tie = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0])?;
    Ok((
        worst <= 1e-12 && disagreements == 0 && (tie - 0.9487).abs() <= 1e-3,
        format!("max |diff| {worst:.2e}; {undefined} constant inputs agreed; tie example {tie:.4}"),
    ))
}

fn trace_equivalence(tr: &Trained) -> Check {
    let dir = tempfile::tempdir().map_err(|e| early_exit::Error::InvalidInput(e.to_string()))?;
    let first = dir.path().join("a.jsonl");
    let second = dir.path().join("b.jsonl");
    let test = &tr.splits.test;
    let dumped = dump_traces(&tr.model, test, &first, Execution::default())?;
    let loaded = TraceFile::load(&first)?;
    loaded.write(&second)?;
    let identical = std::fs::read(&first).ok() == std::fs::read(&second).ok();
    let live_logits = collect_exit_logits(&test.examples(), &tr.model, Execution::default())?;
    let exact = loaded == dumped
        && loaded.records.iter().zip(&live_logits).all(|(r, l)| {
            r.exits.iter().flatten().zip(l.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    let grid = default_thresholds();
    let sim = simulate(&loaded, &tr.calibration, &grid, Execution::default())?;
    let mut agree = 0;
    let mut total = 0;
    for (t, routes) in grid.iter().zip(&sim.routes) {
        let live = route_all(&test.examples(), &tr.model, &tr.calibration, RoutingPolicy::new(*t)?, Execution::default())?;
        for (s, l) in routes.iter().zip(&live) {
            total += 1;
            if s.exit_index == l.exit_index && s.prediction == l.prediction {
                agree += 1;
            }
        }
    }
    Ok((
        identical && exact && agree == total && total == grid.len() * test.len(),
        format!("{agree}/{total} routes agree; byte-identical round trip: {identical}; exact logits: {exact}"),
    ))
}

fn protocol_fidelity(points: &[TradeoffPoint]) -> Check {
    let repeats_ok = SweepOptions::default().repeats == 5
        && points.iter().all(|p| {
            let (m, s) = mean_std(&p.runtimes);
            p.runtimes.len() == 5 && m == p.runtime_mean && s == p.runtime_std
        });
    let baseline = select_baseline(&[0.8, 0.9, 0.85]) == Some(1) && select_baseline(&[0.7]) == Some(0);
    // A wins at lambda = 1 but averages 0.88; B averages 0.91
    let a = vec![0.80, 0.86, 0.90, 0.96];
    let b = vec![0.90, 0.91, 0.92, 0.91];
    let multi = select_multi_exit(&[a, b]) == Some(1) && select_multi_exit(&[vec![0.5, 0.6]]) == Some(0);

    let data = gen_synthetic(60, 0.5, 9)?;
    let splits = data.partition(SplitRatios::default(), 9)?;
    let spec = ModelSpec {
        config: EncoderConfig { d_model: 16, n_blocks: 2, n_heads: 2, ffn_dim: 32, exit_blocks: vec![1, 2], ..Default::default() },
        labels: data.labels.clone(),
    };
    let config = TrainConfig { trials: 3, epochs: 1, ..Default::default() };
    let out = random_search(&spec, &splits.train.examples(), &splits.val.examples(), &config)?;
    let table: Vec<Vec<f64>> = out.trials.iter().map(|t| t.per_threshold.clone()).collect();
    let search = Some(out.chosen) == select_multi_exit(&table)
        && out.trials.iter().all(|t| t.per_threshold.len() == config.selection_thresholds.len());
    Ok((
        repeats_ok && baseline && multi && search,
        format!("5 timed repeats per point: {repeats_ok}; baseline argmax: {baseline}; threshold-averaged selection: {multi}; search picked trial {}", out.chosen),
    ))
}

fn main() {
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    results.push((1, "gradient fidelity", gradient_fidelity()));
    results.push((2, "calibration contract", calibration_contract()));
    results.push((8, "parameter overhead", parameter_overhead()));
    results.push((10, "statistics oracle", statistics_oracle()));

    match reference_run() {
        Ok(tr) => {
            let t = Instant::now();
            let points = sweep(&tr.splits.test.examples(), &tr.model, &tr.calibration, &default_thresholds(), SweepOptions::default());
            let sweep_secs = t.elapsed().as_secs_f64();
            match points {
                Ok(points) => {
                    results.push((3, "endpoint semantics", endpoint_semantics(&tr)));
                    results.push((4, "monotone cost", monotone_cost(&tr, &points)));
                    results.push((5, "oracle dominance", oracle_dominance(&tr)));
                    results.push((6, "computation reuse", computation_reuse(&tr)));
                    results.push((7, "desk-scale premise", premise(&tr, &points, sweep_secs)));
                    results.push((11, "trace equivalence", trace_equivalence(&tr)));
                    results.push((12, "protocol fidelity", protocol_fidelity(&points)));
                }
                Err(e) => {
                    for (id, name) in [(3, "endpoint semantics"), (4, "monotone cost"), (5, "oracle dominance"), (6, "computation reuse"), (7, "desk-scale premise"), (11, "trace equivalence"), (12, "protocol fidelity")] {
                        results.push((id, name, Err(early_exit::Error::State(format!("sweep failed: {e}")))));
                    }
                }
            }
        }
        Err(e) => {
            for (id, name) in [(3, "endpoint semantics"), (4, "monotone cost"), (5, "oracle dominance"), (6, "computation reuse"), (7, "desk-scale premise"), (11, "trace equivalence"), (12, "protocol fidelity")] {
                results.push((id, name, Err(early_exit::Error::State(format!("reference training failed: {e}")))));
            }
        }
    }
    results.push((9, "training-time parity", training_time_parity()));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
