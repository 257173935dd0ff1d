//! Acceptance suite. Each criterion prints one PASS or FAIL line with a short
//! measurement summary and its wall time; the process exits nonzero if any fail.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mtbert::data::{build_vocab, TaskExample, Vocab};
use mtbert::early_exit::{certainty_target, ExitPolicy};
use mtbert::encoder::Pass;
use mtbert::evaluation::{evaluate, evaluate_task, TaskEval};
use mtbert::heads::{cross_entropy, symmetrized_kl, Prediction};
use mtbert::metrics::{compute_cost, dev_score, pearson};
use mtbert::model::MultitaskModel;
use mtbert::optim::rmsprop_step;
use mtbert::params::ParamGroup;
use mtbert::report::{write_predictions, MetricsReport};
use mtbert::smart::{smoothness_regularizer, ReplayPass, SmartConfig};
use mtbert::task::TaskKind;
use mtbert::tensor::Tape;
use mtbert::training::{FreezeMode, Objective, Strategy, TaskSplits, TrainConfig, Trainer};
use mtbert::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use support::{desk_model, gradient_suite, synth};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn vocab_for(sets: &[&[TaskExample]]) -> Vocab {
    build_vocab(sets.iter().flat_map(|s| s.iter()).flat_map(|e| e.texts()), 1)
}

fn param_bits(model: &MultitaskModel) -> Vec<(String, ParamGroup, Vec<u64>)> {
    model
        .store
        .iter()
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.group,
                p.value().data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn changed_groups(before: &[(String, ParamGroup, Vec<u64>)], model: &MultitaskModel) -> Vec<(String, ParamGroup)> {
    before
        .iter()
        .zip(param_bits(model))
        .filter(|(a, b)| a.2 != b.2)
        .map(|(a, _)| (a.0.clone(), a.1))
        .collect()
}

fn gradient_oracles() -> Outcome {
    let started = Instant::now();
    let oracles = gradient_suite().map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let failures: Vec<String> = oracles
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} rel {:.2e} (tol {:.0e})", o.name, o.rel_error, o.tol))
        .collect();
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    ensure!(elapsed < Duration::from_secs(60), "suite took {elapsed:?}");
    let worst = oracles.iter().map(|o| o.rel_error / o.tol).fold(0.0, f64::max);
    Ok(format!(
        "{} oracles, worst error at {:.1}% of tolerance",
        oracles.len(),
        100.0 * worst
    ))
}

fn closed_form_values() -> Outcome {
    let ce = cross_entropy(&[0.0; 5], 2).map_err(|e| e.to_string())?;
    ensure!((ce - 5f64.ln()).abs() < 1e-9, "uniform cross-entropy {ce}");

    let (p, q) = ([0.5, 0.5], [0.9, 0.1]);
    let kl = symmetrized_kl(&p, &q).map_err(|e| e.to_string())?;
    let direct: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a / b).ln()).sum();
    ensure!(
        (kl - 0.8789).abs() < 1e-3 && (kl - direct).abs() < 1e-12,
        "symmetrized KL {kl} vs {direct}"
    );

    let target = certainty_target(Prediction::Score(2.0), 3.0);
    ensure!((target - 0.2384).abs() < 1e-4, "regression certainty target {target}");
    ensure!(
        (target - (1.0 - 1f64.tanh())).abs() < 1e-15,
        "target differs from 1 - tanh(1)"
    );

    let (mut w, mut v) = ([0.0], [0.0]);
    rmsprop_step(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
    ensure!((-w[0] - 0.3162).abs() < 1e-4, "RMSprop first step {}", -w[0]);
    Ok(format!(
        "ce={ce:.9} kl={kl:.4} 1-tanh(1)={target:.4} rmsprop={:.4}",
        -w[0]
    ))
}

fn joint_trained(
    task: TaskKind,
    n: usize,
    layers: usize,
    epochs: usize,
    seed: u64,
) -> (MultitaskModel, Vocab, Vec<TaskExample>, Vec<TaskExample>) {
    let train = synth(task, n, seed);
    let dev = synth(task, n.min(500), seed + 1);
    let vocab = vocab_for(&[&train]);
    let config = TrainConfig {
        strategy: Strategy::Joint,
        epochs,
        smart_tasks: vec![],
        ..Default::default()
    };
    let mut trainer = Trainer::new(desk_model(&vocab, layers, seed), &vocab, config).unwrap();
    let splits = TaskSplits {
        train: [(task, train)].into(),
        dev: BTreeMap::new(),
    };
    trainer.run(&splits).unwrap();
    let train = splits.train[&task].clone();
    (trainer.into_model(), vocab, train, dev)
}

fn predictions_csv(eval: &TaskEval, dir: &Path, name: &str) -> Vec<u8> {
    let path = dir.join(name);
    write_predictions(&path, eval).unwrap();
    std::fs::read(path).unwrap()
}

fn early_exit_consistency() -> Outcome {
    let (model, vocab, _, dev) = joint_trained(TaskKind::Sst, 200, 4, 9, 11);
    let examples = synth(TaskKind::Sst, 200, 1234);
    ensure!(dev.len() == 200 && examples.len() == 200, "fixture sizes");
    let grid = [0.0, 0.25, 0.5, 0.75, 0.9, 1.01];
    let runs: Vec<TaskEval> = grid
        .iter()
        .map(|&tau| {
            evaluate_task(
                &model,
                &vocab,
                &examples,
                TaskKind::Sst,
                ExitPolicy::Threshold { tau },
                1,
            )
            .unwrap()
        })
        .collect();
    for pair in runs.windows(2) {
        for (i, (a, b)) in pair[0].traces.iter().zip(&pair[1].traces).enumerate() {
            ensure!(
                a.exit_layer <= b.exit_layer,
                "example {i}: exit {} then {}",
                a.exit_layer,
                b.exit_layer
            );
        }
    }
    let none = evaluate_task(&model, &vocab, &examples, TaskKind::Sst, ExitPolicy::None, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let full = predictions_csv(&runs[5], dir.path(), "full.csv");
    ensure!(
        full == predictions_csv(&none, dir.path(), "none.csv"),
        "tau 1.01 predictions differ from no exit"
    );
    let (first, _) = compute_cost(&runs[0].traces, 4).unwrap();
    ensure!(first == 1.0, "tau 0 average exit {first}");
    let avgs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}", compute_cost(&r.traces, 4).unwrap().0))
        .collect();
    Ok(format!("avg exit over tau grid [{}]", avgs.join(", ")))
}

fn compute_saving() -> Outcome {
    let started = Instant::now();
    let (model, vocab, _, dev) = joint_trained(TaskKind::Sst, 2000, 4, 6, 5);
    let trained_in = started.elapsed();
    ensure!(trained_in < Duration::from_secs(600), "training took {trained_in:?}");
    let none = evaluate_task(&model, &vocab, &dev, TaskKind::Sst, ExitPolicy::None, 1).unwrap();
    let base = none.score.unwrap();
    let mut best: Option<(f64, f64, f64)> = None;
    for step in 1..20 {
        let tau = step as f64 * 0.05;
        let eval = evaluate_task(&model, &vocab, &dev, TaskKind::Sst, ExitPolicy::Threshold { tau }, 1).unwrap();
        let acc = eval.score.unwrap();
        let (avg, _) = compute_cost(&eval.traces, 4).unwrap();
        if avg <= 3.5 && acc >= base - 0.05 && best.is_none_or(|(_, a, _)| avg < a) {
            best = Some((tau, avg, acc));
        }
    }
    let (tau, avg, acc) = best.ok_or_else(|| format!("no tau meets the target (full-depth accuracy {base:.3})"))?;
    Ok(format!(
        "tau={tau:.2}: avg exit {avg:.2}/4 with accuracy {acc:.3} vs {base:.3} at full depth (trained in {:.0}s)",
        trained_in.as_secs_f64()
    ))
}

fn smart_properties() -> Outcome {
    let data: BTreeMap<_, _> = TaskKind::ALL
        .iter()
        .map(|&t| (t, synth(t, 48, 70 + t.index() as u64)))
        .collect();
    let vocab = vocab_for(&data.values().map(|v| v.as_slice()).collect::<Vec<_>>());
    let run = |lambda: f64, smart_tasks: Vec<TaskKind>| {
        let mut config = TrainConfig {
            strategy: Strategy::Baseline,
            epochs: 2,
            smart_tasks,
            ..Default::default()
        };
        config.smart.lambda = lambda;
        let mut trainer = Trainer::new(desk_model(&vocab, 2, 17), &vocab, config).unwrap();
        trainer
            .run(&TaskSplits {
                train: data.clone(),
                dev: BTreeMap::new(),
            })
            .unwrap();
        param_bits(&trainer.model)
    };
    ensure!(
        run(0.0, TaskKind::ALL.to_vec()) == run(1.0, vec![]),
        "lambda 0 differs from plain training"
    );

    let model = desk_model(&vocab, 2, 23);
    let packer = support::packer_for(&model, &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut min_r, mut min_gain) = (f64::INFINITY, f64::INFINITY);
    for trial in 0..1000u64 {
        let task = TaskKind::ALL[trial as usize % 3];
        let pool = &data[&task];
        let size = rng.random_range(1..=4);
        let chosen: Vec<&TaskExample> = (0..size).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        let input = packer.pack(task, &chosen).unwrap();
        let pass = Pass::train(rng.random());
        let replay = ReplayPass::of(&pass);
        let mut tape = Tape::frozen();
        let states = model
            .encode(&mut tape, task, &input, &mut replay_pass(&replay), None, 2)
            .unwrap();
        let clean = model.layer_output(&mut tape, &states, task, 1).unwrap();
        let seed = rng.random::<u64>();
        let mut r = [0.0; 2];
        for (k, slot) in r.iter_mut().enumerate() {
            let config = SmartConfig {
                steps: k,
                ..SmartConfig::default()
            };
            let (value, _) = smoothness_regularizer(
                &model,
                &mut tape,
                task,
                &input,
                &replay,
                clean,
                &config,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            *slot = tape.value(value).item();
        }
        ensure!(r[0] >= 0.0 && r[1] >= 0.0, "trial {trial}: negative regularizer {r:?}");
        ensure!(r[1] >= r[0], "trial {trial} ({task}): K=1 gave {} < K=0 {}", r[1], r[0]);
        min_r = min_r.min(r[0]);
        min_gain = min_gain.min(r[1] - r[0]);
    }
    Ok(format!(
        "lambda=0 bit-identical; 1000 batches, min R_s {min_r:.2e}, min ascent gain {min_gain:.2e}"
    ))
}

fn replay_pass(replay: &ReplayPass) -> Pass {
    Pass {
        train: replay.train,
        rng: replay.rng.clone(),
    }
}

fn freezing_and_masks() -> Outcome {
    let data: BTreeMap<_, _> = TaskKind::ALL
        .iter()
        .map(|&t| (t, synth(t, 32, 50 + t.index() as u64)))
        .collect();
    let vocab = vocab_for(&data.values().map(|v| v.as_slice()).collect::<Vec<_>>());
    let model = desk_model(&vocab, 4, 8);
    let before = param_bits(&model);
    let config = TrainConfig {
        freeze_mode: FreezeMode::Pretrain,
        lte_enabled: true,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, &vocab, config).unwrap();
    for _ in 0..3 {
        trainer.train_epoch_multitask(&data, Objective::AllLayers).unwrap();
    }
    let moved = changed_groups(&before, &trainer.model);
    if let Some((name, _)) = moved.iter().find(|(_, g)| g.is_backbone()) {
        return Err(format!("pretrain mode changed {name}"));
    }
    let heads_moved = moved.len();

    for focus in 0..4 {
        let model = desk_model(&vocab, 4, 8);
        let before = param_bits(&model);
        let mut trainer = Trainer::new(model, &vocab, TrainConfig::default()).unwrap();
        trainer
            .train_epoch_multitask(&data, Objective::SingleLayer(focus))
            .unwrap();
        let moved = changed_groups(&before, &trainer.model);
        for (name, group) in &moved {
            let inside = match group {
                ParamGroup::Layer(i) => *i == focus,
                ParamGroup::Head { layer, .. } => *layer == focus,
                _ => false,
            };
            ensure!(inside, "focus on layer {focus} changed {name}");
        }
        ensure!(
            moved.iter().any(|(_, g)| *g == ParamGroup::Layer(focus)),
            "layer {focus} did not train"
        );
    }
    Ok(format!(
        "backbone frozen ({heads_moved} head tensors moved); layer focus confined for all 4 layers"
    ))
}

fn learn(task: TaskKind, target: f64) -> Outcome {
    let started = Instant::now();
    let train = synth(task, 300, 31 + task.index() as u64);
    let vocab = vocab_for(&[&train]);
    let config = TrainConfig {
        smart_tasks: vec![],
        ..Default::default()
    };
    let mut trainer = Trainer::new(desk_model(&vocab, 4, 13), &vocab, config).unwrap();
    let sets: BTreeMap<_, _> = [(task, train.clone())].into();
    let mut score = f64::NAN;
    for epoch in 1..=200 {
        trainer.train_epoch_multitask(&sets, Objective::FinalOnly).unwrap();
        if epoch % 5 == 0 || epoch == 200 {
            score = evaluate_task(&trainer.model, &vocab, &train, task, ExitPolicy::None, 1)
                .unwrap()
                .score
                .unwrap_or(f64::NAN);
            if score >= target {
                let took = started.elapsed();
                ensure!(
                    took < Duration::from_secs(300),
                    "{task} reached {score:.3} but took {took:?}"
                );
                return Ok(format!(
                    "{task} {score:.3} at epoch {epoch} in {:.0}s",
                    took.as_secs_f64()
                ));
            }
        }
        ensure!(
            started.elapsed() < Duration::from_secs(300),
            "{task} at {score:.3} after 5 minutes (epoch {epoch})"
        );
    }
    Err(format!("{task} reached only {score:.3} in 200 epochs"))
}

fn learnability() -> Outcome {
    let parts = [
        learn(TaskKind::Sst, 0.95),
        learn(TaskKind::Para, 0.9),
        learn(TaskKind::Sts, 0.8),
    ];
    let failed: Vec<&String> = parts.iter().filter_map(|p| p.as_ref().err()).collect();
    ensure!(
        failed.is_empty(),
        "{}",
        failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; ")
    );
    Ok(parts.iter().map(|p| p.clone().unwrap()).collect::<Vec<_>>().join("; "))
}

fn degenerate_predictor() -> Outcome {
    let dev = synth(TaskKind::Para, 400, 77);
    let vocab = vocab_for(&[&dev]);
    let mut summary = Vec::new();
    for (class, bias) in [(0usize, -20.0), (1, 20.0)] {
        let mut model = desk_model(&vocab, 2, 3);
        for (_, p) in model.store.iter_mut() {
            if p.group
                == (ParamGroup::Head {
                    task: TaskKind::Para,
                    layer: 1,
                })
            {
                let value = if p.name.ends_with(".bias") { bias } else { 0.0 };
                p.value_mut().data_mut().fill(value);
            }
        }
        let eval = evaluate(&model, &vocab, &[(TaskKind::Para, &dev)], ExitPolicy::None, 1).unwrap();
        let para = eval.task(TaskKind::Para).unwrap();
        ensure!(
            para.predictions.iter().all(|p| *p == Prediction::Class(class)),
            "predictor is not constant at {class}"
        );
        let acc = para.score.unwrap();
        ensure!((acc - 0.5).abs() <= 0.01, "all-{class} accuracy {acc}");
        let report = MetricsReport::from_evaluation("dev", &eval, 2, &[]).unwrap();
        ensure!(
            report.constant_predictions.get("para") == Some(&true),
            "report does not flag all-{class}"
        );
        summary.push(format!("all-{class} accuracy {acc:.3} flagged"));
    }
    Ok(summary.join(", "))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let first = dir.path().join("first");
    let train = || {
        let status = Command::new(env!("CARGO_BIN_EXE_mtbert"))
            .args(["train", "--out", out.to_str().unwrap(), "--epochs", "2", "--seed", "5"])
            .args([
                "--set",
                "data.synth_train=60",
                "--set",
                "data.synth_dev=30",
                "--set",
                "model.layers=2",
            ])
            .output()
            .unwrap();
        status
            .status
            .success()
            .then_some(())
            .ok_or_else(|| String::from_utf8_lossy(&status.stderr).to_string())
    };
    train()?;
    std::fs::rename(&out, &first).unwrap();
    train()?;
    let metrics = |dir: &Path| -> Value {
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_seconds");
        v
    };
    ensure!(metrics(&first) == metrics(&out), "metrics.json differs");
    let mut compared = 1;
    for task in TaskKind::ALL {
        let name = format!("predictions_{task}.csv");
        ensure!(
            std::fs::read(first.join(&name)).unwrap() == std::fs::read(out.join(&name)).unwrap(),
            "{name} differs"
        );
        compared += 1;
    }
    Ok(format!("{compared} files identical across two runs"))
}

fn metric_values() -> Outcome {
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).map_err(|e| e.to_string())?;
    ensure!((r - 0.9820).abs() < 1e-4, "pearson {r}");
    let constant = pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
    ensure!(
        matches!(constant, Err(Error::Degenerate(_))),
        "constant input gave {constant:?}"
    );
    let score = dev_score(&[Some(0.314), Some(0.369), Some(0.199)]).map_err(|e| e.to_string())?;
    ensure!((score - 0.294).abs() < 1e-12, "dev score {score}");
    Ok(format!("pearson {r:.4}, constant input rejected, dev score {score}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("AC1", "gradient oracles", gradient_oracles),
        ("AC2", "closed-form values", closed_form_values),
        ("AC3", "early-exit consistency", early_exit_consistency),
        ("AC4", "compute saving", compute_saving),
        ("AC5", "SMART identity and monotonicity", smart_properties),
        ("AC6", "freezing and layer focus", freezing_and_masks),
        ("AC7", "learnability", learnability),
        ("AC8", "degenerate predictor", degenerate_predictor),
        ("AC9", "CLI determinism", cli_determinism),
        ("AC10", "metric values", metric_values),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failures = 0;
    for (id, title, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {title}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("{id} FAIL {title}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
