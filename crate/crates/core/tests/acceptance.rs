//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use a3sn::diagnostics::gradcheck_suite;
use a3sn::encoding::{encode, synth_dataset, EncodedInput, Example, Polarity, Segment};
use a3sn::layer::{amplified_attention, attention_scores, cross_mass, layer_forward, AblationMode, LayerParams};
use a3sn::model::{forward, forward_on_tape, loss};
use a3sn::tensor::{Tape, Tensor, DEFAULT_FD_EPS};
use a3sn::training::{ablation_report, evaluate, run_ablations, train, TrainConfig};
use common::*;
use rand::Rng;

/// Rounding allowance when summing a row of f64 attention weights.
const ROW_SUM_SLACK: f64 = 1e-12;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria = [
        Criterion {
            id: 1,
            name: "amplification identity",
            budget: Duration::from_secs(10),
            run: amplification_identity,
        },
        Criterion {
            id: 2,
            name: "amplify-matrix structure",
            budget: Duration::from_secs(5),
            run: amplify_structure,
        },
        Criterion {
            id: 3,
            name: "gradient oracle",
            budget: Duration::from_secs(120),
            run: gradient_oracle,
        },
        Criterion {
            id: 4,
            name: "degenerate-amplify equivalence",
            budget: Duration::from_secs(10),
            run: degenerate_amplify,
        },
        Criterion {
            id: 5,
            name: "learning at desk scale",
            budget: Duration::from_secs(300),
            run: learning,
        },
        Criterion {
            id: 6,
            name: "ablation harness parity",
            budget: Duration::from_secs(900),
            run: ablation_parity,
        },
        Criterion {
            id: 7,
            name: "determinism",
            budget: Duration::from_secs(600),
            run: determinism,
        },
        Criterion {
            id: 8,
            name: "classifier calculus",
            budget: Duration::from_secs(10),
            run: classifier_calculus,
        },
        Criterion {
            id: 9,
            name: "padding invariance",
            budget: Duration::from_secs(10),
            run: padding_invariance,
        },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_none_or(|k| k == c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > c.budget => Err(format!("{d}; took {took:.1?}, budget {:?}", c.budget)),
            r => r,
        };
        match result {
            Ok(d) => println!("criterion {} {}: PASS ({d}) [{took:.1?}]", c.id, c.name),
            Err(d) => {
                failed += 1;
                println!("criterion {} {}: FAIL ({d}) [{took:.1?}]", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn amplification_identity() -> Outcome {
    let vocab = word_vocab();
    let cfg = model_config(vocab.len(), 24, 16, 4, 1);
    let mut r = rng(101);
    let mut worst_ratio: f64 = 0.0;
    let mut rows = 0;
    for case in 0..200u64 {
        let enc = random_encoded(&mut r, &vocab, cfg.max_len);
        let params = random_params(&cfg, 1000 + case);
        let pred = forward(&enc, &params, &cfg, AblationMode::Full).map_err(|e| e.to_string())?;

        // The amplified product as recorded on the tape, not only the trace copy.
        let mut tape = Tape::new();
        let w = params.layers[0].bind(&mut tape, false);
        let h = tape.constant(
            Tensor::new(
                vec![enc.len(), 16],
                (0..enc.len() * 16).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        );
        let att = attention_scores(&mut tape, h, &w, &cfg.layer, &enc.pad_mask).map_err(|e| e.to_string())?;
        let amp = tape.constant(enc.amplify.clone());
        let mut pairs = Vec::new();
        for hs in &att.heads {
            let (_, score_amp) =
                amplified_attention(&mut tape, hs.scores, amp, hs.values).map_err(|e| e.to_string())?;
            pairs.push((tape.value(hs.scores).clone(), tape.value(score_amp).clone()));
        }
        for head in &pred.traces[0].heads {
            pairs.push((head.score_ori.clone(), head.score_amp.clone()));
        }

        for (ori, sa) in &pairs {
            for ((s, a), g) in ori.data().iter().zip(sa.data()).zip(enc.amplify.data()) {
                ensure!((s * g).to_bits() == a.to_bits(), "case {case}: {a} != {s} * {g}");
            }
            for i in 0..sa.rows() {
                let sum: f64 = sa.row(i).iter().sum();
                ensure!(
                    (1.0 - ROW_SUM_SLACK..=2.0 + ROW_SUM_SLACK).contains(&sum),
                    "case {case} row {i}: sum {sum} outside [1, 2]"
                );
                rows += 1;
            }
            let (o, a) = (cross_mass(ori, &enc.amplify), cross_mass(sa, &enc.amplify));
            ensure!((a - 2.0 * o).abs() <= 1e-12, "case {case}: cross mass {a} vs 2 x {o}");
            if o > 0.0 {
                worst_ratio = worst_ratio.max((a / o - 2.0).abs());
            }
        }
    }
    Ok(format!(
        "200 inputs, {rows} score rows, max |ratio - 2| = {worst_ratio:.1e}"
    ))
}

fn check_amplify(enc: &EncodedInput) -> Result<usize, String> {
    let n = enc.len();
    let g = &enc.amplify;
    ensure!(g.shape() == [n, n], "amplify shape {:?} for length {n}", g.shape());
    let mut twos = 0;
    for i in 0..n {
        ensure!(g.row(i)[i] == 1.0, "diagonal {i} is {}", g.row(i)[i]);
        for j in 0..n {
            let v = g.row(i)[j];
            ensure!(v == 1.0 || v == 2.0, "value {v} at ({i}, {j})");
            ensure!(v == g.row(j)[i], "asymmetric at ({i}, {j})");
            if v == 2.0 {
                twos += 1;
            }
        }
    }
    let count = |s: Segment| enc.segments.iter().filter(|&&x| x == s).count();
    let expect = 2 * count(Segment::Sent) * count(Segment::Asp);
    ensure!(twos == expect, "{twos} twos, expected 2*|SENT|*|ASP| = {expect}");
    Ok(n)
}

fn amplify_structure() -> Outcome {
    let vocab = word_vocab();
    let mut r = rng(202);
    let mut checked = 0;
    for _ in 0..1000 {
        check_amplify(&random_encoded(&mut r, &vocab, 24))?;
        checked += 1;
    }
    let synth = synth_dataset(300, 7, 50).map_err(|e| e.to_string())?;
    let sv = a3sn::encoding::build_vocab(&synth, 1).map_err(|e| e.to_string())?;
    for ex in &synth {
        check_amplify(&encode(ex, &sv, 32).map_err(|e| e.to_string())?)?;
        checked += 1;
    }
    Ok(format!("{checked} inputs"))
}

fn gradient_oracle() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for seed in 0..5 {
        for c in gradcheck_suite(seed, 8, 2, DEFAULT_FD_EPS, 1e-4).map_err(|e| e.to_string())? {
            ensure!(
                c.passed && c.max_rel_error <= 1e-4,
                "seed {seed}: {} max rel error {:.3e}",
                c.name,
                c.max_rel_error
            );
            if c.max_rel_error > worst.0 {
                worst = (c.max_rel_error, c.name.clone());
            }
            count += 1;
        }
    }
    Ok(format!(
        "{count} checks over 5 seeds, worst {:.2e} ({})",
        worst.0, worst.1
    ))
}

fn degenerate_amplify() -> Outcome {
    let vocab = word_vocab();
    let cfg = model_config(vocab.len(), 24, 16, 4, 1);
    let mut r = rng(404);
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let mut enc = random_encoded(&mut r, &vocab, cfg.max_len);
        enc.amplify = Tensor::ones(&[enc.len(), enc.len()]);
        let mut layer: LayerParams = random_params(&cfg, 4000 + case).layers.remove(0);
        for h in &mut layer.heads {
            h.gate_a_kernel = h.gate_o_kernel.clone();
            h.gate_a_bias = h.gate_o_bias.clone();
        }
        let input = Tensor::new(
            vec![enc.len(), 16],
            (0..enc.len() * 16).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let run = |mode| -> Result<Tensor, String> {
            let mut tape = Tape::new();
            let w = layer.bind(&mut tape, false);
            let h = tape.constant(input.clone());
            let (out, _) =
                layer_forward(&mut tape, h, &enc, &w, &cfg.layer, mode, &mut None).map_err(|e| e.to_string())?;
            Ok(tape.value(out).clone())
        };
        let full = run(AblationMode::Full)?;
        for mode in [AblationMode::NoOriginal, AblationMode::NoAmplified] {
            let d = full.max_abs_diff(&run(mode)?).ok_or("shape mismatch")?;
            ensure!(d <= 1e-12, "case {case}: {mode} differs from full by {d:e}");
            worst = worst.max(d);
        }
    }
    Ok(format!("50 inputs, max divergence {worst:.1e}"))
}

fn learning_split() -> Result<(Vec<Example>, Vec<Example>), String> {
    let data = synth_dataset(700, 7, 50).map_err(|e| e.to_string())?;
    Ok((data[..500].to_vec(), data[500..].to_vec()))
}

fn learning() -> Outcome {
    let (train_set, test_set) = learning_split()?;
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    ensure!(
        cfg.heads == 4 && cfg.layers == 1 && cfg.dropout == 0.2 && cfg.epochs == 50,
        "defaults drifted: {cfg:?}"
    );
    let out = train(&train_set, None, &cfg).map_err(|e| e.to_string())?;
    let m = evaluate(&test_set, &out.checkpoint, cfg.mode).map_err(|e| e.to_string())?;
    ensure!(
        m.accuracy >= 0.95,
        "test accuracy {:.4} < 0.95 (best epoch {})",
        m.accuracy,
        out.best_epoch
    );

    let eight = &train_set[..8];
    let mem_cfg = TrainConfig {
        epochs: 200,
        val_fraction: 0.0,
        ..cfg.clone()
    };
    let mem = train(eight, None, &mem_cfg).map_err(|e| e.to_string())?;
    let mm = evaluate(eight, &mem.checkpoint, cfg.mode).map_err(|e| e.to_string())?;
    ensure!(mm.loss < 0.01, "8-example loss {:.4} after 200 epochs", mm.loss);
    Ok(format!(
        "test accuracy {:.4} (best epoch {}), 8-example loss {:.2e}",
        m.accuracy, out.best_epoch, mm.loss
    ))
}

fn ablation_parity() -> Outcome {
    let (train_set, test_set) = learning_split()?;
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let rows = run_ablations(&train_set, None, Some(&test_set), &cfg, |_| {}).map_err(|e| e.to_string())?;
    let report = ablation_report(&rows);
    ensure!(rows.len() == 4, "{} rows", rows.len());
    ensure!(
        report.lines().count() == 6 && report.starts_with("| Model | Acc. |"),
        "report layout:\n{report}"
    );

    let standalone = train(&train_set, None, &cfg).map_err(|e| e.to_string())?;
    let sm = evaluate(&test_set, &standalone.checkpoint, AblationMode::Full).map_err(|e| e.to_string())?;
    let full = rows
        .iter()
        .find(|r| r.mode == AblationMode::Full)
        .ok_or("no full row")?;
    ensure!(
        full.metrics.accuracy.to_bits() == sm.accuracy.to_bits()
            && full.metrics.macro_f1.to_bits() == sm.macro_f1.to_bits()
            && full.metrics.loss.to_bits() == sm.loss.to_bits()
            && full.metrics.confusion == sm.confusion,
        "full row {:?} vs standalone {:?}",
        full.metrics,
        sm
    );
    let mut accs = Vec::new();
    for r in &rows {
        ensure!(
            r.metrics.accuracy > 0.8,
            "{} accuracy {:.4}",
            r.mode,
            r.metrics.accuracy
        );
        accs.push(format!("{}={:.3}", r.mode, r.metrics.accuracy));
    }
    Ok(accs.join(" "))
}

fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_a3sn"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "a3sn {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn run_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let small = ["--epochs", "3", "--d-model", "16", "--heads", "2", "--seed", "11"];
    cli(dir, &["synth-data", "--n", "120", "--seed", "7", "--out", "data.jsonl"])?;
    cli(dir, &["synth-data", "--n", "40", "--seed", "8", "--out", "test.jsonl"])?;
    let mut train_args = vec![
        "train",
        "--data",
        "data.jsonl",
        "--out-checkpoint",
        "m.ckpt",
        "--metrics-csv",
        "m.csv",
        "--mode",
        "no-amplified",
    ];
    train_args.extend(small);
    let train_stdout = cli(dir, &train_args)?;
    let eval_stdout = cli(
        dir,
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "test.jsonl",
            "--out-json",
            "eval.json",
        ],
    )?;
    let inspect_stdout = cli(
        dir,
        &[
            "inspect-attention",
            "--checkpoint",
            "m.ckpt",
            "--text",
            "great waiter w1 awful staff",
            "--aspect",
            "staff",
            "--head",
            "1",
            "--out-json",
            "att.json",
        ],
    )?;
    let mut ablate_args = vec![
        "ablate",
        "--data",
        "data.jsonl",
        "--test",
        "test.jsonl",
        "--out-report",
        "ablation.md",
    ];
    ablate_args.extend(small);
    let ablate_stdout = cli(dir, &ablate_args)?;
    let gradcheck_stdout = cli(dir, &["gradcheck", "--seed", "3"])?;

    let mut artifacts = Vec::new();
    for f in [
        "data.jsonl",
        "test.jsonl",
        "m.ckpt",
        "m.csv",
        "eval.json",
        "att.json",
        "ablation.md",
    ] {
        artifacts.push((
            f.to_string(),
            std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?,
        ));
    }
    for (name, s) in [
        ("train stdout", train_stdout),
        ("eval stdout", eval_stdout),
        ("inspect stdout", inspect_stdout),
        ("ablate stdout", ablate_stdout),
        ("gradcheck stdout", gradcheck_stdout),
    ] {
        artifacts.push((name.to_string(), s.into_bytes()));
    }
    Ok(artifacts)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure!(!x.is_empty(), "{name} is empty");
        ensure!(x == y, "{name} differs between runs");
    }
    let csv = String::from_utf8_lossy(&first[3].1).into_owned();
    ensure!(
        csv.starts_with("# mode=no-amplified seed=11\n"),
        "csv header: {}",
        csv.lines().next().unwrap_or("")
    );

    // Library-level training trajectories as well.
    let data = synth_dataset(60, 5, 20).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        ..TrainConfig::default()
    };
    let x = train(&data, None, &cfg).map_err(|e| e.to_string())?;
    let y = train(&data, None, &cfg).map_err(|e| e.to_string())?;
    ensure!(
        checksum(&x.checkpoint.params) == checksum(&y.checkpoint.params),
        "parameters differ"
    );
    ensure!(
        x.checkpoint.to_bytes().map_err(|e| e.to_string())? == y.checkpoint.to_bytes().map_err(|e| e.to_string())?,
        "checkpoint bytes differ"
    );
    Ok(format!("{} artifacts byte-identical across reruns", first.len()))
}

fn classifier_calculus() -> Outcome {
    let vocab = word_vocab();
    let cfg = model_config(vocab.len(), 24, 16, 4, 1);
    let mut r = rng(808);
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let mut enc = random_encoded(&mut r, &vocab, cfg.max_len);
        enc.label = Polarity::from_id(case as usize % 3).unwrap();
        let params = random_params(&cfg, 8000 + case);
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, true);
        let out =
            forward_on_tape(&mut tape, &enc, &w, &cfg, AblationMode::Full, &mut None).map_err(|e| e.to_string())?;
        let l = loss(&mut tape, &out, enc.label).map_err(|e| e.to_string())?;
        let probs = tape.value(out.probs).data().to_vec();
        tape.backward(l).map_err(|e| e.to_string())?;
        let g = tape.grad(out.logits).ok_or("no gradient at logits")?;
        for k in 0..3 {
            let want = probs[k] - if k == enc.label.id() { 1.0 } else { 0.0 };
            let d = (g[k] - want).abs();
            ensure!(d <= 1e-6, "case {case} class {k}: dL/dlogit {} vs {want}", g[k]);
            worst = worst.max(d);
        }
    }

    let mut params = random_params(&cfg, 9);
    params.w_p = Tensor::zeros(params.w_p.shape());
    params.b_p = Tensor::zeros(params.b_p.shape());
    let mut max_dev: f64 = 0.0;
    for _ in 0..20 {
        let enc = random_encoded(&mut r, &vocab, cfg.max_len);
        let pred = forward(&enc, &params, &cfg, AblationMode::Full).map_err(|e| e.to_string())?;
        for gold in Polarity::ALL {
            let d = (pred.loss(gold).value - 3f64.ln()).abs();
            ensure!(d <= 1e-12, "uniform loss {} vs ln 3", pred.loss(gold).value);
            max_dev = max_dev.max(d);
        }
    }
    Ok(format!(
        "max |grad - (p - y)| {worst:.1e}; max |uniform loss - ln 3| {max_dev:.1e}"
    ))
}

fn padding_invariance() -> Outcome {
    let vocab = word_vocab();
    let cfg = model_config(vocab.len(), 32, 16, 4, 2);
    let mut r = rng(909);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for case in 0..100u64 {
        let ex = random_example(&mut r);
        let base = encode(&ex, &vocab, ex.sentence.len() + ex.aspect.len() + 3).map_err(|e| e.to_string())?;
        let params = random_params(&cfg, 9000 + case);
        let mode = AblationMode::ALL[case as usize % 4];
        let p0 = forward(&base, &params, &cfg, mode).map_err(|e| e.to_string())?;
        for extra in [1, 2, 5] {
            let n = (base.len() + extra).min(cfg.max_len);
            if n == base.len() {
                continue;
            }
            let padded = base.resized(n).map_err(|e| e.to_string())?;
            let p1 = forward(&padded, &params, &cfg, mode).map_err(|e| e.to_string())?;
            for (a, b) in p0.probs.iter().zip(&p1.probs) {
                let d = (a - b).abs();
                ensure!(d <= 1e-12, "case {case} (+{extra} PAD, {mode}): {a} vs {b}");
                worst = worst.max(d);
            }
            ensure!(p0.predicted == p1.predicted, "case {case}: prediction changed");
            compared += 1;
        }
    }
    Ok(format!("{compared} padded variants, max change {worst:.1e}"))
}
