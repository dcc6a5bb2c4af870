//! Acceptance checks. Runs as a plain binary (no libtest harness) and prints
//! one PASS/FAIL line per check; exits non-zero if any check fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use neurodx::data::write_synthetic_dataset;
use neurodx::metrics::{confusion_matrix, overall_metrics, per_class_metrics, roc_auc_ovr, ConfusionMatrix};
use neurodx::model::{build_hybrid, decode_checkpoint, encode_checkpoint, CheckpointMeta, LayerKind, ModelConfig};
use neurodx::optim::{adam_step, AdamState, TrainConfig, TrainReport};
use neurodx::{Error, Rng, Tensor};
use support::gradients::{self, LAYER_TOL, MODEL_TOL};
use support::{brute_confusion, brute_counts, brute_ratios, pairwise_auc, TestRng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn neurodx(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_neurodx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run neurodx")
}

fn summary_value(text: &str, key: &str) -> Option<String> {
    text.lines().rev().find_map(|l| l.strip_prefix(key)).map(|v| v.trim().to_string())
}

fn shape_arithmetic() -> Outcome {
    let plan = ModelConfig::paper().plan().map_err(|e| e.to_string())?;
    let pools: Vec<usize> = plan
        .iter()
        .filter(|s| s.kind == LayerKind::MaxPool)
        .map(|s| s.output_shape[1])
        .collect();
    ensure(pools == [112, 56, 28, 14, 7], || format!("pool sizes {pools:?}"))?;
    let last_pool = plan.iter().rev().find(|s| s.kind == LayerKind::MaxPool).unwrap();
    ensure(last_pool.output_shape == [512, 7, 7], || format!("feature map {:?}", last_pool.output_shape))?;
    let flat = plan.iter().find(|s| s.kind == LayerKind::Flatten).unwrap();
    ensure(flat.output_shape == [25088], || format!("flatten {:?}", flat.output_shape))?;

    let o = neurodx(&["inspect", "--preset", "paper"]);
    let text = String::from_utf8_lossy(&o.stdout);
    ensure(o.status.success(), || "inspect failed".into())?;
    let input = summary_value(&text, "input");
    let fm = summary_value(&text, "feature map");
    let fl = summary_value(&text, "flatten");
    ensure(
        input.as_deref() == Some("224x224x3") && fm.as_deref() == Some("7x7x512") && fl.as_deref() == Some("25088"),
        || format!("inspect printed {input:?} / {fm:?} / {fl:?}"),
    )?;
    Ok("224x224x3 -> 7x7x512 -> 25088 (library plan and inspect output)".into())
}

fn layer_census() -> Outcome {
    let plan = ModelConfig::paper().plan().map_err(|e| e.to_string())?;
    let count = |f: fn(&LayerKind) -> bool| plan.iter().filter(|s| f(&s.kind)).count();
    let got = (
        count(|k| matches!(k, LayerKind::Conv { .. })),
        count(|k| matches!(k, LayerKind::MaxPool)),
        count(|k| matches!(k, LayerKind::Lstm { .. })),
    );
    ensure(got == (13, 5, 1), || format!("plan census {got:?}"))?;
    let text = String::from_utf8_lossy(&neurodx(&["inspect", "--preset", "paper"]).stdout).into_owned();
    let rows = |kind: &str| text.lines().filter(|l| l.split_whitespace().nth(1) == Some(kind)).count();
    let printed = (rows("conv"), rows("maxpool"), rows("lstm"));
    ensure(printed == (13, 5, 1), || format!("inspect rows {printed:?}"))?;
    Ok("13 conv, 5 pool, 1 lstm".into())
}

fn gradient_checks() -> Outcome {
    let mut worst_layer: f64 = 0.0;
    let layers: [(&str, gradients::Errors); 7] = [
        ("conv", gradients::conv()),
        ("pool", gradients::maxpool()),
        ("relu", gradients::relu_layer()),
        ("dense", gradients::dense()),
        ("lstm cell", gradients::lstm_cell()),
        ("lstm T=3", gradients::lstm_sequence()),
        ("softmax+ce", gradients::fused_softmax_cross_entropy().0),
    ];
    for (layer, errs) in layers {
        for (what, e) in errs {
            ensure(e <= LAYER_TOL, || format!("{layer} {what}: {e:e} > {LAYER_TOL:e}"))?;
            worst_layer = worst_layer.max(e);
        }
    }
    let run = gradients::toy_end_to_end(20, 20);
    ensure(run.samples.len() == 20, || format!("only {} samples off kinks", run.samples.len()))?;
    let worst = run.worst();
    ensure(worst <= MODEL_TOL, || format!("end-to-end {worst:e} > {MODEL_TOL:e}"))?;
    Ok(format!(
        "layers max rel err {worst_layer:.2e}, toy model {worst:.2e} over 20 params ({} kink draws skipped)",
        run.skipped
    ))
}

fn random_labels(rng: &mut TestRng, n: usize) -> (Vec<usize>, Vec<usize>) {
    let t: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
    let p = t.iter().map(|&c| if rng.unit() < 0.5 { c } else { rng.below(4) }).collect();
    (t, p)
}

fn metric_oracle() -> Outcome {
    let mut rng = TestRng::new(1001);
    let mut worst: f64 = 0.0;
    for instance in 0..1000 {
        let n = if instance % 100 == 0 { 10_000 } else { 1 + rng.below(2000) };
        let (t, p) = random_labels(&mut rng, n);
        let cm = confusion_matrix(&t, &p, 4).map_err(|e| e.to_string())?;
        let want = brute_confusion(&t, &p, 4);
        for (a, row) in want.iter().enumerate() {
            ensure(cm.row(a) == row.as_slice(), || format!("instance {instance}: confusion row {a}"))?;
        }
        for (c, m) in per_class_metrics(&cm).map_err(|e| e.to_string())?.iter().enumerate() {
            let (tp, tn, fp, fn_) = brute_counts(&t, &p, c);
            ensure((m.tp, m.tn, m.fp, m.fn_) == (tp, tn, fp, fn_), || format!("instance {instance}: counts"))?;
            let got = [m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1];
            for (g, w) in got.iter().zip(brute_ratios(tp, tn, fp, fn_)) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("ratio error {worst:e}"))?;
    Ok(format!("1000 instances, K=4, n <= 10000, max abs error {worst:.1e}"))
}

fn reported_counts_accuracy() -> Outcome {
    let correct = [138u64, 10, 530, 335];
    let totals = [140u64, 10, 531, 343];
    let mut rows = vec![vec![0u64; 4]; 4];
    for c in 0..4 {
        rows[c][c] = correct[c];
        rows[c][(c + 1) % 4] = totals[c] - correct[c];
    }
    let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    let acc = overall_metrics(&cm).map_err(|e| e.to_string())?.accuracy;
    ensure(cm.trace() == 1013 && cm.total() == 1024, || "counts".into())?;
    ensure((acc - 0.9893).abs() <= 0.0005, || format!("accuracy {acc}"))?;
    Ok(format!("1013/1024 = {acc:.6}"))
}

fn auc_oracle() -> Outcome {
    let mut rng = TestRng::new(1002);
    let mut worst: f64 = 0.0;
    for set in 0..500 {
        let n = 2 + rng.below(199);
        let class = rng.below(4);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        labels[0] = class;
        labels[1] = (class + 1) % 4;
        let coarse = set % 2 == 1;
        let scores: Vec<f64> = (0..n * 4)
            .map(|_| if coarse { rng.below(6) as f64 / 6.0 } else { rng.unit() })
            .collect();
        let tensor = Tensor::new([n, 4], scores.clone()).map_err(|e| e.to_string())?;
        let auc = roc_auc_ovr(&tensor, &labels, class).map_err(|e| e.to_string())?.auc;
        let column: Vec<f64> = (0..n).map(|i| scores[i * 4 + class]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        worst = worst.max((auc - pairwise_auc(&column, &positive)).abs());
    }
    ensure(worst <= 1e-12, || format!("auc error {worst:e}"))?;
    Ok(format!("500 score sets, n <= 200, max abs error {worst:.1e}"))
}

struct Runs {
    first: std::path::PathBuf,
    second: std::path::PathBuf,
}

fn train_twice(root: &Path) -> Result<Runs, String> {
    let data = root.join("data");
    write_synthetic_dataset(&data, &[16, 16, 16, 16], 32, 1).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let out = root.join(name);
        let o = neurodx(&[
            "train", "--preset", "toy", "--data", data.to_str().unwrap(), "--epochs", "30", "--seed", "1",
            "--batch-size", "8", "--out", out.to_str().unwrap(),
        ]);
        ensure(o.status.success(), || format!("train exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))?;
        runs.push(out);
    }
    let second = runs.pop().unwrap();
    let first = runs.pop().unwrap();
    Ok(Runs { first, second })
}

fn overfit(runs: &Runs) -> Outcome {
    let text = fs::read_to_string(runs.first.join("history.csv")).map_err(|e| e.to_string())?;
    let report = TrainReport::from_csv(&text).map_err(|e| e.to_string())?;
    let last = report.records.last().ok_or("empty history")?;
    ensure(report.records.len() == 30, || format!("{} epochs", report.records.len()))?;
    ensure(last.train_acc >= 0.95, || format!("train accuracy {}", last.train_acc))?;
    Ok(format!(
        "toy preset, 64 images, 30 epochs, seed 1: train accuracy {:.4} (loss {:.4})",
        last.train_acc, last.train_loss
    ))
}

fn determinism(runs: &Runs) -> Outcome {
    let mut bytes = 0;
    for f in ["history.csv", "final.ckpt", "best.ckpt"] {
        let a = fs::read(runs.first.join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(runs.second.join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs"))?;
        bytes += a.len();
    }
    Ok(format!("history.csv, final.ckpt, best.ckpt identical ({bytes} bytes)"))
}

fn adam_reference() -> Outcome {
    let cfg = TrainConfig::default();
    let mut theta = Tensor::<f64>::new([1], vec![1.0]).map_err(|e| e.to_string())?;
    let mut state = AdamState::<f64>::new([theta.shape()]);
    let want = support::adam_scalar(1.0, |t| t, 3, cfg.learning_rate);
    let mut worst: f64 = 0.0;
    for w in want {
        let g = theta.clone();
        adam_step(&mut [&mut theta], &[g], &mut state, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((theta.data()[0] - w).abs());
    }
    ensure(worst <= 1e-9, || format!("trajectory error {worst:e}"))?;

    let mut theta = Tensor::<f64>::new([1], vec![0.0]).unwrap();
    let mut state = AdamState::<f64>::new([theta.shape()]);
    let g = Tensor::new([1], vec![0.5]).unwrap();
    adam_step(&mut [&mut theta], &[g], &mut state, &cfg).map_err(|e| e.to_string())?;
    let closed = -0.001 * 0.5 / (0.5 + 1e-8);
    let step1 = (theta.data()[0] - closed).abs();
    ensure(step1 <= 1e-12, || format!("step one off by {step1:e}"))?;
    Ok(format!("3-step error {worst:.1e}, step one {:.9}", theta.data()[0]))
}

fn checkpoint_roundtrip() -> Outcome {
    let model = build_hybrid::<f32>(&ModelConfig::toy(), &mut Rng::new(21)).map_err(|e| e.to_string())?;
    let mut adam = AdamState::for_model(&model);
    adam.t = 9;
    for m in adam.m.iter_mut() {
        m.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f32).sin());
    }
    let meta = CheckpointMeta {
        epoch: 3,
        seed: 21,
        class_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        ..CheckpointMeta::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    neurodx::model::save_checkpoint(&path, &model, &adam, &meta).map_err(|e| e.to_string())?;
    let (m2, a2, meta2) = neurodx::model::load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&m2, &a2, &meta2).map_err(|e| e.to_string())?;
    let first = fs::read(&path).map_err(|e| e.to_string())?;
    ensure(first == again, || "re-encoded bytes differ".into())?;
    let mut corrupt = first.clone();
    corrupt[3] ^= 0x20;
    let rejected = matches!(decode_checkpoint::<f32>(&corrupt), Err(Error::Format(_)));
    ensure(rejected, || "corrupted magic accepted".into())?;
    Ok(format!("{} bytes identical after save/load/save; bad magic rejected", first.len()))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let root = tempfile::tempdir().expect("tempdir");
    let runs = std::cell::OnceCell::new();
    let get_runs = || runs.get_or_init(|| train_twice(root.path()));

    type Check<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let secs = Duration::from_secs;
    let checks: Vec<Check> = vec![
        ("shape arithmetic", secs(1), Box::new(shape_arithmetic)),
        ("layer census", secs(1), Box::new(layer_census)),
        ("gradient checks", secs(120), Box::new(gradient_checks)),
        ("metric oracle equivalence", secs(30), Box::new(metric_oracle)),
        ("reported per-class counts", secs(1), Box::new(reported_counts_accuracy)),
        ("AUC oracle", secs(30), Box::new(auc_oracle)),
        ("overfit capability", secs(300), Box::new(|| overfit(get_runs().as_ref()?))),
        ("training determinism", secs(600), Box::new(|| determinism(get_runs().as_ref()?))),
        ("Adam reference", secs(1), Box::new(adam_reference)),
        ("checkpoint round-trip", secs(5), Box::new(checkpoint_roundtrip)),
    ];

    let mut failed = 0;
    println!("\nrunning {} acceptance checks", checks.len());
    for (name, budget, check) in &checks {
        let start = Instant::now();
        let result = panic::catch_unwind(panic::AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *budget => Err(format!("{detail}; took longer than {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name} [{:.2} s]: {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} [{:.2} s]: {why}", elapsed.as_secs_f64());
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed\n", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
