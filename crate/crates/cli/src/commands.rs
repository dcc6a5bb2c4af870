//! The five subcommands. Each takes a resolved [`RunConfig`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use neurodx::data::{decode_image, load_dataset, resize, split, Dataset, Subset};
use neurodx::metrics::{confusion_matrix, export_report, overall_metrics, per_class_metrics, roc_auc_ovr, parse_roc_csv};
use neurodx::model::{build_hybrid, load_checkpoint, save_checkpoint, CheckpointMeta, LayerKind, ModelConfig, ModelGraph, Mode};
use neurodx::optim::{evaluate as evaluate_subset, AdamState, EpochRecord, TrainHooks, TrainReport};
use neurodx::{Rng, Tensor};

use crate::plot::{finite_range, Chart, Series};
use crate::{CliError, RunConfig, SubsetArg};

pub const HISTORY_NAME: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn load_resized(root: &Path, model: &ModelConfig) -> Result<Dataset, CliError> {
    let mut ds = load_dataset(root, model.num_classes)?;
    let [_, h, w] = model.input_shape;
    ds.resize_all(h, w)?;
    Ok(ds)
}

fn train_meta(cfg: &RunConfig, class_names: &[String]) -> CheckpointMeta {
    let t = &cfg.train;
    let mut meta = CheckpointMeta {
        epoch: 0,
        seed: t.seed,
        class_names: class_names.to_vec(),
        ..CheckpointMeta::default()
    };
    for (k, v) in [
        ("train.batch_size", t.batch_size.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.learning_rate", t.learning_rate.to_string()),
        ("train.beta1", t.beta1.to_string()),
        ("train.beta2", t.beta2.to_string()),
        ("train.epsilon", t.epsilon.to_string()),
        ("train.max_rotation_deg", t.max_rotation_deg.to_string()),
        ("train.train_fraction", cfg.train_fraction.to_string()),
        ("train.preset", cfg.preset.clone()),
    ] {
        meta.extra.insert(k.to_string(), v);
    }
    meta
}

/// Keeps `history.csv` current and saves the best epoch so far.
struct RunHooks {
    out: PathBuf,
    meta: CheckpointMeta,
    history: TrainReport,
    best: Option<f64>,
    total_epochs: usize,
}

impl TrainHooks<f32> for RunHooks {
    fn on_epoch_end(
        &mut self,
        record: &EpochRecord,
        model: &ModelGraph<f32>,
        adam: &AdamState<f32>,
    ) -> neurodx::Result<()> {
        info!(
            "epoch {}/{}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4}",
            record.epoch, self.total_epochs, record.train_loss, record.train_acc, record.test_loss, record.test_acc
        );
        self.history.records.push(*record);
        fs::write(self.out.join(HISTORY_NAME), self.history.to_csv())?;
        // Held-out accuracy when there is a test subset, otherwise training accuracy.
        let score = if record.test_acc.is_finite() { record.test_acc } else { record.train_acc };
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            let meta = CheckpointMeta {
                epoch: record.epoch,
                ..self.meta.clone()
            };
            save_checkpoint(self.out.join(BEST_CHECKPOINT), model, adam, &meta)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub history: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

/// load → resize → split → build → train, with history and checkpoints under `out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let data = require(&cfg.data, "--data")?;
    cfg.write_resolved()?;
    if cfg.checkpoint.is_some() {
        warn!("train writes its own checkpoints into {}; --checkpoint is ignored", cfg.out.display());
    }
    let model_cfg = cfg.model_config();
    let ds = split(load_resized(data, &model_cfg)?, cfg.train_fraction, cfg.train.seed)?;
    info!(
        "{} images, {} train / {} test, classes {:?}",
        ds.len(),
        ds.subset_len(Subset::Train),
        ds.subset_len(Subset::Test),
        ds.class_names()
    );
    let mut model = build_hybrid::<f32>(&model_cfg, &mut Rng::new(cfg.train.seed))?;
    let mut adam = AdamState::for_model(&model);
    info!("{} preset, {} parameters", cfg.preset, model.param_count());

    let mut hooks = RunHooks {
        out: cfg.out.clone(),
        meta: train_meta(cfg, ds.class_names()),
        history: TrainReport::default(),
        best: None,
        total_epochs: cfg.train.epochs,
    };
    let report = neurodx::optim::train(&mut model, &mut adam, &ds, &cfg.train, &mut hooks)?;
    let history = cfg.out.join(HISTORY_NAME);
    fs::write(&history, report.to_csv()).map_err(neurodx::Error::from)?;
    let final_checkpoint = cfg.out.join(FINAL_CHECKPOINT);
    let meta = CheckpointMeta {
        epoch: report.records.len(),
        ..hooks.meta.clone()
    };
    save_checkpoint(&final_checkpoint, &model, &adam, &meta)?;
    if let Some(last) = report.records.last() {
        println!(
            "trained {} epochs: train acc {:.4}, test acc {:.4}",
            last.epoch, last.train_acc, last.test_acc
        );
    }
    Ok(TrainOutcome {
        report,
        history,
        final_checkpoint,
        best_checkpoint: hooks.best.map(|_| cfg.out.join(BEST_CHECKPOINT)),
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub files: Vec<PathBuf>,
}

/// Scores a checkpoint on `subset` of the dataset and exports the report tables.
pub fn evaluate(cfg: &RunConfig, subset: SubsetArg) -> Result<EvalOutcome, CliError> {
    let ckpt = require(&cfg.checkpoint, "--checkpoint")?;
    let data = require(&cfg.data, "--data")?;
    cfg.write_resolved()?;
    let (model, _, meta) = load_checkpoint::<f32>(ckpt)?;
    let mut ds = load_resized(data, model.config())?;
    if !meta.class_names.is_empty() && meta.class_names != ds.class_names() {
        warn!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            ds.class_names(),
            meta.class_names
        );
    }
    let frac = meta
        .extra
        .get("train.train_fraction")
        .and_then(|v| v.parse().ok())
        .unwrap_or(cfg.train_fraction);
    let which = match subset {
        SubsetArg::All => {
            ds.tag_all(Subset::Test);
            Subset::Test
        }
        SubsetArg::Train | SubsetArg::Test => {
            ds = split(ds, frac, meta.seed)?;
            if subset == SubsetArg::Train {
                Subset::Train
            } else {
                Subset::Test
            }
        }
    };
    let ev = evaluate_subset(&model, &ds, which, cfg.train.batch_size)?;
    let k = ds.num_classes();
    let cm = confusion_matrix(&ev.y_true, &ev.y_pred, k)?;
    let probs = Tensor::new([ev.y_true.len(), k], ev.probs.clone())?;
    let names = ds.class_names().to_vec();
    let rocs: Vec<_> = (0..k)
        .map(|c| match roc_auc_ovr(&probs, &ev.y_true, c) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("no ROC curve for {}: {e}", names[c]);
                None
            }
        })
        .collect();
    let files = export_report(&cm, &names, &rocs, &cfg.out)?;

    let overall = overall_metrics(&cm)?;
    println!("accuracy: {}", overall.accuracy);
    println!("{} images, loss {:.6}", ev.y_true.len(), ev.loss);
    for ((name, m), roc) in names.iter().zip(per_class_metrics(&cm)?).zip(&rocs) {
        let auc = roc.as_ref().map_or("n/a".to_string(), |r| format!("{:.4}", r.auc));
        println!(
            "{name}: precision {:.4} sensitivity {:.4} specificity {:.4} f1 {:.4} auc {auc}",
            m.precision, m.sensitivity, m.specificity, m.f1
        );
    }
    println!(
        "macro: precision {:.4} sensitivity {:.4} specificity {:.4} f1 {:.4}",
        overall.macro_precision, overall.macro_sensitivity, overall.macro_specificity, overall.macro_f1
    );
    Ok(EvalOutcome {
        accuracy: overall.accuracy,
        files,
    })
}

/// Class probabilities for each image, in the order given.
pub fn predict_probs(model: &ModelGraph<f32>, images: &[PathBuf], batch_size: usize) -> Result<Vec<Vec<f32>>, CliError> {
    let [c, h, w] = model.config().input_shape;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * c * h * w);
        for path in chunk {
            data.extend_from_slice(resize(&decode_image(path)?, h, w)?.data());
        }
        let batch = Tensor::new([chunk.len(), c, h, w], data)?;
        let probs = model.forward(&batch, Mode::Eval)?.probs;
        let k = probs.shape()[1];
        out.extend(probs.data().chunks(k).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// One line per image: path, predicted class, then every class probability.
pub fn predict(cfg: &RunConfig, images: &[PathBuf], write_config: bool) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint, "--checkpoint")?;
    if write_config {
        cfg.write_resolved()?;
    }
    let (model, _, meta) = load_checkpoint::<f32>(ckpt)?;
    let probs = predict_probs(&model, images, cfg.train.batch_size)?;
    for (path, row) in images.iter().zip(probs) {
        let best = neurodx::optim::argmax(&row);
        let name = meta.class_names.get(best).cloned().unwrap_or_else(|| format!("class{best}"));
        let cols: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        println!("{}\t{name}\t{}", path.display(), cols.join("\t"));
    }
    Ok(())
}

fn shape_text(shape: &[usize]) -> String {
    // Channel-first maps read height x width x channels.
    let dims: Vec<usize> = match shape {
        [c, h, w] => vec![*h, *w, *c],
        other => other.to_vec(),
    };
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Layer table and totals for `config`.
pub fn inspect_table(config: &ModelConfig) -> Result<String, CliError> {
    let specs = config.plan()?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:<9} {:>14} {:>12}", "layer", "kind", "output", "params");
    let mut total = 0;
    let mut census = [0usize; 4];
    for spec in &specs {
        let params = spec.kind.param_count();
        total += params;
        match spec.kind {
            LayerKind::Conv { .. } => census[0] += 1,
            LayerKind::MaxPool => census[1] += 1,
            LayerKind::Lstm { .. } => census[2] += 1,
            LayerKind::Dense { .. } => census[3] += 1,
            _ => {}
        }
        let _ = writeln!(
            s,
            "{:<18} {:<9} {:>14} {:>12}",
            spec.name,
            spec.kind.label(),
            shape_text(&spec.output_shape),
            params
        );
    }
    let fm = config.feature_map();
    let (steps, features) = config.sequence_shape();
    let _ = writeln!(s);
    let _ = writeln!(s, "input            {}", shape_text(&config.input_shape));
    let _ = writeln!(s, "feature map      {}", shape_text(&fm));
    let _ = writeln!(s, "flatten          {}", fm.iter().product::<usize>());
    let _ = writeln!(s, "lstm sequence    {steps} steps x {features} features ({})", config.sequence_mode);
    let _ = writeln!(s, "conv layers      {}", census[0]);
    let _ = writeln!(s, "pool layers      {}", census[1]);
    let _ = writeln!(s, "lstm layers      {}", census[2]);
    let _ = writeln!(s, "dense layers     {}", census[3]);
    let _ = writeln!(s, "total params     {total}");
    Ok(s)
}

pub fn inspect(cfg: &RunConfig, write_config: bool) -> Result<(), CliError> {
    if write_config {
        cfg.write_resolved()?;
    }
    let config = match &cfg.checkpoint {
        Some(path) => load_checkpoint::<f32>(path)?.0.config().clone(),
        None => cfg.model_config(),
    };
    print!("{}", inspect_table(&config)?);
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Accuracy and loss curves from a history table, ROC overlay from ROC tables.
pub fn plot(cfg: &RunConfig, history: Option<&Path>, rocs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    if history.is_none() && rocs.is_empty() {
        return Err(CliError::Usage("plot needs --history and/or --roc".into()));
    }
    // Parse everything before writing anything.
    let report = history.map(|p| TrainReport::from_csv(&read_text(p)?).map_err(CliError::from)).transpose()?;
    let curves = rocs
        .iter()
        .map(|p| {
            let pts = parse_roc_csv(&read_text(p)?)?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = stem.strip_prefix("roc_").unwrap_or(&stem).to_string();
            Ok(Series {
                name,
                points: pts.iter().map(|q| (q.fpr, q.tpr)).collect(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    cfg.write_resolved()?;
    let mut written = Vec::new();
    let mut emit = |name: &str, chart: Chart| -> Result<(), CliError> {
        let path = cfg.out.join(name);
        fs::write(&path, chart.render()).map_err(neurodx::Error::from)?;
        written.push(path);
        Ok(())
    };
    if let Some(report) = report {
        let r = &report.records;
        let epochs = finite_range(r.iter().map(|e| e.epoch as f64), false);
        let series = |name: &str, f: fn(&EpochRecord) -> f64| Series {
            name: name.into(),
            points: r.iter().map(|e| (e.epoch as f64, f(e))).collect(),
        };
        emit(
            "accuracy.svg",
            Chart {
                title: "Training and test accuracy".into(),
                x_label: "epoch".into(),
                y_label: "accuracy".into(),
                x_range: epochs,
                y_range: (0.0, 1.0),
                series: vec![series("train", |e| e.train_acc), series("test", |e| e.test_acc)],
                diagonal: false,
            },
        )?;
        emit(
            "loss.svg",
            Chart {
                title: "Training and test loss".into(),
                x_label: "epoch".into(),
                y_label: "cross-entropy".into(),
                x_range: epochs,
                y_range: finite_range(r.iter().flat_map(|e| [e.train_loss, e.test_loss]), true),
                series: vec![series("train", |e| e.train_loss), series("test", |e| e.test_loss)],
                diagonal: false,
            },
        )?;
    }
    if !curves.is_empty() {
        emit(
            "roc.svg",
            Chart {
                title: "ROC (one vs rest)".into(),
                x_label: "false positive rate".into(),
                y_label: "true positive rate".into(),
                x_range: (0.0, 1.0),
                y_range: (0.0, 1.0),
                series: curves,
                diagonal: true,
            },
        )?;
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}
