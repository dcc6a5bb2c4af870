//! Confusion matrices, one-vs-rest classification metrics, ROC curves, and
//! their CSV export.
//!
//! Any ratio with a zero denominator evaluates to 0 and is listed in the
//! owning [`ClassMetrics::undefined`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// `counts` is row-major `k x k`.
    pub fn new(k: usize, counts: Vec<u64>) -> Result<Self> {
        if k == 0 || counts.len() != k * k {
            return Err(Error::arg(format!(
                "confusion matrix needs {k}x{k} counts, got {}",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::arg("confusion matrix rows must form a square"));
        }
        Self::new(k, rows.concat())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k + predicted]
    }

    pub fn row(&self, actual: usize) -> &[u64] {
        &self.counts[actual * self.k..(actual + 1) * self.k]
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        self.row(actual).iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|a| self.get(a, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::arg(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if k == 0 {
        return Err(Error::arg("need at least one class"));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::arg(format!("class index ({t}, {p}) out of range for {k}")));
        }
        counts[t * k + p] += 1;
    }
    ConfusionMatrix::new(k, counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Names of the ratios above that hit a zero denominator.
    pub undefined: Vec<&'static str>,
}

fn ratio(num: f64, den: f64, name: &'static str, undefined: &mut Vec<&'static str>) -> f64 {
    if den == 0.0 {
        undefined.push(name);
        0.0
    } else {
        num / den
    }
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        let mut undefined = Vec::new();
        let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        let accuracy = ratio(tpf + tnf, tpf + tnf + fpf + fnf, "accuracy", &mut undefined);
        let precision = ratio(tpf, tpf + fpf, "precision", &mut undefined);
        let sensitivity = ratio(tpf, tpf + fnf, "sensitivity", &mut undefined);
        let specificity = ratio(tnf, tnf + fpf, "specificity", &mut undefined);
        let f1 = ratio(
            2.0 * precision * sensitivity,
            precision + sensitivity,
            "f1",
            &mut undefined,
        );
        Self {
            tp,
            tn,
            fp,
            fn_,
            accuracy,
            precision,
            sensitivity,
            specificity,
            f1,
            undefined,
        }
    }
}

fn check_nonempty(cm: &ConfusionMatrix) -> Result<()> {
    if cm.total() == 0 {
        return Err(Error::arg("confusion matrix is all zeros"));
    }
    Ok(())
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>> {
    check_nonempty(cm)?;
    let total = cm.total();
    Ok((0..cm.num_classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let fp = cm.col_sum(c) - tp;
            let fn_ = cm.row_sum(c) - tp;
            ClassMetrics::from_counts(tp, total - tp - fp - fn_, fp, fn_)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallMetrics {
    /// `trace / total`.
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    /// Pooled one-vs-rest counts over all classes.
    pub micro: ClassMetrics,
}

pub fn overall_metrics(cm: &ConfusionMatrix) -> Result<OverallMetrics> {
    let per = per_class_metrics(cm)?;
    let k = per.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / k;
    let pooled = |f: fn(&ClassMetrics) -> u64| per.iter().map(f).sum::<u64>();
    Ok(OverallMetrics {
        accuracy: cm.trace() as f64 / cm.total() as f64,
        macro_precision: mean(|m| m.precision),
        macro_sensitivity: mean(|m| m.sensitivity),
        macro_specificity: mean(|m| m.specificity),
        macro_f1: mean(|m| m.f1),
        micro: ClassMetrics::from_counts(
            pooled(|m| m.tp),
            pooled(|m| m.tn),
            pooled(|m| m.fp),
            pooled(|m| m.fn_),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// From `+inf` (0, 0) down through every distinct score to `-inf` (1, 1).
    pub points: Vec<RocPoint>,
}

/// Binary ROC. AUC is the Mann-Whitney statistic with half credit for ties,
/// computed from average ranks.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> Result<Roc> {
    if scores.len() != positive.len() {
        return Err(Error::arg(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("scores contain NaN"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg(
            "ROC needs at least one positive and one negative sample",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Ascending rank of the group spanning order[start..end] in a descending
    // sort is n - end + 1 ..= n - start; its average gets credited per positive.
    let n = scores.len();
    let mut rank_sum = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut start = 0;
    while start < n {
        let s = scores[order[start]];
        let mut end = start;
        let mut group_pos = 0usize;
        while end < n && scores[order[end]] == s {
            if positive[order[end]] {
                group_pos += 1;
            }
            end += 1;
        }
        let avg_rank = ((n - end + 1) + (n - start)) as f64 / 2.0;
        rank_sum += avg_rank * group_pos as f64;
        tp += group_pos;
        fp += end - start - group_pos;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
        start = end;
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Roc {
        auc: u / (n_pos as f64 * n_neg as f64),
        points,
    })
}

/// One-vs-rest ROC for `class` from a `[n, K]` score matrix.
pub fn roc_auc_ovr<F: Element>(scores: &Tensor<F>, y_true: &[usize], class: usize) -> Result<Roc> {
    if scores.rank() != 2 || scores.shape()[0] != y_true.len() {
        return Err(Error::dim("roc scores", scores.shape(), &[y_true.len()]));
    }
    let k = scores.shape()[1];
    if class >= k {
        return Err(Error::arg(format!("class {class} out of range for {k}")));
    }
    let column: Vec<f64> = (0..y_true.len())
        .map(|i| scores.data()[i * k + class].as_f64())
        .collect();
    let positive: Vec<bool> = y_true.iter().map(|&t| t == class).collect();
    roc_binary(&column, &positive)
}

/// Maps a class name onto a portable file-name fragment.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub const METRICS_HEADER: &str =
    "class,tp,tn,fp,fn,accuracy,precision,sensitivity,specificity,f1,auc,undefined";
pub const ROC_HEADER: &str = "threshold,fpr,tpr";

fn metrics_row(out: &mut String, label: &str, m: &ClassMetrics, auc: Option<f64>) {
    let auc = auc.map(|a| a.to_string()).unwrap_or_default();
    let _ = writeln!(
        out,
        "{label},{},{},{},{},{},{},{},{},{},{auc},{}",
        m.tp,
        m.tn,
        m.fp,
        m.fn_,
        m.accuracy,
        m.precision,
        m.sensitivity,
        m.specificity,
        m.f1,
        m.undefined.join(";")
    );
}

pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let mut out = String::from("actual\\predicted");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (a, name) in class_names.iter().enumerate() {
        out.push_str(name);
        for v in cm.row(a) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Per-class rows, then `macro` (unweighted means) and `micro` (pooled counts).
pub fn metrics_csv(cm: &ConfusionMatrix, class_names: &[String], rocs: &[Option<Roc>]) -> Result<String> {
    let per = per_class_metrics(cm)?;
    let overall = overall_metrics(cm)?;
    let mut out = format!("{METRICS_HEADER}\n");
    for (c, m) in per.iter().enumerate() {
        metrics_row(&mut out, &class_names[c], m, rocs.get(c).and_then(|r| r.as_ref()).map(|r| r.auc));
    }
    let aucs: Vec<f64> = rocs.iter().flatten().map(|r| r.auc).collect();
    let macro_auc = (aucs.len() == per.len()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    let _ = writeln!(
        out,
        "macro,,,,,{},{},{},{},{},{},",
        overall.accuracy,
        overall.macro_precision,
        overall.macro_sensitivity,
        overall.macro_specificity,
        overall.macro_f1,
        macro_auc.map(|a| a.to_string()).unwrap_or_default()
    );
    metrics_row(&mut out, "micro", &overall.micro, None);
    Ok(out)
}

pub fn roc_csv(roc: &Roc) -> String {
    let mut out = format!("{ROC_HEADER}\n");
    for p in &roc.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// Writes `confusion.csv`, `metrics.csv`, and one `roc_<class>.csv` per class
/// that has a curve, returning the written paths.
pub fn export_report(
    cm: &ConfusionMatrix,
    class_names: &[String],
    rocs: &[Option<Roc>],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if class_names.len() != cm.num_classes() || rocs.len() != cm.num_classes() {
        return Err(Error::arg(format!(
            "report for {} classes got {} names and {} curves",
            cm.num_classes(),
            class_names.len(),
            rocs.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("confusion.csv".into(), confusion_csv(cm, class_names))?;
    put("metrics.csv".into(), metrics_csv(cm, class_names, rocs)?)?;
    for (name, roc) in class_names.iter().zip(rocs) {
        if let Some(roc) = roc {
            put(format!("roc_{}.csv", file_stem(name)), roc_csv(roc))?;
        }
    }
    Ok(written)
}

fn csv_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn bad(what: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::arg(format!("{what} line {line}: {msg}"))
}

/// Parses [`confusion_csv`] output into class names and the matrix.
pub fn parse_confusion_csv(text: &str) -> Result<(Vec<String>, ConfusionMatrix)> {
    let mut lines = csv_lines(text);
    let (_, header) = lines.next().ok_or_else(|| Error::arg("confusion csv is empty"))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (n, line) in lines {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        if rows.len() >= names.len() || label != names[rows.len()] {
            return Err(bad("confusion csv", n, format!("unexpected row {label:?}")));
        }
        let row = cells
            .map(|c| c.trim().parse::<u64>().map_err(|e| bad("confusion csv", n, e)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.len() != names.len() {
        return Err(Error::arg(format!(
            "confusion csv has {} rows for {} classes",
            rows.len(),
            names.len()
        )));
    }
    Ok((names, ConfusionMatrix::from_rows(&rows)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = csv_lines(text);
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::arg("metrics csv header missing")),
    }
    lines
        .map(|(n, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 12 {
                return Err(bad("metrics csv", n, format!("{} columns", cells.len())));
            }
            let num = |i: usize| cells[i].parse::<f64>().map_err(|e| bad("metrics csv", n, e));
            Ok(MetricsRow {
                label: cells[0].to_string(),
                accuracy: num(5)?,
                precision: num(6)?,
                sensitivity: num(7)?,
                specificity: num(8)?,
                f1: num(9)?,
                auc: if cells[10].is_empty() { None } else { Some(num(10)?) },
            })
        })
        .collect()
}

pub fn parse_roc_csv(text: &str) -> Result<Vec<RocPoint>> {
    let mut lines = csv_lines(text);
    match lines.next() {
        Some((_, h)) if h == ROC_HEADER => {}
        _ => return Err(Error::arg("roc csv header missing")),
    }
    let points = lines
        .map(|(n, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 3 {
                return Err(bad("roc csv", n, format!("{} columns", cells.len())));
            }
            let num = |i: usize| cells[i].trim().parse::<f64>().map_err(|e| bad("roc csv", n, e));
            let p = RocPoint {
                threshold: num(0)?,
                fpr: num(1)?,
                tpr: num(2)?,
            };
            if !(0.0..=1.0).contains(&p.fpr) || !(0.0..=1.0).contains(&p.tpr) {
                return Err(bad("roc csv", n, "rates must lie in [0, 1]"));
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(Error::arg("roc csv has no points"));
    }
    Ok(points)
}
