//! Classification metrics: confusion matrix, macro precision, specificity
//! and F1, unweighted Cohen's kappa, one-vs-rest ROC AUC.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("no class has both positive and negative samples")]
    NoValidClass,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for label in [truth, pred] {
            if label >= self.classes {
                return Err(MetricsError::LabelOutOfRange { label, classes: self.classes });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(MetricsError::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self { classes, counts: rows.concat() })
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Confusion> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Invalid(format!("{} labels but {} predictions", y_true.len(), y_pred.len())));
    }
    let mut m = Confusion::new(classes);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m.add(t, p)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// The class occurs neither in the truth nor in the predictions.
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(m: &Confusion) -> Result<ClassificationMetrics> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::EmptyConfusion);
    }
    let per_class: Vec<ClassMetrics> = (0..m.classes())
        .map(|c| {
            let tp = m.get(c, c);
            let fp = m.col_sum(c) - tp;
            let fn_ = m.row_sum(c) - tp;
            let tn = total - tp - fp - fn_;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics {
                precision,
                recall,
                specificity: ratio(tn, tn + fp),
                f1,
                absent: m.row_sum(c) == 0 && m.col_sum(c) == 0,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(ClassificationMetrics {
        accuracy: ratio(m.trace(), total),
        macro_precision: mean(|c| c.precision),
        macro_specificity: mean(|c| c.specificity),
        macro_f1: mean(|c| c.f1),
        per_class,
    })
}

/// Unweighted Cohen's kappa; 0 when chance agreement is 1.
pub fn cohen_kappa(m: &Confusion) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::EmptyConfusion);
    }
    let n = total as f64;
    let po = m.trace() as f64 / n;
    let pe: f64 = (0..m.classes()).map(|c| (m.row_sum(c) as f64 / n) * (m.col_sum(c) as f64 / n)).sum();
    if pe >= 1.0 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC by the Mann–Whitney rank sum. `None` unless both
/// classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    /// One entry per class; `None` where the class lacks positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: f64,
}

/// One-vs-rest AUC per class from row-major `scores[n × classes]`,
/// macro-averaged over classes with both positives and negatives.
pub fn auc_ovr(scores: &[f64], y_true: &[usize], classes: usize) -> Result<AucReport> {
    if scores.len() != y_true.len() * classes {
        return Err(MetricsError::Invalid(format!(
            "{} scores for {} samples of {classes} classes",
            scores.len(),
            y_true.len()
        )));
    }
    if let Some(&label) = y_true.iter().find(|&&y| y >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::Invalid("non-finite score".into()));
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().skip(c).step_by(classes).copied().collect();
            let pos: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
            binary_auc(&col, &pos)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(MetricsError::NoValidClass);
    }
    Ok(AucReport { macro_auc: valid.iter().sum::<f64>() / valid.len() as f64, per_class })
}

/// Row-wise softmax of `logits[n × classes]`.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_specificity: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    /// `None` when no class has both positives and negatives.
    pub macro_auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Scores are softmax probabilities `[n × classes]`, row-major.
    pub fn from_probabilities(probs: &[f64], y_true: &[usize], classes: usize) -> Result<Self> {
        let preds: Vec<usize> = probs.chunks(classes).map(argmax).collect();
        let confusion = confusion_matrix(y_true, &preds, classes)?;
        let cm = classification_metrics(&confusion)?;
        let macro_auc = match auc_ovr(probs, y_true, classes) {
            Ok(a) => Some(a.macro_auc),
            Err(MetricsError::NoValidClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            accuracy: cm.accuracy,
            macro_precision: cm.macro_precision,
            macro_specificity: cm.macro_specificity,
            kappa: cohen_kappa(&confusion)?,
            macro_f1: cm.macro_f1,
            macro_auc,
            per_class: cm.per_class,
            confusion,
        })
    }

    /// `acc,prec,spec,kappa,f1,auc` as percentages with two decimals, a
    /// blank line, then `grade,prec,spec,f1` per class.
    pub fn to_csv(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let mut s = String::from("acc,prec,spec,kappa,f1,auc\n");
        let auc = self.macro_auc.map(pct).unwrap_or_else(|| "nan".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{auc}",
            pct(self.accuracy),
            pct(self.macro_precision),
            pct(self.macro_specificity),
            pct(self.kappa),
            pct(self.macro_f1)
        );
        s.push_str("\ngrade,prec,spec,f1\n");
        for (g, c) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{g},{},{},{}", pct(c.precision), pct(c.specificity), pct(c.f1));
        }
        s
    }
}

/// Parsed form of [`MetricsReport::to_csv`], in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvReport {
    pub summary: [f64; 6],
    pub per_class: Vec<[f64; 3]>,
}

pub fn parse_report_csv(text: &str) -> Result<CsvReport> {
    let bad = |m: &str| MetricsError::Invalid(format!("report csv: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("acc,prec,spec,kappa,f1,auc") {
        return Err(bad("missing summary header"));
    }
    let nums = |line: &str| -> Result<Vec<f64>> {
        line.split(',').map(|f| f.trim().parse::<f64>().map_err(|_| bad(&format!("bad number {f:?}")))).collect()
    };
    let row = nums(lines.next().ok_or_else(|| bad("missing summary row"))?)?;
    let summary: [f64; 6] = row.try_into().map_err(|_| bad("summary row needs 6 fields"))?;
    let mut per_class = Vec::new();
    let mut in_block = false;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if line == "grade,prec,spec,f1" {
            in_block = true;
            continue;
        }
        if !in_block {
            return Err(bad("unexpected line before per-class header"));
        }
        let v = nums(line)?;
        if v.len() != 4 || v[0] as usize != per_class.len() {
            return Err(bad(&format!("bad per-class row {line:?}")));
        }
        per_class.push([v[1], v[2], v[3]]);
    }
    Ok(CsvReport { summary, per_class })
}
