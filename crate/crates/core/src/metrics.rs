//! Binary classification metrics and average-rank aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Which pipeline output a score comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// ECG meta prediction alone.
    SingleEcg,
    /// EHR meta prediction alone.
    SingleEhr,
    /// Stacked level predictions of both modalities.
    OnlyM1,
    /// Cross-modal attention head.
    OnlyM2,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SingleEcg,
        Variant::SingleEhr,
        Variant::OnlyM1,
        Variant::OnlyM2,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SingleEcg => "single_ecg",
            Variant::SingleEhr => "single_ehr",
            Variant::OnlyM1 => "only_m1",
            Variant::OnlyM2 => "only_m2",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LemofError::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(LemofError::dim(
            "metrics",
            (scores.len(), 1),
            (labels.len(), 1),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(LemofError::Data(format!("score is {s}")));
    }
    let mut pos = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => pos += 1,
            other => return Err(LemofError::Data(format!("label {other} is not binary"))),
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(LemofError::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// sharing their mean rank.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Confusion-matrix summary at a fixed threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub acc: f64,
}

/// Scores at or above `threshold` count as positive predictions. F1 is 0
/// when precision and recall are both 0.
pub fn threshold_metrics(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ThresholdMetrics> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(LemofError::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ThresholdMetrics {
        precision,
        recall,
        f1,
        acc: ratio(tp + tn, scores.len()),
    })
}

/// `(f1, acc)` at `threshold`.
pub fn f1_and_acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let m = threshold_metrics(scores, labels, threshold)?;
    Ok((m.f1, m.acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: Variant,
    pub acc: f64,
    pub auroc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn evaluate(
    variant: Variant,
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    seed: u64,
) -> Result<MetricsRecord> {
    let auc = auroc(scores, labels)?;
    let (f1, acc) = f1_and_acc(scores, labels, threshold)?;
    Ok(MetricsRecord {
        variant,
        acc,
        auroc: auc,
        f1,
        threshold,
        n: scores.len(),
        seed,
    })
}

/// Ranks `values` so that rank 1 is best; ties share their mean rank.
fn rank_column(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if higher_is_better {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Methods × settings scores with the per-method average rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub settings: Vec<String>,
    /// `scores[method][setting]`.
    pub scores: Vec<Vec<f64>>,
    pub higher_is_better: bool,
    pub average_rank: Vec<f64>,
}

impl RankTable {
    pub fn new(
        methods: Vec<String>,
        settings: Vec<String>,
        scores: Vec<Vec<Option<f64>>>,
        higher_is_better: bool,
    ) -> Result<Self> {
        if scores.len() != methods.len() {
            return Err(LemofError::Data(format!(
                "{} methods but {} score rows",
                methods.len(),
                scores.len()
            )));
        }
        let average_rank = average_rank(&scores, higher_is_better)?;
        let scores = scores
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|v| v.expect("checked by average_rank"))
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>();
        if scores.first().map_or(0, Vec::len) != settings.len() {
            return Err(LemofError::Data(format!(
                "{} settings named but scores disagree",
                settings.len()
            )));
        }
        Ok(RankTable {
            methods,
            settings,
            scores,
            higher_is_better,
            average_rank,
        })
    }
}

/// Average rank per method over settings, from `scores[method][setting]`.
/// A `None` cell is a data error.
pub fn average_rank(scores: &[Vec<Option<f64>>], higher_is_better: bool) -> Result<Vec<f64>> {
    let methods = scores.len();
    if methods == 0 {
        return Err(LemofError::Data("rank table has no methods".into()));
    }
    let settings = scores[0].len();
    if settings == 0 {
        return Err(LemofError::Data("rank table has no settings".into()));
    }
    let mut totals = vec![0.0; methods];
    for s in 0..settings {
        let mut column = Vec::with_capacity(methods);
        for (m, row) in scores.iter().enumerate() {
            if row.len() != settings {
                return Err(LemofError::Data(format!(
                    "method {m} has {} settings, expected {settings}",
                    row.len()
                )));
            }
            match row[s] {
                Some(v) if !v.is_nan() => column.push(v),
                _ => {
                    return Err(LemofError::Data(format!(
                        "missing score for method {m}, setting {s}"
                    )))
                }
            }
        }
        for (t, r) in totals
            .iter_mut()
            .zip(rank_column(&column, higher_is_better))
        {
            *t += r;
        }
    }
    Ok(totals.into_iter().map(|t| t / settings as f64).collect())
}

/// Mean metrics of one variant over several runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub acc: f64,
    pub auroc: f64,
    pub f1: f64,
    pub runs: usize,
}

/// Per-variant means, in [`Variant::ALL`] order, over every variant present.
pub fn summarize(records: &[MetricsRecord]) -> Vec<VariantSummary> {
    Variant::ALL
        .into_iter()
        .filter_map(|variant| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.variant == variant).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            let mean = |f: fn(&MetricsRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(VariantSummary {
                variant,
                acc: mean(|r| r.acc),
                auroc: mean(|r| r.auroc),
                f1: mean(|r| r.f1),
                runs: rs.len(),
            })
        })
        .collect()
}
