use log::warn;
use ndarray::Array2;

use crate::error::{ensure_finite, H2tError, Result};

fn check_pair(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(H2tError::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    ensure_finite(scores.iter().copied(), "metric scores")
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups_desc(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Twice the Mann–Whitney U statistic of the positives (an integer: wins
/// count 2, ties 1) and the number of positive/negative pairs.
pub fn mann_whitney_u2(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    check_pair(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(H2tError::invalid("AUROC needs both classes present"));
    }
    // Walk from the lowest score upward; negatives seen so far are beaten.
    let mut groups = tie_groups_desc(scores);
    groups.reverse();
    let mut neg_below = 0u64;
    let mut u2 = 0u64;
    for g in groups {
        let p = g.iter().filter(|&&i| labels[i]).count() as u64;
        let n = g.len() as u64 - p;
        u2 += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok((u2, pos * neg))
}

/// Area under the ROC curve: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (u2, pairs) = mann_whitney_u2(scores, labels)?;
    Ok(u2 as f64 / (2 * pairs) as f64)
}

/// Step-wise average precision `Σ (R_k − R_{k−1}) P_k` over descending
/// distinct score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pair(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(H2tError::invalid("average precision needs at least one positive"));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut weighted = 0.0;
    for g in tie_groups_desc(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += g.len();
        if p > 0 {
            weighted += p as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(weighted / total_pos as f64)
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(H2tError::invalid("mAP over no classes"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// One-vs-rest metric per class from an `n × C` score matrix. Classes with
/// no positives (or no negatives) are skipped with a warning.
fn one_vs_rest(
    scores: &Array2<f64>,
    labels: &[usize],
    metric: fn(&[f64], &[bool]) -> Result<f64>,
    name: &str,
) -> Result<Vec<f64>> {
    if scores.nrows() != labels.len() {
        return Err(H2tError::DimensionMismatch {
            expected: scores.nrows(),
            found: labels.len(),
        });
    }
    let mut out = Vec::new();
    for c in 0..scores.ncols() {
        let col = scores.column(c).to_vec();
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match metric(&col, &bin) {
            Ok(v) => out.push(v),
            Err(e) => warn!("{name}: class {c} skipped: {e}"),
        }
    }
    if out.is_empty() {
        return Err(H2tError::invalid(format!("{name}: no class has both positives and negatives")));
    }
    Ok(out)
}

pub fn macro_auroc(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    mean_ap(&one_vs_rest(scores, labels, auroc, "macro AUROC")?)
}

/// Mean of one-vs-rest APs over classes present in `labels`.
pub fn macro_ap(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    mean_ap(&one_vs_rest(scores, labels, average_precision, "mAP")?)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(H2tError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(H2tError::invalid("Pearson correlation needs at least 2 points"));
    }
    ensure_finite(a.iter().chain(b).copied(), "Pearson inputs")?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(H2tError::invalid("Pearson correlation of a zero-variance input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
