use std::collections::BTreeMap;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure_finite, H2tError, Result};

/// p-value used for a strictly positive zero-variance difference (t = +∞).
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub df: usize,
    /// Right-tailed: evidence that `a > b`.
    pub p: f64,
}

/// Paired right-tailed t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(H2tError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(H2tError::invalid("paired t-test needs at least 2 folds"));
    }
    ensure_finite(a.iter().chain(b).copied(), "t-test inputs")?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = d.len() - 1;
    // Differences equal up to rounding count as zero variance.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale {
        warn!("zero-variance fold differences (mean {mean}); using boundary p-value");
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, P_FLOOR)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0 - P_FLOOR)
        } else {
            (0.0, 0.5)
        };
        return Ok(PairedTTest { t, df, p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| H2tError::Internal(e.to_string()))?;
    Ok(PairedTTest { t, df, p: dist.sf(t) })
}

/// Benjamini–Hochberg step-up adjustment (order preserved).
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).expect("finite p-values").then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        // p·m/rank can round below p when rank = m
        adjusted[i] = running.min(1.0).max(p[i]);
    }
    adjusted
}

/// Pairwise right-tailed comparisons; entry `(i, j)` tests `methods[i] > methods[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub methods: Vec<String>,
    /// Row-major M × M; the diagonal is `None`.
    pub raw: Vec<Vec<Option<f64>>>,
    pub adjusted: Vec<Vec<Option<f64>>>,
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl PValueMatrix {
    pub fn adjusted_array(&self) -> Array2<f64> {
        let m = self.methods.len();
        Array2::from_shape_fn((m, m), |(i, j)| self.adjusted[i][j].unwrap_or(f64::NAN))
    }

    /// Adjusted p-values as an aligned text table, rounded to 3 digits.
    pub fn to_text(&self) -> String {
        let w = self.methods.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:w$}", "");
        for m in &self.methods {
            out.push_str(&format!("  {m:>w$}"));
        }
        out.push('\n');
        for (i, m) in self.methods.iter().enumerate() {
            out.push_str(&format!("{m:w$}"));
            for v in &self.adjusted[i] {
                match v {
                    Some(p) => out.push_str(&format!("  {:>w$.3}", round3(*p))),
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Paired right-tailed t-tests over every ordered pair of methods, BH-corrected
/// across all pairs.
pub fn compare_methods(results: &BTreeMap<String, Vec<f64>>) -> Result<PValueMatrix> {
    let methods: Vec<String> = results.keys().cloned().collect();
    let m = methods.len();
    if m < 2 {
        return Err(H2tError::invalid("comparison needs at least 2 methods"));
    }
    let folds = results[&methods[0]].len();
    if let Some((name, v)) = results.iter().find(|(_, v)| v.len() != folds) {
        return Err(H2tError::invalid(format!(
            "method {name:?} has {} fold scores, expected {folds}",
            v.len()
        )));
    }
    let mut raw = vec![vec![None; m]; m];
    let mut flat = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let p = paired_t_test(&results[&methods[i]], &results[&methods[j]])?.p;
                raw[i][j] = Some(p);
                flat.push(p);
            }
        }
    }
    let adj = bh_adjust(&flat);
    let mut adjusted = vec![vec![None; m]; m];
    let mut it = adj.into_iter();
    for (i, row) in adjusted.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            if i != j {
                *cell = it.next();
            }
        }
    }
    Ok(PValueMatrix { methods, raw, adjusted })
}
