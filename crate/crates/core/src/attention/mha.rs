use ndarray::{concatenate, Array2, Axis};

use crate::error::{ensure_finite, H2tError, Result};

/// Projections of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// d_q × d_e
    pub w_q: Array2<f64>,
    /// d_k × d_e
    pub w_k: Array2<f64>,
    /// d_v × d_e
    pub w_v: Array2<f64>,
}

impl HeadWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Array2::eye(d),
            w_k: Array2::eye(d),
            w_v: Array2::eye(d),
        }
    }

    fn d_e(&self) -> usize {
        self.w_q.ncols()
    }
}

/// A multi-head attention layer with keys and values taken from the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub heads: Vec<HeadWeights>,
    /// (h·d_e) × d_out head-combination weight.
    pub w_l: Array2<f64>,
    /// Score scale; `None` uses `1/√d_k` with d_k the key width.
    pub beta: Option<f64>,
}

impl AttentionConfig {
    /// Single head, all projections the identity.
    pub fn identity(d: usize, beta: Option<f64>) -> Self {
        Self {
            heads: vec![HeadWeights::identity(d)],
            w_l: Array2::eye(d),
            beta,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn beta_for(&self, d_k: usize) -> f64 {
        self.beta.unwrap_or(1.0 / (d_k as f64).sqrt())
    }

    /// Checks shapes for queries of width `d_q` and keys/values of width `d_y`.
    pub fn validate(&self, d_q: usize, d_y: usize) -> Result<()> {
        let Some(first) = self.heads.first() else {
            return Err(H2tError::invalid("attention needs at least one head"));
        };
        let d_e = first.d_e();
        for (i, h) in self.heads.iter().enumerate() {
            let shapes = [
                ("W_Q", h.w_q.dim(), (d_q, d_e)),
                ("W_K", h.w_k.dim(), (d_y, d_e)),
                ("W_V", h.w_v.dim(), (d_y, d_e)),
            ];
            for (name, got, want) in shapes {
                if got != want {
                    return Err(H2tError::invalid(format!(
                        "head {i} {name} has shape {got:?}, expected {want:?}"
                    )));
                }
            }
        }
        if self.w_l.nrows() != self.heads.len() * d_e {
            return Err(H2tError::invalid(format!(
                "W_L has {} rows, expected h·d_e = {}",
                self.w_l.nrows(),
                self.heads.len() * d_e
            )));
        }
        if let Some(b) = self.beta {
            if !(b.is_finite() && b >= 0.0) {
                return Err(H2tError::invalid(format!("beta must be finite and non-negative, got {b}")));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// M × N attention matrix `softmax(β R W_Q W_Kᵀ Yᵀ)` of one head.
pub fn attention_weights(r: &Array2<f64>, y: &Array2<f64>, head: &HeadWeights, beta: f64) -> Array2<f64> {
    let q = r.dot(&head.w_q);
    let k = y.dot(&head.w_k);
    let mut s = q.dot(&k.t());
    s.mapv_inplace(|v| beta * v);
    softmax_rows(&mut s);
    s
}

/// `Concat_h(softmax(β R W_Q,h W_K,hᵀ Yᵀ) Y W_V,h) W_L`.
pub fn mha_forward(r: &Array2<f64>, y: &Array2<f64>, config: &AttentionConfig) -> Result<Array2<f64>> {
    if y.nrows() == 0 {
        return Err(H2tError::invalid("attention over an empty input"));
    }
    config.validate(r.ncols(), y.ncols())?;
    ensure_finite(r.iter().copied(), "attention queries")?;
    ensure_finite(y.iter().copied(), "attention inputs")?;
    let beta = config.beta_for(y.ncols());
    let per_head: Vec<Array2<f64>> = config
        .heads
        .iter()
        .map(|h| attention_weights(r, y, h, beta).dot(&y.dot(&h.w_v)))
        .collect();
    let views: Vec<_> = per_head.iter().map(|a| a.view()).collect();
    let cat = concatenate(Axis(1), &views).expect("heads share the query count");
    let out = cat.dot(&config.w_l);
    ensure_finite(out.iter().copied(), "attention output")?;
    Ok(out)
}
