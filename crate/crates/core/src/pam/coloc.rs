//! Pattern co-localization matrices.
//!
//! Entry `(i, j)` at radius γ averages, over pattern-i center cells, the number
//! of pattern-j cells inside the Chebyshev ball of radius γ around the center
//! (the center itself excluded). Background cells are neither centers nor
//! neighbors. Per-pattern summed-area tables make each box count O(1).

use ndarray::Array2;

use super::{histogram, PatternAssignmentMap, BACKGROUND};
use crate::error::{H2tError, Result};

/// Which center cells enter the average for entry `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcmMode {
    /// Only pattern-i centers with at least one pattern-j neighbor.
    #[default]
    Surrounded,
    /// Every pattern-i center, including those with no pattern-j neighbor.
    AllCenters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColocalizationMatrix {
    pub values: Array2<f64>,
    pub gamma: u32,
}

/// `(K, h+1, w+1)` inclusive prefix counts per pattern.
struct PrefixCounts {
    w1: usize,
    plane: usize,
    data: Vec<u32>,
}

impl PrefixCounts {
    fn new(pam: &PatternAssignmentMap) -> Self {
        let (w, h) = (pam.width(), pam.height());
        let (w1, h1) = (w + 1, h + 1);
        let plane = w1 * h1;
        let mut data = vec![0u32; pam.k() * plane];
        for y in 0..h {
            for x in 0..w {
                let v = pam.get(x, y);
                for c in 0..pam.k() {
                    let base = c * plane;
                    let here = u32::from(v == c as i32);
                    data[base + (y + 1) * w1 + x + 1] = here
                        + data[base + y * w1 + x + 1]
                        + data[base + (y + 1) * w1 + x]
                        - data[base + y * w1 + x];
                }
            }
        }
        Self { w1, plane, data }
    }

    /// Cells of pattern `c` in columns `x0..x1`, rows `y0..y1` (half-open).
    fn count(&self, c: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let b = c * self.plane;
        let at = |x: usize, y: usize| self.data[b + y * self.w1 + x];
        at(x1, y1) + at(x0, y0) - at(x0, y1) - at(x1, y0)
    }
}

fn check_gamma(gamma: u32) -> Result<()> {
    if gamma == 0 {
        return Err(H2tError::invalid("gamma must be at least 1"));
    }
    Ok(())
}

fn coloc_with(pam: &PatternAssignmentMap, prefix: &PrefixCounts, gamma: u32, mode: PcmMode) -> ColocalizationMatrix {
    let k = pam.k();
    let g = gamma as usize;
    let (w, h) = (pam.width(), pam.height());
    let mut sums = vec![0u64; k * k];
    let mut members = vec![0u64; k * k];
    let mut centers = vec![0u64; k];
    for y in 0..h {
        for x in 0..w {
            let v = pam.get(x, y);
            if v == BACKGROUND {
                continue;
            }
            let i = v as usize;
            centers[i] += 1;
            let (x0, y0) = (x.saturating_sub(g), y.saturating_sub(g));
            let (x1, y1) = ((x + g + 1).min(w), (y + g + 1).min(h));
            for j in 0..k {
                let mut u = prefix.count(j, x0, y0, x1, y1);
                if j == i {
                    u -= 1;
                }
                if u > 0 {
                    sums[i * k + j] += u64::from(u);
                    members[i * k + j] += 1;
                }
            }
        }
    }
    let values = Array2::from_shape_fn((k, k), |(i, j)| {
        let denom = match mode {
            PcmMode::Surrounded => members[i * k + j],
            PcmMode::AllCenters => centers[i],
        };
        if denom == 0 {
            0.0
        } else {
            sums[i * k + j] as f64 / denom as f64
        }
    });
    ColocalizationMatrix { values, gamma }
}

pub fn colocalization(pam: &PatternAssignmentMap, gamma: u32, mode: PcmMode) -> Result<ColocalizationMatrix> {
    check_gamma(gamma)?;
    Ok(coloc_with(pam, &PrefixCounts::new(pam), gamma, mode))
}

/// Co-localization matrices for several radii stacked vertically: (|γ|·K) × K.
pub fn colocalization_stack(pam: &PatternAssignmentMap, gammas: &[u32], mode: PcmMode) -> Result<Array2<f64>> {
    if gammas.is_empty() {
        return Err(H2tError::invalid("at least one gamma is required"));
    }
    for &g in gammas {
        check_gamma(g)?;
    }
    let k = pam.k();
    let prefix = PrefixCounts::new(pam);
    let mut out = Array2::zeros((gammas.len() * k, k));
    for (n, &g) in gammas.iter().enumerate() {
        let m = coloc_with(pam, &prefix, g, mode);
        out.slice_mut(ndarray::s![n * k..(n + 1) * k, ..]).assign(&m.values);
    }
    Ok(out)
}

/// Histogram followed by the flattened co-localization stack, as one row.
pub fn hist_coloc_features(pam: &PatternAssignmentMap, gammas: &[u32], mode: PcmMode) -> Result<Array2<f64>> {
    let hist = histogram(pam)?;
    let stack = colocalization_stack(pam, gammas, mode)?;
    let row: Vec<f64> = hist.into_iter().chain(stack.iter().copied()).collect();
    let n = row.len();
    Ok(Array2::from_shape_vec((1, n), row).expect("1 × n buffer"))
}
