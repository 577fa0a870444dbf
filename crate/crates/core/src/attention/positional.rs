use ndarray::{concatenate, Array2, Axis};

use crate::error::{H2tError, Result};

/// Largest representable coordinate (exclusive) and frequency base.
pub const PE_EPSILON: f64 = 10000.0;

/// How positional encodings are combined with instance features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeMode {
    #[default]
    Add,
    Concat,
}

/// 2D sinusoidal encoding of a grid position.
///
/// Components `4j..4j+3` are `sin(x/ε^{4j/d})`, `cos(x/ε^{(4j+1)/d})`,
/// `sin(y/ε^{(4j+2)/d})`, `cos(y/ε^{(4j+3)/d})`.
pub fn positional_encoding(grid_x: u32, grid_y: u32, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(H2tError::invalid(format!(
            "positional encoding dimension {d} is not a positive multiple of 4"
        )));
    }
    if f64::from(grid_x) >= PE_EPSILON || f64::from(grid_y) >= PE_EPSILON {
        return Err(H2tError::invalid(format!(
            "position ({grid_x}, {grid_y}) exceeds the encoding range {PE_EPSILON}"
        )));
    }
    let (x, y) = (f64::from(grid_x), f64::from(grid_y));
    let freq = |c: usize| PE_EPSILON.powf(c as f64 / d as f64);
    let mut out = Vec::with_capacity(d);
    for j in 0..d / 4 {
        let c = 4 * j;
        out.push((x / freq(c)).sin());
        out.push((x / freq(c + 1)).cos());
        out.push((y / freq(c + 2)).sin());
        out.push((y / freq(c + 3)).cos());
    }
    Ok(out)
}

/// One encoding row per position.
pub fn positional_matrix(positions: &[(u32, u32)], d: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((positions.len(), d));
    for (mut row, &(x, y)) in out.rows_mut().into_iter().zip(positions) {
        row.assign(&ndarray::Array1::from(positional_encoding(x, y, d)?));
    }
    Ok(out)
}

/// Adds (same width) or appends (doubling the width) encodings of `positions` to `x`.
pub fn with_positions(x: &Array2<f64>, positions: &[(u32, u32)], mode: PeMode) -> Result<Array2<f64>> {
    if positions.len() != x.nrows() {
        return Err(H2tError::DimensionMismatch {
            expected: x.nrows(),
            found: positions.len(),
        });
    }
    let pe = positional_matrix(positions, x.ncols())?;
    Ok(match mode {
        PeMode::Add => x + &pe,
        PeMode::Concat => concatenate(Axis(1), &[x.view(), pe.view()]).expect("matching row counts"),
    })
}
