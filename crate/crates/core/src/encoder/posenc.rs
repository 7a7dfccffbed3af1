//! Fixed sinusoidal position tables.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosKind {
    OneD,
    TwoD,
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn sinusoid_1d(positions: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("1d positional encoding needs an even dim, got {d}")));
    }
    let mut out = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// Row-major grid: each cell is `[1d(row; d/2) ‖ 1d(col; d/2)]`.
pub fn sinusoid_2d(rows: usize, cols: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("2d positional encoding needs dim divisible by 4, got {d}")));
    }
    let half = d / 2;
    let row_pe = sinusoid_1d(rows, half)?;
    let col_pe = sinusoid_1d(cols, half)?;
    let mut out = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&row_pe[r * half..(r + 1) * half]);
            out.extend_from_slice(&col_pe[c * half..(c + 1) * half]);
        }
    }
    Ok(out)
}

/// Table of shape `[T, d]`; `grid` is `[T]` for 1d and `[rows, cols]` for 2d.
pub fn positional_encoding<F: Float>(kind: PosKind, grid: &[usize], d: usize) -> Result<Tensor<F>> {
    let (t, data) = match (kind, grid) {
        (PosKind::OneD, &[n]) => (n, sinusoid_1d(n, d)?),
        (PosKind::TwoD, &[r, c]) => (r * c, sinusoid_2d(r, c, d)?),
        _ => return Err(Error::Config(format!("grid {grid:?} does not match {kind:?}"))),
    };
    Tensor::from_f64_slice(&[t, d], &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        let pe = sinusoid_1d(1, 8).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe2 = sinusoid_2d(2, 3, 8).unwrap();
        assert_eq!(&pe2[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_one_dim_four() {
        let pe = sinusoid_1d(2, 4).unwrap();
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe[4..].iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn two_d_cell_concatenates_row_and_column() {
        let d = 8;
        let pe = sinusoid_2d(3, 4, d).unwrap();
        let row = sinusoid_1d(3, d / 2).unwrap();
        let col = sinusoid_1d(4, d / 2).unwrap();
        // cell (2, 1)
        let cell = &pe[(2 * 4 + 1) * d..(2 * 4 + 2) * d];
        assert_eq!(&cell[..4], &row[2 * 4..3 * 4]);
        assert_eq!(&cell[4..], &col[4..8]);
    }

    #[test]
    fn divisibility_errors() {
        assert!(sinusoid_2d(2, 2, 6).is_err());
        assert!(sinusoid_1d(2, 3).is_err());
        assert!(positional_encoding::<f32>(PosKind::TwoD, &[4], 8).is_err());
    }
}
