use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};

/// Lowest encoding frequency, one period per 20 m.
pub const OMEGA_MIN: f64 = std::f64::consts::TAU / 20.0;
/// Highest encoding frequency, one period per 5 cm.
pub const OMEGA_MAX: f64 = std::f64::consts::TAU / 0.05;

/// Absolute sinusoidal encoding of 3D coordinates into `d` channels.
///
/// Each axis gets `d/6` sine channels followed by `d/6` cosine channels at
/// geometrically spaced frequencies between [`OMEGA_MIN`] and [`OMEGA_MAX`];
/// the three axis blocks are concatenated x, y, z.
pub fn sinusoidal_encode(coords: &[Vector3<f64>], d: usize) -> Result<DMatrix<f64>> {
    if d == 0 || !d.is_multiple_of(6) {
        return Err(Error::InvalidArgument(format!(
            "encoding width {d} is not a positive multiple of 6"
        )));
    }
    let per = d / 6;
    let freqs: Vec<f64> = (0..per)
        .map(|k| {
            if per == 1 {
                OMEGA_MIN
            } else {
                OMEGA_MIN * (OMEGA_MAX / OMEGA_MIN).powf(k as f64 / (per - 1) as f64)
            }
        })
        .collect();
    let mut out = DMatrix::zeros(coords.len(), d);
    for (row, c) in coords.iter().enumerate() {
        for axis in 0..3 {
            let base = axis * 2 * per;
            for (k, w) in freqs.iter().enumerate() {
                let (s, co) = (w * c[axis]).sin_cos();
                out[(row, base + k)] = s;
                out[(row, base + per + k)] = co;
            }
        }
    }
    Ok(out)
}
