use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Scalar, Tape, Var};

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst > 1 { i as f64 * (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
            let lo = (Float::floor(pos) as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Row-major `[h2·w2 × h·w]` matrix of corner-aligned bilinear weights.
pub fn bilinear_matrix(from: (usize, usize), to: (usize, usize)) -> Result<Vec<f64>> {
    let ((h, w), (h2, w2)) = (from, to);
    if h == 0 || w == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::InvalidShape { shape: vec![h, w, h2, w2], reason: "resize sizes must be positive".into() });
    }
    let (ys, xs) = (axis_weights(h, h2), axis_weights(w, w2));
    let mut m = vec![0.0; h2 * w2 * h * w];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let row = &mut m[(oy * w2 + ox) * h * w..][..h * w];
            row[y0 * w + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * w + x1] += (1.0 - fy) * fx;
            row[y1 * w + x0] += fy * (1.0 - fx);
            row[y1 * w + x1] += fy * fx;
        }
    }
    Ok(m)
}

/// Channel-wise bilinear resize of a `[H, W, D]` grid. Equal sizes return
/// `grid` itself.
pub fn bilinear_resize<S: Scalar>(tape: &mut Tape<S>, grid: Var, to: (usize, usize)) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape { shape: s, reason: "resize expects [H, W, D]".into() });
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    if (h, w) == to {
        return Ok(grid);
    }
    let m = bilinear_matrix((h, w), to)?;
    let m = tape.constant_from(&[to.0 * to.1, h * w], m.into_iter().map(S::of).collect())?;
    let flat = tape.reshape(grid, &[h * w, d])?;
    let out = tape.matmul(m, flat)?;
    tape.reshape(out, &[to.0, to.1, d])
}
