//! Feature-difference and quality metrics.
//!
//! All accumulation happens sequentially in f64 so results do not depend on
//! thread count or feature flags.

use crate::error::{Error, Result};

use super::tensor::Tensor2D;

/// Relative L1 distance between `a` and reference `b`, both flattened:
/// `sum |a_i - b_i| / sum |b_i|`.
pub fn l1_rel(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    a.check_shape(b, "l1_rel")?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        num += (x as f64 - y as f64).abs();
        den += (y as f64).abs();
    }
    if den == 0.0 {
        return Err(Error::ZeroReferenceNorm { context: "l1_rel" });
    }
    Ok(num / den)
}

/// Pearson correlation of two equal-length sequences.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::DegenerateSequence { context: "pearson" });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::DegenerateSequence { context: "pearson" });
    }
    Ok(num / (dx * dy).sqrt())
}

/// Fractional ranks with average tie handling, 1-based.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1..=j+1 share the same value; assign their mean rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average tie handling: the Pearson
/// correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::DegenerateSequence { context: "spearman" });
    }
    for v in x.iter().chain(y) {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "spearman" });
        }
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    // Identical or mirrored rank vectors hit +/-1 exactly; going through the
    // Pearson quotient would lose the last ulp to sqrt rounding.
    if rx == ry {
        if rx.iter().all(|&r| r == rx[0]) {
            return Err(Error::DegenerateSequence { context: "spearman" });
        }
        return Ok(1.0);
    }
    let n1 = x.len() as f64 + 1.0;
    if rx.iter().zip(&ry).all(|(&a, &b)| a + b == n1) {
        return Ok(-1.0);
    }
    pearson(&rx, &ry).map_err(|e| match e {
        Error::DegenerateSequence { .. } => Error::DegenerateSequence { context: "spearman" },
        other => other,
    })
}

/// Peak signal-to-noise ratio in dB against `reference`, whose dynamic range
/// supplies the peak. Returns `f64::INFINITY` when the tensors agree exactly.
pub fn psnr(a: &Tensor2D, reference: &Tensor2D) -> Result<f64> {
    a.check_shape(reference, "psnr")?;
    let n = a.data().len() as f64;
    let mut mse = 0.0f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&x, &y) in a.data().iter().zip(reference.data()) {
        let d = x as f64 - y as f64;
        mse += d * d;
        lo = lo.min(y as f64);
        hi = hi.max(y as f64);
    }
    mse /= n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let range = hi - lo;
    if range == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok(10.0 * ((range * range) / mse).log10())
}

/// Mean structural similarity over uniform square windows on the token grid.
///
/// Tokens are laid out row-major on a `grid_h x grid_w` grid; each channel is
/// scored independently over every valid window position and the per-channel
/// means are averaged. Stabilisers follow the usual convention,
/// `C1 = (0.01 L)^2` and `C2 = (0.03 L)^2` with `L` the reference range.
pub fn ssim(
    a: &Tensor2D,
    reference: &Tensor2D,
    grid_h: usize,
    grid_w: usize,
    window: usize,
) -> Result<f64> {
    a.check_shape(reference, "ssim")?;
    if grid_h * grid_w != a.rows() {
        return Err(Error::BadGrid {
            grid_h,
            grid_w,
            tokens: a.rows(),
        });
    }
    if window == 0 || window.is_multiple_of(2) || window > grid_h.min(grid_w) {
        return Err(Error::BadWindow {
            window,
            grid_h,
            grid_w,
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in reference.data() {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    // A constant reference leaves no natural range; fall back to a unit peak
    // so identical tensors still score exactly 1.
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);

    let cols = a.cols();
    let patch_n = (window * window) as f64;
    let mut channel_sum = 0.0f64;
    for ch in 0..cols {
        let mut patch_sum = 0.0f64;
        let mut patches = 0usize;
        for top in 0..=(grid_h - window) {
            for left in 0..=(grid_w - window) {
                let mut sa = 0.0f64;
                let mut sr = 0.0f64;
                for dy in 0..window {
                    for dx in 0..window {
                        let tok = (top + dy) * grid_w + (left + dx);
                        sa += a.data()[tok * cols + ch] as f64;
                        sr += reference.data()[tok * cols + ch] as f64;
                    }
                }
                let ma = sa / patch_n;
                let mr = sr / patch_n;
                let mut va = 0.0f64;
                let mut vr = 0.0f64;
                let mut cov = 0.0f64;
                for dy in 0..window {
                    for dx in 0..window {
                        let tok = (top + dy) * grid_w + (left + dx);
                        let da = a.data()[tok * cols + ch] as f64 - ma;
                        let dr = reference.data()[tok * cols + ch] as f64 - mr;
                        va += da * da;
                        vr += dr * dr;
                        cov += da * dr;
                    }
                }
                va /= patch_n;
                vr /= patch_n;
                cov /= patch_n;
                patch_sum += ((2.0 * ma * mr + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mr * mr + c1) * (va + vr + c2));
                patches += 1;
            }
        }
        channel_sum += patch_sum / patches as f64;
    }
    Ok(channel_sum / cols as f64)
}
