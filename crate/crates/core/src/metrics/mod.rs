//! Reconstruction quality: PSNR, SSIM and a grid-aligned blockiness ratio.

mod report;

pub use report::{evaluate, format_value, list_images, EvalOptions, Metric, MetricReport, MetricRow, SSIM_VARIANT};

use crate::error::{Error, Result};
use crate::tensorcore::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("comparing {} with {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let sum = a.data().iter().zip(b.data()).fold(0.0, |acc, (&x, &y)| {
        let d = x.as_f64() - y.as_f64();
        acc + d * d
    });
    Ok(sum / a.numel() as f64)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::config(format!("PSNR peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalised 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(k, &g)| g * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(k, &g)| g * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over all planes, using an 11x11 Gaussian
/// window (sigma 1.5) evaluated at every fully-contained position.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::geometry(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let win = gaussian_window();
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let pa: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (mu_a, oh, ow) = filter_valid(&pa, s.h, s.w, &win);
        let (mu_b, ..) = filter_valid(&pb, s.h, s.w, &win);
        let (e_aa, ..) = filter_valid(&aa, s.h, s.w, &win);
        let (e_bb, ..) = filter_valid(&bb, s.h, s.w, &win);
        let (e_ab, ..) = filter_valid(&ab, s.h, s.w, &win);
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Ratio of the mean absolute gradient across `block`-aligned boundaries to
/// the mean absolute gradient elsewhere, averaged over the horizontal and
/// vertical directions. 1.0 means no grid structure; a direction with no
/// gradient anywhere counts as 1.0.
pub fn blockiness<T: Scalar>(img: &Tensor<T>, block: usize) -> Result<f64> {
    let s = img.shape();
    if block < 2 {
        return Err(Error::config(format!("blockiness needs block >= 2, got {block}")));
    }
    if !s.h.is_multiple_of(block) || !s.w.is_multiple_of(block) {
        return Err(Error::geometry(format!(
            "image {}x{} is not divisible by block {block}",
            s.h, s.w
        )));
    }
    let plane = s.plane();
    // [boundary sum, boundary count, other sum, other count] per direction
    let mut horiz = [0.0f64; 4];
    let mut vert = [0.0f64; 4];
    for p in 0..s.n * s.c {
        let d = &img.data()[p * plane..(p + 1) * plane];
        for y in 0..s.h {
            for x in 0..s.w {
                let v = d[y * s.w + x].as_f64();
                if x + 1 < s.w {
                    let g = (d[y * s.w + x + 1].as_f64() - v).abs();
                    let slot = if (x + 1) % block == 0 { 0 } else { 2 };
                    horiz[slot] += g;
                    horiz[slot + 1] += 1.0;
                }
                if y + 1 < s.h {
                    let g = (d[(y + 1) * s.w + x].as_f64() - v).abs();
                    let slot = if (y + 1) % block == 0 { 0 } else { 2 };
                    vert[slot] += g;
                    vert[slot + 1] += 1.0;
                }
            }
        }
    }
    let ratio = |acc: [f64; 4]| {
        if acc[1] == 0.0 || acc[3] == 0.0 {
            return 1.0;
        }
        let boundary = acc[0] / acc[1];
        let other = acc[2] / acc[3];
        match (boundary == 0.0, other == 0.0) {
            (true, true) => 1.0,
            (false, true) => f64::INFINITY,
            _ => boundary / other,
        }
    };
    Ok(0.5 * (ratio(horiz) + ratio(vert)))
}
