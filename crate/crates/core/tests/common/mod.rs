//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! the fast paths it is used to check.
#![allow(dead_code, clippy::needless_range_loop)]

use pcs::tensorcore::{ConvSpec, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct convolution: one multiply-add per (output site, input channel,
/// kernel tap), zero padding read as explicit bounds checks.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let oh = (s.h + 2 * spec.pad_h - kh) / spec.stride_h + 1;
    let ow = (s.w + 2 * spec.pad_w - kw) / spec.stride_w + 1;
    let mut out = Tensor::zeros([s.n, spec.out_channels, oh, ow]).unwrap();
    for b in 0..s.n {
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..spec.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                                let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Direct transposed convolution: every input site scatters its kernel into
/// the output. `w` has shape (in, out, kh, kw).
pub fn conv_transposed_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let oh = (s.h - 1) * spec.stride_h + kh - 2 * spec.pad_h;
    let ow = (s.w - 1) * spec.stride_w + kw - 2 * spec.pad_w;
    let mut out = Tensor::zeros([s.n, spec.out_channels, oh, ow]).unwrap();
    for b in 0..s.n {
        for c in 0..spec.in_channels {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let v = x.at(b, c, iy, ix);
                    for o in 0..spec.out_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                                let ox = (ix * spec.stride_w + kx) as isize - spec.pad_w as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let (oy, ox) = (oy as usize, ox as usize);
                                let cur = out.at(b, o, oy, ox);
                                out.set(b, o, oy, ox, cur + v * w.at(c, o, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bv) = bias {
        for b in 0..s.n {
            for o in 0..spec.out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let cur = out.at(b, o, y, x);
                        out.set(b, o, y, x, cur + bv[o]);
                    }
                }
            }
        }
    }
    out
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

/// Largest elementwise |a - b| / max(|a|, |b|, floor).
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// SSIM by the definition: a 2-D Gaussian window built directly, weighted
/// means, and variances/covariance as weighted central moments.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let s = a.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y0 in 0..=s.h - N {
        for x0 in 0..=s.w - N {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let w = win[i][j] / total;
                    ma += w * a.at(0, 0, y0 + i, x0 + j);
                    mb += w * b.at(0, 0, y0 + i, x0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let w = win[i][j] / total;
                    let da = a.at(0, 0, y0 + i, x0 + j) - ma;
                    let db = b.at(0, 0, y0 + i, x0 + j) - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Smooth scene with a few oriented waves and one flat disc, in [0, 1].
#[allow(clippy::approx_constant)]
pub fn synthetic_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-0.4..0.4f32),
                rng.random_range(-0.4..0.4f32),
                rng.random_range(0.0..6.28f32),
                rng.random_range(0.05..0.15f32),
            )
        })
        .collect();
    let cx = rng.random_range(0.0..w as f32);
    let cy = rng.random_range(0.0..h as f32);
    let r = rng.random_range(5.0..15.0f32);
    let level = rng.random_range(-0.2..0.2f32);
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        let (xf, yf) = (x as f32, y as f32);
        let mut v = 0.5;
        for &(fx, fy, ph, a) in &waves {
            v += a * (fx * xf + fy * yf + ph).sin();
        }
        if (xf - cx).powi(2) + (yf - cy).powi(2) < r * r {
            v += level;
        }
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Bandlimited 32x32 test crop used by the overfit runs.
pub fn smooth_crop() -> Tensor<f32> {
    Tensor::from_fn([1, 1, 32, 32], |_, _, y, x| {
        let (x, y) = (x as f32 / 32.0, y as f32 / 32.0);
        let tau = std::f32::consts::TAU;
        0.5 + 0.2 * (tau * x).sin() * (tau * y).cos() + 0.15 * (tau * (x + 2.0 * y)).cos()
    })
    .unwrap()
}

/// Quantises to 8 bits, so the scene survives a PGM round trip unchanged.
pub fn quantized(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random geometry whose forward size law divides exactly. Returns the spec
/// and an input shape for it.
pub fn random_conv_case(rng: &mut ChaCha8Rng) -> (ConvSpec, [usize; 4]) {
    let kh = rng.random_range(1..=5);
    let kw = rng.random_range(1..=5);
    let sh = rng.random_range(1..=3);
    let sw = rng.random_range(1..=3);
    let ph = rng.random_range(0..kh);
    let pw = rng.random_range(0..kw);
    let spec = ConvSpec {
        in_channels: rng.random_range(1..=3),
        out_channels: rng.random_range(1..=4),
        kernel_h: kh,
        kernel_w: kw,
        stride_h: sh,
        stride_w: sw,
        pad_h: ph,
        pad_w: pw,
        transposed: false,
    };
    // choose the output size first, then the input size that produces it
    let side = |rng: &mut ChaCha8Rng, k: usize, s: usize, p: usize| loop {
        let o: usize = rng.random_range(1..=6);
        let len = (o - 1) * s + k;
        if len > 2 * p {
            break len - 2 * p;
        }
    };
    let h = side(rng, kh, sh, ph);
    let w = side(rng, kw, sw, pw);
    (spec, [rng.random_range(1..=2), spec.in_channels, h, w])
}
