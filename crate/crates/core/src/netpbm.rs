//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Pixels are mapped to `[0, 1]` on read and back with `round(v * 255)`,
//! clamped, on write. Headers may contain arbitrary whitespace and `#`
//! comments; written headers are always `P5\n<w> <h>\n255\n`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::{Scalar, Shape, Tensor};

/// Decoded image as `(1, channels, height, width)`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    if bytes.len() < 2 {
        return Err(Error::format(0, "file too short for a netpbm header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::format(
                0,
                format!("unsupported magic {:?}, expected P5 or P6", String::from_utf8_lossy(other)),
            ))
        }
    };
    pos += 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(pos, format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected one whitespace byte after maxval")),
    }
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(bytes.len(), format!("raster truncated: need {n} bytes after offset {pos}")))?;
    if pos + n != bytes.len() {
        return Err(Error::format(pos + n, "trailing bytes after raster"));
    }
    let scale = 1.0 / 255.0;
    // interleaved RGB -> planar
    let shape = Shape::new(1, channels, height, width);
    Tensor::from_fn(shape, |_, c, y, x| {
        T::from_f64(raster[(y * width + x) * channels + c] as f64 * scale)
    })
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&c) = bytes.get(*pos) {
        if c == b'#' {
            while let Some(&c) = bytes.get(*pos) {
                *pos += 1;
                if c == b'\n' || c == b'\r' {
                    break;
                }
            }
        } else if c.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let before = *pos;
    skip_space_and_comments(bytes, pos);
    if *pos == before {
        return Err(Error::format(*pos, format!("expected whitespace before {what}")));
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::format(start, format!("expected decimal {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start, format!("{what} out of range")))
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let v = (v.as_f64() * 255.0).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

/// Encodes a `(1, 1, h, w)` tensor as P5 or a `(1, 3, h, w)` tensor as P6.
pub fn encode<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(Error::shape(format!("cannot write {s} as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io(e).in_file(path))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_image<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image)?;
    fs::write(path, bytes).map_err(|e| Error::Io(e).in_file(path))
}

/// BT.601 luma of a 3-channel image; single-channel input is returned as is.
pub fn to_luma<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    match s.c {
        1 => Ok(image.clone()),
        3 => {
            let (r, g, b) = (T::from_f64(0.299), T::from_f64(0.587), T::from_f64(0.114));
            Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
                r * image.at(n, 0, y, x) + g * image.at(n, 1, y, x) + b * image.at(n, 2, y, x)
            })
        }
        c => Err(Error::shape(format!("luma needs 1 or 3 channels, got {c}"))),
    }
}

pub fn is_netpbm_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn comments_and_whitespace_in_header() {
        let mut bytes = b"P5 # a comment\n#another\n 2\t\n2 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0..18u8).map(|v| v * 13));
        let t: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 3));
        assert_eq!(encode(&t).unwrap(), bytes);
    }

    #[test]
    fn maxval_other_than_255_is_rejected() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(decode::<f32>(b"P2\n1 1\n255\n0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode::<f32>(b"P5\n2 2\n255\n\0\0"), Err(Error::Format { .. })));
    }

    #[test]
    fn quantization_clamps() {
        let t = Tensor::from_vec([1, 1, 1, 4], vec![-0.5f32, 0.5, 1.7, f32::NAN]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 0]);
    }

    #[test]
    fn luma_weights() {
        let t = Tensor::from_vec([1, 3, 1, 1], vec![1.0f64, 0.5, 0.25]).unwrap();
        let l = to_luma(&t).unwrap();
        assert!((l.data()[0] - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pgm_raster_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend((0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8));
            let t: Tensor<f32> = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&t).unwrap(), bytes);
        }
    }
}
