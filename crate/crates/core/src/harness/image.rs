//! Binary PPM (P6) images and letterboxing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Gray level used for letterbox padding.
pub const PAD_VALUE: f64 = 114.0 / 255.0;

/// Parse a P6 file with max value 255 into `[3, H, W]` with values in `[0, 1]`.
pub fn decode_ppm<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let fmt = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(fmt("bad magic, expected P6"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| fmt("bad header number")) };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(fmt(&format!("max value {max} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..start + 3 * w * h)
        .ok_or_else(|| fmt("truncated raster"))?;
    if bytes.len() != start + 3 * w * h {
        return Err(fmt("trailing bytes after raster"));
    }
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::c(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encode `[3, H, W]` values in `[0, 1]` as P6, rounding to the nearest level.
pub fn encode_ppm<T: Float>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(
                "save_ppm",
                format!("expected [3,H,W], got {s:?}"),
            ))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    for i in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + i].as_f64();
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm<T: Float>(img: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Mapping between original image pixels and letterboxed pixels:
/// `letterboxed = original · scale + (pad_x, pad_y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn to_letterbox(&self, b: [f64; 4]) -> [f64; 4] {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        [
            b[0] * self.scale + px,
            b[1] * self.scale + py,
            b[2] * self.scale + px,
            b[3] * self.scale + py,
        ]
    }

    pub fn to_original(&self, b: [f64; 4]) -> [f64; 4] {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        [
            (b[0] - px) / self.scale,
            (b[1] - py) / self.scale,
            (b[2] - px) / self.scale,
            (b[3] - py) / self.scale,
        ]
    }
}

/// Aspect-preserving nearest-neighbour resize of `[3, H, W]` into a
/// `size × size` canvas, centred, padded with [`PAD_VALUE`].
pub fn letterbox<T: Float>(img: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Letterbox)> {
    let (h, w) = match *img.shape() {
        [3, h, w] if h > 0 && w > 0 => (h, w),
        ref s => {
            return Err(Error::shape(
                "letterbox",
                format!("expected non-empty [3,H,W], got {s:?}"),
            ))
        }
    };
    let scale = (size as f64 / h as f64).min(size as f64 / w as f64);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
    let (pad_y, pad_x) = ((size - nh) / 2, (size - nw) / 2);
    let mut out = Tensor::full(&[3, size, size], T::c(PAD_VALUE));
    for c in 0..3 {
        for y in 0..nh {
            let sy = (((y as f64 + 0.5) / scale) as usize).min(h - 1);
            for x in 0..nw {
                let sx = (((x as f64 + 0.5) / scale) as usize).min(w - 1);
                out.data_mut()[(c * size + y + pad_y) * size + x + pad_x] =
                    img.data()[(c * h + sy) * w + sx];
            }
        }
    }
    Ok((
        out,
        Letterbox {
            scale,
            pad_x,
            pad_y,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_square() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[255, 0, 0]);
        }
        let t: Tensor<f32> = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), [3, 2, 2]);
        assert!(t.data()[..4].iter().all(|&v| v == 1.0));
        assert!(t.data()[4..].iter().all(|&v| v == 0.0));
        assert_eq!(encode_ppm(&t).unwrap(), bytes);
    }

    #[test]
    fn malformed_magic() {
        assert!(decode_ppm::<f32>(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm::<f32>(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn square_is_pure_resize() {
        let img = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        let (out, lb) = letterbox(&img, 8).unwrap();
        assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (2.0, 0, 0));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wide_image_padded_vertically() {
        let img = Tensor::<f32>::full(&[3, 10, 20], 0.0);
        let (out, lb) = letterbox(&img, 32).unwrap();
        assert_eq!(lb.pad_x, 0);
        let bottom = 32 - 16 - lb.pad_y;
        assert!(lb.pad_y.abs_diff(bottom) <= 1);
        assert_eq!(out.data()[0] as f64, PAD_VALUE as f32 as f64);
        let b = [3.0, 2.0, 11.0, 7.0];
        let back = lb.to_original(lb.to_letterbox(b));
        assert!(b.iter().zip(back).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}
