//! Four-direction traversal of a 2D feature map into 1D sequences.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RowMajor,
    ColumnMajor,
    RowMajorReversed,
    ColumnMajorReversed,
}

pub const DIRECTIONS: [Direction; 4] = [
    Direction::RowMajor,
    Direction::ColumnMajor,
    Direction::RowMajorReversed,
    Direction::ColumnMajorReversed,
];

/// Spatial position `(h, w)` visited at step `t`.
#[inline]
pub fn scan_position(dir: Direction, height: usize, width: usize, t: usize) -> (usize, usize) {
    let l = height * width;
    match dir {
        Direction::RowMajor => (t / width, t % width),
        Direction::ColumnMajor => (t % height, t / height),
        Direction::RowMajorReversed => scan_position(Direction::RowMajor, height, width, l - 1 - t),
        Direction::ColumnMajorReversed => {
            scan_position(Direction::ColumnMajor, height, width, l - 1 - t)
        }
    }
}

/// Step at which position `(h, w)` is visited; inverse of [`scan_position`].
#[inline]
pub fn scan_time(dir: Direction, height: usize, width: usize, h: usize, w: usize) -> usize {
    let l = height * width;
    match dir {
        Direction::RowMajor => h * width + w,
        Direction::ColumnMajor => w * height + h,
        Direction::RowMajorReversed => l - 1 - (h * width + w),
        Direction::ColumnMajorReversed => l - 1 - (w * height + h),
    }
}

/// `[N, D, H, W]` → four `[N, H·W, D]` sequences, one per [`DIRECTIONS`] entry.
pub fn cross_scan<T: Float>(fmap: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let (n, d, h, w) = fmap.dims4("cross_scan")?;
    let l = h * w;
    Ok(DIRECTIONS.map(|dir| {
        let mut out = vec![T::zero(); n * l * d];
        for b in 0..n {
            for t in 0..l {
                let (hh, ww) = scan_position(dir, h, w, t);
                for c in 0..d {
                    out[(b * l + t) * d + c] = fmap.at4(b, c, hh, ww);
                }
            }
        }
        Tensor::new(&[n, l, d], out).expect("cross_scan shape")
    }))
}

/// Undo each direction's traversal and sum the four maps.
pub fn cross_merge<T: Float>(
    seqs: &[Tensor<T>; 4],
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (n, l, d) = match *seqs[0].shape() {
        [n, l, d] => (n, l, d),
        ref s => {
            return Err(Error::shape(
                "cross_merge",
                format!("sequences must be [N,L,D], got {s:?}"),
            ))
        }
    };
    if l != height * width {
        return Err(Error::shape(
            "cross_merge",
            format!("L={l} != H·W = {}", height * width),
        ));
    }
    if seqs.iter().any(|s| s.shape() != seqs[0].shape()) {
        return Err(Error::shape(
            "cross_merge",
            "all four sequences must share one shape",
        ));
    }
    let mut out = vec![T::zero(); n * d * l];
    for (dir, seq) in DIRECTIONS.iter().zip(seqs) {
        for b in 0..n {
            for t in 0..l {
                let (hh, ww) = scan_position(*dir, height, width, t);
                for c in 0..d {
                    out[((b * d + c) * height + hh) * width + ww] +=
                        seq.data()[(b * l + t) * d + c];
                }
            }
        }
    }
    Tensor::new(&[n, d, height, width], out)
}

/// Flat gather indices taking `[N, D, H, W]` to the `[N, H·W, D]` sequence
/// of direction `dir`.
pub fn cross_scan_index(dir: Direction, n: usize, d: usize, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    let mut idx = Vec::with_capacity(n * l * d);
    for b in 0..n {
        for t in 0..l {
            let (hh, ww) = scan_position(dir, h, w, t);
            for c in 0..d {
                idx.push(((b * d + c) * h + hh) * w + ww);
            }
        }
    }
    idx
}

/// Flat gather indices taking a `[N, H·W, D]` sequence of direction `dir`
/// back to `[N, D, H, W]`.
pub fn cross_merge_index(dir: Direction, n: usize, d: usize, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    let mut idx = Vec::with_capacity(n * l * d);
    for b in 0..n {
        for c in 0..d {
            for hh in 0..h {
                for ww in 0..w {
                    idx.push((b * l + scan_time(dir, h, w, hh, ww)) * d + c);
                }
            }
        }
    }
    idx
}
