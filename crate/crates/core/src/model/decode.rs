//! Turning head maps into boxes: confidence-ranked decoding and a greedy
//! NMS baseline.

use std::cmp::Ordering;

use super::net::HeadMaps;
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// `x1, y1, x2, y2` in input pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub class: usize,
}

/// Intersection over union of two `x1, y1, x2, y2` boxes; 0 when both are empty.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box of one cell: center `((col + 0.5)·s, (row + 0.5)·s)` and distances
/// `ltrb` in stride units. Not clipped.
pub fn decode_cell(row: usize, col: usize, stride: usize, ltrb: [f64; 4]) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
    [
        cx - ltrb[0] * s,
        cy - ltrb[1] * s,
        cx + ltrb[2] * s,
        cy + ltrb[3] * s,
    ]
}

/// Rank key: descending score, then by position so ties resolve the same
/// way on every run.
fn by_score(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Decode image `index` of a batch without suppression: every (cell, class)
/// pair scoring at least `conf` is a candidate, and the `max_dets` highest
/// are kept. Boxes are clipped to the `frame = (width, height)` and dropped
/// if that leaves them empty.
pub fn decode<T: Float>(
    maps: &HeadMaps<T>,
    index: usize,
    conf: f64,
    max_dets: usize,
    frame: (usize, usize),
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf) {
        return Err(Error::invalid(
            "decode",
            format!("confidence threshold {conf} outside [0, 1]"),
        ));
    }
    // (score, flat candidate id) with id = ((level · nc + class) · h + row) · w + col in level order
    let mut cands: Vec<(f64, usize)> = Vec::new();
    let mut where_: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (lvl, cls) in maps.cls.iter().enumerate() {
        let (n, nc, h, w) = cls.dims4("decode")?;
        if index >= n {
            return Err(Error::invalid(
                "decode",
                format!("image index {index} out of range for batch {n}"),
            ));
        }
        for c in 0..nc {
            for r in 0..h {
                for q in 0..w {
                    let score = sigmoid(cls.at4(index, c, r, q).as_f64());
                    if score >= conf && score.is_finite() {
                        cands.push((score, where_.len()));
                        where_.push((lvl, c, r, q));
                    }
                }
            }
        }
    }
    cands.sort_by(by_score);
    let (fw, fh) = (frame.0 as f64, frame.1 as f64);
    let mut out = Vec::new();
    for (score, id) in cands {
        if out.len() >= max_dets {
            break;
        }
        let (lvl, class, r, q) = where_[id];
        let reg = &maps.reg[lvl];
        let ltrb = [0, 1, 2, 3].map(|k| reg.at4(index, k, r, q).as_f64());
        let b = decode_cell(r, q, maps.strides[lvl], ltrb);
        let b = [
            b[0].clamp(0.0, fw),
            b[1].clamp(0.0, fh),
            b[2].clamp(0.0, fw),
            b[3].clamp(0.0, fh),
        ];
        if b[2] > b[0] && b[3] > b[1] {
            out.push(Detection {
                bbox: b,
                score,
                class,
            });
        }
    }
    Ok(out)
}

/// Greedy per-class suppression: visit boxes by descending score and drop
/// any whose IoU with an already kept box of the same class is at least
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<(f64, usize)> = dets.iter().enumerate().map(|(i, d)| (d.score, i)).collect();
    order.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::new();
    for (_, i) in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class != d.class || box_iou(&k.bbox, &d.bbox) < iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn maps(fill: f64) -> HeadMaps<f64> {
        let sizes = [8, 4, 2];
        HeadMaps {
            cls: sizes
                .iter()
                .map(|&s| Tensor::full(&[1, 2, s, s], fill))
                .collect(),
            reg: sizes
                .iter()
                .map(|&s| Tensor::full(&[1, 4, s, s], 1.0))
                .collect(),
            strides: [8, 16, 32],
        }
    }

    #[test]
    fn hopeless_logits_give_nothing() {
        assert!(decode(&maps(-40.0), 0, 0.01, 100, (64, 64))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_hot_cell() {
        let mut m = maps(-40.0);
        let i = m.cls[2].idx4(0, 1, 0, 0);
        m.cls[2].data_mut()[i] = 10.0;
        assert_eq!(decode_cell(0, 0, 32, [1.0; 4]), [-16.0, -16.0, 48.0, 48.0]);
        let d = decode(&m, 0, 0.25, 10, (64, 64)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, 1);
        assert_eq!(d[0].bbox, [0.0, 0.0, 48.0, 48.0]);
        assert!((d[0].score - sigmoid(10.0)).abs() < 1e-15);
    }

    #[test]
    fn identical_boxes_collapse() {
        let d = Detection {
            bbox: [0.0, 0.0, 10.0, 10.0],
            score: 0.9,
            class: 0,
        };
        let e = Detection { score: 0.8, ..d };
        let far = Detection {
            bbox: [20.0, 20.0, 30.0, 30.0],
            ..e
        };
        assert_eq!(nms(&[e, d], 0.5), vec![d]);
        assert_eq!(nms(&[d, far], 0.5).len(), 2);
    }

    #[test]
    fn iou_basics() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &[1.0, 0.0, 3.0, 2.0]), 1.0 / 3.0);
        assert_eq!(box_iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
    }
}
