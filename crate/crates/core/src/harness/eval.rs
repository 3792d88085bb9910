//! COCO-style detection metrics and the detections document.
//!
//! Detections document:
//!
//! ```text
//! dsmyolo-detections 1
//! image <path> <width> <height> <detection count>
//! det <class> <score> <x1> <y1> <x2> <y2>
//! ```

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{box_iou, Detection};

pub const DETECTIONS_VERSION: u32 = 1;

/// Interpolation grid size for AP: recall levels 0, 0.01, …, 1.
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map50: f64,
    pub map75: f64,
    /// Mean over the thresholds passed to [`eval_map`].
    pub map50_95: f64,
    /// Per threshold, in the order given.
    pub per_threshold: Vec<f64>,
    /// Micro-averaged at IoU 0.5 over predictions scoring at least the
    /// operating confidence.
    pub precision: f64,
    pub recall: f64,
}

/// Predictions in rank order: score descending, input order on ties.
fn ranked(preds: &[&Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching within one class: each prediction, best score first,
/// takes the unmatched ground truth of its image with the highest IoU, if
/// that IoU reaches `iou_threshold`. Returns true-positive flags in rank order.
pub fn match_greedy(preds: &[&Prediction], gts: &[&GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranked(preds)
        .into_iter()
        .map(|i| {
            let p = preds[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image != p.image {
                    continue;
                }
                let iou = box_iou(&p.bbox, &g.bbox);
                if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from rank-ordered hit flags.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // envelope: best precision at this recall or beyond
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            total += precision[k];
        }
    }
    total / RECALL_POINTS as f64
}

/// AP of one class at one threshold; `None` when the class has no ground truth.
pub fn class_ap(
    preds: &[Prediction],
    gts: &[GroundTruth],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if g.is_empty() {
        return None;
    }
    let p: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    Some(interpolated_ap(
        &match_greedy(&p, &g, iou_threshold),
        g.len(),
    ))
}

/// Mean of [`class_ap`] over classes that have ground truth; 0 if none do.
pub fn mean_ap(preds: &[Prediction], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .filter_map(|&c| class_ap(preds, gts, c, iou_threshold))
        .sum::<f64>()
        / classes.len() as f64
}

pub fn eval_map(
    preds: &[Prediction],
    gts: &[GroundTruth],
    iou_thresholds: &[f64],
    conf: f64,
) -> Result<MapReport> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid(
            "eval_map",
            "IoU thresholds must be a non-empty list in [0, 1]",
        ));
    }
    if preds.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::invalid(
            "eval_map",
            "prediction scores must be finite",
        ));
    }
    let per_threshold: Vec<f64> = iou_thresholds
        .iter()
        .map(|&t| mean_ap(preds, gts, t))
        .collect();
    let kept: Vec<Prediction> = preds.iter().filter(|p| p.score >= conf).copied().collect();
    let mut classes: Vec<usize> = kept
        .iter()
        .map(|p| p.class)
        .chain(gts.iter().map(|g| g.class))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut tp = 0usize;
    for c in classes {
        let p: Vec<&Prediction> = kept.iter().filter(|p| p.class == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c).collect();
        tp += match_greedy(&p, &g, 0.5).into_iter().filter(|&h| h).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MapReport {
        map50: mean_ap(preds, gts, 0.5),
        map75: mean_ap(preds, gts, 0.75),
        map50_95: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        per_threshold,
        precision: ratio(tp, kept.len()),
        recall: ratio(tp, gts.len()),
    })
}

/// Detections for one image, as written by `infer`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
}

pub fn detections_to_string(images: &[ImageDetections]) -> String {
    let mut out = format!("dsmyolo-detections {DETECTIONS_VERSION}\n");
    for im in images {
        let _ = writeln!(
            out,
            "image {} {} {} {}",
            im.path.display(),
            im.width,
            im.height,
            im.detections.len()
        );
        for d in &im.detections {
            let b = d.bbox;
            let _ = writeln!(
                out,
                "det {} {} {} {} {} {}",
                d.class, d.score, b[0], b[1], b[2], b[3]
            );
        }
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<ImageDetections>> {
    let bad = |ln: usize, m: &str| Error::Format(format!("detections line {ln}: {m}"));
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.split_whitespace().collect::<Vec<_>>() == ["dsmyolo-detections", "1"] => {
        }
        _ => return Err(bad(1, "expected header `dsmyolo-detections 1`")),
    }
    let mut out: Vec<ImageDetections> = Vec::new();
    let mut pending = 0usize;
    for (i, line) in lines {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(ln, &format!("bad number `{s}`")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(ln, &format!("bad integer `{s}`")))
        };
        match f.as_slice() {
            ["image", path, w, h, n] => {
                if pending != 0 {
                    return Err(bad(ln, "previous image is missing detections"));
                }
                pending = int(n)?;
                out.push(ImageDetections {
                    path: PathBuf::from(path),
                    width: int(w)?,
                    height: int(h)?,
                    detections: Vec::new(),
                });
            }
            ["det", c, s, x1, y1, x2, y2] => {
                let im = out
                    .last_mut()
                    .ok_or_else(|| bad(ln, "detection before any image"))?;
                if pending == 0 {
                    return Err(bad(ln, "more detections than declared"));
                }
                pending -= 1;
                im.detections.push(Detection {
                    class: int(c)?,
                    score: num(s)?,
                    bbox: [num(x1)?, num(y1)?, num(x2)?, num(y2)?],
                });
            }
            _ => return Err(bad(ln, "unrecognized record")),
        }
    }
    if pending != 0 {
        return Err(bad(
            text.lines().count(),
            "last image is missing detections",
        ));
    }
    Ok(out)
}

pub fn write_detections(images: &[ImageDetections], path: &Path) -> Result<()> {
    fs::write(path, detections_to_string(images)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<ImageDetections>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: usize, bbox: [f64; 4]) -> GroundTruth {
        GroundTruth {
            image,
            class: 0,
            bbox,
        }
    }

    fn pred(image: usize, score: f64, bbox: [f64; 4]) -> Prediction {
        Prediction {
            image,
            class: 0,
            score,
            bbox,
        }
    }

    #[test]
    fn perfect_predictions() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0]), gt(1, [5.0, 5.0, 9.0, 20.0])];
        let p: Vec<Prediction> = g.iter().map(|g| pred(g.image, 0.9, g.bbox)).collect();
        let r = eval_map(&p, &g, &coco_iou_thresholds(), 0.25).unwrap();
        assert_eq!(r.map50_95, 1.0);
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
    }

    #[test]
    fn no_predictions() {
        let r = eval_map(&[], &[gt(0, [0.0, 0.0, 1.0, 1.0])], &[0.5], 0.25).unwrap();
        assert_eq!((r.map50, r.recall, r.precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_recall() {
        // precision 1 up to recall 0.5: 51 of the 101 recall levels
        let g = [
            gt(0, [0.0, 0.0, 10.0, 10.0]),
            gt(0, [20.0, 20.0, 30.0, 30.0]),
        ];
        let p = [pred(0, 0.9, g[0].bbox)];
        assert_eq!(mean_ap(&p, &g, 0.5), 51.0 / 101.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
        let p = [pred(0, 0.9, g[0].bbox), pred(0, 0.8, g[0].bbox)];
        let gs: Vec<&GroundTruth> = g.iter().collect();
        assert_eq!(
            match_greedy(&p.iter().collect::<Vec<_>>(), &gs, 0.5),
            vec![true, false]
        );
        let r = eval_map(&p, &g, &[0.5], 0.25).unwrap();
        assert_eq!((r.map50, r.precision, r.recall), (1.0, 0.5, 1.0));
    }

    #[test]
    fn detections_roundtrip() {
        let doc = vec![ImageDetections {
            path: "a.ppm".into(),
            width: 64,
            height: 32,
            detections: vec![Detection {
                bbox: [1.0, 2.5, 3.0, 4.0],
                score: 0.75,
                class: 2,
            }],
        }];
        assert_eq!(parse_detections(&detections_to_string(&doc)).unwrap(), doc);
        assert!(
            parse_detections("dsmyolo-detections 1\nimage a 1 1 2\ndet 0 1 0 0 1 1\n").is_err()
        );
    }
}
