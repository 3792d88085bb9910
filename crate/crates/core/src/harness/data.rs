//! Synthetic shape datasets and the annotation document.
//!
//! Annotation document, whitespace separated, one record per line:
//!
//! ```text
//! dsmyolo-annotations 1
//! image <relative path> <width> <height> <object count>
//! object <class> <x1> <y1> <x2> <y2>
//! ```
//!
//! `object` lines belong to the preceding `image`. Coordinates are pixels;
//! a box covers `[x1, x2) × [y1, y2)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{load_ppm, save_ppm};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const ANNOTATION_VERSION: u32 = 1;
pub const ANNOTATION_FILE: &str = "annotations.txt";

/// Shape types; the class id is the index.
pub const SHAPES: [&str; 4] = ["rectangle", "ellipse", "triangle", "diamond"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Object>,
}

/// An image held in memory with its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub objects: Vec<Object>,
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    // u, v in [0, 1) across the shape's box
    match class {
        0 => true,
        1 => (2.0 * u - 1.0).powi(2) + (2.0 * v - 1.0).powi(2) <= 1.0,
        2 => (2.0 * u - 1.0).abs() <= v,
        _ => (2.0 * u - 1.0).abs() + (2.0 * v - 1.0).abs() <= 1.0,
    }
}

/// One image of `size × size` with 1 to 5 non-overlapping shapes on a noise
/// background. Each box is the tight bound of the pixels painted.
pub fn synth_image<T: Float, R: Rng>(
    rng: &mut R,
    size: usize,
    n_classes: usize,
) -> Result<Sample<T>> {
    if !(1..=SHAPES.len()).contains(&n_classes) {
        return Err(Error::invalid(
            "gen_synthetic",
            format!("n_classes must be in 1..={}", SHAPES.len()),
        ));
    }
    if size < 32 {
        return Err(Error::invalid(
            "gen_synthetic",
            "image size must be at least 32",
        ));
    }
    let plane = size * size;
    let mut data: Vec<f64> = (0..3 * plane).map(|_| rng.gen_range(0.0..0.35)).collect();
    let want = rng.gen_range(1..=5);
    let (min_side, max_side) = ((size / 10).max(8), (size * 2 / 5).max(9));
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..want {
        for _attempt in 0..50 {
            let w = rng.gen_range(min_side..max_side);
            let h = rng.gen_range(min_side..max_side);
            let x0 = rng.gen_range(0..size - w);
            let y0 = rng.gen_range(0..size - h);
            let r = [x0, y0, x0 + w, y0 + h];
            let gap = 2;
            if placed.iter().any(|p| {
                r[0] < p[2] + gap && p[0] < r[2] + gap && r[1] < p[3] + gap && p[1] < r[3] + gap
            }) {
                continue;
            }
            let class = rng.gen_range(0..n_classes);
            let color: [f64; 3] = [
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
            ];
            let mut tight = [usize::MAX, usize::MAX, 0, 0];
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let (u, v) = (
                        (x - x0) as f64 / (w - 1) as f64,
                        (y - y0) as f64 / (h - 1) as f64,
                    );
                    if inside(class, u, v) {
                        for (c, &cv) in color.iter().enumerate() {
                            data[c * plane + y * size + x] = cv;
                        }
                        tight = [
                            tight[0].min(x),
                            tight[1].min(y),
                            tight[2].max(x + 1),
                            tight[3].max(y + 1),
                        ];
                    }
                }
            }
            placed.push(r);
            let bbox = [
                tight[0] as f64,
                tight[1] as f64,
                tight[2] as f64,
                tight[3] as f64,
            ];
            objects.push(Object { class, bbox });
            break;
        }
    }
    // quantize to the 8-bit grid so the in-memory image equals its PPM
    let image = Tensor::new(
        &[3, size, size],
        data.iter()
            .map(|v| T::c((v * 255.0).round() / 255.0))
            .collect(),
    )?;
    Ok(Sample { image, objects })
}

/// In-memory dataset fully determined by `seed`.
pub fn synth_dataset<T: Float>(
    n_images: usize,
    size: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|_| synth_image(&mut rng, size, n_classes))
        .collect()
}

/// Write a synthetic dataset as PPM images plus [`ANNOTATION_FILE`].
pub fn gen_synthetic(
    n_images: usize,
    size: usize,
    n_classes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<AnnotatedImage>> {
    let samples = synth_dataset::<f64>(n_images, size, n_classes, seed)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from(format!("images/img_{i:05}.ppm"));
        save_ppm(&s.image, &out_dir.join(&rel))?;
        records.push(AnnotatedImage {
            path: rel,
            width: size,
            height: size,
            objects: s.objects.clone(),
        });
    }
    write_annotations(&records, &out_dir.join(ANNOTATION_FILE))?;
    Ok(records)
}

pub fn annotations_to_string(records: &[AnnotatedImage]) -> String {
    let mut out = format!("dsmyolo-annotations {ANNOTATION_VERSION}\n");
    for r in records {
        let _ = writeln!(
            out,
            "image {} {} {} {}",
            r.path.display(),
            r.width,
            r.height,
            r.objects.len()
        );
        for o in &r.objects {
            let b = o.bbox;
            let _ = writeln!(
                out,
                "object {} {} {} {} {}",
                o.class, b[0], b[1], b[2], b[3]
            );
        }
    }
    out
}

pub fn write_annotations(records: &[AnnotatedImage], path: &Path) -> Result<()> {
    fs::write(path, annotations_to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotatedImage>> {
    let bad = |ln: usize, m: &str| Error::Format(format!("annotations line {ln}: {m}"));
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l))
            if l.split_whitespace().collect::<Vec<_>>() == ["dsmyolo-annotations", "1"] => {}
        _ => return Err(bad(1, "expected header `dsmyolo-annotations 1`")),
    }
    let mut out: Vec<AnnotatedImage> = Vec::new();
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
                    return Err(bad(ln, "previous image is missing objects"));
                }
                pending = int(n)?;
                out.push(AnnotatedImage {
                    path: PathBuf::from(path),
                    width: int(w)?,
                    height: int(h)?,
                    objects: Vec::new(),
                });
            }
            ["object", c, x1, y1, x2, y2] => {
                let img = out
                    .last_mut()
                    .ok_or_else(|| bad(ln, "object before any image"))?;
                if pending == 0 {
                    return Err(bad(ln, "more objects than declared"));
                }
                pending -= 1;
                let bbox = [num(x1)?, num(y1)?, num(x2)?, num(y2)?];
                if !(bbox[0] < bbox[2] && bbox[1] < bbox[3] && bbox[0] >= 0.0 && bbox[1] >= 0.0)
                    || bbox[2] > img.width as f64
                    || bbox[3] > img.height as f64
                {
                    return Err(bad(ln, "box is empty or outside the image"));
                }
                img.objects.push(Object {
                    class: int(c)?,
                    bbox,
                });
            }
            _ => return Err(bad(ln, "unrecognized record")),
        }
    }
    if pending != 0 {
        return Err(bad(text.lines().count(), "last image is missing objects"));
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// Load a dataset directory written by [`gen_synthetic`].
pub fn load_dataset<T: Float>(dir: &Path) -> Result<Vec<Sample<T>>> {
    let records = read_annotations(&dir.join(ANNOTATION_FILE))?;
    records
        .into_iter()
        .map(|r| {
            let image: Tensor<T> = load_ppm(&dir.join(&r.path))?;
            if image.shape() != [3, r.height, r.width] {
                return Err(Error::Format(format!(
                    "{}: size differs from annotation",
                    r.path.display()
                )));
            }
            Ok(Sample {
                image,
                objects: r.objects,
            })
        })
        .collect()
}
