//! Checkpoint directories.
//!
//! `manifest.txt` is line-oriented text:
//!
//! ```text
//! dsmyolo-checkpoint 1
//! dtype f32
//! scale <name> <width> <depth> <num_classes> <c1> <c2> <c3> <c4> <c5>
//! eca <sigma> <kernel> <adaptive 0|1> <gamma> <b> <shuffle_groups>
//! vss <expand> <state> <dt_rank|auto> <zoh|taylor>
//! ffn_ratio <r>
//! param <name> <offset> <length>
//! buffer <name> <offset> <length>
//! ```
//!
//! with one `param`/`buffer` line per tensor. Offsets and lengths are byte
//! ranges into `weights.bin`, which concatenates golden tensor blobs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::net::Model;
use super::scale::{ModelConfig, ScaleSpec};
use crate::blocks::{EcaConfig, VssConfig};
use crate::error::{Error, Result};
use crate::ssm::Discretization;
use crate::tensor::{read_golden_from, write_golden_to, Float, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

fn config_lines(cfg: &ModelConfig) -> String {
    let s = &cfg.scale;
    let b = s.base_channels;
    let e = &cfg.eca;
    let v = &cfg.vss;
    let disc = match v.discretization {
        Discretization::Zoh => "zoh",
        Discretization::Taylor => "taylor",
    };
    let rank = v.dt_rank.map_or("auto".to_string(), |r| r.to_string());
    format!(
        "scale {} {} {} {} {} {} {} {} {}\neca {} {} {} {} {} {}\nvss {} {} {rank} {disc}\nffn_ratio {}\n",
        s.name,
        s.width,
        s.depth,
        s.num_classes,
        b[0],
        b[1],
        b[2],
        b[3],
        b[4],
        e.sigma,
        e.kernel,
        e.adaptive as u8,
        e.gamma,
        e.b,
        e.shuffle_groups,
        v.expand,
        v.state,
        cfg.ffn_ratio
    )
}

pub fn save_checkpoint<T: Float>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "dsmyolo-checkpoint {CHECKPOINT_VERSION}\ndtype {:?}\n",
        T::DTYPE
    )
    .to_lowercase();
    manifest.push_str(&config_lines(&model.arch.config));
    let mut blob = Vec::new();
    let entries = model
        .store
        .params()
        .map(|(n, t)| ("param", n, t))
        .chain(model.store.buffers().map(|(n, t)| ("buffer", n, t)));
    for (kind, name, t) in entries {
        let start = blob.len();
        write_golden_to(t, &mut blob);
        let _ = writeln!(manifest, "{kind} {name} {start} {}", blob.len() - start);
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, blob).map_err(|e| Error::io(wpath, e))
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{MANIFEST_FILE} line {line}: {msg}"))
}

fn parse<V: std::str::FromStr>(line: usize, field: &str) -> Result<V> {
    field
        .parse()
        .map_err(|_| bad(line, format!("cannot parse `{field}`")))
}

struct Entry {
    buffer: bool,
    name: String,
    offset: usize,
    len: usize,
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Model<T>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut scale = None;
    let mut eca = None;
    let mut vss = None;
    let mut ffn_ratio = None;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let want = |n: usize| {
            if f.len() == n {
                Ok(())
            } else {
                Err(bad(ln, format!("expected {n} fields")))
            }
        };
        match f[0] {
            "dsmyolo-checkpoint" => {
                want(2)?;
                let v: u32 = parse(ln, f[1])?;
                if v != CHECKPOINT_VERSION {
                    return Err(bad(ln, format!("unsupported checkpoint version {v}")));
                }
            }
            "dtype" => {
                want(2)?;
                let have = format!("{:?}", T::DTYPE).to_lowercase();
                if f[1] != have {
                    return Err(bad(
                        ln,
                        format!("checkpoint holds {}, requested {have}", f[1]),
                    ));
                }
            }
            "scale" => {
                want(10)?;
                let mut base = [0usize; 5];
                for (k, b) in base.iter_mut().enumerate() {
                    *b = parse(ln, f[5 + k])?;
                }
                scale = Some(ScaleSpec {
                    name: f[1].to_string(),
                    width: parse(ln, f[2])?,
                    depth: parse(ln, f[3])?,
                    num_classes: parse(ln, f[4])?,
                    base_channels: base,
                });
            }
            "eca" => {
                want(7)?;
                eca = Some(EcaConfig {
                    sigma: parse(ln, f[1])?,
                    kernel: parse(ln, f[2])?,
                    adaptive: parse::<u8>(ln, f[3])? != 0,
                    gamma: parse(ln, f[4])?,
                    b: parse(ln, f[5])?,
                    shuffle_groups: parse(ln, f[6])?,
                });
            }
            "vss" => {
                want(5)?;
                let discretization = match f[4] {
                    "zoh" => Discretization::Zoh,
                    "taylor" => Discretization::Taylor,
                    other => return Err(bad(ln, format!("unknown discretization `{other}`"))),
                };
                let dt_rank = if f[3] == "auto" {
                    None
                } else {
                    Some(parse(ln, f[3])?)
                };
                vss = Some(VssConfig {
                    expand: parse(ln, f[1])?,
                    state: parse(ln, f[2])?,
                    dt_rank,
                    discretization,
                });
            }
            "ffn_ratio" => {
                want(2)?;
                ffn_ratio = Some(parse(ln, f[1])?);
            }
            "param" | "buffer" => {
                want(4)?;
                entries.push(Entry {
                    buffer: f[0] == "buffer",
                    name: f[1].to_string(),
                    offset: parse(ln, f[2])?,
                    len: parse(ln, f[3])?,
                });
            }
            other => return Err(bad(ln, format!("unknown record `{other}`"))),
        }
    }
    let missing = |what: &str| Error::Format(format!("{MANIFEST_FILE}: missing `{what}` record"));
    let config = ModelConfig {
        scale: scale.ok_or_else(|| missing("scale"))?,
        eca: eca.ok_or_else(|| missing("eca"))?,
        vss: vss.ok_or_else(|| missing("vss"))?,
        ffn_ratio: ffn_ratio.ok_or_else(|| missing("ffn_ratio"))?,
    };
    let mut model = Model::<T>::build(&config, 0)?;

    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let expected = model.store.num_tensors() + model.store.buffers().count();
    if entries.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model has {expected}",
            entries.len()
        )));
    }
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.name.clone()) {
            return Err(Error::Format(format!("`{}` listed twice", e.name)));
        }
        let bytes = e
            .offset
            .checked_add(e.len)
            .and_then(|end| blob.get(e.offset..end))
            .ok_or_else(|| {
                Error::Format(format!("`{}`: byte range outside {WEIGHTS_FILE}", e.name))
            })?;
        let (t, used): (Tensor<T>, usize) = read_golden_from(bytes)?;
        if used != e.len {
            return Err(Error::Format(format!(
                "`{}`: {} trailing bytes",
                e.name,
                e.len - used
            )));
        }
        let slot = if e.buffer {
            model.store.buffer_mut(&e.name)?
        } else {
            model.store.param_mut(&e.name)?
        };
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "`{}`: shape {:?}, model expects {:?}",
                e.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}
