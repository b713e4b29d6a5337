//! On-disk dataset layout:
//!
//! ```text
//! root/index.json
//! root/scene_NNNN/metadata.json
//! root/scene_NNNN/frame_KK.ppm   binary P6, 8-bit
//! root/scene_NNNN/frame_KK.pfm   grayscale, little-endian, bottom row first
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{trajectory_records, RenderedFrame, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, PoseRecord};
use crate::tape::Tensor;

/// Depth written for rays that hit nothing; read back as `+inf`.
pub const SKY_SENTINEL: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    #[serde(flatten)]
    pub spec: SceneSpec,
    /// Camera-to-world pose of every frame.
    pub poses: Vec<PoseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub scenes: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub meta: SceneMetadata,
    pub frames: Vec<RenderedFrame>,
}

impl Sequence {
    pub fn intrinsics(&self) -> Intrinsics {
        self.meta.spec.intrinsics
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    fn by_names(&self, names: &[String]) -> Vec<&Sequence> {
        names
            .iter()
            .filter_map(|n| self.sequences.iter().find(|s| &s.name == n))
            .collect()
    }

    pub fn train(&self) -> Vec<&Sequence> {
        self.by_names(&self.index.train)
    }

    pub fn val(&self) -> Vec<&Sequence> {
        self.by_names(&self.index.val)
    }
}

/// Scenes held out for validation out of `n`: a quarter, at least one
/// when there are two or more.
pub fn default_val_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (n / 4).max(1)
    }
}

pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:04}")
}

fn frame_stem(k: usize) -> String {
    format!("frame_{k:02}")
}

pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape {
            op: "write_ppm",
            reason: format!("expected [3, H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let p = h * w;
    for k in 0..p {
        for c in 0..3 {
            out.push((rgb.data()[c * p + k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| self.err(format!("{what} is not ASCII")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        self.skip_space();
        let start = self.pos;
        let tok = self.token(what)?.to_string();
        tok.parse().map_err(|_| {
            let mut e = self.err(format!("invalid {what} {tok:?}"));
            if let Error::Parse { offset, .. } = &mut e {
                *offset = start;
            }
            e
        })
    }

    /// Consume the single whitespace byte that ends a header.
    fn end(&mut self) -> Result<usize> {
        if self.pos >= self.buf.len() || !self.buf[self.pos].is_ascii_whitespace() {
            return Err(self.err("expected whitespace after header"));
        }
        self.pos += 1;
        Ok(self.pos)
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hd = Header { buf: &buf, pos: 0, path };
    if hd.token("magic")? != "P6" {
        hd.pos = 0;
        return Err(hd.err("not a binary PPM (expected P6)"));
    }
    let w: usize = hd.number("width")?;
    let h: usize = hd.number("height")?;
    let max: u32 = hd.number("maxval")?;
    if max != 255 {
        return Err(hd.err(format!("unsupported maxval {max}")));
    }
    let start = hd.end()?;
    let p = w * h;
    if buf.len() - start < 3 * p {
        hd.pos = buf.len();
        return Err(hd.err(format!("pixel data truncated: need {} bytes, have {}", 3 * p, buf.len() - start)));
    }
    let mut data = vec![0.0; 3 * p];
    for k in 0..p {
        for c in 0..3 {
            data[c * p + k] = buf[start + 3 * k + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_pfm(path: &Path, depth: &Tensor) -> Result<()> {
    let s = depth.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op: "write_pfm",
            reason: format!("expected [H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            let d = depth.data()[y * w + x];
            let v = if d.is_finite() { d } else { SKY_SENTINEL };
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hd = Header { buf: &buf, pos: 0, path };
    if hd.token("magic")? != "Pf" {
        hd.pos = 0;
        return Err(hd.err("not a grayscale PFM (expected Pf)"));
    }
    let w: usize = hd.number("width")?;
    let h: usize = hd.number("height")?;
    let scale: f64 = hd.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(hd.err(format!("invalid scale {scale}")));
    }
    let little = scale < 0.0;
    let start = hd.end()?;
    if buf.len() - start < 4 * w * h {
        hd.pos = buf.len();
        return Err(hd.err(format!("float data truncated: need {} bytes, have {}", 4 * w * h, buf.len() - start)));
    }
    let mut data = vec![0.0; w * h];
    for (i, c) in buf[start..start + 4 * w * h].chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        let (row, col) = (h - 1 - i / w, i % w);
        data[row * w + col] = if v >= SKY_SENTINEL { f64::INFINITY } else { v };
    }
    Tensor::new(vec![h, w], data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Write scenes under `root`, holding out the last `val_count` for
/// validation.
pub fn write_dataset(root: &Path, scenes: &[(SceneSpec, Vec<RenderedFrame>)], val_count: usize) -> Result<DatasetIndex> {
    if val_count > scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {val_count} of {} scenes",
            scenes.len()
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::with_capacity(scenes.len());
    for (i, (spec, frames)) in scenes.iter().enumerate() {
        let name = scene_dir_name(i);
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta = SceneMetadata {
            spec: spec.clone(),
            poses: trajectory_records(spec),
        };
        write_json(&dir.join("metadata.json"), &meta)?;
        for (k, f) in frames.iter().enumerate() {
            write_ppm(&dir.join(format!("{}.ppm", frame_stem(k))), &f.rgb)?;
            write_pfm(&dir.join(format!("{}.pfm", frame_stem(k))), &f.depth)?;
        }
        names.push(name);
    }
    let split = names.len() - val_count;
    let index = DatasetIndex {
        scenes: names.clone(),
        train: names[..split].to_vec(),
        val: names[split..].to_vec(),
    };
    write_json(&root.join("index.json"), &index)?;
    Ok(index)
}

pub fn load_sequence(root: &Path, name: &str) -> Result<Sequence> {
    let dir = root.join(name);
    let meta: SceneMetadata = read_json(&dir.join("metadata.json"))?;
    let n = meta.spec.frames_per_scene;
    if meta.poses.len() != n {
        return Err(Error::Parse {
            path: dir.join("metadata.json"),
            offset: 0,
            msg: format!("{} poses for {n} frames", meta.poses.len()),
        });
    }
    let mut frames = Vec::with_capacity(n);
    for (k, rec) in meta.poses.iter().enumerate() {
        let ppm = dir.join(format!("{}.ppm", frame_stem(k)));
        let pfm = dir.join(format!("{}.pfm", frame_stem(k)));
        let rgb = read_ppm(&ppm)?;
        let depth = read_pfm(&pfm)?;
        let (w, h) = (meta.spec.width, meta.spec.height);
        if rgb.shape() != [3, h, w] || depth.shape() != [h, w] {
            return Err(Error::Parse {
                path: ppm,
                offset: 0,
                msg: format!("frame size disagrees with metadata {w}x{h}"),
            });
        }
        frames.push(RenderedFrame {
            rgb,
            depth,
            pose: Pose::from_record(rec),
        });
    }
    Ok(Sequence {
        name: name.to_string(),
        meta,
        frames,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let index: DatasetIndex = read_json(&root.join("index.json"))?;
    let sequences = index
        .scenes
        .iter()
        .map(|n| load_sequence(root, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        index,
        sequences,
    })
}
