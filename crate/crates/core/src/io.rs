//! Capture and cloud file formats, and labeled dataset directories.
//!
//! Both formats are a single ASCII header line terminated by `\n`, followed by
//! a little-endian `f32` payload:
//!
//! ```text
//! RAGC-DEPTH 1 <width> <height> <fx> <fy> <cx> <cy> <label>\n  width·height depths, row-major
//! RAGC-PC 1 <count> <label>\n                                   count·3 coordinates (x y z)
//! ```
//!
//! A label of `-1` means unlabeled.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pointcloud::{preprocess_capture, project_depth_map, CameraIntrinsics, DepthImage, PointCloud};

pub const CAPTURE_MAGIC: &str = "RAGC-DEPTH 1";
pub const CLOUD_MAGIC: &str = "RAGC-PC 1";
pub const MANIFEST: &str = "index.tsv";
const MAX_HEADER: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub enum Scene {
    Capture(DepthImage),
    Cloud(PointCloud),
}

impl Scene {
    pub fn label(&self) -> Option<usize> {
        match self {
            Scene::Capture(img) => img.label,
            Scene::Cloud(pc) => pc.label,
        }
    }

    /// Point cloud ready for the network. Captures at least 560×400 go through
    /// the crop/subsample preprocessing; smaller ones are back-projected as is.
    pub fn into_cloud(self) -> Result<PointCloud> {
        match self {
            Scene::Cloud(pc) if pc.is_empty() => Err(Error::EmptyCloud),
            Scene::Cloud(pc) => Ok(pc),
            Scene::Capture(img) => {
                if img.width >= crate::pointcloud::CROP_WIDTH && img.height >= crate::pointcloud::CROP_HEIGHT {
                    preprocess_capture(&img)
                } else {
                    project_depth_map(&img)
                }
            }
        }
    }
}

fn label_field(label: Option<usize>) -> String {
    label.map_or("-1".to_string(), |l| l.to_string())
}

fn parse_label(s: &str) -> Result<Option<usize>> {
    if s == "-1" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Malformed(format!("invalid label {s:?}")))
}

pub fn encode_capture(img: &DepthImage) -> Vec<u8> {
    let k = img.intrinsics;
    let mut out = format!(
        "{CAPTURE_MAGIC} {} {} {} {} {} {} {}\n",
        img.width,
        img.height,
        k.fx,
        k.fy,
        k.cx,
        k.cy,
        label_field(img.label)
    )
    .into_bytes();
    out.reserve(img.depth.len() * 4);
    for d in &img.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn encode_cloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = format!("{CLOUD_MAGIC} {} {}\n", pc.len(), label_field(pc.label)).into_bytes();
    out.reserve(pc.len() * 12);
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::UnsupportedFormat("no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::UnsupportedFormat("header is not text".into()))?;
    Ok((header, &bytes[end + 1..]))
}

fn payload_floats(payload: &[u8], header_len: usize, count: usize) -> Result<Vec<f32>> {
    let expected = count * 4;
    if payload.len() != expected {
        return Err(Error::CorruptFile {
            offset: header_len + payload.len().min(expected),
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            index,
            reason: format!("non-finite value {}", values[index]),
        });
    }
    Ok(values)
}

fn fields<'a>(rest: &'a str, n: usize, what: &str) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = rest.split_ascii_whitespace().collect();
    if f.len() != n {
        return Err(Error::Malformed(format!("{what} header needs {n} fields, found {}", f.len())));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Malformed(format!("invalid {name} {s:?}")))
}

/// Parse either format, detected by its magic.
pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let (header, payload) = split_header(bytes)?;
    let header_len = header.len() + 1;
    if let Some(rest) = header.strip_prefix(CAPTURE_MAGIC).filter(|r| r.starts_with(' ')) {
        let f = fields(rest, 7, "capture")?;
        let width: usize = num(f[0], "width")?;
        let height: usize = num(f[1], "height")?;
        if width == 0 || height == 0 {
            return Err(Error::Malformed(format!("empty capture {width}x{height}")));
        }
        let k = CameraIntrinsics::new(num(f[2], "fx")?, num(f[3], "fy")?, num(f[4], "cx")?, num(f[5], "cy")?)?;
        let label = parse_label(f[6])?;
        let count = width
            .checked_mul(height)
            .ok_or_else(|| Error::Malformed("capture dimensions overflow".into()))?;
        let depth = payload_floats(payload, header_len, count)?;
        let mut img = DepthImage::new(width, height, depth, k)?;
        img.label = label;
        Ok(Scene::Capture(img))
    } else if let Some(rest) = header.strip_prefix(CLOUD_MAGIC).filter(|r| r.starts_with(' ')) {
        let f = fields(rest, 2, "cloud")?;
        let count: usize = num(f[0], "point count")?;
        let label = parse_label(f[1])?;
        let floats = count
            .checked_mul(3)
            .ok_or_else(|| Error::Malformed("point count overflow".into()))?;
        let values = payload_floats(payload, header_len, floats)?;
        let points = values
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok(Scene::Cloud(PointCloud::new(points, label)))
    } else {
        let shown: String = header.chars().take(24).collect();
        Err(Error::UnsupportedFormat(format!("unknown magic in {shown:?}")))
    }
}

pub fn parse_scene_file(path: impl AsRef<Path>) -> Result<Scene> {
    decode_scene(&fs::read(path)?)
}

pub fn write_capture(path: impl AsRef<Path>, img: &DepthImage) -> Result<()> {
    fs::write(path, encode_capture(img))?;
    Ok(())
}

pub fn write_cloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    fs::write(path, encode_cloud(pc))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub split: Split,
}

/// `index.tsv`: a `file\tlabel\tsplit` header, then one row per sample with a
/// path relative to the dataset directory.
pub fn write_manifest(dir: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("file\tlabel\tsplit\n");
    for e in entries {
        s += &format!("{}\t{}\t{}\n", e.file, e.label, e.split.name());
    }
    fs::write(dir.as_ref().join(MANIFEST), s)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "file\tlabel\tsplit" => {}
        _ => return Err(Error::Malformed(format!("{} lacks the file/label/split header", path.display()))),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Malformed(format!("{MANIFEST} line {}: expected 3 columns", n + 1)));
            }
            let split = match f[2].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Malformed(format!("{MANIFEST} line {}: unknown split {other:?}", n + 1))),
            };
            Ok(ManifestEntry {
                file: f[0].to_string(),
                label: num(f[1].trim(), "label")?,
                split,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .filter_map(|pc| pc.label)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Load every sample listed in the manifest. The manifest label wins; a file
/// whose own label disagrees is rejected.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ds = Dataset::default();
    for e in entries {
        let path = dir.join(&e.file);
        let scene = parse_scene_file(&path)?;
        if let Some(l) = scene.label() {
            if l != e.label {
                return Err(Error::Malformed(format!(
                    "{}: file label {l} disagrees with manifest label {}",
                    path.display(),
                    e.label
                )));
            }
        }
        let mut pc = scene.into_cloud()?;
        pc.label = Some(e.label);
        match e.split {
            Split::Train => {
                ds.train.push(pc);
                ds.train_files.push(path);
            }
            Split::Test => {
                ds.test.push(pc);
                ds.test_files.push(path);
            }
        }
    }
    Ok(ds)
}
