//! Dataset ingestion (IDX and class-per-directory PNG layouts), domain pairing
//! and seeded mini-batching.
//!
//! Target-domain labels never live on a [`Sample`]. Ingestion moves them into
//! [`HeldOutLabels`], which only evaluation code consumes.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Big-endian IDX image/label files, MNIST style.
    Idx,
    /// `<root>/<class_index>/<file>.png`
    RawPngDir,
}

/// One image with pixels in `[0, 1]`, shaped `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Array3<f32>,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// Ground-truth labels of target samples, in sample order. Evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOutLabels(Vec<usize>);

impl HeldOutLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn for_evaluation(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Output of [`ingest_dataset`].
#[derive(Debug, Clone)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    /// Present for target-domain data that shipped with labels.
    pub held_out: Option<HeldOutLabels>,
}

/// Where and how to resample images during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub height: usize,
    pub width: usize,
    /// Channel count required by the domain pair; grayscale is replicated up to it.
    pub channels: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            height: 28,
            width: 28,
            channels: 1,
        }
    }
}

/// Source and target collections sharing class count and image shape.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source_set: Vec<Sample>,
    pub target_set: Vec<Sample>,
    pub num_classes: usize,
    pub channels: usize,
}

impl DomainPair {
    pub fn new(source_set: Vec<Sample>, target_set: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let shape = source_set
            .first()
            .or(target_set.first())
            .map(|s| s.pixels.dim())
            .ok_or_else(|| Error::Structural("domain pair has no samples".into()))?;
        for s in source_set.iter().chain(&target_set) {
            if s.pixels.dim() != shape {
                return Err(Error::Structural(format!(
                    "sample shape {:?} differs from pair shape {:?}",
                    s.pixels.dim(),
                    shape
                )));
            }
        }
        if let Some(bad) = source_set.iter().filter_map(|s| s.label).find(|&l| l >= num_classes) {
            return Err(Error::Structural(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            source_set,
            target_set,
            num_classes,
            channels: shape.0,
        })
    }
}

/// A non-empty group of samples from one domain plus their dataset positions.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    samples: Vec<&'a Sample>,
    indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<&'a Sample>, indices: Vec<usize>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("batch must not be empty".into()))?;
        if samples.iter().any(|s| s.domain != first.domain) {
            return Err(Error::Contract("batch mixes domains".into()));
        }
        if samples.len() != indices.len() {
            return Err(Error::Contract("batch index count mismatch".into()));
        }
        Ok(Self { samples, indices })
    }

    /// Gathers `indices` out of `all`.
    pub fn gather(all: &'a [Sample], indices: Vec<usize>) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                all.get(i)
                    .ok_or_else(|| Error::Contract(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, indices)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[&'a Sample] {
        &self.samples
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn domain(&self) -> Domain {
        self.samples[0].domain
    }

    pub fn pixels(&self) -> Array4<f32> {
        stack_pixels(self.samples.iter().copied())
    }

    /// Labels if every sample carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Stacks sample tensors into a `(n, c, h, w)` array.
pub fn stack_pixels<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Array4<f32> {
    let views: Vec<_> = samples.into_iter().map(|s| s.pixels.view()).collect();
    if views.is_empty() {
        return Array4::zeros((0, 0, 0, 0));
    }
    ndarray::stack(Axis(0), &views).expect("uniform sample shapes")
}

/// Splits `samples` into seeded shuffled batches; the final short batch is kept.
pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<Batch<'_>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| Batch::gather(samples, chunk.to_vec()))
        .collect()
}

/// Loads a dataset, resamples it to `opts`, and separates target labels.
///
/// For [`DataFormat::Idx`], `path` is either the images file
/// (`*-images-idx3-ubyte`) or the common prefix (`.../train`).
pub fn ingest_dataset(path: &Path, format: DataFormat, domain: Domain, opts: &IngestOptions) -> Result<Ingested> {
    let raw = match format {
        DataFormat::Idx => read_idx_pair(path, domain)?,
        DataFormat::RawPngDir => read_png_dir(path)?,
    };
    if raw.images.is_empty() {
        return Err(Error::Ingestion {
            file: path.to_path_buf(),
            reason: "no samples found".into(),
        });
    }
    let mut samples = Vec::with_capacity(raw.images.len());
    for (img, origin) in raw.images.into_iter().zip(&raw.origins) {
        let img = match_channels(img, opts.channels, origin)?;
        samples.push(resize_bilinear(&img, opts.height, opts.width));
    }
    let (labels, held_out) = match (domain, raw.labels) {
        (Domain::Source, Some(l)) => (l.into_iter().map(Some).collect(), None),
        (Domain::Source, None) => {
            return Err(Error::Structural(format!(
                "source data at {} has no labels",
                path.display()
            )))
        }
        (Domain::Target, l) => (vec![None; samples.len()], l.map(HeldOutLabels)),
    };
    let samples = samples
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| Sample { pixels, label, domain })
        .collect();
    Ok(Ingested { samples, held_out })
}

struct RawImages {
    images: Vec<Array3<f32>>,
    labels: Option<Vec<usize>>,
    origins: Vec<PathBuf>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_paths(path: &Path) -> (PathBuf, PathBuf) {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.contains("images-idx3") {
        let labels = name.replace("images-idx3", "labels-idx1");
        (path.to_path_buf(), path.with_file_name(labels))
    } else {
        let prefix = path.to_string_lossy();
        (
            PathBuf::from(format!("{prefix}-images-idx3-ubyte")),
            PathBuf::from(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

/// Parses an unsigned-byte IDX file into `(dims, payload)`.
fn parse_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |reason: String| Error::Ingestion {
        file: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(bad(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(bad("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(bad(format!(
            "payload has {} bytes, dims {:?} need {expected}",
            bytes.len() - header,
            dims
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn read_idx_pair(path: &Path, domain: Domain) -> Result<RawImages> {
    let (image_path, label_path) = idx_paths(path);
    let (dims, payload) = parse_idx(&image_path, &read_file(&image_path)?)?;
    let (n, c, h, w) = match dims.as_slice() {
        [n, h, w] => (*n, 1, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => {
            return Err(Error::Ingestion {
                file: image_path,
                reason: format!("expected 3 or 4 image dims, got {dims:?}"),
            })
        }
    };
    let per = c * h * w;
    let images = (0..n)
        .map(|i| {
            Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
                payload[i * per + (ch * h + y) * w + x] as f32 / 255.0
            })
        })
        .collect();
    let labels = if label_path.exists() {
        let (ldims, lpayload) = parse_idx(&label_path, &read_file(&label_path)?)?;
        if ldims.len() != 1 || ldims[0] != n {
            return Err(Error::Structural(format!(
                "{} holds {:?} labels for {n} images",
                label_path.display(),
                ldims
            )));
        }
        Some(lpayload.into_iter().map(usize::from).collect())
    } else if domain == Domain::Source {
        return Err(Error::Structural(format!(
            "label file {} missing",
            label_path.display()
        )));
    } else {
        None
    };
    Ok(RawImages {
        images,
        labels,
        origins: vec![image_path; n],
    })
}

fn read_png_dir(root: &Path) -> Result<RawImages> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut classes = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let class = name.parse::<usize>().map_err(|_| Error::Ingestion {
            file: entry.path(),
            reason: "class directory name is not an integer".into(),
        })?;
        classes.push((class, entry.path()));
    }
    classes.sort();

    let mut out = RawImages {
        images: Vec::new(),
        labels: Some(Vec::new()),
        origins: Vec::new(),
    };
    for (class, dir) in classes {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file).map_err(|e| Error::Ingestion {
                file: file.clone(),
                reason: e.to_string(),
            })?;
            let arr = if img.color().has_color() {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                    rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
                })
            } else {
                let luma = img.to_luma8();
                let (w, h) = luma.dimensions();
                Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                    luma.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
                })
            };
            out.images.push(arr);
            out.labels.as_mut().expect("labels").push(class);
            out.origins.push(file);
        }
    }
    Ok(out)
}

fn match_channels(img: Array3<f32>, channels: usize, origin: &Path) -> Result<Array3<f32>> {
    let have = img.dim().0;
    if have == channels {
        Ok(img)
    } else if have == 1 {
        let views = vec![img.index_axis(Axis(0), 0); channels];
        Ok(ndarray::stack(Axis(0), &views).expect("same shape"))
    } else {
        Err(Error::Ingestion {
            file: origin.to_path_buf(),
            reason: format!("image has {have} channels, pair requires {channels}"),
        })
    }
}

/// Bilinear resampling with half-pixel centers; output clamped to `[0, 1]`.
pub fn resize_bilinear(img: &Array3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let axis = |out: usize, size_in: usize, size_out: usize| {
        let scale = size_in as f64 / size_out as f64;
        let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(size_in - 1);
        let hi = (lo + 1).min(size_in - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let rows: Vec<_> = (0..height).map(|y| axis(y, h, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| axis(x, w, width)).collect();
    Array3::from_shape_fn((c, height, width), |(ch, y, x)| {
        let (y0, y1, ly) = rows[y];
        let (x0, x1, lx) = cols[x];
        let top = img[[ch, y0, x0]] * (1.0 - lx) + img[[ch, y0, x1]] * lx;
        let bottom = img[[ch, y1, x0]] * (1.0 - lx) + img[[ch, y1, x1]] * lx;
        (top * (1.0 - ly) + bottom * ly).clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                pixels: Array3::from_elem((1, 2, 2), i as f32 / n as f32),
                label: Some(i % 3),
                domain: Domain::Source,
            })
            .collect()
    }

    #[test]
    fn batches_keep_short_tail() {
        let s = toy(10);
        let sizes: Vec<_> = make_batches(&s, 4, 1).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_seeded() {
        let s = toy(10);
        let a: Vec<_> = make_batches(&s, 3, 9)
            .unwrap()
            .iter()
            .map(|b| b.indices().to_vec())
            .collect();
        let b: Vec<_> = make_batches(&s, 3, 9)
            .unwrap()
            .iter()
            .map(|b| b.indices().to_vec())
            .collect();
        let c: Vec<_> = make_batches(&s, 3, 10)
            .unwrap()
            .iter()
            .map(|b| b.indices().to_vec())
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_batch_is_single() {
        let s = toy(300);
        let batches = make_batches(&s, 300, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 300);
    }

    #[test]
    fn batch_size_one_rejected() {
        assert!(matches!(make_batches(&toy(4), 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        let s = toy(23);
        let mut seen: Vec<usize> = make_batches(&s, 5, 4)
            .unwrap()
            .iter()
            .flat_map(|b| b.indices().to_vec())
            .collect();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Array3::from_elem((1, 8, 8), 0.25f32);
        let out = resize_bilinear(&img, 28, 28);
        assert_eq!(out.dim(), (1, 28, 28));
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_matches_half_pixel_convention() {
        // 2x2 -> 4x4: the first output row samples source row at -0.25 -> clamped to 0.
        let img = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4);
        let row: Vec<f32> = (0..4).map(|x| out[[0, 0, x]]).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn grayscale_replicated_to_three_channels() {
        let img = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| (y * 2 + x) as f32 / 4.0);
        let out = match_channels(img.clone(), 3, Path::new("x")).unwrap();
        assert_eq!(out.dim(), (3, 2, 2));
        for c in 0..3 {
            assert_eq!(out.index_axis(Axis(0), c), img.index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn pair_rejects_shape_mismatch() {
        let mut t = toy(2);
        t[0].pixels = Array3::zeros((1, 3, 3));
        assert!(DomainPair::new(toy(2), t, 3).is_err());
    }
}
