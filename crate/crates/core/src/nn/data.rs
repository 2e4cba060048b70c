//! Datasets: IDX and CSV ingestion, a seeded synthetic generator, and the
//! hash-based train/validation split.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::netspec::Chw;
use crate::tensor::Tensor4;
use crate::textfmt::split_preamble;

/// Inputs and labels of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor4,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Raw pixel storage. `U8` values are scaled by 1/255 when batched.
#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Pixels {
    fn len(&self) -> usize {
        match self {
            Pixels::U8(v) => v.len(),
            Pixels::F32(v) => v.len(),
            Pixels::F64(v) => v.len(),
        }
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            Pixels::U8(v) => v[i] as f64 / 255.0,
            Pixels::F32(v) => v[i] as f64,
            Pixels::F64(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Chw,
    pub classes: usize,
    pub pixels: Pixels,
    pub labels: Vec<usize>,
}

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;
const IDX_F64: u8 = 0x0E;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether sample `index` belongs to the validation split. Depends only on
/// the index, never on a seed.
pub fn is_validation(index: usize, fraction: f64) -> bool {
    let u = (splitmix64(index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    u < fraction
}

impl Dataset {
    pub fn new(shape: Chw, classes: usize, pixels: Pixels, labels: Vec<usize>) -> Result<Self> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 || classes == 0 {
            return Err(Error::data("dataset shape and class count must be positive"));
        }
        if pixels.len() != labels.len() * c * h * w {
            return Err(Error::data(format!(
                "{} pixel values for {} samples of {c}x{h}x{w}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
        }
        let finite = match &pixels {
            Pixels::U8(_) => true,
            Pixels::F32(v) => v.iter().all(|x| x.is_finite()),
            Pixels::F64(v) => v.iter().all(|x| x.is_finite()),
        };
        if !finite {
            return Err(Error::data("non-finite pixel values"));
        }
        Ok(Self {
            shape,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_size(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let sz = self.sample_size();
        let mut data = Vec::with_capacity(indices.len() * sz);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend((i * sz..(i + 1) * sz).map(|j| self.pixels.value(j)));
            labels.push(self.labels[i]);
        }
        let (c, h, w) = self.shape;
        Batch::new(Tensor4::from_raw([indices.len(), c, h, w], data), labels, self.classes)
    }

    /// Sample indices of the training and validation parts.
    pub fn split(&self, validation_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(Error::arg(format!(
                "validation fraction must be in (0, 1), got {validation_fraction}"
            )));
        }
        let (val, train): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| is_validation(i, validation_fraction));
        if train.is_empty() || val.is_empty() {
            return Err(Error::data(format!(
                "split of {} samples leaves an empty part",
                self.len()
            )));
        }
        Ok((train, val))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let sz = self.sample_size();
        let pick = |i: usize| i * sz..(i + 1) * sz;
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::arg(format!("sample {bad} out of range")));
        }
        let pixels = match &self.pixels {
            Pixels::U8(v) => Pixels::U8(indices.iter().flat_map(|&i| v[pick(i)].to_vec()).collect()),
            Pixels::F32(v) => Pixels::F32(indices.iter().flat_map(|&i| v[pick(i)].to_vec()).collect()),
            Pixels::F64(v) => Pixels::F64(indices.iter().flat_map(|&i| v[pick(i)].to_vec()).collect()),
        };
        Dataset::new(
            self.shape,
            self.classes,
            pixels,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Seeded synthetic task: each class is a sum of Gaussian blobs; samples
    /// are prototypes shifted by up to one pixel, with additive noise,
    /// quantized to bytes.
    pub fn synthetic(samples: usize, classes: usize, shape: Chw, noise: f64, seed: u64) -> Result<Self> {
        let (c, h, w) = shape;
        if samples == 0 || classes == 0 || c * h * w == 0 {
            return Err(Error::arg("synthetic dataset needs positive sizes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let mut p = vec![0.0; c * h * w];
                for _ in 0..3 {
                    let ch = rng.gen_range(0..c);
                    let cy = rng.gen_range(0.0..h as f64);
                    let cx = rng.gen_range(0.0..w as f64);
                    let s = rng.gen_range(0.8..1.8);
                    let amp = rng.gen_range(0.5..1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            p[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * s * s)).exp();
                        }
                    }
                }
                p
            })
            .collect();
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::arg(e.to_string()))?;
        let mut pixels = Vec::with_capacity(samples * c * h * w);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let label = rng.gen_range(0..classes);
            let dy = rng.gen_range(-1i64..=1);
            let dx = rng.gen_range(-1i64..=1);
            let p = &protos[label];
            for ch in 0..c {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let (sy, sx) = (y - dy, x - dx);
                        let base = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            p[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                        let v = (base + normal.sample(&mut rng)).clamp(0.0, 1.0);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(shape, classes, Pixels::U8(pixels), labels)
    }

    /// Reads an image file and a label file in IDX format.
    pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Self> {
        let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
        let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
        Self::from_idx_bytes(&img, &lab, classes)
    }

    pub fn from_idx_bytes(images: &[u8], labels: &[u8], classes: Option<usize>) -> Result<Self> {
        let (ldtype, ldims, lbody) = parse_idx(labels, "labels")?;
        if ldtype != IDX_U8 || ldims.len() != 1 {
            return Err(Error::data("label file must be a 1-D unsigned byte IDX array"));
        }
        let labels: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
        let (dtype, dims, body) = parse_idx(images, "images")?;
        let shape = match dims[..] {
            [_, h, w] => (1, h, w),
            [_, c, h, w] => (c, h, w),
            _ => return Err(Error::data("image file must have 3 or 4 dimensions")),
        };
        if dims[0] != labels.len() {
            return Err(Error::data(format!(
                "{} images but {} labels",
                dims[0],
                labels.len()
            )));
        }
        let pixels = match dtype {
            IDX_U8 => Pixels::U8(body.to_vec()),
            IDX_F32 => Pixels::F32(
                body.chunks_exact(4)
                    .map(|b| f32::from_be_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
            IDX_F64 => Pixels::F64(
                body.chunks_exact(8)
                    .map(|b| f64::from_be_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            other => return Err(Error::data(format!("unsupported IDX element type 0x{other:02X}"))),
        };
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Dataset::new(shape, classes, pixels, labels)
    }

    /// `(images, labels)` IDX byte streams.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let (c, h, w) = self.shape;
        let n = self.len();
        let dims: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
        let (dtype, body) = match &self.pixels {
            Pixels::U8(v) => (IDX_U8, v.clone()),
            Pixels::F32(v) => (IDX_F32, v.iter().flat_map(|x| x.to_be_bytes()).collect()),
            Pixels::F64(v) => (IDX_F64, v.iter().flat_map(|x| x.to_be_bytes()).collect()),
        };
        let images = idx_bytes(dtype, &dims, &body);
        let labels = idx_bytes(IDX_U8, &[n], &self.labels.iter().map(|&l| l as u8).collect::<Vec<_>>());
        (images, labels)
    }

    pub fn save_idx(&self, images: &Path, labels: &Path) -> Result<()> {
        if self.classes > 256 {
            return Err(Error::data("IDX labels hold at most 256 classes"));
        }
        let (i, l) = self.to_idx_bytes();
        std::fs::write(images, i).map_err(|e| Error::io(images, e))?;
        std::fs::write(labels, l).map_err(|e| Error::io(labels, e))
    }

    /// CSV rows of `label,pixel0,...` with optional `# shape=CxHxW`,
    /// `# classes=K` and `# dtype=u8|f64` directives. A header row is
    /// skipped when its first field is not a number.
    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let (directives, body, body_line) = split_preamble(text);
        let mut shape = None;
        let mut classes = None;
        let mut float = false;
        for d in &directives {
            let perr = |m: String| Error::Parse {
                path: origin.to_string(),
                line: d.line,
                message: m,
            };
            match d.key.as_str() {
                "shape" => shape = Some(parse_chw(&d.value).ok_or_else(|| perr(format!("bad shape `{}`", d.value)))?),
                "classes" => {
                    classes = Some(d.value.parse::<usize>().map_err(|_| perr(format!("bad class count `{}`", d.value)))?)
                }
                "dtype" => match d.value.as_str() {
                    "u8" => float = false,
                    "f64" => float = true,
                    other => return Err(perr(format!("unknown dtype `{other}`"))),
                },
                other => return Err(perr(format!("unknown directive `{other}`"))),
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let mut labels = Vec::new();
        let mut bytes = Vec::new();
        let mut floats = Vec::new();
        let mut width = None;
        for (i, rec) in reader.records().enumerate() {
            let line = body_line + i;
            let perr = |m: String| Error::Parse {
                path: origin.to_string(),
                line,
                message: m,
            };
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
                continue;
            }
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(perr(format!("expected {} fields, found {}", width.unwrap_or(0), rec.len())));
            }
            if rec.len() < 2 {
                return Err(perr("a row needs a label and at least one pixel".into()));
            }
            labels.push(rec[0].parse::<usize>().map_err(|_| perr(format!("bad label `{}`", &rec[0])))?);
            for f in rec.iter().skip(1) {
                if float {
                    floats.push(f.parse::<f64>().map_err(|_| perr(format!("bad value `{f}`")))?);
                } else {
                    bytes.push(f.parse::<u8>().map_err(|_| perr(format!("bad byte `{f}`")))?);
                }
            }
        }
        let npix = width.map_or(0, |w| w - 1);
        let shape = match shape {
            Some(s) => s,
            None => {
                let side = (npix as f64).sqrt().round() as usize;
                if side * side != npix || npix == 0 {
                    return Err(Error::data(format!(
                        "{origin}: {npix} pixels per row is not square; add `# shape=CxHxW`"
                    )));
                }
                (1, side, side)
            }
        };
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        let pixels = if float { Pixels::F64(floats) } else { Pixels::U8(bytes) };
        Dataset::new(shape, classes, pixels, labels)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn to_csv(&self) -> String {
        let (c, h, w) = self.shape;
        let mut out = format!("# shape={c}x{h}x{w}\n# classes={}\n", self.classes);
        if !matches!(self.pixels, Pixels::U8(_)) {
            out.push_str("# dtype=f64\n");
        }
        out.push_str("label");
        for i in 0..self.sample_size() {
            let _ = write!(out, ",pixel{i}");
        }
        out.push('\n');
        let sz = self.sample_size();
        for (s, label) in self.labels.iter().enumerate() {
            let _ = write!(out, "{label}");
            for j in s * sz..(s + 1) * sz {
                let _ = match &self.pixels {
                    Pixels::U8(v) => write!(out, ",{}", v[j]),
                    Pixels::F32(v) => write!(out, ",{:?}", v[j] as f64),
                    Pixels::F64(v) => write!(out, ",{:?}", v[j]),
                };
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Loads by extension: `.csv`, otherwise an IDX image file whose label
    /// file is given separately.
    pub fn load(path: &Path, labels: Option<&Path>) -> Result<Self> {
        match (path.extension().and_then(|e| e.to_str()), labels) {
            (Some("csv"), _) => Self::load_csv(path),
            (_, Some(l)) => Self::load_idx(path, l, None),
            (_, None) => Err(Error::arg(format!(
                "{}: IDX images need a label file",
                path.display()
            ))),
        }
    }
}

fn parse_chw(s: &str) -> Option<Chw> {
    let v: Vec<usize> = s.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    match v[..] {
        [c, h, w] => Some((c, h, w)),
        [h, w] => Some((1, h, w)),
        _ => None,
    }
}

fn parse_idx<'a>(bytes: &'a [u8], what: &str) -> Result<(u8, Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::data(format!("{what}: missing IDX magic")));
    }
    let dtype = bytes[2];
    let ndim = bytes[3] as usize;
    let head = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < head {
        return Err(Error::data(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> = bytes[4..head]
        .chunks_exact(4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let elem = match dtype {
        IDX_U8 => 1,
        IDX_F32 => 4,
        IDX_F64 => 8,
        other => return Err(Error::data(format!("{what}: unsupported IDX element type 0x{other:02X}"))),
    };
    let expected = dims.iter().product::<usize>() * elem;
    let body = &bytes[head..];
    if body.len() != expected {
        return Err(Error::data(format!(
            "{what}: IDX payload has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    Ok((dtype, dims, body))
}

fn idx_bytes(dtype: u8, dims: &[usize], body: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, dtype, dims.len() as u8];
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}
