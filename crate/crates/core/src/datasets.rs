//! Labeled image sets: IDX ingestion and export, the procedural glyph
//! dataset, imbalanced splits, synthetic balancing and the `MLIMG01` float
//! image archive.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::gm_distribution::{self, GmmParams};
use crate::networks::Network;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const ARCHIVE_MAGIC: &[u8] = b"MLIMG01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn gray(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 1,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Images flattened to rows (row-major, interleaved channels) with values in
/// `[0, 1]`, plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Array2<f64>,
    labels: Vec<usize>,
    shape: ImageShape,
    class_count: usize,
}

impl LabeledImageSet {
    pub fn new(
        images: Array2<f64>,
        labels: Vec<usize>,
        shape: ImageShape,
        class_count: usize,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != shape.pixels() {
            return Err(Error::Shape(format!(
                "image rows have {} values, shape {:?} needs {}",
                images.ncols(),
                shape,
                shape.pixels()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images: images.as_standard_layout().into_owned(),
            labels,
            shape,
            class_count,
        })
    }

    pub fn empty(shape: ImageShape, class_count: usize) -> Self {
        Self {
            images: Array2::zeros((0, shape.pixels())),
            labels: Vec::new(),
            shape,
            class_count,
        }
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f64> {
        self.images.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            class_count: self.class_count,
        }
    }

    /// Appends rows of `other`, which must share shape and class count.
    pub fn concat(&self, other: &LabeledImageSet) -> Result<Self> {
        if other.shape != self.shape || other.class_count != self.class_count {
            return Err(Error::Shape("cannot concatenate sets of different layout".into()));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            images,
            labels,
            shape: self.shape,
            class_count: self.class_count,
        })
    }

    /// Same data with a larger label alphabet.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if class_count < self.class_count {
            return Err(Error::Input(format!(
                "cannot shrink class count from {} to {class_count}",
                self.class_count
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("file ends inside {what}"),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Parses an IDX image file; returns the dims and the raw bytes.
fn parse_idx_images(bytes: &[u8]) -> Result<(usize, ImageShape, &[u8])> {
    let magic = be_u32(bytes, 0, "magic number")?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_IMAGES_RGB_MAGIC => 4,
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!("magic 0x{other:08x} is not an unsigned-byte image file"),
            })
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * d, "dimension table")? as usize);
    }
    let header = 4 + 4 * ndims;
    let shape = ImageShape {
        height: dims[1],
        width: dims[2],
        channels: if ndims == 4 { dims[3] } else { 1 },
    };
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Format {
            offset: 4,
            message: "dimension product overflows".into(),
        })?;
    let body = &bytes[header..];
    if body.len() < total {
        return Err(Error::Format {
            offset: (header + body.len()) as u64,
            message: format!("truncated: {} of {total} pixel bytes present", body.len()),
        });
    }
    if body.len() > total {
        return Err(Error::Format {
            offset: (header + total) as u64,
            message: "trailing bytes after pixel data".into(),
        });
    }
    Ok((dims[0], shape, body))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("magic 0x{magic:08x} is not an unsigned-byte label file"),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            offset: (8 + body.len().min(n)) as u64,
            message: format!("label file declares {n} labels but holds {}", body.len()),
        });
    }
    Ok(body)
}

/// Loads an IDX image/label file pair; bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (n, shape, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {} labels", labels.len()),
        });
    }
    let images = Array2::from_shape_vec(
        (n, shape.pixels()),
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledImageSet::new(images, labels, shape, class_count)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_idx_images(set: &LabeledImageSet) -> Vec<u8> {
    let s = set.shape;
    let mut out = Vec::with_capacity(20 + set.images.len());
    if s.channels == 1 {
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    } else {
        out.extend_from_slice(&IDX_IMAGES_RGB_MAGIC.to_be_bytes());
    }
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(s.height as u32).to_be_bytes());
    out.extend_from_slice(&(s.width as u32).to_be_bytes());
    if s.channels != 1 {
        out.extend_from_slice(&(s.channels as u32).to_be_bytes());
    }
    out.extend(set.images.iter().map(|&v| quantize(v)));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Input(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

/// Writes a set as IDX; pixels are quantized to `round(255·v)`.
pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_idx_images(set))?;
    fs::write(labels_path, encode_idx_labels(&set.labels)?)?;
    Ok(())
}

/// Parameters of the procedural glyph dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sd: f64,
    /// Maximum translation in pixels along each axis; shifts are drawn
    /// uniformly and may be fractional.
    pub max_shift: f64,
    /// Glyph scale is drawn uniformly from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    /// Half-width of the uniform foreground intensity jitter.
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 600,
            height: 16,
            width: 16,
            noise_sd: 0.05,
            max_shift: 2.0,
            scale_jitter: 0.15,
            intensity_jitter: 0.2,
            seed: 0,
        }
    }
}

/// Template names, indexed by class.
pub const GLYPH_TEMPLATES: [&str; 8] = [
    "bar", "cross", "disk", "ring", "diagonal", "checker", "frame", "dot-grid",
];

fn template_value(kind: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match kind {
        0 => v.abs() <= 0.2 && u.abs() <= 0.7,
        1 => (v.abs() <= 0.2 && u.abs() <= 0.7) || (u.abs() <= 0.2 && v.abs() <= 0.7),
        2 => r <= 0.6,
        3 => (0.4..=0.65).contains(&r),
        4 => (u - v).abs() <= 0.25 && u.abs() <= 0.75 && v.abs() <= 0.75,
        5 => {
            u.abs() <= 0.8
                && v.abs() <= 0.8
                && (((u + 1.0) * 2.5).floor() as i64 + ((v + 1.0) * 2.5).floor() as i64) % 2 == 0
        }
        6 => (0.55..=0.75).contains(&u.abs().max(v.abs())),
        7 => {
            let snap = |x: f64| (x * 2.0).round().clamp(-1.0, 1.0) / 2.0;
            let (du, dv) = (u - snap(u), v - snap(v));
            (du * du + dv * dv).sqrt() <= 0.15
        }
        _ => unreachable!("template index checked by caller"),
    }
}

/// Placement of a template inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pose {
    dx: f64,
    dy: f64,
    scale: f64,
}

impl Pose {
    #[cfg(test)]
    const CENTERED: Pose = Pose {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
    };
}

/// Sub-pixel samples per axis when rasterizing.
const SUPERSAMPLE: usize = 4;

/// Coverage of each pixel by the template, in `[0, 1]`.
fn render_template(kind: usize, height: usize, width: usize, pose: Pose) -> Vec<f64> {
    let cy = (height as f64 - 1.0) / 2.0 + pose.dy;
    let cx = (width as f64 - 1.0) / 2.0 + pose.dx;
    let (sy, sx) = (pose.scale * height as f64 / 2.0, pose.scale * width as f64 / 2.0);
    let step = 1.0 / SUPERSAMPLE as f64;
    let offsets: Vec<f64> = (0..SUPERSAMPLE).map(|i| (i as f64 + 0.5) * step - 0.5).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut hits = 0usize;
            for oy in &offsets {
                for ox in &offsets {
                    let u = (x as f64 + ox - cx) / sx;
                    let v = (y as f64 + oy - cy) / sy;
                    hits += usize::from(template_value(kind, u, v));
                }
            }
            out.push(hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64);
        }
    }
    out
}

/// Class `k` renders template `k` with a random sub-pixel shift, scale and
/// foreground level, plus additive Gaussian noise; samples are grouped by
/// class.
pub fn generate_glyphs(cfg: &GlyphConfig) -> Result<LabeledImageSet> {
    if cfg.num_classes == 0 || cfg.num_classes > GLYPH_TEMPLATES.len() {
        return Err(Error::Config(format!(
            "glyph dataset supports 1..={} classes, got {}",
            GLYPH_TEMPLATES.len(),
            cfg.num_classes
        )));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("glyph images need a positive size".into()));
    }
    if !(cfg.noise_sd >= 0.0 && cfg.noise_sd.is_finite()) {
        return Err(Error::Config(format!("noise_sd = {} must be >= 0", cfg.noise_sd)));
    }
    if !(cfg.max_shift >= 0.0 && cfg.max_shift.is_finite()) {
        return Err(Error::Config(format!("max_shift = {} must be >= 0", cfg.max_shift)));
    }
    if !(0.0..0.9).contains(&cfg.scale_jitter) {
        return Err(Error::Config(format!("scale_jitter = {} outside [0, 0.9)", cfg.scale_jitter)));
    }
    if !(0.0..=0.5).contains(&cfg.intensity_jitter) {
        return Err(Error::Config(format!(
            "intensity_jitter = {} outside [0, 0.5]",
            cfg.intensity_jitter
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let shape = ImageShape::gray(cfg.height, cfg.width);
    let n = cfg.num_classes * cfg.per_class;
    let mut images = Array2::zeros((n, shape.pixels()));
    let mut labels = Vec::with_capacity(n);
    let uniform = |rng: &mut ChaCha8Rng, half: f64| {
        if half > 0.0 {
            rng.random_range(-half..=half)
        } else {
            0.0
        }
    };
    let mut row = 0;
    for class in 0..cfg.num_classes {
        for _ in 0..cfg.per_class {
            let pose = Pose {
                dx: uniform(&mut rng, cfg.max_shift),
                dy: uniform(&mut rng, cfg.max_shift),
                scale: 1.0 + uniform(&mut rng, cfg.scale_jitter),
            };
            let level = 1.0 - cfg.intensity_jitter + uniform(&mut rng, cfg.intensity_jitter);
            let template = render_template(class, cfg.height, cfg.width, pose);
            for (dst, t) in images.row_mut(row).iter_mut().zip(template) {
                let jitter = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *dst = (t * level + jitter).clamp(0.0, 1.0);
            }
            labels.push(class);
            row += 1;
        }
    }
    LabeledImageSet::new(images, labels, shape, cfg.num_classes)
}

/// Which classes are minorities and how many samples each split receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub minority_classes: Vec<usize>,
    pub n_min: usize,
    pub n_maj: usize,
    pub n_val: usize,
    pub seed: u64,
}

/// Two minority classes of 20 against majorities of 400, with 100
/// validation samples per class.
impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self {
            minority_classes: vec![1, 3],
            n_min: 20,
            n_maj: 400,
            n_val: 100,
            seed: 0,
        }
    }
}

impl ImbalanceSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.n_min == 0 || self.n_maj == 0 {
            return Err(Error::Config("n_min and n_maj must be at least 1".into()));
        }
        let mut seen = vec![false; class_count];
        for &c in &self.minority_classes {
            if c >= class_count {
                return Err(Error::Config(format!(
                    "minority class {c} out of range for {class_count} classes"
                )));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!("minority class {c} listed twice")));
            }
        }
        Ok(())
    }

    pub fn is_minority(&self, class: usize) -> bool {
        self.minority_classes.contains(&class)
    }

    pub fn ratio(&self) -> f64 {
        self.n_maj as f64 / self.n_min as f64
    }
}

/// Train/validation sets and the source indices they were drawn from.
#[derive(Debug, Clone)]
pub struct ImbalancedSplit {
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded per-class subsampling without replacement into disjoint train and
/// validation index sets (each kept in source order).
pub fn make_imbalanced(full: &LabeledImageSet, spec: &ImbalanceSpec) -> Result<ImbalancedSplit> {
    spec.validate(full.class_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_indices = Vec::new();
    let mut val_indices = Vec::new();
    for class in 0..full.class_count {
        let n_train = if spec.is_minority(class) {
            spec.n_min
        } else {
            spec.n_maj
        };
        let mut members = full.class_indices(class);
        if members.len() < n_train + spec.n_val {
            return Err(Error::Data(format!(
                "class {class} has {} samples, needs {} train + {} validation",
                members.len(),
                n_train,
                spec.n_val
            )));
        }
        members.shuffle(&mut rng);
        train_indices.extend_from_slice(&members[..n_train]);
        val_indices.extend_from_slice(&members[n_train..n_train + spec.n_val]);
    }
    train_indices.sort_unstable();
    val_indices.sort_unstable();
    Ok(ImbalancedSplit {
        train: full.select(&train_indices),
        val: full.select(&val_indices),
        train_indices,
        val_indices,
    })
}

/// Decodes latents drawn from `gmm` and appends them until every class has
/// as many samples as the largest one. Originals come first, unchanged.
pub fn balance_with_synthetic<R: Rng + ?Sized>(
    train: &LabeledImageSet,
    decoder: &Network,
    gmm: &GmmParams,
    rng: &mut R,
) -> Result<LabeledImageSet> {
    if gmm.class_count() != train.class_count {
        return Err(Error::Shape(format!(
            "mixture has {} classes, training set {}",
            gmm.class_count(),
            train.class_count
        )));
    }
    if decoder.spec.output_dim() != train.shape.pixels() || decoder.spec.input_dim() != gmm.dim() {
        return Err(Error::Shape("decoder does not match data or mixture".into()));
    }
    let counts = train.counts_per_class();
    let target = counts.iter().copied().max().unwrap_or(0);
    let deficits: Vec<usize> = counts.iter().map(|&c| target - c).collect();
    if deficits.iter().all(|&d| d == 0) {
        return Ok(train.clone());
    }
    let latents = gm_distribution::sample(gmm, &deficits, rng)?;
    let decoded = decoder.predict(latents.features().view())?.mapv(|v| v.clamp(0.0, 1.0));
    let synthetic = LabeledImageSet::new(
        decoded,
        latents.labels().to_vec(),
        train.shape,
        train.class_count,
    )?;
    train.concat(&synthetic)
}

/// `MLIMG01`, then n, H, W, C as little-endian u64, then pixels as
/// little-endian f64.
pub fn write_image_archive<W: Write>(set: &LabeledImageSet, w: &mut W) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    let s = set.shape;
    for v in [set.len(), s.height, s.width, s.channels] {
        codec::put_u64(w, v as u64)?;
    }
    codec::put_f64s(w, set.images.iter().copied())?;
    Ok(())
}

/// Reads an `MLIMG01` archive; returns the shape and the pixel rows.
pub fn read_image_archive<R: Read>(r: R) -> Result<(ImageShape, Array2<f64>)> {
    let mut r = Reader::new(r, "image archive");
    r.magic(ARCHIVE_MAGIC)?;
    let limit = 1u64 << 32;
    let n = r.len("n", limit)?;
    let shape = ImageShape {
        height: r.len("H", 1 << 16)?,
        width: r.len("W", 1 << 16)?,
        channels: r.len("C", 64)?,
    };
    let values = r.f64s(n * shape.pixels())?;
    r.expect_eof()?;
    let images = Array2::from_shape_vec((n, shape.pixels()), values)
        .map_err(|e| Error::Persist(e.to_string()))?;
    Ok((shape, images))
}

/// Writes the archive plus an IDX label file.
pub fn save_archive(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(images_path)?);
    write_image_archive(set, &mut w)?;
    w.flush()?;
    fs::write(labels_path, encode_idx_labels(&set.labels)?)?;
    Ok(())
}

pub fn load_archive(images_path: &Path, labels_path: &Path, class_count: usize) -> Result<LabeledImageSet> {
    let file = File::open(images_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", images_path.display())))?;
    let (shape, images) = read_image_archive(BufReader::new(file))?;
    let label_bytes = read_file(labels_path)?;
    let labels = parse_idx_labels(&label_bytes)?
        .iter()
        .map(|&l| l as usize)
        .collect();
    LabeledImageSet::new(images, labels, shape, class_count)
}
