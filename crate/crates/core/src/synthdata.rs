//! Procedural toy-saliency scenes with controllable annotator ambiguity,
//! plus dataset file I/O.
//!
//! Each scene is a noisy gray background with 2-4 non-overlapping shapes
//! (rectangles and discs). In an unambiguous scene exactly one shape wins on
//! background contrast by a clear margin and is the ground-truth mask. In an
//! ambiguous scene two shapes tie exactly; the label is drawn between them
//! 50/50 and their union becomes the ambiguity mask. An optional depth layer
//! gives every shape a constant depth ordered by paint order; on disk the
//! depth is a separate map, fused as a fourth input channel at load time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::pnm;
use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MIN_IMAGE_SIZE: usize = 16;
/// Contrast gap between the salient shape and every decoy.
pub const CONTRAST_MARGIN: f64 = 0.1;
pub const MAX_NOISE_AMPLITUDE: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
pub struct DatasetConfig {
    pub n: usize,
    pub size: usize,
    pub p_ambiguous: f64,
    pub with_depth: bool,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset: n must be at least 1".into()));
        }
        if self.size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "dataset: size {} is below the minimum {MIN_IMAGE_SIZE} (the encoder needs three halvings)",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.p_ambiguous) {
            return Err(Error::Config("dataset: p_ambiguous must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One training/evaluation element. The image already carries the depth as
/// its last channel when depth is enabled.
#[derive(Clone, Debug)]
pub struct ImageSample {
    /// `[c, h, w]` with c in {1, 3, 4}; values in [0, 1].
    pub image: Tensor,
    /// `[1, h, w]` binary mask.
    pub mask: Tensor,
    /// `[1, h, w]` binary mask of annotator disagreement; `None` when the
    /// scene is unambiguous.
    pub ambiguity: Option<Tensor>,
}

impl ImageSample {
    pub fn channels(&self) -> usize {
        self.image.shape[0]
    }

    pub fn size(&self) -> usize {
        self.image.shape[1]
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rectangle,
    Disc,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Half-extent: rectangle half-sides or disc radius.
    rx: f64,
    ry: f64,
    intensity: f64,
    depth: f64,
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Disc => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        // Conservative bounding-box test with a one-pixel gap.
        (self.cx - other.cx).abs() <= self.rx + other.rx + 1.0
            && (self.cy - other.cy).abs() <= self.ry + other.ry + 1.0
    }
}

fn paint_mask(shape: &Shape, size: usize) -> Tensor {
    let mut m = Tensor::zeros(&[1, size, size]);
    for y in 0..size {
        for x in 0..size {
            if shape.contains(x, y) {
                m.data[y * size + x] = 1.0;
            }
        }
    }
    m
}

fn sample_shape(s: &mut Stream, size: usize, intensity: f64, depth: f64) -> Shape {
    let kind = if s.below(2) == 0 { ShapeKind::Rectangle } else { ShapeKind::Disc };
    let max_half = size as f64 / 6.0;
    let min_half = size as f64 / 10.0;
    let rx = s.uniform_in(min_half, max_half);
    let ry = s.uniform_in(min_half, max_half);
    let margin = rx.max(ry) + 1.5;
    let cx = s.uniform_in(margin, size as f64 - 1.0 - margin);
    let cy = s.uniform_in(margin, size as f64 - 1.0 - margin);
    Shape { kind, cx, cy, rx, ry, intensity, depth }
}

fn generate_scene(cfg: &DatasetConfig, index: u64) -> ImageSample {
    let mut s = Stream::new(cfg.seed, Purpose::DataGen, 0, index, 0);
    let size = cfg.size;
    let background = s.uniform_in(0.35, 0.65);
    let noise_amp = s.uniform_in(0.01, MAX_NOISE_AMPLITUDE);
    let ambiguous = s.uniform() < cfg.p_ambiguous;
    let shape_count = 2 + s.below(3); // 2..=4

    // Contrast schedule: the salient shape (or tied pair) clears every decoy
    // by at least the margin.
    let salient_contrast = s.uniform_in(0.22, 0.33);
    let mut contrasts = vec![salient_contrast];
    if ambiguous {
        contrasts.push(salient_contrast);
    }
    while contrasts.len() < shape_count {
        contrasts.push(s.uniform_in(0.05, salient_contrast - CONTRAST_MARGIN - 0.02));
    }

    let mut shapes: Vec<Shape> = Vec::with_capacity(shape_count);
    for (j, &contrast) in contrasts.iter().enumerate() {
        let sign = if s.below(2) == 0 { 1.0 } else { -1.0 };
        let intensity = (background + sign * contrast).clamp(0.0, 1.0);
        let depth = 0.2 + 0.7 * (j as f64 + 1.0) / shape_count as f64;
        loop {
            let candidate = sample_shape(&mut s, size, intensity, depth);
            if shapes.iter().all(|other| !candidate.overlaps(other)) {
                shapes.push(candidate);
                break;
            }
        }
    }

    // Contrast dominance must hold by construction.
    for (j, sh) in shapes.iter().enumerate() {
        let c = (sh.intensity - background).abs();
        let is_candidate = j == 0 || (ambiguous && j == 1);
        if is_candidate {
            debug_assert!((c - salient_contrast).abs() < 1e-9);
        } else {
            assert!(
                salient_contrast - c >= CONTRAST_MARGIN - 1e-9,
                "decoy contrast {c} too close to salient {salient_contrast}"
            );
        }
    }

    // Gray base with iid noise, shapes painted clean in paint order.
    let plane = size * size;
    let mut gray = vec![0.0; plane];
    for v in gray.iter_mut() {
        *v = (background + s.uniform_in(-noise_amp, noise_amp)).clamp(0.0, 1.0);
    }
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    for (j, sh) in shapes.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                if sh.contains(x, y) {
                    gray[y * size + x] = sh.intensity;
                    owner[y * size + x] = Some(j);
                }
            }
        }
    }

    // Label: the salient shape, or a 50/50 draw between the tied pair.
    let chosen = if ambiguous {
        if s.uniform() < 0.5 {
            0
        } else {
            1
        }
    } else {
        0
    };
    let mask = paint_mask(&shapes[chosen], size);
    let ambiguity = if ambiguous {
        let a = paint_mask(&shapes[0], size);
        let b = paint_mask(&shapes[1], size);
        let mut sym = Tensor::zeros(&[1, size, size]);
        for i in 0..plane {
            sym.data[i] = if a.data[i] != b.data[i] { 1.0 } else { 0.0 };
        }
        Some(sym)
    } else {
        None
    };

    let image = if cfg.with_depth {
        // Color channels keep the per-pixel mean at the gray level; shapes
        // get a small chroma offset, background stays neutral.
        let mut img = Tensor::zeros(&[4, size, size]);
        let chroma: Vec<f64> = shapes
            .iter()
            .map(|sh| {
                let max_off = 0.05f64.min(sh.intensity).min(1.0 - sh.intensity);
                s.uniform_in(-max_off, max_off)
            })
            .collect();
        for i in 0..plane {
            let g = gray[i];
            let (r, gch, b) = match owner[i] {
                Some(j) => (g + chroma[j], g, g - chroma[j]),
                None => (g, g, g),
            };
            img.data[i] = r;
            img.data[plane + i] = gch;
            img.data[2 * plane + i] = b;
            img.data[3 * plane + i] = match owner[i] {
                Some(j) => shapes[j].depth,
                None => 0.1,
            };
        }
        img
    } else {
        Tensor::new(vec![1, size, size], gray)
    };

    ImageSample { image, mask, ambiguity }
}

/// Generate `cfg.n` scenes. Regeneration with the same config is bitwise
/// identical; samples are keyed individually so order cannot matter.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    Ok((0..cfg.n as u64).map(|i| generate_scene(cfg, i)).collect())
}

fn id_string(i: usize) -> String {
    format!("{i:04}")
}

/// Write a dataset under the filename convention
/// `img_####.(pgm|ppm), gt_####.pgm, amb_####.pgm, dep_####.pgm`.
pub fn write_dataset(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, sample) in samples.iter().enumerate() {
        let id = id_string(i);
        let c = sample.channels();
        match c {
            1 => pnm::write_pgm8(&dir.join(format!("img_{id}.pgm")), &sample.image)?,
            4 => {
                let (h, w) = (sample.image.shape[1], sample.image.shape[2]);
                let plane = h * w;
                let rgb = Tensor::new(vec![3, h, w], sample.image.data[..3 * plane].to_vec());
                let depth = Tensor::new(vec![1, h, w], sample.image.data[3 * plane..].to_vec());
                pnm::write_ppm8(&dir.join(format!("img_{id}.ppm")), &rgb)?;
                pnm::write_pgm8(&dir.join(format!("dep_{id}.pgm")), &depth)?;
            }
            3 => pnm::write_ppm8(&dir.join(format!("img_{id}.ppm")), &sample.image)?,
            other => return Err(Error::Config(format!("cannot store {other}-channel images"))),
        }
        pnm::write_pgm8(&dir.join(format!("gt_{id}.pgm")), &sample.mask)?;
        if let Some(amb) = &sample.ambiguity {
            pnm::write_pgm8(&dir.join(format!("amb_{id}.pgm")), amb)?;
        }
    }
    Ok(())
}

/// One dataset element on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub ambiguity: Option<PathBuf>,
    pub depth: Option<PathBuf>,
}

/// Scan a directory for `img_####/gt_####` pairs. Unpaired ids are an error.
pub fn dataset_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    #[derive(Default)]
    struct Found {
        image: Option<PathBuf>,
        mask: Option<PathBuf>,
        ambiguity: Option<PathBuf>,
        depth: Option<PathBuf>,
    }
    let mut by_id: BTreeMap<usize, Found> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".pgm").or_else(|| name.strip_suffix(".ppm")) else {
            continue;
        };
        let Some((prefix, id_str)) = stem.split_once('_') else { continue };
        let Ok(id) = id_str.parse::<usize>() else { continue };
        let slot = by_id.entry(id).or_default();
        match prefix {
            "img" => slot.image = Some(path),
            "gt" => slot.mask = Some(path),
            "amb" => slot.ambiguity = Some(path),
            "dep" => slot.depth = Some(path),
            _ => {}
        }
    }
    let mut missing = Vec::new();
    let mut entries = Vec::new();
    for (id, found) in by_id {
        match (found.image, found.mask) {
            (Some(image), Some(mask)) => entries.push(ManifestEntry {
                id,
                image,
                mask,
                ambiguity: found.ambiguity,
                depth: found.depth,
            }),
            _ => missing.push(id_string(id)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("unpaired dataset ids: {}", missing.join(", "))));
    }
    Ok(entries)
}

/// Load a directory back into memory, fusing any depth maps as a fourth
/// image channel.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let manifest = dataset_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let mut image = pnm::read_pnm(&entry.image)?.into_tensor();
        if let Some(dep) = &entry.depth {
            let depth = pnm::read_pnm(dep)?.into_tensor();
            image = stack_channels(&image, &depth)?;
        }
        let mask = pnm::read_pnm(&entry.mask)?.into_tensor();
        let ambiguity = match &entry.ambiguity {
            Some(p) => Some(pnm::read_pnm(p)?.into_tensor()),
            None => None,
        };
        samples.push(ImageSample { image, mask, ambiguity });
    }
    Ok(samples)
}

fn stack_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape[1..] != b.shape[1..] {
        return Err(Error::ShapeMismatch {
            context: "depth fusion".into(),
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor::new(shape, data))
}

/// Batch assembly: stack samples into `[n, c, h, w]` image and `[n, 1, h, w]`
/// mask tensors.
pub fn batch_tensors(samples: &[&ImageSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in samples {
        if s.image.shape != first.image.shape {
            return Err(Error::ShapeMismatch {
                context: "batch assembly".into(),
                detail: format!("{:?} vs {:?}", s.image.shape, first.image.shape),
            });
        }
        xs.extend_from_slice(&s.image.data);
        ys.extend_from_slice(&s.mask.data);
    }
    let mut xshape = vec![samples.len()];
    xshape.extend_from_slice(&first.image.shape);
    let mut yshape = vec![samples.len()];
    yshape.extend_from_slice(&first.mask.shape);
    Ok((Tensor::new(xshape, xs), Tensor::new(yshape, ys)))
}
