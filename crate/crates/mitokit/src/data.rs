//! Dataset records, manifest files, and the synthetic data generator.
//!
//! A manifest is a line-delimited JSON index: one header line carrying
//! `schema_version` and `track`, then one record per line pointing at an
//! 8-bit RGB PNG. Validation happens eagerly at load so downstream code can
//! assume every invariant holds.
//!
//! The synthetic generator renders desk-scale stand-ins for both tracks:
//! bright ellipse blobs on textured tissue-like backgrounds for detection,
//! and two shape-coded classes (filled disk vs ring) for classification. The
//! classes are deliberately invariant to flips, rotations, brightness, and
//! mild rescaling so that test-time augmentation cannot blur them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Which pipeline a manifest feeds.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Detection,
    Classification,
}

impl std::fmt::Display for Track {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Track::Detection => write!(f, "detection"),
            Track::Classification => write!(f, "classification"),
        }
    }
}

/// One image patch with its annotations.
///
/// Detection records carry `centroids`; classification records carry
/// `class_label` (0 = normal, 1 = atypical). Exactly one of the two is
/// present, matching the manifest's track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub domain_id: u8,
    pub mpp: f64,
    pub image_path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub centroids: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_label: Option<u8>,
}

impl PatchRecord {
    /// Detection positivity: does the patch contain at least one annotation?
    pub fn has_mitosis(&self) -> bool {
        self.centroids.as_ref().is_some_and(|c| !c.is_empty())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    track: Track,
}

/// A validated set of records for one track.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub track: Track,
    pub schema_version: u32,
    pub records: Vec<PatchRecord>,
}

impl DatasetManifest {
    pub fn record(&self, patch_id: &str) -> Option<&PatchRecord> {
        self.records.iter().find(|r| r.patch_id == patch_id)
    }

    /// New manifest keeping only the named records, in manifest order.
    pub fn subset(&self, ids: &HashSet<String>) -> DatasetManifest {
        DatasetManifest {
            track: self.track,
            schema_version: self.schema_version,
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.patch_id))
                .cloned()
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patch_id.clone()).collect()
    }
}

/// Load and validate a manifest.
///
/// Relative image paths are resolved against the manifest's directory; every
/// referenced image must exist, every centroid must be inside its image, and
/// each record must carry exactly the annotation its track requires.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Schema {
            record: "<header>".into(),
            reason: "empty manifest file".into(),
        })??;
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| Error::Schema {
        record: "<header>".into(),
        reason: format!("unparseable header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema {
            record: "<header>".into(),
            reason: format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                header.schema_version
            ),
        });
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: PatchRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            record: format!("line {}", records.len() + 2),
            reason: format!("unparseable record: {e}"),
        })?;
        if !seen.insert(rec.patch_id.clone()) {
            return Err(Error::DuplicatePatchId(rec.patch_id));
        }
        if rec.mpp <= 0.0 {
            return Err(Error::Schema {
                record: rec.patch_id,
                reason: "mpp must be > 0".into(),
            });
        }
        match header.track {
            Track::Detection => {
                if rec.centroids.is_none() || rec.class_label.is_some() {
                    return Err(Error::Schema {
                        record: rec.patch_id,
                        reason: "detection records need centroids and no class_label".into(),
                    });
                }
            }
            Track::Classification => {
                if rec.class_label.is_none() || rec.centroids.is_some() {
                    return Err(Error::Schema {
                        record: rec.patch_id,
                        reason: "classification records need class_label and no centroids".into(),
                    });
                }
                if !matches!(rec.class_label, Some(0) | Some(1)) {
                    return Err(Error::Schema {
                        record: rec.patch_id,
                        reason: "class_label must be 0 (normal) or 1 (atypical)".into(),
                    });
                }
            }
        }
        if rec.image_path.is_relative() {
            rec.image_path = base.join(&rec.image_path);
        }
        if !rec.image_path.is_file() {
            return Err(Error::MissingImage {
                record: rec.patch_id,
                path: rec.image_path,
            });
        }
        if let Some(centroids) = &rec.centroids {
            let (w, h) = image::image_dimensions(&rec.image_path)?;
            for &(x, y) in centroids {
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    return Err(Error::CentroidOutOfBounds {
                        x,
                        y,
                        width: w as usize,
                        height: h as usize,
                    });
                }
            }
        }
        records.push(rec);
    }
    Ok(DatasetManifest {
        track: header.track,
        schema_version: header.schema_version,
        records,
    })
}

/// Write a manifest; image paths are stored relative to `path`'s directory
/// when they point inside it.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = ManifestHeader {
        schema_version: manifest.schema_version,
        track: manifest.track,
    };
    writeln!(file, "{}", serde_json::to_string(&header)?)?;
    for rec in &manifest.records {
        let mut rec = rec.clone();
        if let Ok(rel) = rec.image_path.strip_prefix(base) {
            rec.image_path = rel.to_path_buf();
        }
        writeln!(file, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Decode an 8-bit RGB PNG into `(3, h, w)` values in `[0, 1]`.
pub fn load_image_tensor<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)
        .map_err(|_| Error::MissingFile(path.to_path_buf()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let scale = T::of_f64(1.0 / 255.0);
    let mut out = Array3::<T>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = T::of_usize(pixel[c] as usize) * scale;
        }
    }
    Ok(out)
}

/// Stack image tensors into an `(n, 3, h, w)` batch.
pub fn stack_batch<T: Scalar>(images: &[Array3<T>]) -> Array4<T> {
    assert!(!images.is_empty(), "empty batch");
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<T>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

// ---- synthetic data ----

/// Parameters of the synthetic dataset generator.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub track: Track,
    /// Fraction of positive records (blob-bearing patches for detection,
    /// atypical labels for classification).
    pub positive_rate: f64,
    /// Square patch side in pixels.
    pub patch_size: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, n_slides: usize, patches_per_slide: usize, track: Track) -> Self {
        SynthSpec {
            seed,
            n_slides,
            patches_per_slide,
            track,
            positive_rate: 0.5,
            patch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slides < 2 {
            return Err(Error::InvalidParameter("need at least 2 slides".into()));
        }
        if self.patches_per_slide == 0 {
            return Err(Error::InvalidParameter(
                "patches_per_slide must be >= 1".into(),
            ));
        }
        if !(0.0 < self.positive_rate && self.positive_rate < 1.0) {
            return Err(Error::InvalidParameter(
                "positive_rate must be in (0, 1)".into(),
            ));
        }
        if self.patch_size < 32 {
            return Err(Error::InvalidParameter("patch_size must be >= 32".into()));
        }
        Ok(())
    }
}

/// Number of distinct tissue/scanner domains the generator cycles through.
pub const SYNTH_DOMAINS: u8 = 4;

struct SlideStyle {
    base: [f64; 3],
    freq: (f64, f64),
    amp: f64,
    phase: f64,
}

fn slide_style(rng: &mut ChaCha8Rng) -> SlideStyle {
    SlideStyle {
        base: [
            rng.gen_range(150.0..200.0),
            rng.gen_range(130.0..180.0),
            rng.gen_range(160.0..210.0),
        ],
        freq: (rng.gen_range(0.03..0.09), rng.gen_range(0.03..0.09)),
        amp: rng.gen_range(6.0..14.0),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

fn textured_background(rng: &mut ChaCha8Rng, style: &SlideStyle, size: usize) -> Vec<[f64; 3]> {
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let wave = style.amp
                * (std::f64::consts::TAU * (style.freq.0 * x as f64 + style.freq.1 * y as f64)
                    + style.phase)
                    .sin();
            let noise = rng.gen_range(-6.0..6.0);
            let mut p = [0.0; 3];
            for (c, v) in p.iter_mut().enumerate() {
                *v = style.base[c] + wave + noise;
            }
            px.push(p);
        }
    }
    px
}

fn paint_ellipse(
    px: &mut [[f64; 3]],
    size: usize,
    cx: f64,
    cy: f64,
    half_axes: (f64, f64),
    angle: f64,
    color: [f64; 3],
) {
    let (a, b) = half_axes;
    let (sin, cos) = angle.sin_cos();
    let reach = a.max(b) + 1.0;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil() as usize).min(size - 1);
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil() as usize).min(size - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                px[y * size + x] = color;
            }
        }
    }
}

fn paint_ring(
    px: &mut [[f64; 3]],
    size: usize,
    cx: f64,
    cy: f64,
    outer: f64,
    thickness: f64,
    color: [f64; 3],
) {
    let inner = outer - thickness;
    let x_lo = ((cx - outer - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + outer + 1.0).ceil() as usize).min(size - 1);
    let y_lo = ((cy - outer - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + outer + 1.0).ceil() as usize).min(size - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= outer && d >= inner {
                px[y * size + x] = color;
            }
        }
    }
}

fn blob_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(235.0..255.0),
        rng.gen_range(225.0..250.0),
        rng.gen_range(120.0..160.0),
    ]
}

fn save_png(px: &[[f64; 3]], size: usize, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for (i, p) in px.iter().enumerate() {
        let x = (i % size) as u32;
        let y = (i / size) as u32;
        img.put_pixel(
            x,
            y,
            image::Rgb([
                p[0].clamp(0.0, 255.0) as u8,
                p[1].clamp(0.0, 255.0) as u8,
                p[2].clamp(0.0, 255.0) as u8,
            ]),
        );
    }
    img.save(path)?;
    Ok(())
}

/// Generate a deterministic synthetic dataset under `out_dir`.
///
/// Writes `images/<patch_id>.png` plus `manifest.jsonl` and returns the
/// manifest. The positive quota is exact: `round(rate * n)` clamped to keep
/// both classes nonempty.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.patch_size;
    let total = spec.n_slides * spec.patches_per_slide;
    let quota = ((spec.positive_rate * total as f64).round() as usize).clamp(1, total - 1);
    let mut positive_flags = vec![false; total];
    for flag in positive_flags.iter_mut().take(quota) {
        *flag = true;
    }
    positive_flags.shuffle(&mut rng);

    let mut records = Vec::with_capacity(total);
    for slide in 0..spec.n_slides {
        let style = slide_style(&mut rng);
        for patch in 0..spec.patches_per_slide {
            let idx = slide * spec.patches_per_slide + patch;
            let positive = positive_flags[idx];
            let patch_id = format!("s{slide:02}_p{patch:03}");
            let mut px = textured_background(&mut rng, &style, size);

            let (centroids, class_label) = match spec.track {
                Track::Detection => {
                    let mut centroids = Vec::new();
                    if positive {
                        let n_blobs = if size >= 96 { rng.gen_range(1..=3) } else { rng.gen_range(1..=2) };
                        let margin = 12.0;
                        for _ in 0..n_blobs {
                            // rejection-sample a center far from existing blobs
                            for _ in 0..32 {
                                let cx = rng.gen_range(margin..size as f64 - margin);
                                let cy = rng.gen_range(margin..size as f64 - margin);
                                let clear = centroids.iter().all(|&(ox, oy): &(f64, f64)| {
                                    (ox - cx).powi(2) + (oy - cy).powi(2) >= 28.0f64.powi(2)
                                });
                                if clear {
                                    let half_axes =
                                        (rng.gen_range(3.0..7.0), rng.gen_range(3.0..7.0));
                                    let angle = rng.gen_range(0.0..std::f64::consts::PI);
                                    let color = blob_color(&mut rng);
                                    paint_ellipse(&mut px, size, cx, cy, half_axes, angle, color);
                                    centroids.push((cx, cy));
                                    break;
                                }
                            }
                        }
                    }
                    (Some(centroids), None)
                }
                Track::Classification => {
                    let cx = size as f64 / 2.0 + rng.gen_range(-4.0..4.0);
                    let cy = size as f64 / 2.0 + rng.gen_range(-4.0..4.0);
                    let color = blob_color(&mut rng);
                    if positive {
                        // atypical: hollow ring
                        let outer = rng.gen_range(10.0..14.0);
                        let thickness = rng.gen_range(3.0..4.5);
                        paint_ring(&mut px, size, cx, cy, outer, thickness, color);
                    } else {
                        // normal: filled disk
                        let r = rng.gen_range(8.0..12.0);
                        paint_ellipse(&mut px, size, cx, cy, (r, r), 0.0, color);
                    }
                    (None, Some(u8::from(positive)))
                }
            };

            let image_rel = PathBuf::from("images").join(format!("{patch_id}.png"));
            save_png(&px, size, &out_dir.join(&image_rel))?;
            records.push(PatchRecord {
                patch_id,
                slide_id: format!("slide{slide:02}"),
                domain_id: (slide % SYNTH_DOMAINS as usize) as u8,
                mpp: 0.25,
                image_path: image_rel,
                centroids,
                class_label,
            });
        }
    }

    let manifest = DatasetManifest {
        track: spec.track,
        schema_version: SCHEMA_VERSION,
        records,
    };
    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    load_manifest(&out_dir.join("manifest.jsonl"))
}
