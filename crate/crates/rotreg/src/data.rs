//! Deterministic synthetic rotation benchmark: an asymmetric 3D wireframe
//! rendered orthographically at known rotations, with labeled / unlabeled /
//! val / test splits and injected out-of-distribution distractors.
//!
//! Projection convention (shared with `augment::rotate_image` and
//! `so3::inplane_rotation`): world x maps to screen right, world y to screen
//! up (row index decreases), world z toward the viewer. The camera looks
//! along -z, so the in-plane rotation matrix M_theta acts on the image as
//! `rotate_image(img, theta)` — the equivariance the consistency loss needs.

use crate::augment::Image;
use crate::so3::{sample_uniform_rotation, Rotation};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const IMAGE_SIZE: usize = 32;
const DATASET_FORMAT: &str = "rotreg-dataset-v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// One line segment of the wireframe, in body coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub a: [f64; 3],
    pub b: [f64; 3],
    /// Base intensity of the stroke; distinct per feature so strokes carry
    /// identity, mirror-paired features share a value to keep the body
    /// x-mirror symmetry exact.
    pub tone: f64,
}

/// The benchmark object: an A-frame glyph in the body xy-plane plus two
/// unequal depth struts on the x = 0 plane.
///
/// Properties the training machinery relies on:
/// - mirror-symmetric about the body x = 0 plane, so the horizontal-flip
///   label rule R' = D R D is exact;
/// - no proper rotational self-symmetry (so the pose is identifiable);
/// - bounding radius < 1 (fits the orthographic frustum).
pub fn make_object() -> Vec<Segment> {
    vec![
        // A-frame legs and crossbar.
        Segment { a: [-0.55, -0.75, 0.0], b: [0.0, 0.75, 0.0], tone: 1.0 },
        Segment { a: [0.55, -0.75, 0.0], b: [0.0, 0.75, 0.0], tone: 1.0 },
        Segment { a: [-0.28, -0.13, 0.0], b: [0.28, -0.13, 0.0], tone: 1.0 },
        // Slanted nose strut toward +z with a top bar, both in the x = 0
        // plane (slanting keeps the projection extended at frontal poses).
        Segment { a: [0.0, 0.20, 0.0], b: [0.0, 0.52, 0.55], tone: 1.00 },
        Segment { a: [0.0, 0.52, 0.55], b: [0.0, 0.14, 0.66], tone: 1.0 },
        // Depth spine: long z-extent makes out-of-plane rotations move real
        // pixel mass (in-plane/out-of-plane sensitivity balance).
        Segment { a: [0.0, 0.0, -0.80], b: [0.0, 0.10, 0.85], tone: 1.0 },
        // Slanted tail strut toward -z.
        Segment { a: [0.0, -0.75, 0.0], b: [0.0, -0.35, -0.62], tone: 1.0 },
        // Mirrored pair of depth-diagonal braces.
        Segment { a: [0.42, 0.05, -0.78], b: [0.18, -0.55, 0.78], tone: 1.0 },
        Segment { a: [-0.42, 0.05, -0.78], b: [-0.18, -0.55, 0.78], tone: 1.0 },
        // Foot spread in the xz plane; distinguishes views from below.
        Segment { a: [0.55, -0.75, 0.0], b: [0.15, -0.68, 0.52], tone: 1.0 },
        Segment { a: [-0.55, -0.75, 0.0], b: [-0.15, -0.68, 0.52], tone: 1.0 },
        // Upper side wings; independent stroke directions sharpen the
        // nearest-pose basins.
        Segment { a: [0.50, 0.42, 0.30], b: [0.10, 0.55, -0.45], tone: 1.0 },
        Segment { a: [-0.50, 0.42, 0.30], b: [-0.10, 0.55, -0.45], tone: 1.0 },
    ]
}

/// Orthographic pixels-per-unit scale for a given output size.
fn ortho_scale(size: usize) -> f64 {
    size as f64 * 0.31
}

const LINE_AA: f64 = 2.30;

// Depth cues: intensity and stroke width both increase toward the viewer.
// Both survive in-plane rotation (z is unchanged) and horizontal flips, and
// they are what disambiguates a pose from its depth-mirrored doppelganger
// under orthographic projection.
fn shade(z: f64) -> f32 {
    (0.15 + 0.85 * ((z + 1.0) * 0.5).clamp(0.0, 1.0)) as f32
}

fn half_width(z: f64) -> f64 {
    0.10 + 1.85 * ((z + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Rasterizes rotated segments with distance-based anti-aliasing and a depth
/// intensity cue; overlaps combine with max, so the result is order-free.
pub fn render_segments(segments: &[Segment], r: &Rotation, size: usize) -> Image {
    let m = r.matrix();
    let scale = ortho_scale(size);
    let c = (size as f64 - 1.0) / 2.0;
    let mut img = Image::zeros(size, size);
    for seg in segments {
        let pa = m * nalgebra::Vector3::from(seg.a);
        let pb = m * nalgebra::Vector3::from(seg.b);
        // Screen coordinates (u right, v down) and depth.
        let (ua, va, za) = (c + scale * pa[0], c - scale * pa[1], pa[2]);
        let (ub, vb, zb) = (c + scale * pb[0], c - scale * pb[1], pb[2]);
        let pad = half_width(1.0) + LINE_AA + 1.0;
        let x_lo = (ua.min(ub) - pad).floor().max(0.0) as usize;
        let x_hi = ((ua.max(ub) + pad).ceil() as usize).min(size - 1);
        let y_lo = (va.min(vb) - pad).floor().max(0.0) as usize;
        let y_hi = ((va.max(vb) + pad).ceil() as usize).min(size - 1);
        let du = ub - ua;
        let dv = vb - va;
        let len2 = du * du + dv * dv;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let px = x as f64;
                let py = y as f64;
                let t = if len2 > 0.0 {
                    (((px - ua) * du + (py - va) * dv) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let qx = ua + t * du;
                let qy = va + t * dv;
                let d = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
                let z = za + t * (zb - za);
                let cov = ((half_width(z) + LINE_AA - d) / LINE_AA).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let v = cov as f32 * shade(z) * seg.tone as f32;
                    let cur = img.get(x, y);
                    if v > cur {
                        img.set(x, y, v);
                    }
                }
            }
        }
    }
    img
}

/// Renders the benchmark object at a given rotation.
pub fn render(r: &Rotation, size: usize) -> Image {
    render_segments(&make_object(), r, size)
}

/// Random distractor wireframe with segment statistics similar to the object.
pub fn make_distractor(rng: &mut ChaCha12Rng) -> Vec<Segment> {
    let n = rng.random_range(5..=7);
    let mut segs = Vec::with_capacity(n);
    for _ in 0..n {
        loop {
            let p = |rng: &mut ChaCha12Rng| -> [f64; 3] {
                [
                    rng.random_range(-0.75..0.75),
                    rng.random_range(-0.75..0.75),
                    rng.random_range(-0.6..0.6),
                ]
            };
            let a = p(rng);
            let b = p(rng);
            let len =
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            if len > 0.45 {
                let tone = rng.random_range(0.6..1.0);
                segs.push(Segment { a, b, tone });
                break;
            }
        }
    }
    segs
}

/// Pixel noise rescaled to the given intensity statistics. Kept unsmoothed:
/// spatially white noise is what a pose regressor genuinely cannot commit
/// to, while heavily smoothed noise reads as a dark blob.
pub fn make_noise_image(rng: &mut ChaCha12Rng, size: usize, target_mean: f64, target_std: f64) -> Image {
    let mut img = Image::zeros(size, size);
    for p in &mut img.pixels {
        *p = rng.random_range(0.0..1.0f32);
    }
    let mean = img.mean();
    let var = img.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
        / img.pixels.len() as f64;
    let std = var.sqrt().max(1e-6);
    let mut out = img;
    for p in &mut out.pixels {
        let v = (*p as f64 - mean) / std * target_std + target_mean;
        *p = v.clamp(0.0, 1.0) as f32;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub label: Option<Rotation>,
    pub is_ood: bool,
}

impl Sample {
    fn check_invariants(&self) {
        debug_assert!(!(self.label.is_some() && self.is_ood), "labeled sample flagged OOD");
    }
}

#[derive(Debug, Clone)]
pub struct DataSet {
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// The four splits of one generated benchmark.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub labeled: DataSet,
    pub unlabeled: DataSet,
    pub val: DataSet,
    pub test: DataSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub ood_frac: f64,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_labeled: 500,
            n_unlabeled: 4500,
            ood_frac: 0.25,
            n_val: 500,
            n_test: 500,
            image_size: IMAGE_SIZE,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.ood_frac) {
            return Err(format!("ood_frac must be in [0, 1), got {}", self.ood_frac));
        }
        if self.image_size != IMAGE_SIZE {
            return Err(format!("image_size must be {IMAGE_SIZE} (the regressor input size)"));
        }
        Ok(())
    }
}

fn derive_rng(seed: u64, tag: u64, index: u64) -> ChaCha12Rng {
    // splitmix64 finalizer over the tagged tuple, then seed ChaCha.
    let mut x = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15) ^ index.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    ChaCha12Rng::seed_from_u64(x)
}

const TAG_LABELED: u64 = 1;
const TAG_UNLABELED: u64 = 2;
const TAG_VAL: u64 = 3;
const TAG_TEST: u64 = 4;
const TAG_OOD_ORDER: u64 = 5;

/// Reference intensity statistics of in-distribution renders, used to match
/// the noise distractors.
fn reference_stats(size: usize, seed: u64) -> (f64, f64) {
    let mut acc = Vec::new();
    for i in 0..16u64 {
        let mut rng = derive_rng(seed, 99, i);
        let r = sample_uniform_rotation(&mut rng);
        acc.extend(render(&r, size).pixels.iter().map(|&v| v as f64));
    }
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = acc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn labeled_split(split: Split, tag: u64, n: usize, seed: u64, size: usize, id_base: u64) -> DataSet {
    let samples = crate::parallel::map_range(n, |i| {
        let mut rng = derive_rng(seed, tag, i as u64);
        let r = sample_uniform_rotation(&mut rng);
        let s = Sample {
            id: id_base + i as u64,
            image: render(&r, size),
            label: Some(r),
            is_ood: false,
        };
        s.check_invariants();
        s
    });
    DataSet { split, seed, samples }
}

/// Generates the full benchmark deterministically from (config, seed).
/// Unlabeled OOD positions are a seed-derived interleaving; OOD samples are
/// half distractor wireframes, half matched-intensity noise.
pub fn gen_dataset(cfg: &DataConfig, seed: u64) -> DataBundle {
    let size = cfg.image_size;
    let n_ood = (cfg.ood_frac * cfg.n_unlabeled as f64).round() as usize;
    let (noise_mean, noise_std) = reference_stats(size, seed);

    // Choose which unlabeled indices are OOD by a deterministic shuffle.
    let mut order: Vec<usize> = (0..cfg.n_unlabeled).collect();
    let mut shuffle_rng = derive_rng(seed, TAG_OOD_ORDER, 0);
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut is_ood = vec![false; cfg.n_unlabeled];
    for &idx in order.iter().take(n_ood) {
        is_ood[idx] = true;
    }

    let unlabeled_samples = crate::parallel::map_range(cfg.n_unlabeled, |i| {
        let mut rng = derive_rng(seed, TAG_UNLABELED, i as u64);
        let id = 1_000_000 + i as u64;
        let s = if is_ood[i] {
            // Distractors: either a superposition of two random wireframes
            // (cluttered scene with no single orientation) or matched
            // intensity pixel noise.
            let image = if rng.random::<f64>() < 0.5 {
                let sa = make_distractor(&mut rng);
                let ra = sample_uniform_rotation(&mut rng);
                let sb = make_distractor(&mut rng);
                let rb = sample_uniform_rotation(&mut rng);
                let mut img = render_segments(&sa, &ra, size);
                let other = render_segments(&sb, &rb, size);
                for (p, q) in img.pixels.iter_mut().zip(&other.pixels) {
                    *p = p.max(*q);
                }
                img
            } else {
                make_noise_image(&mut rng, size, noise_mean, noise_std)
            };
            Sample { id, image, label: None, is_ood: true }
        } else {
            let r = sample_uniform_rotation(&mut rng);
            Sample { id, image: render(&r, size), label: None, is_ood: false }
        };
        s.check_invariants();
        s
    });

    // Unlabeled in-distribution poses are kept for diagnostics only (the
    // label field stays None); id-range offsets keep all ids unique.
    DataBundle {
        labeled: labeled_split(Split::Labeled, TAG_LABELED, cfg.n_labeled, seed, size, 0),
        unlabeled: DataSet { split: Split::Unlabeled, seed, samples: unlabeled_samples },
        val: labeled_split(Split::Val, TAG_VAL, cfg.n_val, seed, size, 2_000_000),
        test: labeled_split(Split::Test, TAG_TEST, cfg.n_test, seed, size, 3_000_000),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: u64,
    split: Split,
    ood: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<[f64; 9]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    image_size: usize,
    seed: u64,
    samples: Vec<ManifestEntry>,
}

fn label_to_array(r: &Rotation) -> [f64; 9] {
    let m = r.matrix();
    [
        m[(0, 0)], m[(0, 1)], m[(0, 2)],
        m[(1, 0)], m[(1, 1)], m[(1, 2)],
        m[(2, 0)], m[(2, 1)], m[(2, 2)],
    ]
}

fn label_from_array(a: &[f64; 9]) -> Rotation {
    Rotation::from_matrix_unchecked(nalgebra::Matrix3::new(
        a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8],
    ))
}

/// Writes `manifest.json` (human-readable index: ids, splits, row-major
/// labels, OOD flags) and `images.bin` (little-endian f32 pixels, one
/// image_size^2 block per sample, manifest order) into `dir`.
pub fn save_dataset<P: AsRef<Path>>(bundle: &DataBundle, dir: P) -> Result<(), DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let sets = [&bundle.labeled, &bundle.unlabeled, &bundle.val, &bundle.test];
    let image_size = sets[0]
        .samples
        .first()
        .map(|s| s.image.width)
        .unwrap_or(IMAGE_SIZE);
    let mut manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        version: 1,
        image_size,
        seed: bundle.labeled.seed,
        samples: Vec::new(),
    };
    let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
    for set in sets {
        for s in &set.samples {
            manifest.samples.push(ManifestEntry {
                id: s.id,
                split: set.split,
                ood: s.is_ood,
                label: s.label.as_ref().map(label_to_array),
            });
            for px in &s.image.pixels {
                blob.write_all(&px.to_le_bytes())?;
            }
        }
    }
    blob.flush()?;
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<DataBundle, DataError> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(dir.join("manifest.json"))?))?;
    if manifest.format != DATASET_FORMAT {
        return Err(DataError::Format(format!("unknown format marker '{}'", manifest.format)));
    }
    if manifest.version != 1 {
        return Err(DataError::Format(format!("unsupported version {}", manifest.version)));
    }
    let px_per_image = manifest.image_size * manifest.image_size;
    let mut blob = std::io::BufReader::new(std::fs::File::open(dir.join("images.bin"))?);
    let expected_len = (manifest.samples.len() * px_per_image * 4) as u64;
    let actual_len = std::fs::metadata(dir.join("images.bin"))?.len();
    if expected_len != actual_len {
        return Err(DataError::Format(format!(
            "image blob holds {actual_len} bytes, manifest implies {expected_len}"
        )));
    }

    let mut sets: [Vec<Sample>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut buf = vec![0u8; px_per_image * 4];
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.samples {
        blob.read_exact(&mut buf)?;
        if !seen.insert(e.id) {
            return Err(DataError::Format(format!("duplicate sample id {}", e.id)));
        }
        if e.ood && e.label.is_some() {
            return Err(DataError::Format(format!("sample {} is OOD but labeled", e.id)));
        }
        let mut image = Image::zeros(manifest.image_size, manifest.image_size);
        for (i, px) in image.pixels.iter_mut().enumerate() {
            *px = f32::from_le_bytes([buf[4 * i], buf[4 * i + 1], buf[4 * i + 2], buf[4 * i + 3]]);
        }
        let sample = Sample {
            id: e.id,
            image,
            label: e.label.as_ref().map(label_from_array),
            is_ood: e.ood,
        };
        let slot = match e.split {
            Split::Labeled => 0,
            Split::Unlabeled => 1,
            Split::Val => 2,
            Split::Test => 3,
        };
        sets[slot].push(sample);
    }
    let [labeled, unlabeled, val, test] = sets;
    Ok(DataBundle {
        labeled: DataSet { split: Split::Labeled, seed: manifest.seed, samples: labeled },
        unlabeled: DataSet { split: Split::Unlabeled, seed: manifest.seed, samples: unlabeled },
        val: DataSet { split: Split::Val, seed: manifest.seed, samples: val },
        test: DataSet { split: Split::Test, seed: manifest.seed, samples: test },
    })
}

/// FNV-1a hash of the manifest and image blob, printed by `gen-data` for
/// quick provenance checks.
pub fn dataset_hash<P: AsRef<Path>>(dir: P) -> Result<u64, DataError> {
    let dir = dir.as_ref();
    let mut h = 0xcbf29ce484222325u64;
    for name in ["manifest.json", "images.bin"] {
        let bytes = std::fs::read(dir.join(name))?;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    Ok(h)
}
