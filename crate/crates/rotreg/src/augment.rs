//! Input pipeline: aspect-ratio invariant cropping, weak/strong augmentation
//! pairs, occlusion patches (cutout / cutmix / their composition) with
//! center-biased patch samplers, in-plane rotation, and horizontal flip with
//! the matching label transform.
//!
//! Every operation is pure given (input, config, RNG stream), and every
//! random choice is written into an [`AugRecord`] so a view can be replayed
//! bit-exactly.

use crate::so3::Rotation;
use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugError {
    #[error("bounding box does not intersect the image")]
    EmptyCrop,
    #[error("cutmix requires at least one donor image")]
    NoDonors,
}

/// Grayscale image in [0, 1] with a validity mask. Mask is false exactly on
/// zero-padding introduced by geometric ops; occlusion zeros keep mask true.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
            mask: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-center coordinates; out-of-bounds
    /// contributions are zero (padding semantics).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let mut acc = 0.0f32;
        for (dx, dy, w) in [
            (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
            (1.0, 0.0, fx * (1.0 - fy)),
            (0.0, 1.0, (1.0 - fx) * fy),
            (1.0, 1.0, fx * fy),
        ] {
            let xi = x0 + dx;
            let yi = y0 + dy;
            if xi >= 0.0 && yi >= 0.0 && (xi as usize) < self.width && (yi as usize) < self.height {
                acc += w * self.get(xi as usize, yi as usize);
            }
        }
        acc
    }

    fn sample_mask(&self, x: f64, y: f64) -> bool {
        let xi = x.round();
        let yi = y.round();
        xi >= 0.0
            && yi >= 0.0
            && (xi as usize) < self.width
            && (yi as usize) < self.height
            && self.mask[yi as usize * self.width + xi as usize]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let n = self.pixels.len() as f64;
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Patch-center distributions for the occlusion augmentations: uniform with a
/// boundary margin, or center-anchored Gaussians with small/large spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSampler {
    Uniform,
    Normal1,
    Normal2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub weak_scale: (f64, f64),
    pub strong_scale: (f64, f64),
    pub cutout_holes: usize,
    pub cutmix_holes: usize,
    /// Strong-view in-plane rotation range, degrees: theta ~ U(-r, r).
    pub rot_range_deg: f64,
    pub sampler: PatchSampler,
    /// Hole side lengths as a fraction of image width, drawn uniformly.
    pub hole_side_frac: (f64, f64),
    /// Uniform sampler: margin from each border as a fraction of size.
    pub uniform_margin: f64,
    /// Normal1 / Normal2 sigma as fractions of image width.
    pub normal1_sigma_frac: f64,
    pub normal2_sigma_frac: f64,
    /// Share the flip/blur coins between the weak and strong views of a pair.
    pub share_pair_coins: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            flip_prob: 0.5,
            blur_prob: 0.05,
            weak_scale: (0.8, 1.25),
            strong_scale: (0.6, 1.5),
            cutout_holes: 3,
            cutmix_holes: 3,
            rot_range_deg: 30.0,
            sampler: PatchSampler::Normal2,
            hole_side_frac: (0.15, 0.35),
            uniform_margin: 0.10,
            normal1_sigma_frac: 0.15,
            normal2_sigma_frac: 0.30,
            share_pair_coins: true,
        }
    }
}

impl AugConfig {
    /// Configuration with every knob off; both views become the identity.
    pub fn disabled() -> Self {
        AugConfig {
            flip_prob: 0.0,
            blur_prob: 0.0,
            weak_scale: (1.0, 1.0),
            strong_scale: (1.0, 1.0),
            cutout_holes: 0,
            cutmix_holes: 0,
            rot_range_deg: 0.0,
            ..AugConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, (lo, hi)) in [("weak_scale", self.weak_scale), ("strong_scale", self.strong_scale)] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(format!("{name} must be a positive range, got ({lo}, {hi})"));
            }
        }
        if self.rot_range_deg < 0.0 || self.rot_range_deg >= 180.0 {
            return Err(format!("rot_range_deg must be in [0, 180), got {}", self.rot_range_deg));
        }
        let (lo, hi) = self.hole_side_frac;
        if !(lo > 0.0 && hi >= lo && hi < 1.0) {
            return Err(format!("hole_side_frac must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"));
        }
        Ok(())
    }
}

/// Integer pixel rectangle, half-open: x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRec {
    pub rect: Rect,
    pub donor: usize,
}

/// Everything needed to replay an augmented view or transform its label.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugRecord {
    pub flipped: bool,
    pub blurred: bool,
    pub scale: f64,
    pub theta_deg: f64,
    pub cutout: Vec<Rect>,
    pub cutmix: Vec<PatchRec>,
}

impl AugRecord {
    fn identity() -> Self {
        AugRecord { scale: 1.0, ..Default::default() }
    }
}

/// Square crop that preserves the source aspect ratio: content is uniformly
/// scaled to fit `out_size` and centered; everything else (outside the bbox,
/// or off the source image) is zero with mask false.
///
/// `bbox` is (x, y, w, h) in source pixel coordinates.
pub fn crop_aspect_invariant(
    src: &Image,
    bbox: (f64, f64, f64, f64),
    out_size: usize,
) -> Result<Image, AugError> {
    let (bx, by, bw, bh) = bbox;
    if bw <= 0.0
        || bh <= 0.0
        || bx + bw <= 0.0
        || by + bh <= 0.0
        || bx >= src.width as f64
        || by >= src.height as f64
    {
        return Err(AugError::EmptyCrop);
    }
    let scale = out_size as f64 / bw.max(bh);
    let off_x = 0.5 * (out_size as f64 - bw * scale);
    let off_y = 0.5 * (out_size as f64 - bh * scale);
    let mut out = Image::zeros(out_size, out_size);
    for v in 0..out_size {
        for u in 0..out_size {
            let uc = u as f64 + 0.5;
            let vc = v as f64 + 0.5;
            let in_content = uc >= off_x
                && uc < off_x + bw * scale
                && vc >= off_y
                && vc < off_y + bh * scale;
            if !in_content {
                out.mask[v * out_size + u] = false;
                continue;
            }
            let sx = bx + (uc - off_x) / scale - 0.5;
            let sy = by + (vc - off_y) / scale - 0.5;
            let on_image =
                sx >= -0.5 && sy >= -0.5 && sx <= src.width as f64 - 0.5 && sy <= src.height as f64 - 0.5;
            if on_image && src.sample_mask(sx, sy) {
                out.set(u, v, src.sample_bilinear(sx, sy).clamp(0.0, 1.0));
            } else {
                out.mask[v * out_size + u] = false;
            }
        }
    }
    Ok(out)
}

/// Draws a patch center according to the configured sampler.
pub fn sample_patch_center<R: Rng + ?Sized>(
    sampler: PatchSampler,
    cfg: &AugConfig,
    rng: &mut R,
    width: usize,
    height: usize,
) -> (f64, f64) {
    use rand_distr::StandardNormal;
    let (w, h) = (width as f64, height as f64);
    match sampler {
        PatchSampler::Uniform => {
            let mx = cfg.uniform_margin * w;
            let my = cfg.uniform_margin * h;
            (rng.random_range(mx..w - mx), rng.random_range(my..h - my))
        }
        PatchSampler::Normal1 | PatchSampler::Normal2 => {
            let frac = if sampler == PatchSampler::Normal1 {
                cfg.normal1_sigma_frac
            } else {
                cfg.normal2_sigma_frac
            };
            let (sx, sy) = (frac * w, frac * h);
            // Rejection-clip to the image bounds.
            loop {
                let gx: f64 = rng.sample(StandardNormal);
                let gy: f64 = rng.sample(StandardNormal);
                let x = 0.5 * w + sx * gx;
                let y = 0.5 * h + sy * gy;
                if x >= 0.0 && x < w && y >= 0.0 && y < h {
                    return (x, y);
                }
            }
        }
    }
}

fn draw_hole_rect<R: Rng + ?Sized>(img: &Image, cfg: &AugConfig, rng: &mut R) -> Rect {
    let (cx, cy) = sample_patch_center(cfg.sampler, cfg, rng, img.width, img.height);
    let (lo, hi) = cfg.hole_side_frac;
    let w = rng.random_range(lo..=hi) * img.width as f64;
    let h = rng.random_range(lo..=hi) * img.width as f64;
    let x0 = (cx - 0.5 * w).round().max(0.0) as usize;
    let y0 = (cy - 0.5 * h).round().max(0.0) as usize;
    let x1 = ((cx + 0.5 * w).round() as usize).min(img.width).max(x0);
    let y1 = ((cy + 0.5 * h).round() as usize).min(img.height).max(y0);
    Rect { x0, y0, x1, y1 }
}

/// Zeroes `cfg.cutout_holes` random rectangles (occlusion, mask untouched).
pub fn cutout<R: Rng + ?Sized>(img: &Image, cfg: &AugConfig, rng: &mut R) -> (Image, AugRecord) {
    let mut out = img.clone();
    let mut rec = AugRecord::identity();
    for _ in 0..cfg.cutout_holes {
        let r = draw_hole_rect(img, cfg, rng);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                out.set(x, y, 0.0);
            }
        }
        rec.cutout.push(r);
    }
    (out, rec)
}

/// Copies `cfg.cutmix_holes` same-position patches from randomly chosen
/// donors. Pose labels are never blended.
pub fn cutmix<R: Rng + ?Sized>(
    img: &Image,
    donors: &[Image],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(Image, AugRecord), AugError> {
    if donors.is_empty() && cfg.cutmix_holes > 0 {
        return Err(AugError::NoDonors);
    }
    let mut out = img.clone();
    let mut rec = AugRecord::identity();
    for _ in 0..cfg.cutmix_holes {
        let donor_idx = rng.random_range(0..donors.len());
        let donor = &donors[donor_idx];
        let r = draw_hole_rect(img, cfg, rng);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                if x < donor.width && y < donor.height {
                    out.set(x, y, donor.get(x, y));
                    out.mask[y * out.width + x] = donor.mask[y * donor.width + x];
                }
            }
        }
        rec.cutmix.push(PatchRec { rect: r, donor: donor_idx });
    }
    Ok((out, rec))
}

/// Derives an independent child stream from a parent RNG.
pub fn split_rng<R: Rng + ?Sized>(rng: &mut R) -> ChaCha12Rng {
    use rand::SeedableRng;
    ChaCha12Rng::seed_from_u64(rng.random::<u64>())
}

/// Cutout followed by cutmix on the result, each on its own split stream;
/// records are merged.
pub fn cut_occlusion<R: Rng + ?Sized>(
    img: &Image,
    donors: &[Image],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(Image, AugRecord), AugError> {
    let mut rng_cutout = split_rng(rng);
    let mut rng_cutmix = split_rng(rng);
    let (after_cutout, rec1) = cutout(img, cfg, &mut rng_cutout);
    let (mixed, rec2) = cutmix(&after_cutout, donors, cfg, &mut rng_cutmix)?;
    let mut rec = rec1;
    rec.cutmix = rec2.cutmix;
    Ok((mixed, rec))
}

/// Bilinear in-plane rotation about the image center. The convention pairs
/// with `so3::inplane_rotation`: rotating the scene by M_theta and rotating
/// the rendered image by `theta_deg` agree. Out-of-support pixels are zero
/// with mask false; theta = 0 returns the input bit-exactly.
pub fn rotate_image(img: &Image, theta_deg: f64) -> Image {
    if theta_deg == 0.0 {
        return img.clone();
    }
    let (s, c) = theta_deg.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(img.width, img.height);
    for v in 0..img.height {
        for u in 0..img.width {
            let dx = u as f64 - cx;
            let dy = v as f64 - cy;
            let sx = cx + c * dx + s * dy;
            let sy = cy - s * dx + c * dy;
            let inside = sx >= -0.5 && sy >= -0.5 && sx <= img.width as f64 - 0.5 && sy <= img.height as f64 - 0.5;
            if inside && img.sample_mask(sx, sy) {
                out.set(u, v, img.sample_bilinear(sx, sy).clamp(0.0, 1.0));
            } else {
                out.mask[v * img.width + u] = false;
            }
        }
    }
    out
}

/// Uniform zoom about the image center (the desk-scale "random resized
/// crop"): s > 1 magnifies, s < 1 shrinks with zero padding.
pub fn scale_image(img: &Image, s: f64) -> Image {
    if s == 1.0 {
        return img.clone();
    }
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(img.width, img.height);
    for v in 0..img.height {
        for u in 0..img.width {
            let sx = cx + (u as f64 - cx) / s;
            let sy = cy + (v as f64 - cy) / s;
            let inside = sx >= -0.5 && sy >= -0.5 && sx <= img.width as f64 - 0.5 && sy <= img.height as f64 - 0.5;
            if inside && img.sample_mask(sx, sy) {
                out.set(u, v, img.sample_bilinear(sx, sy).clamp(0.0, 1.0));
            } else {
                out.mask[v * img.width + u] = false;
            }
        }
    }
    out
}

/// 3x3 box blur; borders average the in-bounds neighborhood.
pub fn blur3(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = 0.0f32;
            let mut n = 0u32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = x as i64 + dx;
                    let yy = y as i64 + dy;
                    if xx >= 0 && yy >= 0 && (xx as usize) < img.width && (yy as usize) < img.height {
                        acc += img.get(xx as usize, yy as usize);
                        n += 1;
                    }
                }
            }
            out.set(x, y, acc / n as f32);
        }
    }
    out
}

/// Mirrors the image left-right.
pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.pixels[y * img.width + x] = img.pixels[y * img.width + (img.width - 1 - x)];
            out.mask[y * img.width + x] = img.mask[y * img.width + (img.width - 1 - x)];
        }
    }
    out
}

/// Label conjugation matching a horizontal mirror: R' = D R D with
/// D = diag(-1, 1, 1). Proper rotation; negates yaw and roll, keeps pitch.
pub fn flip_rotation(r: &Rotation) -> Rotation {
    let m = r.matrix();
    let mut f = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let sign = if (i == 0) ^ (j == 0) { -1.0 } else { 1.0 };
            f[(i, j)] = sign * m[(i, j)];
        }
    }
    Rotation::from_matrix_unchecked(f)
}

/// Mirrors the image and conjugates the pose label to match.
pub fn flip_with_label(img: &Image, r: &Rotation) -> (Image, Rotation) {
    (flip_horizontal(img), flip_rotation(r))
}

fn shared_coins<R: Rng + ?Sized>(cfg: &AugConfig, rng: &mut R) -> (bool, bool) {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let blur = rng.random::<f64>() < cfg.blur_prob;
    (flip, blur)
}

fn apply_weak(img: &Image, cfg: &AugConfig, flip: bool, blur: bool, scale: f64) -> Image {
    let _ = cfg;
    let mut out = img.clone();
    if flip {
        out = flip_horizontal(&out);
    }
    if blur {
        out = blur3(&out);
    }
    if scale != 1.0 {
        out = scale_image(&out, scale);
    }
    out
}

/// Weak view: shared coins (flip, blur) + mild rescale. theta is always 0.
pub fn weak_augment<R: Rng + ?Sized>(
    img: &Image,
    cfg: &AugConfig,
    rng: &mut R,
) -> (Image, AugRecord) {
    let (flip, blur) = shared_coins(cfg, rng);
    let scale = rng.random_range(cfg.weak_scale.0..=cfg.weak_scale.1);
    let out = apply_weak(img, cfg, flip, blur, scale);
    (
        out,
        AugRecord { flipped: flip, blurred: blur, scale, theta_deg: 0.0, ..Default::default() },
    )
}

/// Strong view: shared coins + aggressive rescale + in-plane rotation +
/// cut-occlusion. The record carries theta for distribution alignment.
pub fn strong_augment<R: Rng + ?Sized>(
    img: &Image,
    donors: &[Image],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(Image, AugRecord), AugError> {
    let (flip, blur) = shared_coins(cfg, rng);
    strong_augment_with_coins(img, donors, cfg, rng, flip, blur)
}

fn strong_augment_with_coins<R: Rng + ?Sized>(
    img: &Image,
    donors: &[Image],
    cfg: &AugConfig,
    rng: &mut R,
    flip: bool,
    blur: bool,
) -> Result<(Image, AugRecord), AugError> {
    let scale = rng.random_range(cfg.strong_scale.0..=cfg.strong_scale.1);
    let theta = if cfg.rot_range_deg > 0.0 {
        rng.random_range(-cfg.rot_range_deg..cfg.rot_range_deg)
    } else {
        0.0
    };
    let mut out = apply_weak(img, cfg, flip, blur, scale);
    if theta != 0.0 {
        out = rotate_image(&out, theta);
    }
    let (out, occ_rec) = cut_occlusion(&out, donors, cfg, rng)?;
    Ok((
        out,
        AugRecord {
            flipped: flip,
            blurred: blur,
            scale,
            theta_deg: theta,
            cutout: occ_rec.cutout,
            cutmix: occ_rec.cutmix,
        },
    ))
}

/// Weak/strong pair for an unlabeled sample. With `share_pair_coins` the flip
/// and blur coins are drawn once and applied to both views.
pub fn weak_strong_pair<R: Rng + ?Sized>(
    img: &Image,
    donors: &[Image],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<((Image, AugRecord), (Image, AugRecord)), AugError> {
    if cfg.share_pair_coins {
        let (flip, blur) = shared_coins(cfg, rng);
        let w_scale = rng.random_range(cfg.weak_scale.0..=cfg.weak_scale.1);
        let weak = apply_weak(img, cfg, flip, blur, w_scale);
        let weak_rec =
            AugRecord { flipped: flip, blurred: blur, scale: w_scale, theta_deg: 0.0, ..Default::default() };
        let strong = strong_augment_with_coins(img, donors, cfg, rng, flip, blur)?;
        Ok(((weak, weak_rec), strong))
    } else {
        let weak = weak_augment(img, cfg, rng);
        let strong = strong_augment(img, donors, cfg, rng)?;
        Ok((weak, strong))
    }
}

/// Replays a recorded augmentation on a fresh copy of the source; bit-exact
/// with the original output.
pub fn apply_record(img: &Image, donors: &[Image], rec: &AugRecord) -> Image {
    let mut out = img.clone();
    if rec.flipped {
        out = flip_horizontal(&out);
    }
    if rec.blurred {
        out = blur3(&out);
    }
    if rec.scale != 1.0 {
        out = scale_image(&out, rec.scale);
    }
    if rec.theta_deg != 0.0 {
        out = rotate_image(&out, rec.theta_deg);
    }
    for r in &rec.cutout {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                out.set(x, y, 0.0);
            }
        }
    }
    for p in &rec.cutmix {
        let donor = &donors[p.donor];
        for y in p.rect.y0..p.rect.y1 {
            for x in p.rect.x0..p.rect.x1 {
                if x < donor.width && y < donor.height {
                    out.set(x, y, donor.get(x, y));
                    out.mask[y * out.width + x] = donor.mask[y * donor.width + x];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{euler_from_matrix, euler_to_matrix, EulerAngles};
    use rand::SeedableRng;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, ((x + 2 * y) % 17) as f32 / 16.0);
            }
        }
        img
    }

    #[test]
    fn crop_square_bbox_is_plain_resize() {
        let src = gradient_image(64, 64);
        let out = crop_aspect_invariant(&src, (16.0, 16.0, 32.0, 32.0), 32).unwrap();
        assert!(out.mask.iter().all(|&m| m));
        // Equal in/out resolution region: sampling is 1:1.
        assert_eq!(out.get(3, 5), src.get(19, 21));
    }

    #[test]
    fn crop_wide_bbox_pads_top_bottom() {
        let src = gradient_image(64, 64);
        let out = crop_aspect_invariant(&src, (0.0, 16.0, 64.0, 32.0), 32).unwrap();
        // 2:1 bbox -> content fills x fully, y in [8, 24).
        for x in 0..32 {
            assert!(!out.mask[3 * 32 + x]);
            assert_eq!(out.get(x, 3), 0.0);
            assert!(!out.mask[28 * 32 + x]);
            assert_eq!(out.get(x, 28), 0.0);
            assert!(out.mask[16 * 32 + x]);
        }
    }

    #[test]
    fn crop_corner_bbox_accounts_off_image_pixels() {
        let src = gradient_image(64, 64);
        // Bbox hangs off the top-left corner by half its size.
        let out = crop_aspect_invariant(&src, (-16.0, -16.0, 32.0, 32.0), 32).unwrap();
        for v in 0..32 {
            for u in 0..32 {
                let on_src = u >= 16 && v >= 16;
                assert_eq!(out.mask[v * 32 + u], on_src, "mask mismatch at ({u},{v})");
                if !on_src {
                    assert_eq!(out.get(u, v), 0.0);
                }
            }
        }
    }

    #[test]
    fn crop_rejects_empty_intersection() {
        let src = gradient_image(32, 32);
        assert!(matches!(
            crop_aspect_invariant(&src, (100.0, 100.0, 10.0, 10.0), 32),
            Err(AugError::EmptyCrop)
        ));
    }

    #[test]
    fn uniform_sampler_respects_margin() {
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let (x, y) = sample_patch_center(PatchSampler::Uniform, &cfg, &mut rng, 100, 100);
            assert!(x >= 10.0 && x < 90.0 && y >= 10.0 && y < 90.0);
        }
    }

    #[test]
    fn normal_samplers_have_expected_spread() {
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let w = 10_000usize; // large so clipping is negligible
        let draw = |sampler, rng: &mut ChaCha12Rng| {
            let n = 20_000;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..n {
                let (x, _) = sample_patch_center(sampler, &cfg, rng, w, w);
                sum += x;
                sq += x * x;
            }
            let mean = sum / n as f64;
            ((sq / n as f64) - mean * mean).sqrt()
        };
        let s1 = draw(PatchSampler::Normal1, &mut rng);
        let s2 = draw(PatchSampler::Normal2, &mut rng);
        let expect1 = cfg.normal1_sigma_frac * w as f64;
        assert!((s1 - expect1).abs() / expect1 < 0.05, "sigma1 {s1} vs {expect1}");
        assert!(s2 > s1);
    }

    #[test]
    fn cutout_zero_holes_is_identity() {
        let img = gradient_image(32, 32);
        let cfg = AugConfig { cutout_holes: 0, ..AugConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (out, rec) = cutout(&img, &cfg, &mut rng);
        assert_eq!(out, img);
        assert!(rec.cutout.is_empty());
    }

    #[test]
    fn cutout_only_zeroes_recorded_holes() {
        let img = gradient_image(32, 32);
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (out, rec) = cutout(&img, &cfg, &mut rng);
        for y in 0..32 {
            for x in 0..32 {
                let in_hole = rec.cutout.iter().any(|r| r.contains(x, y));
                if in_hole {
                    assert_eq!(out.get(x, y), 0.0);
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn cutout_zeroed_fraction_near_independent_overlap_estimate() {
        // 3 holes, mean side 0.25 W => per-hole area fraction 0.0625;
        // independent-overlap union estimate 1 - (1 - 0.0625)^3.
        let cfg = AugConfig { sampler: PatchSampler::Uniform, ..AugConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = {
            let mut i = Image::zeros(32, 32);
            i.pixels.iter_mut().for_each(|p| *p = 1.0);
            i
        };
        let mut zeroed = 0usize;
        let trials = 3000;
        for _ in 0..trials {
            let (out, _) = cutout(&img, &cfg, &mut rng);
            zeroed += out.pixels.iter().filter(|&&p| p == 0.0).count();
        }
        let measured = zeroed as f64 / (trials * 1024) as f64;
        let estimate = 1.0 - (1.0 - 0.0625f64).powi(3);
        assert!(
            (measured - estimate).abs() / estimate < 0.20,
            "measured {measured:.4} vs estimate {estimate:.4}"
        );
    }

    #[test]
    fn cutmix_same_image_donor_is_identity() {
        let img = gradient_image(32, 32);
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (out, _) = cutmix(&img, std::slice::from_ref(&img), &cfg, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn cutmix_accounting() {
        let img = gradient_image(32, 32);
        let mut donor = Image::zeros(32, 32);
        donor.pixels.iter_mut().for_each(|p| *p = 0.77);
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (out, rec) = cutmix(&img, std::slice::from_ref(&donor), &cfg, &mut rng).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let in_patch = rec.cutmix.iter().any(|p| p.rect.contains(x, y));
                if in_patch {
                    assert_eq!(out.get(x, y), 0.77);
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn cutmix_area_fraction_on_constant_images() {
        let img = Image::zeros(32, 32);
        let mut donor = Image::zeros(32, 32);
        donor.pixels.iter_mut().for_each(|p| *p = 1.0);
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (out, rec) = cutmix(&img, std::slice::from_ref(&donor), &cfg, &mut rng).unwrap();
        let ones = out.pixels.iter().filter(|&&p| p == 1.0).count();
        let mut union = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                if rec.cutmix.iter().any(|p| p.rect.contains(x, y)) {
                    union += 1;
                }
            }
        }
        assert_eq!(ones, union);
    }

    #[test]
    fn cutmix_requires_donors() {
        let img = gradient_image(32, 32);
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        assert!(matches!(cutmix(&img, &[], &cfg, &mut rng), Err(AugError::NoDonors)));
    }

    #[test]
    fn cutocc_zero_holes_is_identity() {
        let img = gradient_image(32, 32);
        let cfg = AugConfig { cutout_holes: 0, cutmix_holes: 0, ..AugConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let (out, _) = cut_occlusion(&img, &[img.clone()], &cfg, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn cutocc_equals_manual_composition_with_split_streams() {
        let img = gradient_image(32, 32);
        let donor = {
            let mut d = Image::zeros(32, 32);
            d.pixels.iter_mut().for_each(|p| *p = 0.5);
            d
        };
        let cfg = AugConfig::default();
        let mut rng_a = ChaCha12Rng::seed_from_u64(11);
        let (out_a, _) = cut_occlusion(&img, std::slice::from_ref(&donor), &cfg, &mut rng_a).unwrap();

        let mut rng_b = ChaCha12Rng::seed_from_u64(11);
        let mut r1 = split_rng(&mut rng_b);
        let mut r2 = split_rng(&mut rng_b);
        let (mid, _) = cutout(&img, &cfg, &mut r1);
        let (out_b, _) = cutmix(&mid, std::slice::from_ref(&donor), &cfg, &mut r2).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn cutocc_overlap_order_sensitivity() {
        // A cutout hole later overwritten by a donor patch shows donor values.
        let img = gradient_image(8, 8);
        let mut donor = Image::zeros(8, 8);
        donor.pixels.iter_mut().for_each(|p| *p = 0.9);
        let rec = AugRecord {
            scale: 1.0,
            cutout: vec![Rect { x0: 2, y0: 2, x1: 6, y1: 6 }],
            cutmix: vec![PatchRec { rect: Rect { x0: 4, y0: 4, x1: 7, y1: 7 }, donor: 0 }],
            ..Default::default()
        };
        let out = apply_record(&img, std::slice::from_ref(&donor), &rec);
        assert_eq!(out.get(3, 3), 0.0); // cutout only
        assert_eq!(out.get(5, 5), 0.9); // cutout then overwritten by donor
        assert_eq!(out.get(6, 6), 0.9); // donor only
    }

    #[test]
    fn rotate_zero_is_bit_exact_identity() {
        let img = gradient_image(32, 32);
        assert_eq!(rotate_image(&img, 0.0), img);
    }

    /// Smooth blob image, representative of rendered content (bilinear
    /// round trips are only meaningful on band-limited images).
    fn smooth_image(w: usize, h: usize) -> Image {
        let mut img = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f32 - 13.0) / 6.0;
                let dy = (y as f32 - 17.0) / 7.0;
                let dx2 = (x as f32 - 22.0) / 5.0;
                let dy2 = (y as f32 - 9.0) / 5.0;
                let v = (-0.5 * (dx * dx + dy * dy)).exp() + 0.7 * (-0.5 * (dx2 * dx2 + dy2 * dy2)).exp();
                img.set(x, y, v.min(1.0));
            }
        }
        img
    }

    #[test]
    fn rotate_round_trip_small_angle() {
        let img = smooth_image(32, 32);
        let back = rotate_image(&rotate_image(&img, 15.0), -15.0);
        // Interior comparison only (border pixels fall off support).
        let mut diff = 0.0;
        let mut n = 0;
        for y in 4..28 {
            for x in 4..28 {
                if back.mask[y * 32 + x] {
                    diff += (back.get(x, y) - img.get(x, y)).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(n > 400);
        let mean = diff / n as f64;
        assert!(mean < 0.02, "round trip mean abs {mean}");
    }

    #[test]
    fn rotate_90_matches_closed_form() {
        // Cross glyph centered on the image.
        let mut img = Image::zeros(32, 32);
        for i in 8..24 {
            img.set(i, 15, 1.0);
            img.set(i, 16, 1.0);
            img.set(15, i, 0.8);
            img.set(16, i, 0.8);
        }
        let rot = rotate_image(&img, 90.0);
        // Inverse map at 90 deg: source (u0, v0) = (v, 31 - u).
        for v in 1..31 {
            for u in 1..31 {
                let expect = img.get(v, 31 - u);
                assert!(
                    (rot.get(u, v) - expect).abs() < 1e-5,
                    "mismatch at ({u},{v}): {} vs {expect}",
                    rot.get(u, v)
                );
            }
        }
    }

    #[test]
    fn flip_involution_and_label() {
        let img = gradient_image(32, 32);
        let r = euler_to_matrix(&EulerAngles {
            pitch_deg: 10.0,
            yaw_deg: 30.0,
            roll_deg: -20.0,
            gimbal_lock: false,
        });
        let (img1, r1) = flip_with_label(&img, &r);
        let e1 = euler_from_matrix(&r1);
        assert!((e1.yaw_deg + 30.0).abs() < 1e-9, "yaw {}", e1.yaw_deg);
        assert!((e1.pitch_deg - 10.0).abs() < 1e-9);
        assert!((e1.roll_deg - 20.0).abs() < 1e-9, "roll {}", e1.roll_deg);
        let (img2, r2) = flip_with_label(&img1, &r1);
        assert_eq!(img2, img);
        assert!((r2.matrix() - r.matrix()).norm() < 1e-15);
    }

    #[test]
    fn flip_identity_label() {
        let r = flip_rotation(&Rotation::identity());
        assert_eq!(r.matrix(), Rotation::identity().matrix());
    }

    #[test]
    fn disabled_config_gives_identity_views() {
        let img = gradient_image(32, 32);
        let cfg = AugConfig::disabled();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let ((w, wr), (s, sr)) = weak_strong_pair(&img, &[img.clone()], &cfg, &mut rng).unwrap();
        assert_eq!(w, img);
        assert_eq!(s, img);
        assert_eq!(wr.theta_deg, 0.0);
        assert_eq!(sr.theta_deg, 0.0);
    }

    #[test]
    fn record_replay_is_bit_exact() {
        let img = gradient_image(32, 32);
        let donors: Vec<Image> = (0..3)
            .map(|k| {
                let mut d = Image::zeros(32, 32);
                d.pixels.iter_mut().for_each(|p| *p = 0.2 * (k as f32 + 1.0));
                d
            })
            .collect();
        let cfg = AugConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let ((w, wr), (s, sr)) = weak_strong_pair(&img, &donors, &cfg, &mut rng).unwrap();
            assert_eq!(apply_record(&img, &donors, &wr), w, "weak replay, seed {seed}");
            assert_eq!(apply_record(&img, &donors, &sr), s, "strong replay, seed {seed}");
        }
    }

    #[test]
    fn strong_view_differs_from_weak_when_knobs_active() {
        let img = gradient_image(32, 32);
        let donors = vec![Image::zeros(32, 32)];
        let cfg = AugConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let ((w, _), (s, _)) = weak_strong_pair(&img, &donors, &cfg, &mut rng).unwrap();
        assert!(w.mean_abs_diff(&s) > 0.0);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = gradient_image(32, 32);
        let donors = vec![gradient_image(32, 32)];
        let cfg = AugConfig::default();
        for seed in 0..10 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let ((w, _), (s, _)) = weak_strong_pair(&img, &donors, &cfg, &mut rng).unwrap();
            for v in w.pixels.iter().chain(&s.pixels) {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
