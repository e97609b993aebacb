//! Patch taxonomy, window geometry, augmentation and epoch composition.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, Label, LesionAnnotation, LesionMask, SyntheticImage};
use crate::error::{Error, Result};
use crate::nn::uniform;
use crate::rng::{keys, stream, Rng};

pub const CLASS_NAMES: [&str; 4] = ["malignant", "benign", "outside", "negative"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    Malignant,
    Benign,
    Outside,
    Negative,
}

impl PatchClass {
    pub const ALL: [PatchClass; 4] = [
        PatchClass::Malignant,
        PatchClass::Benign,
        PatchClass::Outside,
        PatchClass::Negative,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    pub fn of_label(label: Label) -> Self {
        match label {
            Label::Malignant => PatchClass::Malignant,
            Label::Benign => PatchClass::Benign,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowClass {
    Class(PatchClass),
    /// Overlaps both malignant and benign findings.
    Mixed,
}

/// Square window in image pixel coordinates, rotated about its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center_row: f64,
    pub center_col: f64,
    pub side: usize,
    pub angle_deg: f64,
}

impl Window {
    /// Axis-aligned window with the given top-left pixel.
    pub fn axis_aligned(top: usize, left: usize, side: usize) -> Self {
        Self {
            center_row: top as f64 + side as f64 / 2.0,
            center_col: left as f64 + side as f64 / 2.0,
            side,
            angle_deg: 0.0,
        }
    }

    fn trig(&self) -> (f64, f64) {
        let t = self.angle_deg.to_radians();
        (t.cos(), t.sin())
    }

    /// Half the side of the rotated window's bounding box.
    pub fn half_extent(&self) -> f64 {
        let (c, s) = self.trig();
        self.side as f64 / 2.0 * (c.abs() + s.abs())
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        let e = self.half_extent();
        let tol = 1e-9;
        self.center_row - e >= -tol
            && self.center_col - e >= -tol
            && self.center_row + e <= height as f64 + tol
            && self.center_col + e <= width as f64 + tol
    }

    /// Whether the centre of pixel `(r, c)` lies strictly inside the window.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let (cos, sin) = self.trig();
        let dy = r as f64 + 0.5 - self.center_row;
        let dx = c as f64 + 0.5 - self.center_col;
        let v = dx * cos + dy * sin;
        let u = -dx * sin + dy * cos;
        let half = self.side as f64 / 2.0;
        u.abs() < half && v.abs() < half
    }

    /// Candidate pixel rows and columns (bounding box clipped to the image).
    pub fn pixel_range(&self, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let e = self.half_extent();
        let clip = |lo: f64, hi: f64, n: usize| {
            let a = lo.floor().max(0.0) as usize;
            let b = (hi.ceil().max(0.0) as usize).min(n);
            a.min(b)..b
        };
        (
            clip(self.center_row - e, self.center_row + e, height),
            clip(self.center_col - e, self.center_col + e, width),
        )
    }

    /// Covered pixels in row-major order.
    pub fn footprint(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (rows, cols) = self.pixel_range(height, width);
        let mut out = Vec::new();
        for r in rows {
            for c in cols.clone() {
                if self.covers(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// At least one mask pixel is covered.
    pub fn overlaps(&self, mask: &LesionMask) -> bool {
        let (rows, cols) = self.pixel_range(mask.image_height, mask.image_width);
        let (mr, mc) = mask.bbox();
        let r0 = rows.start.max(mr.start);
        let r1 = rows.end.min(mr.end);
        let c0 = cols.start.max(mc.start);
        let c1 = cols.end.min(mc.end);
        (r0..r1).any(|r| (c0..c1).any(|c| mask.contains(r, c) && self.covers(r, c)))
    }
}

/// Patch class of a window on an annotated image.
pub fn classify_window(window: &Window, image: &AnnotatedImage) -> WindowClass {
    if !image.image.biopsied {
        return WindowClass::Class(PatchClass::Negative);
    }
    let hits = |label: Label| {
        image
            .lesions
            .iter()
            .any(|l| l.label == label && window.overlaps(&l.mask))
    };
    match (hits(Label::Malignant), hits(Label::Benign)) {
        (true, true) => WindowClass::Mixed,
        (true, false) => WindowClass::Class(PatchClass::Malignant),
        (false, true) => WindowClass::Class(PatchClass::Benign),
        (false, false) => WindowClass::Class(PatchClass::Outside),
    }
}

/// Window size range, output resolution and sampling limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchGeometry {
    pub min_side: usize,
    pub max_side: usize,
    pub patch_size: usize,
    pub max_angle_deg: f64,
    pub rejection_budget: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            min_side: 32,
            max_side: 96,
            patch_size: 64,
            max_angle_deg: 30.0,
            rejection_budget: 1000,
        }
    }
}

impl PatchGeometry {
    pub fn full_scale() -> Self {
        Self {
            min_side: 128,
            max_side: 384,
            patch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.min_side == 0 || self.min_side > self.max_side || self.patch_size == 0 {
            return Err(Error::Config("patch side range must satisfy 0 < min <= max".into()));
        }
        if self.max_side >= height.min(width) {
            return Err(Error::Config(format!(
                "largest patch side {} must be smaller than the image {height}x{width}",
                self.max_side
            )));
        }
        if !(0.0..=45.0).contains(&self.max_angle_deg) {
            return Err(Error::Config("rotation range must lie in [0, 45] degrees".into()));
        }
        if self.rejection_budget == 0 {
            return Err(Error::Config("rejection budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `size * size` row-major intensities.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub window: Window,
    pub image_id: u64,
    pub class: PatchClass,
}

fn bilinear(data: impl Fn(usize) -> f32, h: usize, w: usize, fy: f64, fx: f64) -> f32 {
    let locate = |f: f64, n: usize| {
        let f = f.clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (f - i0 as f64) as f32)
    };
    let (y0, y1, ty) = locate(fy, h);
    let (x0, x1, tx) = locate(fx, w);
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let top = lerp(data(y0 * w + x0), data(y0 * w + x1), tx);
    let bot = lerp(data(y1 * w + x0), data(y1 * w + x1), tx);
    lerp(top, bot, ty)
}

/// Rotated crop at native resolution, then a bilinear resize to `size x size`.
pub fn extract_patch(image: &SyntheticImage, window: &Window, size: usize) -> Vec<f32> {
    let (h, w) = (image.height, image.width);
    let s = window.side;
    let (cos, sin) = window.trig();
    let half = s as f64 / 2.0;
    let mut crop = vec![0.0f32; s * s];
    let src = |i: usize| image.pixels[i] as f32 / 65535.0;
    for i in 0..s {
        let u = i as f64 + 0.5 - half;
        for j in 0..s {
            let v = j as f64 + 0.5 - half;
            let y = window.center_row + u * cos + v * sin;
            let x = window.center_col + v * cos - u * sin;
            crop[i * s + j] = bilinear(src, h, w, y - 0.5, x - 0.5);
        }
    }
    if s == size {
        return crop;
    }
    let scale = s as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let fy = (i as f64 + 0.5) * scale - 0.5;
        for j in 0..size {
            let fx = (j as f64 + 0.5) * scale - 0.5;
            out.push(bilinear(|k| crop[k], s, s, fy, fx));
        }
    }
    out
}

fn achievable(image: &AnnotatedImage, class: PatchClass) -> bool {
    match class {
        PatchClass::Malignant => image.has_label(Label::Malignant),
        PatchClass::Benign => image.has_label(Label::Benign),
        PatchClass::Outside => image.image.biopsied,
        PatchClass::Negative => !image.image.biopsied,
    }
}

/// Random in-bounds window with the given side and angle; the centre sits at
/// an integer top-left offset plus half the side.
fn random_window(side: usize, angle_deg: f64, height: usize, width: usize, rng: &mut Rng) -> Option<Window> {
    let probe = Window {
        center_row: 0.0,
        center_col: 0.0,
        side,
        angle_deg,
    };
    let e = probe.half_extent();
    let half = side as f64 / 2.0;
    let range = |n: usize| {
        let lo = (e - half - 1e-9).ceil().max(0.0) as i64;
        let hi = (n as f64 - e - half + 1e-9).floor() as i64;
        (lo <= hi).then_some((lo, hi))
    };
    let (r0, r1) = range(height)?;
    let (c0, c1) = range(width)?;
    let top = rng.random_range(r0..=r1) as f64;
    let left = rng.random_range(c0..=c1) as f64;
    Some(Window {
        center_row: top + half,
        center_col: left + half,
        side,
        angle_deg,
    })
}

/// Augmented training patch of class `target`, found by rejection sampling.
pub fn sample_training_patch(
    image: &AnnotatedImage,
    target: PatchClass,
    geometry: &PatchGeometry,
    rng: &mut Rng,
) -> Result<Patch> {
    let id = image.image.id;
    if !achievable(image, target) {
        return Err(Error::SamplingExhausted(format!(
            "image {id} cannot yield a {} patch",
            target.name()
        )));
    }
    let (h, w) = (image.image.height, image.image.width);
    for _ in 0..geometry.rejection_budget {
        let side = rng.random_range(geometry.min_side..=geometry.max_side);
        let angle = uniform(rng, -geometry.max_angle_deg, geometry.max_angle_deg);
        let Some(window) = random_window(side, angle, h, w, rng) else {
            continue;
        };
        if classify_window(&window, image) == WindowClass::Class(target) {
            return Ok(Patch {
                pixels: extract_patch(&image.image, &window, geometry.patch_size),
                size: geometry.patch_size,
                window,
                image_id: id,
                class: target,
            });
        }
    }
    Err(Error::SamplingExhausted(format!(
        "no {} window found on image {id} within {} tries",
        target.name(),
        geometry.rejection_budget
    )))
}

/// Per-class patch counts for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    /// Counts in class order (malignant, benign, outside, negative).
    pub counts: [usize; 4],
}

impl EpochPlan {
    pub const PROTOCOL: EpochPlan = EpochPlan {
        counts: [20, 35, 5000, 4945],
    };

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `weights[c] = total / counts[c]`.
    pub fn weights(&self) -> [f64; 4] {
        let total = self.total() as f64;
        self.counts.map(|c| total / c as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.contains(&0) {
            return Err(Error::Config(format!("epoch plan counts must all be positive: {:?}", self.counts)));
        }
        Ok(())
    }
}

/// Retries on other source images before a position is declared unsatisfiable.
const IMAGE_ATTEMPTS: usize = 10;

/// The shuffled patch stream for one epoch. Every stream position draws from
/// its own RNG, so the result is independent of evaluation order.
pub fn build_epoch(
    images: &[AnnotatedImage],
    plan: &EpochPlan,
    geometry: &PatchGeometry,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Patch>> {
    plan.validate()?;
    let mut patches = Vec::with_capacity(plan.total());
    let mut position = 0u64;
    for class in PatchClass::ALL {
        let eligible: Vec<&AnnotatedImage> = images.iter().filter(|im| achievable(im, class)).collect();
        if eligible.is_empty() {
            return Err(Error::SamplingExhausted(format!(
                "class {} is unsatisfiable: no source image",
                class.name()
            )));
        }
        for _ in 0..plan.counts[class.index()] {
            let mut rng = stream(seed, &[keys::EPOCH_PATCH, epoch, position]);
            position += 1;
            let mut last = None;
            for _ in 0..IMAGE_ATTEMPTS {
                let image = eligible[rng.random_range(0..eligible.len())];
                match sample_training_patch(image, class, geometry, &mut rng) {
                    Ok(p) => {
                        last = None;
                        patches.push(p);
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if let Some(e) = last {
                return Err(e);
            }
        }
    }
    patches.shuffle(&mut stream(seed, &[keys::EPOCH_SHUFFLE, epoch]));
    Ok(patches)
}

/// `n` unrotated windows overlapping the lesion mask, sides drawn from the training range.
pub fn sample_lesion_windows(
    image: &SyntheticImage,
    lesion: &LesionAnnotation,
    n: usize,
    geometry: &PatchGeometry,
    rng: &mut Rng,
) -> Result<Vec<Window>> {
    if n == 0 {
        return Err(Error::InvalidInput("at least one lesion patch is required".into()));
    }
    let (h, w) = (image.height, image.width);
    let (mr, mc) = lesion.mask.bbox();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..geometry.rejection_budget {
            let side = rng.random_range(geometry.min_side..=geometry.max_side);
            if side > h || side > w {
                continue;
            }
            let r_lo = (mr.start + 1).saturating_sub(side);
            let r_hi = (mr.end - 1).min(h - side);
            let c_lo = (mc.start + 1).saturating_sub(side);
            let c_hi = (mc.end - 1).min(w - side);
            if r_lo > r_hi || c_lo > c_hi {
                continue;
            }
            let win = Window::axis_aligned(rng.random_range(r_lo..=r_hi), rng.random_range(c_lo..=c_hi), side);
            if win.overlaps(&lesion.mask) {
                found = Some(win);
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::SamplingExhausted(format!(
                "no window overlapping lesion {} within {} tries",
                lesion.id, geometry.rejection_budget
            ))
        })?);
    }
    Ok(out)
}

/// Evaluation patches for one lesion (class set from the lesion's label).
pub fn sample_lesion_patches(
    image: &SyntheticImage,
    lesion: &LesionAnnotation,
    n: usize,
    geometry: &PatchGeometry,
    rng: &mut Rng,
) -> Result<Vec<Patch>> {
    let windows = sample_lesion_windows(image, lesion, n, geometry, rng)?;
    Ok(windows
        .into_iter()
        .map(|window| Patch {
            pixels: extract_patch(image, &window, geometry.patch_size),
            size: geometry.patch_size,
            window,
            image_id: image.id,
            class: PatchClass::of_label(lesion.label),
        })
        .collect())
}
