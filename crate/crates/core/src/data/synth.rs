//! Procedural image generator.
//!
//! Background brightness follows a slowly varying density field `D` plus
//! texture. Lesions are added on top with intensities that do not depend on
//! `D`: blobs are benign, spiculated masses malignant, and lobulated
//! ("ambiguous") masses are malignant iff the mean of `D` under the mask
//! exceeds 0.5.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{quantize, AnnotatedImage, DataConfig, Label, LesionAnnotation, LesionMask, Morphology, Side, SyntheticImage};
use crate::error::{Error, Result};
use crate::nn::uniform;
use crate::rng::Rng;

/// Lesion ids are `image_id * LESION_IDS_PER_IMAGE + k`.
pub const LESION_IDS_PER_IMAGE: u64 = 16;

const BASE_BRIGHTNESS: f64 = 0.2;
const DENSITY_GAIN: f64 = 0.3;
const SPICULE_HALF_WIDTH: f64 = 0.75;
const LOBES: f64 = 3.0;
const LOBE_DEPTH: f64 = 0.35;

/// The density field `D(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextField {
    Constant(f64),
    /// `d0 + sum_j amp_j * cos(2 pi (fy_j * row/H + fx_j * col/W) + phase_j)`, clamped to [0,1].
    Smooth { d0: f64, waves: Vec<[f64; 4]> },
}

impl ContextField {
    pub fn sample(config: &DataConfig, rng: &mut Rng) -> Self {
        let d0 = uniform(rng, config.density_range[0], config.density_range[1]);
        let waves = (0..2)
            .map(|_| {
                [
                    config.density_variation * uniform(rng, 0.25, 0.5),
                    uniform(rng, -1.0, 1.0),
                    uniform(rng, -1.0, 1.0),
                    uniform(rng, 0.0, 2.0 * PI),
                ]
            })
            .collect();
        ContextField::Smooth { d0, waves }
    }

    pub fn at(&self, r: f64, c: f64, height: usize, width: usize) -> f64 {
        match self {
            ContextField::Constant(v) => v.clamp(0.0, 1.0),
            ContextField::Smooth { d0, waves } => {
                let mut v = *d0;
                for [amp, fy, fx, phase] in waves {
                    v += amp * (2.0 * PI * (fy * r / height as f64 + fx * c / width as f64) + phase).cos();
                }
                v.clamp(0.0, 1.0)
            }
        }
    }
}

/// Geometry of one planted lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionPlan {
    pub morphology: Morphology,
    pub center: (f64, f64),
    pub radius: f64,
    pub amplitude: f64,
    /// Spicule (angle, length) pairs, or the lobe phase in slot 0 for ambiguous lesions.
    pub arms: Vec<(f64, f64)>,
}

pub(crate) fn extent(m: Morphology, radius: f64) -> f64 {
    match m {
        Morphology::Blob => radius,
        Morphology::Ambiguous => radius * (1.0 + LOBE_DEPTH),
        Morphology::Spiculated => radius * 2.2,
    }
}

impl LesionPlan {
    fn extent(&self) -> f64 {
        extent(self.morphology, self.radius)
    }

    /// Additive intensity at pixel centre `(y, x)`; zero outside the lesion.
    fn intensity(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let d = dy.hypot(dx);
        let dome = |d: f64, r: f64| if d <= r { (1.0 - (d / r).powi(2)).sqrt() } else { 0.0 };
        match self.morphology {
            Morphology::Blob => self.amplitude * dome(d, self.radius),
            Morphology::Ambiguous => {
                let phase = self.arms[0].0;
                let theta = dy.atan2(dx);
                let r = self.radius * (1.0 + LOBE_DEPTH * (LOBES * theta + phase).cos());
                self.amplitude * dome(d, r)
            }
            Morphology::Spiculated => {
                let core = self.radius * 0.7;
                let mut v = dome(d, core);
                for &(angle, len) in &self.arms {
                    let (uy, ux) = (angle.sin(), angle.cos());
                    let t = dy * uy + dx * ux;
                    if t < 0.0 || t > len {
                        continue;
                    }
                    let off = (dy - t * uy).hypot(dx - t * ux);
                    if off <= SPICULE_HALF_WIDTH {
                        v = v.max(0.8 * (1.0 - 0.6 * t / len));
                    }
                }
                self.amplitude * v
            }
        }
    }

    /// Pixels with positive intensity, restricted to the component holding the centre.
    fn rasterize(&self, height: usize, width: usize) -> Vec<(usize, usize, f64)> {
        let e = self.extent().ceil() + 1.0;
        let r0 = (self.center.0 - e).floor().max(0.0) as usize;
        let r1 = ((self.center.0 + e).ceil() as usize).min(height - 1);
        let c0 = (self.center.1 - e).floor().max(0.0) as usize;
        let c1 = ((self.center.1 + e).ceil() as usize).min(width - 1);
        let bw = c1 - c0 + 1;
        let bh = r1 - r0 + 1;
        let mut vals = vec![0.0; bh * bw];
        for r in r0..=r1 {
            for c in c0..=c1 {
                vals[(r - r0) * bw + (c - c0)] = self.intensity(r as f64 + 0.5, c as f64 + 0.5);
            }
        }
        // flood fill from the pixel holding the centre
        let sr = (self.center.0.floor() as usize).clamp(r0, r1) - r0;
        let sc = (self.center.1.floor() as usize).clamp(c0, c1) - c0;
        let mut keep = vec![false; vals.len()];
        let mut stack = vec![sr * bw + sc];
        let mut out = Vec::new();
        if vals[stack[0]] <= 0.0 {
            return out;
        }
        keep[stack[0]] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / bw, i % bw);
            out.push((r + r0, c + c0, vals[i]));
            let neighbours = [
                (r > 0).then(|| i - bw),
                (r + 1 < bh).then(|| i + bw),
                (c > 0).then(|| i - 1),
                (c + 1 < bw).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if !keep[j] && vals[j] > 0.0 {
                    keep[j] = true;
                    stack.push(j);
                }
            }
        }
        out.sort_unstable_by_key(|&(r, c, _)| (r, c));
        out
    }
}

fn draw_morphology(config: &DataConfig, rng: &mut Rng) -> Morphology {
    if rng.random::<f64>() < config.ambiguous_fraction {
        Morphology::Ambiguous
    } else if rng.random::<f64>() < config.spiculated_fraction {
        Morphology::Spiculated
    } else {
        Morphology::Blob
    }
}

fn draw_count(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn draw_shape(config: &DataConfig, morphology: Morphology, rng: &mut Rng) -> LesionPlan {
    let radius = uniform(rng, config.lesion_radius[0], config.lesion_radius[1]);
    let amplitude = uniform(rng, config.lesion_amplitude[0], config.lesion_amplitude[1]);
    let arms = match morphology {
        Morphology::Blob => Vec::new(),
        Morphology::Ambiguous => vec![(uniform(rng, 0.0, 2.0 * PI), 0.0)],
        Morphology::Spiculated => {
            let n = rng.random_range(6..=10);
            (0..n)
                .map(|_| (uniform(rng, 0.0, 2.0 * PI), radius * uniform(rng, 1.5, 2.2)))
                .collect()
        }
    };
    LesionPlan {
        morphology,
        center: (0.0, 0.0),
        radius,
        amplitude,
        arms,
    }
}

/// Place every lesion without overlap, or `None` if the retry budget runs out.
fn place(config: &DataConfig, plans: &mut [LesionPlan], rng: &mut Rng) -> bool {
    for i in 0..plans.len() {
        let e = plans[i].extent() + 2.0;
        let mut placed = false;
        for _ in 0..config.placement_retries {
            let cy = uniform(rng, e, config.height as f64 - e);
            let cx = uniform(rng, e, config.width as f64 - e);
            let clear = plans[..i].iter().all(|p| {
                let gap = p.extent() + plans[i].extent() + 3.0;
                (p.center.0 - cy).hypot(p.center.1 - cx) > gap
            });
            if clear {
                plans[i].center = (cy, cx);
                placed = true;
                break;
            }
        }
        if !placed {
            return false;
        }
    }
    true
}

/// Generate one image with a freshly drawn density field and lesion set.
pub fn generate_image(config: &DataConfig, image_id: u64, patient: u64, rng: &mut Rng) -> Result<AnnotatedImage> {
    let field = ContextField::sample(config, rng);
    let count = draw_count(&config.lesion_count_probs, rng);
    let morphologies: Vec<Morphology> = (0..count).map(|_| draw_morphology(config, rng)).collect();
    generate_image_with(config, image_id, patient, &field, &morphologies, rng)
}

/// Generate one image with the given density field and lesion morphologies.
pub fn generate_image_with(
    config: &DataConfig,
    image_id: u64,
    patient: u64,
    field: &ContextField,
    morphologies: &[Morphology],
    rng: &mut Rng,
) -> Result<AnnotatedImage> {
    config.validate()?;
    if morphologies.len() as u64 > LESION_IDS_PER_IMAGE {
        return Err(Error::Config(format!("at most {LESION_IDS_PER_IMAGE} lesions per image")));
    }
    let (h, w) = (config.height, config.width);
    let mut plans = Vec::new();
    let mut ok = false;
    for _ in 0..config.regeneration_limit {
        plans = morphologies.iter().map(|&m| draw_shape(config, m, rng)).collect();
        if place(config, &mut plans, rng) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Placement(format!(
            "image {image_id}: could not place {} lesions after {} attempts",
            morphologies.len(),
            config.regeneration_limit
        )));
    }

    // background: density + smooth value-noise texture + white noise
    let cell = (config.grid_factor / 2).max(1);
    let (lh, lw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..lh * lw)
        .map(|_| uniform(rng, -config.texture_amplitude, config.texture_amplitude))
        .collect();
    let noise = Normal::new(0.0, config.noise_std).expect("finite std");
    let mut values = vec![0.0f64; h * w];
    let mut density = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let d = field.at(y, x, h, w);
            let (ly, lx) = (y / cell as f64, x / cell as f64);
            let (iy, ix) = (ly.floor() as usize, lx.floor() as usize);
            let (ty, tx) = (ly - iy as f64, lx - ix as f64);
            let at = |a: usize, b: usize| lattice[a * lw + b];
            let top = at(iy, ix) + (at(iy, ix + 1) - at(iy, ix)) * tx;
            let bot = at(iy + 1, ix) + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * tx;
            let texture = top + (bot - top) * ty;
            density[r * w + c] = d;
            values[r * w + c] = BASE_BRIGHTNESS + DENSITY_GAIN * d + texture + noise.sample(rng);
        }
    }

    let mut lesions = Vec::with_capacity(plans.len());
    for (k, plan) in plans.iter().enumerate() {
        let raster = plan.rasterize(h, w);
        let coords: Vec<(usize, usize)> = raster.iter().map(|&(r, c, _)| (r, c)).collect();
        let mask = LesionMask::from_pixels(h, w, &coords)
            .ok_or_else(|| Error::Placement(format!("image {image_id}: lesion {k} rasterized empty")))?;
        let context_level = coords.iter().map(|&(r, c)| density[r * w + c]).sum::<f64>() / coords.len() as f64;
        for &(r, c, v) in &raster {
            values[r * w + c] += v;
        }
        let label = match plan.morphology {
            Morphology::Blob => Label::Benign,
            Morphology::Spiculated => Label::Malignant,
            Morphology::Ambiguous if context_level > 0.5 => Label::Malignant,
            Morphology::Ambiguous => Label::Benign,
        };
        lesions.push(LesionAnnotation {
            id: image_id * LESION_IDS_PER_IMAGE + k as u64,
            mask,
            label,
            morphology: plan.morphology,
            context_level,
        });
    }

    let image = SyntheticImage {
        id: image_id,
        patient,
        side: if image_id.is_multiple_of(2) { Side::L } else { Side::R },
        height: h,
        width: w,
        pixels: values.into_iter().map(quantize).collect(),
        biopsied: !lesions.is_empty(),
    };
    Ok(AnnotatedImage { image, lesions })
}
