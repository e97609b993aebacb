use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::synth::LESION_IDS_PER_IMAGE;

/// Generator settings. Pixel quantities scale with the grid factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub grid_factor: usize,
    pub patients: usize,
    pub images_per_patient: usize,
    /// `lesion_count_probs[k]` is the probability of `k` lesions in an image.
    pub lesion_count_probs: Vec<f64>,
    pub ambiguous_fraction: f64,
    /// Share of spiculated lesions among the unambiguous ones.
    pub spiculated_fraction: f64,
    pub lesion_radius: [f64; 2],
    pub lesion_amplitude: [f64; 2],
    /// Range of the image-level density offset.
    pub density_range: [f64; 2],
    /// Amplitude of the slow in-image density variation.
    pub density_variation: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub placement_retries: usize,
    pub regeneration_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 368,
            width: 240,
            grid_factor: 16,
            patients: 1000,
            images_per_patient: 2,
            lesion_count_probs: vec![0.25, 0.4, 0.2, 0.15],
            ambiguous_fraction: 0.3,
            spiculated_fraction: 0.5,
            lesion_radius: [6.0, 11.0],
            lesion_amplitude: [0.15, 0.25],
            density_range: [0.1, 0.9],
            density_variation: 0.15,
            texture_amplitude: 0.04,
            noise_std: 0.01,
            placement_retries: 200,
            regeneration_limit: 10,
        }
    }
}

impl DataConfig {
    /// Full-resolution geometry: 2944x1920 with grid factor 64 (46x30 cells).
    pub fn full_scale() -> Self {
        let d = Self::default();
        Self {
            height: 2944,
            width: 1920,
            grid_factor: 64,
            lesion_radius: [d.lesion_radius[0] * 4.0, d.lesion_radius[1] * 4.0],
            ..d
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.grid_factor, self.width / self.grid_factor)
    }

    /// Largest distance from a lesion centre to its outermost pixel.
    pub fn max_extent(&self) -> f64 {
        super::synth::extent(super::Morphology::Spiculated, self.lesion_radius[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_factor == 0 || self.height == 0 || self.width == 0 {
            return bad("image dims and grid factor must be positive".into());
        }
        if !self.height.is_multiple_of(self.grid_factor) || !self.width.is_multiple_of(self.grid_factor) {
            return bad(format!(
                "image {}x{} is not divisible by grid factor {}",
                self.height, self.width, self.grid_factor
            ));
        }
        if self.patients == 0 || self.images_per_patient == 0 {
            return bad("patient and image counts must be positive".into());
        }
        let p = &self.lesion_count_probs;
        if p.is_empty() || p.len() > LESION_IDS_PER_IMAGE as usize + 1 {
            return bad(format!("lesion count distribution must have 1..={} entries", LESION_IDS_PER_IMAGE + 1));
        }
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return bad("lesion count probabilities must be non-negative".into());
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("lesion count distribution sums to {total}, not 1"));
        }
        for (name, v) in [
            ("ambiguous_fraction", self.ambiguous_fraction),
            ("spiculated_fraction", self.spiculated_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1]"));
            }
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 >= 1.0 && r1 >= r0) {
            return bad("lesion radius range must satisfy 1 <= min <= max".into());
        }
        let [a0, a1] = self.lesion_amplitude;
        if !(a0 > 0.0 && a1 >= a0 && a1 <= 0.4) {
            return bad("lesion amplitude range must satisfy 0 < min <= max <= 0.4".into());
        }
        let [d0, d1] = self.density_range;
        if !(0.0 <= d0 && d0 <= d1 && d1 <= 1.0) {
            return bad("density range must lie within [0,1]".into());
        }
        if !(self.density_variation >= 0.0 && self.texture_amplitude >= 0.0 && self.noise_std >= 0.0) {
            return bad("noise amplitudes must be non-negative".into());
        }
        let lesions = p.len() - 1;
        let need = 2.0 * (self.max_extent() + 2.0);
        if need >= self.height.min(self.width) as f64 && lesions > 0 {
            return bad("lesions do not fit inside the image".into());
        }
        if self.placement_retries == 0 || self.regeneration_limit == 0 {
            return bad("placement retry budgets must be positive".into());
        }
        Ok(())
    }
}
