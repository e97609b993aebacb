//! Synthetic lesion dataset: in-memory types, generator, persistence.

mod config;
mod manifest;
mod raster;
mod synth;

pub use config::DataConfig;
pub use manifest::{
    generate_dataset, generate_in_memory, load_dataset, read_manifest, split_patients, SplitTable, ImageEntry, LesionEntry, Manifest, RleMask, SplitCounts,
    MANIFEST_FILE, MANIFEST_FORMAT,
};
pub use raster::{read_raster, write_raster, RASTER_MAGIC};
pub use synth::{generate_image, generate_image_with, ContextField, LesionPlan, LESION_IDS_PER_IMAGE};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    /// Binary target: benign 0, malignant 1.
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    Blob,
    Spiculated,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Binary mask stored as its bounding box within a `image_height x image_width` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    pub image_height: usize,
    pub image_width: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl LesionMask {
    /// Tight mask from a set of pixel coordinates.
    pub fn from_pixels(image_height: usize, image_width: usize, pixels: &[(usize, usize)]) -> Option<Self> {
        let top = pixels.iter().map(|p| p.0).min()?;
        let bottom = pixels.iter().map(|p| p.0).max()?;
        let left = pixels.iter().map(|p| p.1).min()?;
        let right = pixels.iter().map(|p| p.1).max()?;
        if bottom >= image_height || right >= image_width {
            return None;
        }
        let (height, width) = (bottom - top + 1, right - left + 1);
        let mut bits = vec![false; height * width];
        for &(r, c) in pixels {
            bits[(r - top) * width + (c - left)] = true;
        }
        Some(Self {
            image_height,
            image_width,
            top,
            left,
            height,
            width,
            bits,
        })
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top
            && c >= self.left
            && r < self.top + self.height
            && c < self.left + self.width
            && self.bits[(r - self.top) * self.width + (c - self.left)]
    }

    pub fn pixel_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (self.top + i / self.width, self.left + i % self.width))
    }

    /// Rows and columns spanned, as half-open ranges.
    pub fn bbox(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (self.top..self.top + self.height, self.left..self.left + self.width)
    }

    /// 4-connectivity of the set pixels.
    pub fn is_connected(&self) -> bool {
        let total = self.pixel_count();
        let Some(start) = self.bits.iter().position(|&b| b) else {
            return false;
        };
        let mut seen = vec![false; self.bits.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            let (r, c) = (i / self.width, i % self.width);
            let mut visit = |rr: usize, cc: usize| {
                let j = rr * self.width + cc;
                if self.bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < self.height {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < self.width {
                visit(r, c + 1);
            }
        }
        count == total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionAnnotation {
    pub id: u64,
    pub mask: LesionMask,
    pub label: Label,
    pub morphology: Morphology,
    /// Mean of the density field over the mask.
    pub context_level: f64,
}

/// Grayscale raster quantized to 16 bits; `value = q / 65535`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: u64,
    pub patient: u64,
    pub side: Side,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    pub biopsied: bool,
}

impl SyntheticImage {
    pub fn value(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c] as f32 / 65535.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&q| q as f32 / 65535.0).collect()
    }
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image: SyntheticImage,
    pub lesions: Vec<LesionAnnotation>,
}

impl AnnotatedImage {
    pub fn has_label(&self, label: Label) -> bool {
        self.lesions.iter().any(|l| l.label == label)
    }
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[AnnotatedImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn lesion_count(&self, split: Split) -> usize {
        self.split(split).iter().map(|i| i.lesions.len()).sum()
    }
}
