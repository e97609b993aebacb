//! Location indicator maps, embedding maps and the assembled aggregation input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::SaliencyPair;
use crate::error::{Error, Result};
use crate::local::EMBED_DIM;
use crate::patch::Window;

/// Fraction of each grid cell covered by a window.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationIndicatorMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Cell `(i, j)` spans rows `[i*H/h, (i+1)*H/h)` and the matching columns.
pub fn location_indicator(
    window: &Window,
    image_height: usize,
    image_width: usize,
    grid_height: usize,
    grid_width: usize,
) -> Result<LocationIndicatorMap> {
    if grid_height == 0 || grid_width == 0 || !image_height.is_multiple_of(grid_height) || !image_width.is_multiple_of(grid_width) {
        return Err(Error::InvalidInput(format!(
            "image {image_height}x{image_width} does not divide into a {grid_height}x{grid_width} grid"
        )));
    }
    if !window.in_bounds(image_height, image_width) {
        return Err(Error::InvalidInput(format!("window {window:?} leaves the image")));
    }
    let (ch, cw) = (image_height / grid_height, image_width / grid_width);
    let mut counts = vec![0u32; grid_height * grid_width];
    for (r, c) in window.footprint(image_height, image_width) {
        counts[(r / ch) * grid_width + c / cw] += 1;
    }
    let per_cell = (ch * cw) as f32;
    Ok(LocationIndicatorMap {
        height: grid_height,
        width: grid_width,
        values: counts.into_iter().map(|n| n as f32 / per_cell).collect(),
    })
}

/// `h x w x 32`, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Every covered cell carries the embedding; uncovered cells are zero.
pub fn embedding_map(indicator: &LocationIndicatorMap, h: &[f32; EMBED_DIM]) -> EmbeddingMap {
    let mut values = vec![0.0f32; indicator.values.len() * EMBED_DIM];
    for (cell, &v) in indicator.values.iter().enumerate() {
        if v > 0.0 {
            values[cell * EMBED_DIM..(cell + 1) * EMBED_DIM].copy_from_slice(h);
        }
    }
    EmbeddingMap {
        height: indicator.height,
        width: indicator.width,
        values,
    }
}

/// Which source maps feed the aggregation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapSelection {
    pub indicator: bool,
    pub saliency: bool,
    pub embedding: bool,
}

impl MapSelection {
    pub const INDICATOR: Self = Self::of(true, false, false);
    pub const EMBEDDING: Self = Self::of(false, false, true);
    pub const SALIENCY: Self = Self::of(false, true, false);
    pub const INDICATOR_EMBEDDING: Self = Self::of(true, false, true);
    pub const INDICATOR_SALIENCY: Self = Self::of(true, true, false);
    pub const EMBEDDING_SALIENCY: Self = Self::of(false, true, true);
    pub const ALL: Self = Self::of(true, true, true);

    /// The seven non-empty combinations in ablation-table order.
    pub const TABLE: [Self; 7] = [
        Self::INDICATOR,
        Self::EMBEDDING,
        Self::SALIENCY,
        Self::INDICATOR_EMBEDDING,
        Self::INDICATOR_SALIENCY,
        Self::EMBEDDING_SALIENCY,
        Self::ALL,
    ];

    const fn of(indicator: bool, saliency: bool, embedding: bool) -> Self {
        Self {
            indicator,
            saliency,
            embedding,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.indicator || self.saliency || self.embedding)
    }

    pub fn channels(&self) -> usize {
        usize::from(self.indicator) + 2 * usize::from(self.saliency) + EMBED_DIM * usize::from(self.embedding)
    }

    pub fn legend(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.indicator {
            out.push("I".to_string());
        }
        if self.saliency {
            out.extend(["S_m".to_string(), "S_b".to_string()]);
        }
        if self.embedding {
            out.extend((1..=EMBED_DIM).map(|k| format!("E_{k}")));
        }
        out
    }

    /// Human-readable row label, e.g. `embedding maps + saliency maps`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.indicator {
            parts.push("location indicator maps");
        }
        // table rows list saliency before embedding only when the indicator is present
        if self.indicator {
            if self.saliency {
                parts.push("saliency maps");
            }
            if self.embedding {
                parts.push("embedding maps");
            }
        } else {
            if self.embedding {
                parts.push("embedding maps");
            }
            if self.saliency {
                parts.push("saliency maps");
            }
        }
        parts.join(" + ")
    }
}

impl fmt::Display for MapSelection {
    /// Short key: `indicator`, `embedding+saliency`, ...
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.indicator {
            parts.push("indicator");
        }
        if self.embedding {
            parts.push("embedding");
        }
        if self.saliency {
            parts.push("saliency");
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for MapSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut sel = Self::of(false, false, false);
        for part in s.split('+').map(str::trim) {
            match part {
                "indicator" | "i" => sel.indicator = true,
                "saliency" | "s" => sel.saliency = true,
                "embedding" | "e" => sel.embedding = true,
                other => return Err(Error::Config(format!("unknown map kind {other:?} in {s:?}"))),
            }
        }
        if sel.is_empty() {
            return Err(Error::Config("map selection must not be empty".into()));
        }
        Ok(sel)
    }
}

/// `h x w x M` aggregation input with a name per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub legend: Vec<String>,
}

impl AssembledInput {
    /// Values of one named channel, row-major.
    pub fn channel(&self, name: &str) -> Option<Vec<f32>> {
        let k = self.legend.iter().position(|l| l == name)?;
        Some(self.values.iter().skip(k).step_by(self.channels).copied().collect())
    }
}

/// Concatenate the selected maps in the fixed order `I | S_m, S_b | E_1..E_32`.
pub fn assemble(
    selection: MapSelection,
    indicator: &LocationIndicatorMap,
    saliency: &SaliencyPair,
    embedding: &EmbeddingMap,
) -> Result<AssembledInput> {
    if selection.is_empty() {
        return Err(Error::InvalidInput("map selection must not be empty".into()));
    }
    let (h, w) = (indicator.height, indicator.width);
    let mut dims = Vec::new();
    if selection.saliency {
        dims.push(("saliency", saliency.height, saliency.width));
    }
    if selection.embedding {
        dims.push(("embedding", embedding.height, embedding.width));
    }
    if selection.indicator || !dims.is_empty() {
        for (name, gh, gw) in dims {
            if (gh, gw) != (h, w) {
                return Err(Error::InvalidInput(format!(
                    "{name} grid {gh}x{gw} does not match indicator grid {h}x{w}"
                )));
            }
        }
    }
    let m = selection.channels();
    let mut values = Vec::with_capacity(h * w * m);
    for cell in 0..h * w {
        if selection.indicator {
            values.push(indicator.values[cell]);
        }
        if selection.saliency {
            values.push(saliency.malignant[cell]);
            values.push(saliency.benign[cell]);
        }
        if selection.embedding {
            values.extend_from_slice(&embedding.values[cell * EMBED_DIM..(cell + 1) * EMBED_DIM]);
        }
    }
    Ok(AssembledInput {
        height: h,
        width: w,
        channels: m,
        values,
        legend: selection.legend(),
    })
}
