//! Lesion-level scoring with frozen upstream models.
//!
//! An [`EvalSet`] fixes, for every lesion of a split, the evaluation windows,
//! their patch embeddings and the image's saliency maps. Any number of
//! aggregation networks can then be scored against it without touching the
//! upstream networks again.

use crate::agg::AggNet;
use crate::context::{ContextNet, SaliencyPair};
use crate::data::AnnotatedImage;
use crate::error::Result;
use crate::eval::{lesion_score, PredictionRecord};
use crate::local::{LocalNet, EMBED_DIM};
use crate::maps::{assemble, embedding_map, location_indicator, LocationIndicatorMap, MapSelection};
use crate::patch::{extract_patch, sample_lesion_windows, PatchGeometry, Window};
use crate::rng::{keys, stream};
use glcn_tensor::Tensor;

/// Patches per forward pass during inference.
pub const INFER_CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalLesion {
    pub lesion_id: u64,
    pub image_id: u64,
    pub label: u8,
    /// Index into [`EvalSet::saliency`].
    pub image_slot: usize,
    pub windows: Vec<Window>,
    pub indicators: Vec<LocationIndicatorMap>,
    pub embeddings: Vec<[f32; EMBED_DIM]>,
    /// f_loc logits per window.
    pub local_logits: Vec<[f32; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub grid: (usize, usize),
    pub lesions: Vec<EvalLesion>,
    pub saliency: Vec<SaliencyPair>,
}

/// Windows for one lesion, seeded by the lesion id alone.
pub fn lesion_windows(
    image: &AnnotatedImage,
    lesion_index: usize,
    n: usize,
    geometry: &PatchGeometry,
    seed: u64,
) -> Result<Vec<Window>> {
    let lesion = &image.lesions[lesion_index];
    let mut rng = stream(seed, &[keys::LESION_EVAL, lesion.id]);
    sample_lesion_windows(&image.image, lesion, n, geometry, &mut rng)
}

/// Eval-mode embeddings and logits for windows on one image.
pub fn embed_windows(
    local: &LocalNet<f32>,
    image: &AnnotatedImage,
    windows: &[Window],
) -> Result<(Vec<[f32; EMBED_DIM]>, Vec<[f32; 4]>)> {
    let s = local.config.patch_size;
    let mut h = Vec::with_capacity(windows.len());
    let mut z = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(INFER_CHUNK) {
        let patches: Vec<Vec<f32>> = chunk.iter().map(|w| extract_patch(&image.image, w, s)).collect();
        let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
        let (hh, zz) = local.infer(&refs)?;
        h.extend(hh);
        z.extend(zz);
    }
    Ok((h, z))
}

/// Saliency maps for a list of images, a few at a time.
pub fn saliency_for(context: &ContextNet<f32>, images: &[&AnnotatedImage]) -> Result<Vec<SaliencyPair>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let pix: Vec<Vec<f32>> = chunk.iter().map(|im| im.image.to_f32()).collect();
        let refs: Vec<&[f32]> = pix.iter().map(Vec::as_slice).collect();
        let (h, w) = (chunk[0].image.height, chunk[0].image.width);
        out.extend(context.infer(&refs, h, w)?);
    }
    Ok(out)
}

impl EvalSet {
    /// `context` may be omitted when no selection will use saliency; the
    /// maps are then left at zero.
    pub fn build(
        images: &[AnnotatedImage],
        local: &LocalNet<f32>,
        context: Option<&ContextNet<f32>>,
        geometry: &PatchGeometry,
        grid_factor: usize,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let Some(first) = images.first() else {
            return Ok(Self {
                grid: (0, 0),
                lesions: Vec::new(),
                saliency: Vec::new(),
            });
        };
        let (ih, iw) = (first.image.height, first.image.width);
        let grid = (ih / grid_factor, iw / grid_factor);
        let biopsied: Vec<&AnnotatedImage> = images.iter().filter(|im| !im.lesions.is_empty()).collect();
        let saliency = match context {
            Some(c) => saliency_for(c, &biopsied)?,
            None => biopsied
                .iter()
                .map(|_| SaliencyPair::new(grid.0, grid.1, vec![0.0; grid.0 * grid.1], vec![0.0; grid.0 * grid.1]))
                .collect::<Result<_>>()?,
        };
        let mut lesions = Vec::new();
        for (slot, image) in biopsied.iter().enumerate() {
            for (k, lesion) in image.lesions.iter().enumerate() {
                let windows = lesion_windows(image, k, n, geometry, seed)?;
                let (embeddings, local_logits) = embed_windows(local, image, &windows)?;
                let indicators = windows
                    .iter()
                    .map(|w| location_indicator(w, ih, iw, grid.0, grid.1))
                    .collect::<Result<_>>()?;
                lesions.push(EvalLesion {
                    lesion_id: lesion.id,
                    image_id: image.image.id,
                    label: lesion.label.as_u8(),
                    image_slot: slot,
                    windows,
                    indicators,
                    embeddings,
                    local_logits,
                });
            }
        }
        Ok(Self {
            grid,
            lesions,
            saliency,
        })
    }

    /// Aggregation input for window `j` of lesion `i`, as a flat `h*w*M` vector.
    pub fn input(&self, i: usize, j: usize, selection: MapSelection) -> Result<Vec<f32>> {
        let l = &self.lesions[i];
        let e = embedding_map(&l.indicators[j], &l.embeddings[j]);
        Ok(assemble(selection, &l.indicators[j], &self.saliency[l.image_slot], &e)?.values)
    }

    /// Lesion scores from an aggregation network.
    pub fn score(&self, agg: &AggNet<f32>) -> Result<Vec<PredictionRecord>> {
        let sel = agg.config.selection;
        let (gh, gw) = self.grid;
        let m = sel.channels();
        let mut out = Vec::with_capacity(self.lesions.len());
        for (i, l) in self.lesions.iter().enumerate() {
            let mut logits = Vec::with_capacity(l.windows.len());
            let idx: Vec<usize> = (0..l.windows.len()).collect();
            for chunk in idx.chunks(INFER_CHUNK) {
                let mut data = Vec::with_capacity(chunk.len() * gh * gw * m);
                for &j in chunk {
                    data.extend(self.input(i, j, sel)?);
                }
                logits.extend(agg.infer(Tensor::new(vec![chunk.len(), gh, gw, m], data)?)?);
            }
            out.push(self.record(l, lesion_score(&logits)?));
        }
        Ok(out)
    }

    /// Lesion scores from f_loc alone (its own 4-class head).
    pub fn score_local(&self) -> Result<Vec<PredictionRecord>> {
        self.lesions
            .iter()
            .map(|l| {
                let logits: Vec<[f64; 4]> = l
                    .local_logits
                    .iter()
                    .map(|z| std::array::from_fn(|k| z[k] as f64))
                    .collect();
                Ok(self.record(l, lesion_score(&logits)?))
            })
            .collect()
    }

    fn record(&self, l: &EvalLesion, score: f64) -> PredictionRecord {
        PredictionRecord {
            lesion_id: l.lesion_id,
            image_id: l.image_id,
            label: l.label,
            score,
        }
    }
}

/// Context-only lesion score: mean over mask pixels of `S_m / (S_m + S_b)`
/// at the pixel's grid cell.
pub fn context_lesion_score(s: &SaliencyPair, image: &AnnotatedImage, lesion_index: usize) -> f64 {
    let (ch, cw) = (image.image.height / s.height, image.image.width / s.width);
    let mask = &image.lesions[lesion_index].mask;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (r, c) in mask.pixels() {
        let cell = (r / ch) * s.width + c / cw;
        let (m, b) = (s.malignant[cell] as f64, s.benign[cell] as f64);
        total += if m + b > 0.0 { m / (m + b) } else { 0.5 };
        n += 1;
    }
    total / n as f64
}
