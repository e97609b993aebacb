//! Precomputed aggregation training inputs.
//!
//! With f_loc and the context net frozen, every aggregation input is a pure
//! function of a patch, so a fixed pool of patches is embedded once and
//! reused across aggregation epochs, seeds and map selections. The pool is
//! keyed by the hashes of everything it depends on; any mismatch rebuilds it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointMeta, TrainingMeta};
use crate::context::{ContextNet, SaliencyPair};
use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::local::{LocalNet, EMBED_DIM};
use crate::maps::{assemble, embedding_map, location_indicator, LocationIndicatorMap, MapSelection};
use crate::nn::NamedTensor;
use crate::patch::{build_epoch, EpochPlan, PatchClass, PatchGeometry};
use crate::scoring::{saliency_for, INFER_CHUNK};

pub const CACHE_INDEX: &str = "index.json";
const CACHE_KIND: &str = "agg-cache";
/// Pool draws use an epoch id that training epochs (numbered from 1) never take.
const POOL_EPOCH: u64 = 0;

/// Everything the cached inputs depend on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub local_hash: String,
    /// `none` when no context net was supplied.
    pub context_hash: String,
    pub pool_hash: String,
    pub dataset_hash: String,
}

impl CacheKey {
    pub fn file_name(&self) -> String {
        let json = serde_json::to_vec(self).expect("key serializes");
        format!("{}.bin", &sha256_hex(&json)[..16])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    key: CacheKey,
    file: String,
    patches: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggCache {
    pub key: CacheKey,
    pub grid: (usize, usize),
    pub classes: Vec<PatchClass>,
    /// Index into `saliency` for each patch.
    pub image_slots: Vec<usize>,
    pub indicators: Vec<LocationIndicatorMap>,
    pub embeddings: Vec<[f32; EMBED_DIM]>,
    pub saliency: Vec<SaliencyPair>,
}

impl AggCache {
    /// Draw the pool with `plan` and embed it with the frozen networks.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        images: &[AnnotatedImage],
        local: &LocalNet<f32>,
        context: Option<&ContextNet<f32>>,
        plan: &EpochPlan,
        geometry: &PatchGeometry,
        grid_factor: usize,
        seed: u64,
        key: CacheKey,
    ) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("no training images for the aggregation pool".into()))?;
        let (ih, iw) = (first.image.height, first.image.width);
        let grid = (ih / grid_factor, iw / grid_factor);
        let patches = build_epoch(images, plan, geometry, seed, POOL_EPOCH)?;

        let mut slot_of: HashMap<u64, usize> = HashMap::new();
        let mut sources: Vec<&AnnotatedImage> = Vec::new();
        let by_id: HashMap<u64, &AnnotatedImage> = images.iter().map(|im| (im.image.id, im)).collect();
        let mut image_slots = Vec::with_capacity(patches.len());
        for p in &patches {
            let slot = *slot_of.entry(p.image_id).or_insert_with(|| {
                sources.push(by_id[&p.image_id]);
                sources.len() - 1
            });
            image_slots.push(slot);
        }
        let saliency = match context {
            Some(c) => saliency_for(c, &sources)?,
            None => sources
                .iter()
                .map(|_| {
                    let n = grid.0 * grid.1;
                    SaliencyPair::new(grid.0, grid.1, vec![0.0; n], vec![0.0; n])
                })
                .collect::<Result<_>>()?,
        };

        let mut embeddings = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFER_CHUNK) {
            let refs: Vec<&[f32]> = chunk.iter().map(|p| p.pixels.as_slice()).collect();
            embeddings.extend(local.infer(&refs)?.0);
        }
        let indicators = patches
            .iter()
            .map(|p| location_indicator(&p.window, ih, iw, grid.0, grid.1))
            .collect::<Result<_>>()?;
        Ok(Self {
            key,
            grid,
            classes: patches.iter().map(|p| p.class).collect(),
            image_slots,
            indicators,
            embeddings,
            saliency,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Flat `h*w*M` input for pool entry `p`.
    pub fn input(&self, p: usize, selection: MapSelection) -> Result<Vec<f32>> {
        let e = embedding_map(&self.indicators[p], &self.embeddings[p]);
        Ok(assemble(selection, &self.indicators[p], &self.saliency[self.image_slots[p]], &e)?.values)
    }

    /// Payload size in bytes for `patches` entries drawn from `images` images.
    pub fn predicted_bytes(patches: usize, images: usize, grid: (usize, usize)) -> usize {
        let cells = grid.0 * grid.1;
        4 * (patches * (2 + cells + EMBED_DIM) + images * 2 * cells)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (gh, gw) = self.grid;
        let p = self.len();
        let n = self.saliency.len();
        let tensors = vec![
            NamedTensor {
                name: "classes".into(),
                shape: vec![p],
                data: self.classes.iter().map(|c| c.index() as f32).collect(),
            },
            NamedTensor {
                name: "image_slots".into(),
                shape: vec![p],
                data: self.image_slots.iter().map(|&s| s as f32).collect(),
            },
            NamedTensor {
                name: "indicators".into(),
                shape: vec![p, gh, gw],
                data: self.indicators.iter().flat_map(|m| m.values.iter().copied()).collect(),
            },
            NamedTensor {
                name: "embeddings".into(),
                shape: vec![p, EMBED_DIM],
                data: self.embeddings.iter().flatten().copied().collect(),
            },
            NamedTensor {
                name: "saliency".into(),
                shape: vec![n, gh, gw, 2],
                data: self
                    .saliency
                    .iter()
                    .flat_map(|s| s.malignant.iter().zip(&s.benign).flat_map(|(&m, &b)| [m, b]))
                    .collect(),
            },
        ];
        Checkpoint {
            meta: CheckpointMeta {
                kind: CACHE_KIND.into(),
                network: serde_json::to_value(&self.key).expect("key serializes"),
                class_order: PatchClass::ALL.iter().map(|c| c.name().to_string()).collect(),
                uninitialized_norms: Vec::new(),
                training: TrainingMeta::default(),
                tensor_count: tensors.len(),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CACHE_KIND)?;
        let bad = |reason: &str| Error::format("aggregation cache", reason);
        let key: CacheKey = serde_json::from_value(ck.meta.network.clone()).map_err(|e| bad(&e.to_string()))?;
        let find = |name: &str| {
            ck.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| bad(&format!("missing tensor {name}")))
        };
        let (classes, slots, ind, emb, sal) = (
            find("classes")?,
            find("image_slots")?,
            find("indicators")?,
            find("embeddings")?,
            find("saliency")?,
        );
        let p = classes.shape[0];
        let [_, gh, gw] = ind.shape[..] else {
            return Err(bad("indicators must be rank 3"));
        };
        let cells = gh * gw;
        if slots.shape != [p] || ind.shape[0] != p || emb.shape != [p, EMBED_DIM] || sal.shape[1..] != [gh, gw, 2] {
            return Err(bad("tensor shapes disagree"));
        }
        let classes = classes
            .data
            .iter()
            .map(|&c| {
                PatchClass::ALL
                    .get(c as usize)
                    .copied()
                    .ok_or_else(|| bad(&format!("class index {c}")))
            })
            .collect::<Result<_>>()?;
        let n = sal.shape[0];
        let image_slots: Vec<usize> = slots.data.iter().map(|&s| s as usize).collect();
        if image_slots.iter().any(|&s| s >= n) {
            return Err(bad("image slot out of range"));
        }
        let saliency = sal
            .data
            .chunks(cells * 2)
            .map(|c| {
                let (m, b): (Vec<f32>, Vec<f32>) = c.chunks(2).map(|v| (v[0], v[1])).unzip();
                SaliencyPair::new(gh, gw, m, b)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            key,
            grid: (gh, gw),
            classes,
            image_slots,
            indicators: ind
                .data
                .chunks(cells)
                .map(|v| LocationIndicatorMap {
                    height: gh,
                    width: gw,
                    values: v.to_vec(),
                })
                .collect(),
            embeddings: emb.data.chunks(EMBED_DIM).map(|v| v.try_into().expect("embedding width")).collect(),
            saliency,
        })
    }
}

fn read_index(path: &Path) -> Vec<IndexEntry> {
    fs::read(path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default()
}

fn try_load(dir: &Path, entry: &IndexEntry) -> Option<AggCache> {
    let bytes = fs::read(dir.join(&entry.file)).ok()?;
    if sha256_hex(&bytes) != entry.sha256 {
        return None;
    }
    let cache = AggCache::from_checkpoint(&Checkpoint::from_bytes(&bytes).ok()?).ok()?;
    (cache.key == entry.key && cache.len() == entry.patches).then_some(cache)
}

/// Load the pool for `key` from `dir`, or build and store it. Returns the
/// cache and whether it was a hit. Corrupt or stale entries are rebuilt.
#[allow(clippy::too_many_arguments)]
pub fn train_agg_inputs(
    images: &[AnnotatedImage],
    local: &LocalNet<f32>,
    context: Option<&ContextNet<f32>>,
    plan: &EpochPlan,
    geometry: &PatchGeometry,
    grid_factor: usize,
    seed: u64,
    key: CacheKey,
    dir: &Path,
) -> Result<(AggCache, bool)> {
    let index_path = dir.join(CACHE_INDEX);
    let mut index = read_index(&index_path);
    if let Some(entry) = index.iter().find(|e| e.key == key) {
        if let Some(cache) = try_load(dir, entry) {
            return Ok((cache, true));
        }
    }
    let cache = AggCache::build(images, local, context, plan, geometry, grid_factor, seed, key.clone())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = cache.to_checkpoint().to_bytes();
    let file = key.file_name();
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    index.retain(|e| e.key != key && e.file != file);
    index.push(IndexEntry {
        key,
        file,
        patches: cache.len(),
        sha256: sha256_hex(&bytes),
    });
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    Ok((cache, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_size_counts_every_tensor() {
        assert_eq!(AggCache::predicted_bytes(10, 2, (3, 4)), 4 * (10 * (2 + 12 + 32) + 2 * 24));
    }

    #[test]
    fn file_name_depends_on_every_key_field() {
        let base = CacheKey {
            local_hash: "a".into(),
            context_hash: "b".into(),
            pool_hash: "c".into(),
            dataset_hash: "d".into(),
        };
        let mut other = base.clone();
        other.dataset_hash = "e".into();
        assert_ne!(base.file_name(), other.file_name());
    }
}
