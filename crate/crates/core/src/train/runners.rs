use glcn_tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;

use super::{AggCache, EpochRunner, Target};
use crate::agg::AggNet;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::context::ContextNet;
use crate::data::{AnnotatedImage, Label};
use crate::error::{Error, Result};
use crate::eval::{auc, lesion_score, PredictionRecord};
use crate::local::LocalNet;
use crate::nn::{Mode, Module};
use crate::patch::{build_epoch, extract_patch, EpochPlan, PatchClass, PatchGeometry};
use crate::rng::{keys, stream};
use crate::scoring::{context_lesion_score, lesion_windows, saliency_for, EvalSet, INFER_CHUNK};

/// Backward pass, Adam update and running-stat refresh for one batch.
fn apply_step<M: Module<f32>>(net: &mut M, adam: &mut Adam<f32>, g: &mut Graph<f32>, loss: Var) -> Result<f64> {
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    g.backward(loss)?;
    net.collect_grads(g);
    {
        let mut params = net.params_mut();
        adam.step(&mut params)?;
    }
    net.absorb_batch_stats(g);
    Ok(value)
}

fn class_weights(plan: &EpochPlan) -> Vec<f32> {
    plan.weights().iter().map(|&w| w as f32).collect()
}

struct ValLesion {
    record: PredictionRecord,
    patches: Vec<Vec<f32>>,
}

/// Trains f_loc on epoch-plan patch streams.
pub struct LocalRunner<'a> {
    pub net: LocalNet<f32>,
    adam: Adam<f32>,
    train: &'a [AnnotatedImage],
    val: Vec<ValLesion>,
    plan: EpochPlan,
    geometry: PatchGeometry,
    batch_size: usize,
    seed: u64,
}

impl<'a> LocalRunner<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: LocalNet<f32>,
        learning_rate: f64,
        train: &'a [AnnotatedImage],
        val: &[AnnotatedImage],
        plan: EpochPlan,
        geometry: PatchGeometry,
        batch_size: usize,
        val_patches: usize,
        seed: u64,
        eval_seed: u64,
    ) -> Result<Self> {
        let mut lesions = Vec::new();
        for image in val {
            for (k, lesion) in image.lesions.iter().enumerate() {
                let windows = lesion_windows(image, k, val_patches, &geometry, eval_seed)?;
                lesions.push(ValLesion {
                    record: PredictionRecord {
                        lesion_id: lesion.id,
                        image_id: image.image.id,
                        label: lesion.label.as_u8(),
                        score: 0.0,
                    },
                    patches: windows
                        .iter()
                        .map(|w| extract_patch(&image.image, w, geometry.patch_size))
                        .collect(),
                });
            }
        }
        Ok(Self {
            net,
            adam: Adam::new(AdamConfig::with_lr(learning_rate))?,
            train,
            val: lesions,
            plan,
            geometry,
            batch_size,
            seed,
        })
    }

    /// Lesion records scored by f_loc's own head.
    pub fn val_records(&self) -> Result<Vec<PredictionRecord>> {
        self.val
            .iter()
            .map(|l| {
                let mut logits = Vec::new();
                for chunk in l.patches.chunks(INFER_CHUNK) {
                    let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
                    let (_, z) = self.net.infer(&refs)?;
                    logits.extend(z.iter().map(|z| std::array::from_fn(|k| z[k] as f64)));
                }
                Ok(PredictionRecord {
                    score: lesion_score(&logits)?,
                    ..l.record
                })
            })
            .collect()
    }
}

impl EpochRunner for LocalRunner<'_> {
    fn target(&self) -> Target {
        Target::Local
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let patches = build_epoch(self.train, &self.plan, &self.geometry, self.seed, epoch as u64)?;
        let weights = class_weights(&self.plan);
        let s = self.geometry.patch_size;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in patches.chunks(self.batch_size) {
            let data: Vec<f32> = batch.iter().flat_map(|p| p.pixels.iter().copied()).collect();
            let labels: Vec<usize> = batch.iter().map(|p| p.class.index()).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![batch.len(), s, s, 1], data)?);
            let out = self.net.forward(&mut g, x, Mode::Train)?;
            let loss = g.weighted_cross_entropy(out.logits, &labels, &weights)?;
            let v = apply_step(&mut self.net, &mut self.adam, &mut g, loss)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            total += v * batch.len() as f64;
            count += batch.len();
        }
        Ok(total / count as f64)
    }

    fn validate(&mut self) -> Result<(f64, Option<f64>)> {
        Ok((auc(&self.val_records()?)?, None))
    }

    fn checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        self.net.to_checkpoint(meta)
    }
}

/// Trains the context net on image-level labels.
pub struct ContextRunner<'a> {
    pub net: ContextNet<f32>,
    adam: Adam<f32>,
    train: &'a [AnnotatedImage],
    val: &'a [AnnotatedImage],
    batch_size: usize,
    images_per_epoch: Option<usize>,
    seed: u64,
}

impl<'a> ContextRunner<'a> {
    pub fn new(
        net: ContextNet<f32>,
        learning_rate: f64,
        train: &'a [AnnotatedImage],
        val: &'a [AnnotatedImage],
        batch_size: usize,
        images_per_epoch: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            net,
            adam: Adam::new(AdamConfig::with_lr(learning_rate))?,
            train,
            val,
            batch_size,
            images_per_epoch,
            seed,
        })
    }

    /// Context-only lesion records and image-level (score, has-malignant) pairs.
    pub fn val_records(&self) -> Result<(Vec<PredictionRecord>, Vec<PredictionRecord>)> {
        let images: Vec<&AnnotatedImage> = self.val.iter().collect();
        let maps = saliency_for(&self.net, &images)?;
        let mut lesions = Vec::new();
        let mut image_level = Vec::new();
        for (image, s) in images.iter().zip(&maps) {
            let (pm, _) = crate::context::image_scores(s, self.net.config.pool_fraction)?;
            image_level.push(PredictionRecord {
                lesion_id: image.image.id,
                image_id: image.image.id,
                label: u8::from(image.has_label(Label::Malignant)),
                score: pm,
            });
            for (k, l) in image.lesions.iter().enumerate() {
                lesions.push(PredictionRecord {
                    lesion_id: l.id,
                    image_id: image.image.id,
                    label: l.label.as_u8(),
                    score: context_lesion_score(s, image, k),
                });
            }
        }
        Ok((lesions, image_level))
    }
}

impl EpochRunner for ContextRunner<'_> {
    fn target(&self) -> Target {
        Target::Context
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(self.seed, &[keys::BATCH_ORDER, epoch as u64]));
        if let Some(n) = self.images_per_epoch {
            order.truncate(n.max(1));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(self.batch_size) {
            let first = &self.train[batch[0]].image;
            let (h, w) = (first.height, first.width);
            let mut data = Vec::with_capacity(batch.len() * h * w);
            let mut targets = Vec::with_capacity(batch.len() * 2);
            for &i in batch {
                let im = &self.train[i];
                data.extend(im.image.to_f32());
                targets.push(f32::from(u8::from(im.has_label(Label::Malignant))));
                targets.push(f32::from(u8::from(im.has_label(Label::Benign))));
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![batch.len(), h, w, 1], data)?);
            let s = self.net.saliency_forward(&mut g, x, Mode::Train)?;
            let scores = self.net.scores_forward(&mut g, s)?;
            let loss = g.binary_cross_entropy(scores, &targets)?;
            let v = apply_step(&mut self.net, &mut self.adam, &mut g, loss)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            total += v * batch.len() as f64;
            count += batch.len();
        }
        Ok(total / count as f64)
    }

    fn validate(&mut self) -> Result<(f64, Option<f64>)> {
        let (lesions, images) = self.val_records()?;
        Ok((auc(&lesions)?, auc(&images).ok()))
    }

    fn checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        self.net.to_checkpoint(meta)
    }
}

/// Trains f_agg on cached maps; upstream networks are not touched.
pub struct AggRunner<'a> {
    pub net: AggNet<f32>,
    adam: Adam<f32>,
    cache: &'a AggCache,
    val: &'a EvalSet,
    plan: EpochPlan,
    batch_size: usize,
    seed: u64,
    by_class: [Vec<usize>; 4],
}

impl<'a> AggRunner<'a> {
    pub fn new(
        net: AggNet<f32>,
        learning_rate: f64,
        cache: &'a AggCache,
        val: &'a EvalSet,
        plan: EpochPlan,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut by_class: [Vec<usize>; 4] = Default::default();
        for (i, c) in cache.classes.iter().enumerate() {
            by_class[c.index()].push(i);
        }
        for c in PatchClass::ALL {
            if by_class[c.index()].is_empty() {
                return Err(Error::SamplingExhausted(format!(
                    "aggregation cache holds no {} patches",
                    c.name()
                )));
            }
        }
        Ok(Self {
            net,
            adam: Adam::new(AdamConfig::with_lr(learning_rate))?,
            cache,
            val,
            plan,
            batch_size,
            seed,
            by_class,
        })
    }

    /// Pool indices for one epoch: each class's planned count, drawn without
    /// replacement while the pool lasts.
    fn epoch_indices(&self, epoch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.plan.total());
        for c in PatchClass::ALL {
            let pool = &self.by_class[c.index()];
            let want = self.plan.counts[c.index()];
            let mut rng = stream(self.seed, &[keys::AGG_POOL, epoch as u64, c.index() as u64]);
            let mut left = want;
            while left > 0 {
                let mut order = pool.clone();
                order.shuffle(&mut rng);
                let take = left.min(order.len());
                out.extend_from_slice(&order[..take]);
                left -= take;
            }
        }
        out.shuffle(&mut stream(self.seed, &[keys::EPOCH_SHUFFLE, epoch as u64]));
        out
    }
}

impl EpochRunner for AggRunner<'_> {
    fn target(&self) -> Target {
        Target::Agg
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let sel = self.net.config.selection;
        let (gh, gw) = self.cache.grid;
        let m = sel.channels();
        let weights = class_weights(&self.plan);
        let indices = self.epoch_indices(epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in indices.chunks(self.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * gh * gw * m);
            for &p in batch {
                data.extend(self.cache.input(p, sel)?);
            }
            let labels: Vec<usize> = batch.iter().map(|&p| self.cache.classes[p].index()).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![batch.len(), gh, gw, m], data)?);
            let logits = self.net.forward(&mut g, x, Mode::Train)?;
            let loss = g.weighted_cross_entropy(logits, &labels, &weights)?;
            let v = apply_step(&mut self.net, &mut self.adam, &mut g, loss)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            total += v * batch.len() as f64;
            count += batch.len();
        }
        Ok(total / count as f64)
    }

    fn validate(&mut self) -> Result<(f64, Option<f64>)> {
        Ok((auc(&self.val.score(&self.net)?)?, None))
    }

    fn checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        self.net.to_checkpoint(meta)
    }
}
