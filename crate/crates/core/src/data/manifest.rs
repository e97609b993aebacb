//! Dataset persistence: JSON manifest plus one raster per image.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    generate_image, read_raster, write_raster, AnnotatedImage, DataConfig, Dataset, Label, LesionAnnotation,
    LesionMask, Morphology, Side, Split, SyntheticImage,
};
use crate::error::{Error, Result};
use crate::rng::{keys, stream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "glcn-dataset/1";

/// Full-image row-major run lengths, starting with a run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(mask: &LesionMask) -> Self {
        let mut counts = Vec::new();
        let mut pos = 0usize;
        let mut run_start: Option<usize> = None;
        let mut prev = 0usize;
        for (r, c) in mask.pixels() {
            let i = r * mask.image_width + c;
            match run_start {
                Some(_) if i == prev + 1 => {}
                Some(s) => {
                    counts.push((prev + 1 - s) as u32);
                    counts.push((i - prev - 1) as u32);
                    run_start = Some(i);
                }
                None => {
                    counts.push(i as u32);
                    run_start = Some(i);
                }
            }
            prev = i;
            pos = i + 1;
        }
        if let Some(s) = run_start {
            counts.push((prev + 1 - s) as u32);
        }
        let total = mask.image_height * mask.image_width;
        if pos < total || counts.is_empty() {
            counts.push((total - pos) as u32);
        }
        Self {
            height: mask.image_height,
            width: mask.image_width,
            counts,
        }
    }

    pub fn decode(&self) -> Result<LesionMask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::format(
                "mask",
                format!("runs cover {total} pixels, image has {}", self.height * self.width),
            ));
        }
        let mut pixels = Vec::new();
        let mut pos = 0usize;
        for (k, &n) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                pixels.extend((pos..pos + n as usize).map(|i| (i / self.width, i % self.width)));
            }
            pos += n as usize;
        }
        LesionMask::from_pixels(self.height, self.width, &pixels).ok_or_else(|| Error::format("mask", "empty mask"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionEntry {
    pub lesion_id: u64,
    pub label: Label,
    pub morphology: Morphology,
    pub context_level: f64,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u64,
    pub patient_id: u64,
    pub side: Side,
    pub file: String,
    pub biopsied: bool,
    pub lesions: Vec<LesionEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub patients: usize,
    pub images: usize,
    pub biopsied_images: usize,
    pub lesions: usize,
    pub malignant: usize,
    pub benign: usize,
    pub ambiguous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: DataConfig,
    pub counts: SplitTable<SplitCounts>,
    pub splits: SplitTable<Vec<ImageEntry>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitTable<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

impl<T> SplitTable<T> {
    pub fn get(&self, split: Split) -> &T {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut T {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Shuffle patient ids and cut 80/10/10; each list is returned sorted.
pub fn split_patients(patients: usize, seed: u64) -> [Vec<u64>; 3] {
    let mut ids: Vec<u64> = (0..patients as u64).collect();
    ids.shuffle(&mut stream(seed, &[keys::SPLIT]));
    let n_train = patients * 8 / 10;
    let n_val = patients / 10;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    [train, val, test]
}

fn image_file(id: u64) -> String {
    format!("images/{id:06}.gimg")
}

fn entry_of(img: &AnnotatedImage) -> ImageEntry {
    ImageEntry {
        image_id: img.image.id,
        patient_id: img.image.patient,
        side: img.image.side,
        file: image_file(img.image.id),
        biopsied: img.image.biopsied,
        lesions: img
            .lesions
            .iter()
            .map(|l| LesionEntry {
                lesion_id: l.id,
                label: l.label,
                morphology: l.morphology,
                context_level: l.context_level,
                mask: RleMask::encode(&l.mask),
            })
            .collect(),
    }
}

fn count(images: &[ImageEntry]) -> SplitCounts {
    let mut c = SplitCounts {
        images: images.len(),
        ..Default::default()
    };
    let mut patients: Vec<u64> = images.iter().map(|i| i.patient_id).collect();
    patients.dedup();
    c.patients = patients.len();
    for im in images {
        c.biopsied_images += usize::from(im.biopsied);
        for l in &im.lesions {
            c.lesions += 1;
            match l.label {
                Label::Malignant => c.malignant += 1,
                Label::Benign => c.benign += 1,
            }
            c.ambiguous += usize::from(l.morphology == Morphology::Ambiguous);
        }
    }
    c
}

/// Generate every image of every patient in split order.
fn generate_all(config: &DataConfig, seed: u64, mut sink: impl FnMut(Split, AnnotatedImage) -> Result<()>) -> Result<()> {
    let splits = split_patients(config.patients, seed);
    for (split, patients) in Split::ALL.into_iter().zip(&splits) {
        for &p in patients {
            for view in 0..config.images_per_patient as u64 {
                let id = p * config.images_per_patient as u64 + view;
                let img = generate_image(config, id, p, &mut stream(seed, &[keys::IMAGE, id]))?;
                sink(split, img)?;
            }
        }
    }
    Ok(())
}

/// Generate the dataset in memory only.
pub fn generate_in_memory(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut ds = Dataset {
        config: config.clone(),
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    generate_all(config, seed, |split, img| {
        match split {
            Split::Train => ds.train.push(img),
            Split::Val => ds.val.push(img),
            Split::Test => ds.test.push(img),
        }
        Ok(())
    })?;
    Ok(ds)
}

fn is_empty_dir(path: &Path) -> Result<bool> {
    match std::fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Generate the dataset and write it to `out`. Output goes to a staging
/// directory first and is moved into place only when complete.
pub fn generate_dataset(config: &DataConfig, seed: u64, out: &Path, overwrite: bool) -> Result<Manifest> {
    config.validate()?;
    if !overwrite && !is_empty_dir(out)? {
        return Err(Error::InvalidInput(format!(
            "output directory {} is not empty (pass overwrite to replace it)",
            out.display()
        )));
    }
    let staging = PathBuf::from(format!("{}.partial", out.display()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = write_staged(config, seed, &staging);
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    std::fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
    Ok(manifest)
}

fn write_staged(config: &DataConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut splits: SplitTable<Vec<ImageEntry>> = SplitTable::default();
    generate_all(config, seed, |split, img| {
        let path = dir.join(image_file(img.image.id));
        write_raster(&path, img.image.height, img.image.width, &img.image.pixels)?;
        splits.get_mut(split).push(entry_of(&img));
        Ok(())
    })?;
    let counts = SplitTable {
        train: count(&splits.train),
        val: count(&splits.val),
        test: count(&splits.test),
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed,
        config: config.clone(),
        counts,
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::format("manifest", format!("unknown format {}", m.format)));
    }
    Ok(m)
}

/// Read the manifest and every raster under `dir`.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.config;
    let load = |entries: &[ImageEntry]| -> Result<Vec<AnnotatedImage>> {
        entries
            .iter()
            .map(|e| {
                let (h, w, pixels) = read_raster(&dir.join(&e.file))?;
                if (h, w) != (cfg.height, cfg.width) {
                    return Err(Error::format(
                        format!("image {}", e.image_id),
                        format!("{h}x{w} does not match the configured {}x{}", cfg.height, cfg.width),
                    ));
                }
                let lesions = e
                    .lesions
                    .iter()
                    .map(|l| {
                        Ok(LesionAnnotation {
                            id: l.lesion_id,
                            mask: l.mask.decode()?,
                            label: l.label,
                            morphology: l.morphology,
                            context_level: l.context_level,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AnnotatedImage {
                    image: SyntheticImage {
                        id: e.image_id,
                        patient: e.patient_id,
                        side: e.side,
                        height: h,
                        width: w,
                        pixels,
                        biopsied: e.biopsied,
                    },
                    lesions,
                })
            })
            .collect()
    };
    let ds = Dataset {
        config: cfg.clone(),
        seed: manifest.seed,
        train: load(&manifest.splits.train)?,
        val: load(&manifest.splits.val)?,
        test: load(&manifest.splits.test)?,
    };
    Ok((manifest, ds))
}
