//! Dataset ingestion, preprocessing into model inputs, and split construction.

use std::path::Path;

use m3fas_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{SplitConfig, SplitMode};
use super::{HarnessError, Result};
use crate::channel::{DatasetManifest, FaceImage, Label, SyntheticSample};
use crate::echo::{preprocess, PipelineConfig, Spectrogram};
use crate::signal::read_wav;

/// One preprocessed sample: a `3×s×s` image and a `1×F×T` spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub device: usize,
    pub image: Vec<f64>,
    pub spectrogram: Vec<f64>,
}

/// Preprocessed examples plus the samples whose recordings could not be processed.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub dropped: Vec<(String, String)>,
}

pub fn image_input(img: &FaceImage, size: usize) -> Result<Vec<f64>> {
    if img.width != img.height || !img.width.is_multiple_of(size) {
        return Err(HarnessError::InvalidInput(format!(
            "image is {}x{}, expected a square multiple of {size}",
            img.width, img.height
        )));
    }
    Ok(img.to_chw(size, size))
}

pub fn spectrogram_input(s: &Spectrogram) -> Vec<f64> {
    s.magnitudes.clone()
}

/// Preprocess in-memory samples; `ids` and `devices` label them.
pub fn examples_from_samples(
    samples: &[(String, usize, SyntheticSample)],
    image_size: usize,
    pipeline: &PipelineConfig,
) -> Result<Dataset> {
    let mut out = Dataset::default();
    for (id, device, s) in samples {
        match preprocess(&s.recording, pipeline) {
            Ok(spec) => out.examples.push(Example {
                id: id.clone(),
                label: s.label,
                device: *device,
                image: image_input(&s.image, image_size)?,
                spectrogram: spectrogram_input(&spec),
            }),
            Err(e) => out.dropped.push((id.clone(), e.to_string())),
        }
    }
    Ok(out)
}

/// Load every manifest row from disk and run the echo pipeline on its recording.
pub fn load_dataset(root: &Path, image_size: usize, pipeline: &PipelineConfig) -> Result<Dataset> {
    let manifest = DatasetManifest::load(root)?;
    let mut out = Dataset::default();
    for row in &manifest.rows {
        let img = FaceImage::load_png(&root.join(&row.image_path))?;
        let rec = read_wav(&root.join(&row.wav_path))?;
        match preprocess(&rec, pipeline) {
            Ok(spec) => out.examples.push(Example {
                id: row.id.clone(),
                label: row.label,
                device: row.device,
                image: image_input(&img, image_size)?,
                spectrogram: spectrogram_input(&spec),
            }),
            Err(e) => out.dropped.push((row.id.clone(), e.to_string())),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" | "validation" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(HarnessError::InvalidInput(format!(
                "unknown split `{other}`"
            ))),
        }
    }
}

/// Shuffle `idx` per label and cut it by `fractions` (which sum to 1).
fn stratified(
    examples: &[Example],
    idx: &[usize],
    fractions: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); fractions.len()];
    for label in [Label::Bonafide, Label::Attack] {
        let mut group: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| examples[i].label == label)
            .collect();
        group.shuffle(rng);
        let n = group.len();
        let mut start = 0;
        let mut acc = 0.0;
        for (k, f) in fractions.iter().enumerate() {
            acc += f;
            let end = if k + 1 == fractions.len() {
                n
            } else {
                ((acc * n as f64).round() as usize).min(n)
            };
            parts[k].extend_from_slice(&group[start..end.max(start)]);
            start = end.max(start);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

pub fn make_splits(examples: &[Example], cfg: &SplitConfig, seed: u64) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
    let all: Vec<usize> = (0..examples.len()).collect();
    let [tr, va, te] = cfg.ratios;
    let splits = match &cfg.mode {
        SplitMode::Random => {
            let mut p = stratified(examples, &all, &[tr, va, te], &mut rng).into_iter();
            Splits {
                train: p.next().unwrap_or_default(),
                val: p.next().unwrap_or_default(),
                test: p.next().unwrap_or_default(),
            }
        }
        SplitMode::CrossDevice { test_devices } => {
            let (test, rest): (Vec<usize>, Vec<usize>) = all
                .iter()
                .partition(|&&i| test_devices.contains(&examples[i].device));
            let s = tr + va;
            if s <= 0.0 {
                return Err(HarnessError::Config(
                    "train and validation ratios are both zero".into(),
                ));
            }
            let mut p = stratified(examples, &rest, &[tr / s, va / s], &mut rng).into_iter();
            Splits {
                train: p.next().unwrap_or_default(),
                val: p.next().unwrap_or_default(),
                test,
            }
        }
    };
    for (name, part) in [("train", &splits.train), ("validation", &splits.val)] {
        if part.is_empty() {
            return Err(HarnessError::EmptySplit(name.into()));
        }
    }
    Ok(splits)
}

/// Stack the selected examples into `[N,3,s,s]` and `[N,1,F,T]` tensors plus 0/1 targets.
pub fn batch(
    examples: &[Example],
    idx: &[usize],
    image_shape: [usize; 3],
    spec_shape: [usize; 3],
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let n = idx.len();
    let mut img = Vec::with_capacity(n * image_shape.iter().product::<usize>());
    let mut spec = Vec::with_capacity(n * spec_shape.iter().product::<usize>());
    let mut labels = Vec::with_capacity(n);
    for &i in idx {
        let e = &examples[i];
        img.extend_from_slice(&e.image);
        spec.extend_from_slice(&e.spectrogram);
        labels.push(e.label.as_target());
    }
    let shape = |s: [usize; 3]| vec![n, s[0], s[1], s[2]];
    let img = Tensor::new(shape(image_shape), img)
        .map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
    let spec = Tensor::new(shape(spec_shape), spec)
        .map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
    Ok((img, spec, labels))
}
