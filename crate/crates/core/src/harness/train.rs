//! Training loop, evaluation report and single-sample inference.

use m3fas_numerics::{Adam, AdamConfig, ParamId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, ThresholdMode, TrainingMode};
use super::data::{batch, image_input, Example, Splits};
use super::{HarnessError, Result};
use crate::channel::FaceImage;
use crate::echo::{preprocess, PipelineConfig};
use crate::metrics::{confusion_at, eer_point, hter, summarize, HeadMetrics, ScoreSet};
use crate::model::{total_loss, HeadScores, Modality, Model, Phase, Route};
use crate::signal::Waveform;

const EVAL_BATCH: usize = 256;

/// Keeps the epoch with the lowest validation HTER; the earliest wins ties.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns whether `epoch` is the new best.
    pub fn offer(&mut self, epoch: usize, hter: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((_, b)) => hter < b,
        };
        if better {
            self.best = Some((epoch, hter));
        }
        better
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hter: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_hter: f64,
    pub history: Vec<EpochLog>,
}

impl TrainingMode {
    fn route(self) -> Route {
        match self {
            TrainingMode::Joint => Route::Fusion,
            TrainingMode::SeparateVision => Route::Vision,
            TrainingMode::SeparateAcoustic => Route::Acoustic,
        }
    }
}

fn input_shapes(model: &Model) -> ([usize; 3], [usize; 3]) {
    (
        model.config.vision.input_shape,
        model.config.acoustic.input_shape,
    )
}

/// Sigmoid scores of every head the route produces, in eval phase.
pub fn score_examples(
    model: &Model,
    examples: &[Example],
    idx: &[usize],
    route: Route,
) -> Result<HeadScores> {
    let (is, ss) = input_shapes(model);
    let mut all = HeadScores::default();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (img, spec, _) = batch(examples, chunk, is, ss)?;
        let s = model.predict(
            route.needs(Modality::Vision).then_some(&img),
            route.needs(Modality::Acoustic).then_some(&spec),
            route,
        )?;
        for (dst, src) in [
            (&mut all.vision, s.vision),
            (&mut all.acoustic, s.acoustic),
            (&mut all.fusion, s.fusion),
        ] {
            if let Some(src) = src {
                dst.get_or_insert_with(Vec::new).extend(src);
            }
        }
    }
    Ok(all)
}

fn labels_of(examples: &[Example], idx: &[usize]) -> Vec<u8> {
    idx.iter()
        .map(|&i| examples[i].label.as_target() as u8)
        .collect()
}

/// HTER of the head a training mode selects by.
fn validation_hter(
    model: &Model,
    examples: &[Example],
    idx: &[usize],
    mode: TrainingMode,
    threshold: ThresholdMode,
) -> Result<f64> {
    let route = mode.route();
    let s = score_examples(model, examples, idx, route)?;
    let scores = match route {
        Route::Fusion => s.fusion,
        Route::Vision => s.vision,
        Route::Acoustic => s.acoustic,
    }
    .expect("route produces its own head");
    let set = ScoreSet::new(scores, labels_of(examples, idx))?;
    let t = match threshold {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::ValidationEer => eer_point(&set)?.threshold,
    };
    Ok(hter(&confusion_at(&set, t))?)
}

/// Train from scratch on `splits.train`, selecting the best epoch on `splits.val`.
pub fn train(examples: &[Example], splits: &Splits, config: &RunConfig) -> Result<TrainOutcome> {
    train_with_observer(examples, splits, config, |_| {})
}

pub fn train_with_observer(
    examples: &[Example],
    splits: &Splits,
    config: &RunConfig,
    mut observe: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(HarnessError::EmptySplit("train".into()));
    }
    if splits.val.is_empty() {
        return Err(HarnessError::EmptySplit("validation".into()));
    }
    let tc = &config.train;
    let mut model = Model::new(config.model.clone())?;
    let route = tc.mode.route();
    let ids: Vec<ParamId> = model.route_params(route);
    let mut adam = Adam::new(
        AdamConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let (is, ss) = input_shapes(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order = splits.train.clone();
    let mut tracker = BestTracker::default();
    let mut best_model = model.clone();
    let mut history = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let (img, spec, labels) = batch(examples, chunk, is, ss)?;
            let loss = step(
                &mut model, &mut adam, &ids, img, spec, &labels, tc.mode, tc.alpha,
            )
            .map_err(|e| match e {
                HarnessError::NonFiniteLoss { detail, .. } => HarnessError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail,
                },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val_hter = validation_hter(&model, examples, &splits.val, tc.mode, tc.threshold)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_hter,
        };
        observe(&log);
        history.push(log);
        if tracker.offer(epoch, val_hter) {
            best_model = model.clone();
        }
    }
    let (best_epoch, best_val_hter) = tracker.best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        best_val_hter,
        history,
    })
}

/// One optimizer step; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn step(
    model: &mut Model,
    adam: &mut Adam,
    ids: &[ParamId],
    img: Tensor,
    spec: Tensor,
    labels: &[f64],
    mode: TrainingMode,
    alpha: f64,
) -> Result<f64> {
    let route = mode.route();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let i = route.needs(Modality::Vision).then(|| tape.constant(img));
    let s = route.needs(Modality::Acoustic).then(|| tape.constant(spec));
    let out = model.forward(&mut tape, &p, i, s, route, Phase::Train)?;
    let (loss, detail) = match mode {
        TrainingMode::Joint => {
            let t = total_loss(&mut tape, &out, labels, alpha)?;
            let v = |x| tape.value(x).data()[0];
            let detail = format!(
                "L_f={} L_v={} L_a={}",
                v(t.fusion),
                v(t.vision),
                v(t.acoustic)
            );
            (t.total, detail)
        }
        TrainingMode::SeparateVision | TrainingMode::SeparateAcoustic => {
            let logit = out.logit_v.or(out.logit_a).expect("single-head route");
            let l = tape.bce_with_logits(logit, labels)?;
            (l, format!("{} head loss", route))
        }
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(HarnessError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            detail: format!("loss {value} ({detail})"),
        });
    }
    let grads = tape.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&p, &grads);
    adam.step(&mut model.params, ids)?;
    model.apply_bn_updates(&out.bn_updates);
    Ok(value)
}

/// Per-head metrics on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub vision: HeadMetrics,
    pub acoustic: HeadMetrics,
    pub fusion: HeadMetrics,
}

impl EvalReport {
    /// `metric\thead\tvalue` rows: four metrics for each of the three heads.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\thead\tvalue\n");
        for (head, m) in [
            ("vision", &self.vision),
            ("acoustic", &self.acoustic),
            ("fusion", &self.fusion),
        ] {
            for (name, v) in [
                ("auc", m.auc),
                ("acc", m.acc),
                ("hter", m.hter),
                ("eer", m.eer),
            ] {
                out.push_str(&format!("{name}\t{head}\t{v}\n"));
            }
        }
        out
    }
}

/// Decision thresholds for the three heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadThresholds {
    pub vision: f64,
    pub acoustic: f64,
    pub fusion: f64,
}

impl HeadThresholds {
    pub fn uniform(t: f64) -> Self {
        HeadThresholds {
            vision: t,
            acoustic: t,
            fusion: t,
        }
    }
}

fn head_sets(model: &Model, examples: &[Example], idx: &[usize]) -> Result<[ScoreSet; 3]> {
    let s = score_examples(model, examples, idx, Route::Fusion)?;
    let labels = labels_of(examples, idx);
    let set = |scores: Option<Vec<f64>>| {
        ScoreSet::new(
            scores.expect("fusion route scores every head"),
            labels.clone(),
        )
    };
    Ok([set(s.vision)?, set(s.acoustic)?, set(s.fusion)?])
}

/// Resolve a threshold mode; `ValidationEer` takes each head's EER threshold on `splits.val`.
pub fn select_thresholds(
    model: &Model,
    examples: &[Example],
    splits: &Splits,
    mode: ThresholdMode,
) -> Result<HeadThresholds> {
    match mode {
        ThresholdMode::Fixed(t) => Ok(HeadThresholds::uniform(t)),
        ThresholdMode::ValidationEer => {
            if splits.val.is_empty() {
                return Err(HarnessError::EmptySplit("validation".into()));
            }
            let [v, a, f] = head_sets(model, examples, &splits.val)?;
            Ok(HeadThresholds {
                vision: eer_point(&v)?.threshold,
                acoustic: eer_point(&a)?.threshold,
                fusion: eer_point(&f)?.threshold,
            })
        }
    }
}

pub fn evaluate(
    model: &Model,
    examples: &[Example],
    idx: &[usize],
    threshold: f64,
) -> Result<EvalReport> {
    evaluate_at(model, examples, idx, &HeadThresholds::uniform(threshold))
}

pub fn evaluate_at(
    model: &Model,
    examples: &[Example],
    idx: &[usize],
    thresholds: &HeadThresholds,
) -> Result<EvalReport> {
    if idx.is_empty() {
        return Err(HarnessError::EmptySplit("evaluation".into()));
    }
    let [v, a, f] = head_sets(model, examples, idx)?;
    Ok(EvalReport {
        vision: summarize(&v, thresholds.vision)?,
        acoustic: summarize(&a, thresholds.acoustic)?,
        fusion: summarize(&f, thresholds.fusion)?,
    })
}

/// Score one presentation. The recording goes through the echo pipeline first;
/// a pipeline failure is reported so the caller can fall back to the vision route.
pub fn infer(
    model: &Model,
    pipeline: &PipelineConfig,
    image: Option<&FaceImage>,
    recording: Option<&Waveform>,
    route: Route,
) -> Result<HeadScores> {
    for (m, present) in [
        (Modality::Vision, image.is_some()),
        (Modality::Acoustic, recording.is_some()),
    ] {
        if route.needs(m) && !present {
            return Err(HarnessError::MissingModality { route, modality: m });
        }
    }
    let img = match image.filter(|_| route.needs(Modality::Vision)) {
        Some(im) => {
            let shape = model.config.vision.input_shape;
            let data = image_input(im, shape[1])?;
            Some(
                Tensor::new(vec![1, shape[0], shape[1], shape[2]], data)
                    .map_err(|e| HarnessError::InvalidInput(e.to_string()))?,
            )
        }
        None => None,
    };
    let spec = match recording.filter(|_| route.needs(Modality::Acoustic)) {
        Some(rec) => {
            let s = preprocess(rec, pipeline).map_err(HarnessError::Preprocess)?;
            let shape = model.config.acoustic.input_shape;
            Some(
                Tensor::new(vec![1, shape[0], shape[1], shape[2]], s.magnitudes)
                    .map_err(|e| HarnessError::InvalidInput(e.to_string()))?,
            )
        }
        None => None,
    };
    Ok(model.predict(img.as_ref(), spec.as_ref(), route)?)
}
