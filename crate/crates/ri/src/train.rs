//! The training loop: shuffled whole-series batches, rotation augmentation,
//! Adam on the weighted objective, periodic validation and checkpoint
//! selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ri_core::metrics::{contingency, ChanceModel};
use ri_core::model::{Example, RiModel, RiModelConfig, Variant};
use ri_core::nn::{Adam, InitScheme, RegPolicy};
use ri_core::synth::{Normalizer, TcSeries};

use crate::checkpoint::Checkpoint;
use crate::data::{model_input, Prepared};
use crate::evaluate::{predict_validation, score_predictions, Scores};
use crate::{Error, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub objective: f64,
    pub ce: f64,
    pub l2: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug, Clone)]
pub struct Best {
    pub epoch: usize,
    pub scores: Scores,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub model: RiModel,
    pub final_checkpoint: Checkpoint,
    /// Highest validation HSS seen (textbook chance term; see the README).
    pub best: Option<Best>,
}

/// Ranking key for checkpoint selection; undefined scores never win.
fn selection_key(s: &Scores) -> Option<f64> {
    s.hss_textbook
}

fn validation_epoch(cfg: &RunConfig, epoch: usize) -> bool {
    epoch.is_multiple_of(cfg.validation_interval) || epoch == cfg.epochs
}

pub fn train(
    cfg: &RunConfig,
    data: &Prepared,
    mut progress: impl FnMut(&EpochRecord, Option<&Scores>),
) -> Result<TrainOutcome, Error> {
    let mut model = RiModel::new(cfg.model_config(), InitScheme::UniformFanIn, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let reg = RegPolicy { lambda: cfg.l2 };
    let fingerprint = data.split.fingerprint();
    // stream 1 drives batch order and augmentation
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut log = TrainLog::default();
    let mut best: Option<Best> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut obj, mut ce, mut l2, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = chunk
                .iter()
                .map(|&i| {
                    let rng = cfg.augment.then_some(&mut rng);
                    model_input(&data.train[i].source, &data.normalizer, data.frame_size, rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .zip(&inputs)
                .map(|(&i, frames)| Example {
                    frames,
                    labels: &data.train[i].labels,
                })
                .collect();
            step += 1;
            let stats = model.train_step(&mut adam, &batch, reg)?;
            if !(stats.objective.is_finite() && stats.ce.is_finite() && stats.l2.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    objective: stats.objective,
                    ce: stats.ce,
                    l2: stats.l2,
                });
            }
            obj += stats.objective;
            ce += stats.ce;
            l2 += stats.l2;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            objective: obj / k,
            ce: ce / k,
            l2: l2 / k,
            seconds: started.elapsed().as_secs_f64(),
        };

        let mut scores = None;
        if validation_epoch(cfg, epoch) && !data.validation.is_empty() {
            let preds = predict_validation(&mut model, data)?;
            let s = score_predictions(&preds, data.base_rate, cfg.threshold, cfg.reference_bs)?;
            let improves = match (selection_key(&s), best.as_ref().and_then(|b| selection_key(&b.scores))) {
                (Some(new), Some(old)) => new > old,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improves {
                best = Some(Best {
                    epoch,
                    scores: s.clone(),
                    checkpoint: Checkpoint::capture(&model, Some(&adam), &data.normalizer, epoch, fingerprint),
                });
            }
            log.evals.push(EvalRecord { epoch, scores: s.clone() });
            scores = Some(s);
        }
        progress(&record, scores.as_ref());
        log.epochs.push(record);
    }
    let final_checkpoint = Checkpoint::capture(&model, Some(&adam), &data.normalizer, cfg.epochs, fingerprint);
    Ok(TrainOutcome {
        log,
        model,
        final_checkpoint,
        best,
    })
}

/// Tiny-overfit mode: the miniature model fit to a handful of series with
/// full-batch Adam until its eval-mode predictions on those series are perfect.
pub const OVERFIT_SERIES: usize = 8;
pub const OVERFIT_LEARNING_RATE: f64 = 1e-2;
pub const OVERFIT_EPOCHS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitEpoch {
    pub epoch: usize,
    pub objective: f64,
    /// Eval-mode scores on the training series.
    pub hss: Option<f64>,
    pub hss_textbook: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub epochs: Vec<OverfitEpoch>,
    /// First epoch with a perfect table; training stops there.
    pub reached: Option<usize>,
    pub positives: usize,
    pub labelled: usize,
}

pub fn overfit(
    series: &[TcSeries],
    variant: Variant,
    seed: u64,
    lambda: f64,
    mut progress: impl FnMut(&OverfitEpoch),
) -> Result<OverfitOutcome, Error> {
    let cfg = RiModelConfig::miniature(variant);
    let refs: Vec<&_> = series.iter().map(|s| &s.frames).collect();
    let norm = Normalizer::fit(&refs)?;
    let inputs = series
        .iter()
        .map(|s| model_input::<ChaCha8Rng>(&s.frames, &norm, cfg.frame_size, None))
        .collect::<Result<Vec<_>, _>>()?;
    let batch: Vec<Example> = inputs
        .iter()
        .zip(series)
        .map(|(f, s)| Example { frames: f, labels: &s.labels })
        .collect();
    let labels = series.iter().flat_map(|s| s.labels.iter().flatten());
    let (positives, labelled) = labels.fold((0, 0), |(p, n), &l| (p + l as usize, n + 1));

    let mut model = RiModel::new(cfg, InitScheme::UniformFanIn, seed)?;
    let mut adam = Adam::new(OVERFIT_LEARNING_RATE);
    let mut out = OverfitOutcome {
        epochs: Vec::new(),
        reached: None,
        positives,
        labelled,
    };
    for epoch in 1..=OVERFIT_EPOCHS {
        let stats = model.train_step(&mut adam, &batch, RegPolicy { lambda })?;
        if !stats.objective.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step: 1,
                objective: stats.objective,
                ce: stats.ce,
                l2: stats.l2,
            });
        }
        let (mut y, mut q) = (Vec::new(), Vec::new());
        for ex in &batch {
            let (pred, _) = model.predict(ex.frames)?;
            for (k, &p) in pred.probabilities.iter().enumerate() {
                if let Some(l) = ex.labels[k + pred.offset] {
                    y.push(l);
                    q.push(p);
                }
            }
        }
        let t = contingency(&y, &q, 0.5)?;
        let record = OverfitEpoch {
            epoch,
            objective: stats.objective,
            hss: t.hss(ChanceModel::AccuracyWeighted).ok(),
            hss_textbook: t.hss(ChanceModel::Textbook).ok(),
        };
        progress(&record);
        out.epochs.push(record);
        if t.fp == 0 && t.fn_ == 0 && out.epochs[epoch - 1].hss_textbook.is_some() {
            out.reached = Some(epoch);
            break;
        }
    }
    Ok(out)
}
