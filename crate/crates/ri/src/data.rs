//! Turning a loaded dataset into model inputs: relabeling at the configured
//! threshold, the train/validation split, normalization and augmentation.

use rand::Rng;
use ri_core::synth::{augment_rotate, crop_center, label_ri, split_dataset, DatasetSplit, Normalizer, TcSeries, HORIZON_FRAMES};
use ri_core::Tensor;

use crate::{Error, RunConfig};

/// One series with its source-resolution frames.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub source: Tensor,
    pub intensity: Vec<f64>,
    pub labels: Vec<Option<bool>>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    /// Cropped and normalized validation frames, computed once.
    pub validation_inputs: Vec<Tensor>,
    pub normalizer: Normalizer,
    pub split: DatasetSplit,
    /// Positive fraction of labeled training frames: the climatology reference.
    pub base_rate: f64,
    pub frame_size: usize,
}

/// Crop, then normalize; with `rng`, rotate every frame first.
pub fn model_input<R: Rng + ?Sized>(
    frames: &Tensor,
    normalizer: &Normalizer,
    frame_size: usize,
    rng: Option<&mut R>,
) -> Result<Tensor, Error> {
    let rotated;
    let src = match rng {
        Some(rng) => {
            rotated = augment_rotate(frames, rng)?;
            &rotated
        }
        None => frames,
    };
    Ok(normalizer.apply(&crop_center(src, frame_size)?)?)
}

/// Splits by series and fits the normalizer on the training split, unless one
/// is supplied (evaluation reuses the checkpoint's).
pub fn prepare(cfg: &RunConfig, series: Vec<TcSeries>, normalizer: Option<Normalizer>) -> Result<Prepared, Error> {
    let ids: Vec<u64> = series.iter().map(|s| s.id).collect();
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("dataset contains duplicate series ids".into()));
    }
    let split = split_dataset(&ids, cfg.validation_fraction, cfg.seed)?;
    let mut train = Vec::with_capacity(split.train.len());
    let mut validation = Vec::with_capacity(split.validation.len());
    for s in series {
        let shape = s.frames.shape();
        if shape.len() != 4 || shape[2] < cfg.frame_size || shape[3] < cfg.frame_size {
            return Err(Error::Config(format!(
                "series {} has frames {:?}, too small for frame_size {}",
                s.id, shape, cfg.frame_size
            )));
        }
        if s.len() <= cfg.effective_history() + HORIZON_FRAMES {
            return Err(Error::Config(format!(
                "series {} has {} frames; at least {} are needed",
                s.id,
                s.len(),
                cfg.effective_history() + HORIZON_FRAMES + 1
            )));
        }
        let sample = Sample {
            id: s.id,
            labels: label_ri(&s.intensity, cfg.ri_threshold, HORIZON_FRAMES)?,
            intensity: s.intensity,
            source: s.frames,
        };
        if split.validation.binary_search(&sample.id).is_ok() {
            validation.push(sample);
        } else {
            train.push(sample);
        }
    }
    train.sort_by_key(|s| s.id);
    validation.sort_by_key(|s| s.id);

    let normalizer = match normalizer {
        Some(n) => n,
        None => {
            let crops = train
                .iter()
                .map(|s| crop_center(&s.source, cfg.frame_size))
                .collect::<Result<Vec<_>, _>>()?;
            Normalizer::fit(&crops.iter().collect::<Vec<_>>())?
        }
    };
    let validation_inputs = validation
        .iter()
        .map(|s| model_input::<rand_chacha::ChaCha8Rng>(&s.source, &normalizer, cfg.frame_size, None))
        .collect::<Result<Vec<_>, _>>()?;

    let (mut pos, mut n) = (0usize, 0usize);
    for l in train.iter().flat_map(|s| s.labels.iter().flatten()) {
        n += 1;
        pos += *l as usize;
    }
    if n == 0 {
        return Err(Error::Config("training split has no labeled frames".into()));
    }
    Ok(Prepared {
        train,
        validation,
        validation_inputs,
        normalizer,
        split,
        base_rate: pos as f64 / n as f64,
        frame_size: cfg.frame_size,
    })
}
