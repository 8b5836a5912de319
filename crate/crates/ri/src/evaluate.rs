//! Validation scoring and the peak and calibration analyses.

use std::collections::BTreeMap;

use ri_core::metrics::{
    brier_score, brier_skill_score, peak_delay, peak_span, reliability, ChanceModel, ContingencyTable,
    ReliabilityBin, Reference,
};
use ri_core::model::{predict_binary, PredictionSeries, RiModel};
use ri_core::synth::HORIZON_FRAMES;
use ri_core::Tensor;

use crate::data::Prepared;
use crate::Error;

/// Skill of one set of probabilistic forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub n: usize,
    pub positives: usize,
    pub bs: f64,
    /// Against the constant training base rate; `None` when that reference is perfect.
    pub bss: Option<f64>,
    /// `1 − BS / reference_bs` for a published reference Brier score.
    pub bss_fixed: f64,
    /// Accuracy-weighted chance term; `None` for degenerate tables.
    pub hss: Option<f64>,
    pub hss_textbook: Option<f64>,
    pub acc: f64,
    pub table: ContingencyTable,
}

impl Scores {
    pub fn compute(y: &[bool], p: &[f64], base_rate: f64, threshold: f64, reference_bs: f64) -> Result<Self, Error> {
        let bs = brier_score(y, p)?;
        let bss = match brier_skill_score(y, p, Reference::Fixed(base_rate)) {
            Ok(v) => Some(v),
            Err(ri_core::Error::ZeroReference) => None,
            Err(e) => return Err(e.into()),
        };
        let table = ContingencyTable::from_forecasts(y, &predict_binary(p, threshold)?)?;
        let hss = |m| table.hss(m).ok();
        Ok(Scores {
            n: y.len(),
            positives: y.iter().filter(|&&v| v).count(),
            bs,
            bss,
            bss_fixed: 1.0 - bs / reference_bs,
            hss: hss(ChanceModel::AccuracyWeighted),
            hss_textbook: hss(ChanceModel::Textbook),
            acc: table.accuracy()?,
            table,
        })
    }
}

/// Eval-mode output for one validation series.
#[derive(Debug, Clone)]
pub struct SeriesPrediction {
    pub id: u64,
    pub prediction: PredictionSeries,
    pub labels: Vec<Option<bool>>,
    pub intensity: Vec<f64>,
    /// Channel-mean self-attention mask `[T, h, w]`.
    pub mask: Option<Tensor>,
}

impl SeriesPrediction {
    /// Labeled (outcome, probability) pairs on the retained frames.
    pub fn pairs(&self) -> impl Iterator<Item = (bool, f64)> + '_ {
        let offset = self.prediction.offset;
        self.prediction
            .probabilities
            .iter()
            .enumerate()
            .filter_map(move |(i, &p)| self.labels[offset + i].map(|y| (y, p)))
    }
}

fn channel_mean(masks: &Tensor) -> Tensor {
    let s = masks.shape();
    let (t_len, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; t_len * plane];
    for t in 0..t_len {
        for ch in 0..c {
            let src = &masks.data()[(t * c + ch) * plane..][..plane];
            for (o, v) in out[t * plane..][..plane].iter_mut().zip(src) {
                *o += v / c as f64;
            }
        }
    }
    Tensor::new(&[t_len, s[2], s[3]], out).expect("mask shape")
}

pub fn predict_validation(model: &mut RiModel, data: &Prepared) -> Result<Vec<SeriesPrediction>, Error> {
    data.validation
        .iter()
        .zip(&data.validation_inputs)
        .map(|(s, x)| {
            let (prediction, masks) = model.predict(x)?;
            Ok(SeriesPrediction {
                id: s.id,
                prediction,
                labels: s.labels.clone(),
                intensity: s.intensity.clone(),
                mask: masks.as_ref().map(channel_mean),
            })
        })
        .collect()
}

pub fn pooled(preds: &[SeriesPrediction]) -> (Vec<bool>, Vec<f64>) {
    preds.iter().flat_map(SeriesPrediction::pairs).unzip()
}

pub fn score_predictions(preds: &[SeriesPrediction], base_rate: f64, threshold: f64, reference_bs: f64) -> Result<Scores, Error> {
    let (y, p) = pooled(preds);
    Scores::compute(&y, &p, base_rate, threshold, reference_bs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Per series: id, retained length `T′`, peak index, span, delay.
    pub series: Vec<(u64, usize, usize, usize, isize)>,
    pub span_histogram: BTreeMap<usize, usize>,
    pub delay_histogram: BTreeMap<isize, usize>,
    pub reliability: Vec<ReliabilityBin>,
}

impl Analysis {
    /// Conservation and range audits; the description of the first failure.
    pub fn audit(&self) -> Option<String> {
        let total: usize = self.delay_histogram.values().sum();
        if total != self.series.len() {
            return Some(format!("delay histogram holds {total} series, expected {}", self.series.len()));
        }
        let spans: usize = self.span_histogram.values().sum();
        if spans != self.series.len() {
            return Some(format!("span histogram holds {spans} series, expected {}", self.series.len()));
        }
        for &(id, len, _, span, _) in &self.series {
            if span < 1 || span > len {
                return Some(format!("series {id}: span {span} outside [1, {len}]"));
            }
        }
        None
    }
}

/// Peak span over each retained probability series; peak delay against the
/// 24-hour intensity change over the frames where that change is defined.
pub fn analyze(preds: &[SeriesPrediction], bins: usize) -> Result<Analysis, Error> {
    let mut series = Vec::with_capacity(preds.len());
    let mut span_histogram = BTreeMap::new();
    let mut delay_histogram = BTreeMap::new();
    for sp in preds {
        let p = &sp.prediction.probabilities;
        let span = peak_span(p)?;
        let offset = sp.prediction.offset;
        let defined = sp.intensity.len().saturating_sub(HORIZON_FRAMES).saturating_sub(offset).min(p.len());
        if defined == 0 {
            return Err(Error::Check(format!("series {} has no frame with a defined intensity change", sp.id)));
        }
        let change: Vec<f64> = (offset..offset + defined)
            .map(|t| sp.intensity[t + HORIZON_FRAMES] - sp.intensity[t])
            .collect();
        let delay = peak_delay(&p[..defined], &change)?;
        series.push((sp.id, p.len(), span.peak, span.len(), delay));
        *span_histogram.entry(span.len()).or_insert(0) += 1;
        *delay_histogram.entry(delay).or_insert(0) += 1;
    }
    let (y, p) = pooled(preds);
    Ok(Analysis {
        series,
        span_histogram,
        delay_histogram,
        reliability: reliability(&y, &p, bins)?,
    })
}
