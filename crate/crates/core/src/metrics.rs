//! Probabilistic and categorical forecast verification.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check_pair(op: &'static str, y: &[bool], p: &[f64]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::LengthMismatch {
            op,
            left: y.len(),
            right: p.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Empty(op));
    }
    check_probabilities(op, p)
}

fn check_probabilities(op: &'static str, p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(alloc::format!(
            "{op}: probability {bad} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Mean squared difference between forecast probability and outcome.
pub fn brier_score(y: &[bool], p: &[f64]) -> Result<f64> {
    check_pair("brier score", y, p)?;
    let sum: f64 = y
        .iter()
        .zip(p)
        .map(|(&o, &f)| {
            let d = f - if o { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Fraction of positive outcomes.
pub fn base_rate(y: &[bool]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("base rate"));
    }
    Ok(y.iter().filter(|&&o| o).count() as f64 / y.len() as f64)
}

/// Reference forecast for the skill score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference<'a> {
    /// A per-sample reference probability series.
    Series(&'a [f64]),
    /// The same probability everywhere, e.g. a climatological base rate.
    Fixed(f64),
}

/// `1 − BS / BS_ref`. Fails when the reference is perfect.
pub fn brier_skill_score(y: &[bool], p: &[f64], reference: Reference<'_>) -> Result<f64> {
    let bs = brier_score(y, p)?;
    let bs_ref = match reference {
        Reference::Series(r) => brier_score(y, r)?,
        Reference::Fixed(c) => brier_score(y, &vec![c; y.len()])?,
    };
    if bs_ref == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(1.0 - bs / bs_ref)
}

/// 2×2 table of binary forecasts against outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// How the chance-agreement term of the Heidke score is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChanceModel {
    /// `ACC·r + (1 − r)·(1 − ACC)` with `r = (TP+FN)/N`.
    AccuracyWeighted,
    /// `[(TP+FN)(TP+FP) + (TN+FN)(TN+FP)] / N²`, from the marginals of
    /// outcome and forecast.
    Textbook,
}

impl ContingencyTable {
    pub fn from_forecasts(y: &[bool], forecast: &[bool]) -> Result<Self> {
        if y.len() != forecast.len() {
            return Err(Error::LengthMismatch {
                op: "contingency table",
                left: y.len(),
                right: forecast.len(),
            });
        }
        let mut t = ContingencyTable::default();
        for (&o, &f) in y.iter().zip(forecast) {
            match (f, o) {
                (true, true) => t.tp += 1,
                (true, false) => t.fp += 1,
                (false, false) => t.tn += 1,
                (false, true) => t.fn_ += 1,
            }
        }
        Ok(t)
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.n() {
            0 => Err(Error::Empty("accuracy")),
            n => Ok((self.tp + self.tn) as f64 / n as f64),
        }
    }

    /// Chance agreement as an exact fraction `numerator / N²`.
    fn chance_fraction(&self, model: ChanceModel) -> (u128, u128) {
        let (tp, fp, tn, fn_) = (self.tp as u128, self.fp as u128, self.tn as u128, self.fn_ as u128);
        let n = tp + fp + tn + fn_;
        let num = match model {
            // ACC·r + (1−r)(1−ACC) = [(TP+TN)(TP+FN) + (FP+TN)(FP+FN)] / N²
            ChanceModel::AccuracyWeighted => (tp + tn) * (tp + fn_) + (fp + tn) * (fp + fn_),
            ChanceModel::Textbook => (tp + fn_) * (tp + fp) + (tn + fn_) * (tn + fp),
        };
        (num, n * n)
    }

    pub fn standard_forecast(&self, model: ChanceModel) -> Result<f64> {
        let (num, den) = self.chance_fraction(model);
        if den == 0 {
            return Err(Error::Empty("standard forecast"));
        }
        Ok(num as f64 / den as f64)
    }

    /// `(ACC − SF) / (1 − SF)`. A table whose chance agreement is exactly one
    /// is degenerate.
    pub fn hss(&self, model: ChanceModel) -> Result<f64> {
        let (num, den) = self.chance_fraction(model);
        if den == 0 {
            return Err(Error::Empty("heidke skill score"));
        }
        if num == den {
            return Err(Error::DegenerateTable { n: self.n() as usize });
        }
        let n = self.n() as u128;
        // (ACC − SF)/(1 − SF) = ((TP+TN)·N − num) / (N² − num)
        let hits = (self.tp + self.tn) as u128 * n;
        Ok((hits as f64 - num as f64) / (den - num) as f64)
    }
}

/// Forecast is positive when `p ≥ threshold`.
pub fn contingency(y: &[bool], p: &[f64], threshold: f64) -> Result<ContingencyTable> {
    check_pair("contingency table", y, p)?;
    let f: Vec<bool> = p.iter().map(|&v| v >= threshold).collect();
    ContingencyTable::from_forecasts(y, &f)
}

/// Heidke skill score of thresholded probabilities.
pub fn hss(y: &[bool], p: &[f64], threshold: f64, model: ChanceModel) -> Result<f64> {
    contingency(y, p, threshold)?.hss(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_forecast: Option<f64>,
    pub observed_frequency: Option<f64>,
}

/// Equal-width bins over `[0, 1]`; every bin is half-open except the last,
/// which also takes `p = 1`.
pub fn reliability(y: &[bool], p: &[f64], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_pair("reliability", y, p)?;
    if bins < 2 {
        return Err(Error::InvalidArgument("reliability needs at least two bins".into()));
    }
    let mut count = vec![0usize; bins];
    let mut forecast = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&o, &f) in y.iter().zip(p) {
        let b = (libm::floor(f * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        forecast[b] += f;
        hits[b] += o as usize;
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                mean_forecast: (n > 0).then(|| forecast[b] / n as f64),
                observed_frequency: (n > 0).then(|| hits[b] as f64 / n as f64),
            }
        })
        .collect())
}

/// Index of the first maximum.
pub fn argmax_first(xs: &[f64]) -> Result<usize> {
    if xs.is_empty() {
        return Err(Error::Empty("argmax"));
    }
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Peak of a probability series and the extent of the rise and fall around it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeakSpan {
    pub peak: usize,
    /// First index of the non-decreasing run ending at the peak.
    pub start: usize,
    /// Last index of the non-increasing run starting at the peak.
    pub end: usize,
}

impl PeakSpan {
    /// Frames covered, `end − start + 1`.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Extends left from the first maximum while values do not increase toward
/// the peak, and right while they do not increase away from it.
pub fn peak_span(p: &[f64]) -> Result<PeakSpan> {
    let peak = argmax_first(p)?;
    let mut start = peak;
    while start > 0 && p[start - 1] <= p[start] {
        start -= 1;
    }
    let mut end = peak;
    while end + 1 < p.len() && p[end + 1] <= p[end] {
        end += 1;
    }
    Ok(PeakSpan { peak, start, end })
}

/// `argmax(p) − argmax(ΔI)`, in frames; negative when the forecast peak leads
/// the largest intensity change.
pub fn peak_delay(p: &[f64], intensity_change: &[f64]) -> Result<isize> {
    if p.len() != intensity_change.len() {
        return Err(Error::LengthMismatch {
            op: "peak delay",
            left: p.len(),
            right: intensity_change.len(),
        });
    }
    let a = argmax_first(p)? as isize;
    let b = argmax_first(intensity_change)? as isize;
    Ok(a - b)
}
