//! The assembled RI predictor.
//!
//! Per frame: CNN backbone → optional self-attention mask. Across frames: a
//! dense-gated ConvLSTM whose input at step `t` is optionally the
//! sequence-attended concatenation `[x_t, Σ a_τ x_τ]` over the previous `T_h`
//! frames. The first `T_h` recurrent outputs are dropped; each retained hidden
//! map is pooled and passed through the dense head to one RI logit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::attention::{ScoreKind, SelfAttentionMask, SequenceAttention};
use crate::cells::{DenseGatedCell, RecurrentCell};
use crate::error::{Error, Result};
use crate::nn::{
    init_parameters, l2_penalty, Activation, Adam, BatchNorm, ConvLayer, DenseLayer, Dropout, Graph,
    InitScheme, Mode, ParamStore, RegPolicy,
};
use crate::tape::{sigmoid, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    None,
    SelfAttention,
    Sequence,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::SelfAttention, Variant::Sequence, Variant::Both];

    pub fn uses_self_attention(self) -> bool {
        matches!(self, Variant::SelfAttention | Variant::Both)
    }

    pub fn uses_sequence_attention(self) -> bool {
        matches!(self, Variant::Sequence | Variant::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::SelfAttention => "self",
            Variant::Sequence => "seq",
            Variant::Both => "both",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Variant::None),
            "self" => Ok(Variant::SelfAttention),
            "seq" => Ok(Variant::Sequence),
            "both" => Ok(Variant::Both),
            _ => Err(Error::InvalidArgument(alloc::format!(
                "unknown variant `{s}` (expected none, self, seq or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub frame_size: usize,
    pub backbone: Vec<BlockSpec>,
    pub hidden_channels: usize,
    /// Look-back `T_h`; zero unless the variant uses sequence attention.
    pub history: usize,
    pub candidate_kernel: usize,
    pub mask_kernel: usize,
    pub score: ScoreKind,
    pub head_width: usize,
    pub dropout: f64,
    pub pos_weight: f64,
}

pub const DEFAULT_HISTORY: usize = 4;

impl RiModelConfig {
    /// The desk-scale default: four 3×3 conv blocks of 16/32/64/64 channels,
    /// stride 2 on the first three (64 → 8 spatial).
    pub fn new(variant: Variant) -> Self {
        let block = |channels, stride| BlockSpec {
            channels,
            kernel: 3,
            stride,
        };
        RiModelConfig {
            variant,
            in_channels: 2,
            frame_size: 64,
            backbone: vec![block(16, 2), block(32, 2), block(64, 2), block(64, 1)],
            hidden_channels: 32,
            history: if variant.uses_sequence_attention() { DEFAULT_HISTORY } else { 0 },
            candidate_kernel: 3,
            mask_kernel: 1,
            score: ScoreKind::Dot,
            head_width: 64,
            dropout: 0.9,
            pos_weight: 20.0,
        }
    }

    /// A few hundred parameters on 8×8 frames: one 4-channel stride-2 block,
    /// two hidden channels, a 4-wide head and no dropout. Sized for exhaustive
    /// gradient audits and overfitting runs.
    pub fn miniature(variant: Variant) -> Self {
        RiModelConfig {
            frame_size: 8,
            backbone: vec![BlockSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            }],
            hidden_channels: 2,
            history: if variant.uses_sequence_attention() { 2 } else { 0 },
            head_width: 4,
            dropout: 0.0,
            ..Self::new(variant)
        }
    }

    /// Sets the variant and brings the look-back in line with it.
    pub fn with_variant(mut self, variant: Variant, history: usize) -> Self {
        self.variant = variant;
        self.history = if variant.uses_sequence_attention() { history } else { 0 };
        self
    }

    /// Spatial extent after the backbone.
    pub fn feature_size(&self) -> usize {
        self.backbone.iter().fold(self.frame_size, |s, b| {
            let pad = (b.kernel - 1) / 2;
            (s + 2 * pad).saturating_sub(b.kernel) / b.stride + 1
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(self.in_channels, |b| b.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let seq = self.variant.uses_sequence_attention();
        if seq && self.history == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "variant {} needs a positive history length",
                self.variant
            )));
        }
        if !seq && self.history != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "variant {} takes no history, got {}",
                self.variant,
                self.history
            )));
        }
        if self.in_channels == 0 || self.hidden_channels == 0 || self.head_width == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        let mut size = self.frame_size;
        for b in &self.backbone {
            if b.kernel % 2 == 0 || b.stride == 0 || b.channels == 0 {
                return Err(Error::InvalidArgument(alloc::format!("invalid backbone block {b:?}")));
            }
            let pad = (b.kernel - 1) / 2;
            if b.kernel > size + 2 * pad {
                return Err(Error::KernelTooLarge {
                    kernel: b.kernel,
                    height: size + 2 * pad,
                    width: size + 2 * pad,
                });
            }
            size = (size + 2 * pad - b.kernel) / b.stride + 1;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(alloc::format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.pos_weight.is_nan() || self.pos_weight <= 0.0 {
            return Err(Error::InvalidArgument("positive-class weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-frame RI probabilities for frames `offset..offset + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSeries {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Index of the first predicted frame, equal to `T_h`.
    pub offset: usize,
}

impl PredictionSeries {
    pub fn from_logits(logits: Vec<f64>, offset: usize) -> Self {
        let probabilities = logits.iter().map(|&z| sigmoid(z)).collect();
        PredictionSeries {
            logits,
            probabilities,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// `1` iff the probability reaches `threshold` (ties go to the positive class).
pub fn predict_binary(probabilities: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(probabilities.iter().map(|&p| p >= threshold).collect())
}

/// Mean over labeled frames of `−[w₊·y·ln p + (1−y)·ln(1−p)]`, `p = σ(z)`, in
/// the softplus form `w₊·y·softplus(−z) + (1−y)·softplus(z)`. Unlabeled
/// (`None`) frames are excluded.
pub fn weighted_ce_loss(g: &mut Graph, logits: Var, labels: &[Option<bool>], pos_weight: f64) -> Result<Var> {
    let n = g.value(logits).numel();
    if g.tape.shape(logits).len() != 1 || n != labels.len() {
        return Err(Error::LengthMismatch {
            op: "weighted cross entropy",
            left: n,
            right: labels.len(),
        });
    }
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let inv = 1.0 / count as f64;
    let pos: Vec<f64> = labels
        .iter()
        .map(|l| if *l == Some(true) { pos_weight * inv } else { 0.0 })
        .collect();
    let neg: Vec<f64> = labels
        .iter()
        .map(|l| if *l == Some(false) { inv } else { 0.0 })
        .collect();
    let pos = g.constant(Tensor::from_slice(&pos));
    let neg = g.constant(Tensor::from_slice(&neg));
    let neg_logits = g.tape.neg(logits);
    let sp_pos = g.tape.softplus(neg_logits);
    let sp_neg = g.tape.softplus(logits);
    let a = g.tape.mul(pos, sp_pos)?;
    let b = g.tape.mul(neg, sp_neg)?;
    let total = g.tape.add(a, b)?;
    Ok(g.tape.sum(total))
}

/// One training example: frames `[T,C,S,S]` and per-frame labels.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub frames: &'a Tensor,
    pub labels: &'a [Option<bool>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub ce: Var,
    pub l2: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub ce: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `[T,C,h,w]` self-attention masks, when the variant has them.
    pub masks: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct RiModel {
    config: RiModelConfig,
    pub store: ParamStore,
    backbone: Vec<(ConvLayer, BatchNorm)>,
    mask: Option<SelfAttentionMask>,
    cell: DenseGatedCell,
    sequence: Option<SequenceAttention>,
    head_hidden: DenseLayer,
    head_norm: BatchNorm,
    head_dropout: Dropout,
    head_out: DenseLayer,
}

impl RiModel {
    pub fn new(config: RiModelConfig, scheme: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut backbone = Vec::with_capacity(config.backbone.len());
        let mut channels = config.in_channels;
        for (i, b) in config.backbone.iter().enumerate() {
            let name = alloc::format!("backbone.{i}");
            let conv = ConvLayer::new(
                &mut store,
                &name,
                channels,
                b.channels,
                b.kernel,
                b.stride,
                (b.kernel - 1) / 2,
                false,
                Activation::None,
            );
            let bn = BatchNorm::new(&mut store, &alloc::format!("{name}.bn"), b.channels);
            backbone.push((conv, bn));
            channels = b.channels;
        }
        let mask = if config.variant.uses_self_attention() {
            Some(SelfAttentionMask::new(&mut store, "self_attention", channels, config.mask_kernel)?)
        } else {
            None
        };
        let sequence = if config.variant.uses_sequence_attention() {
            Some(match config.score {
                ScoreKind::Dot => SequenceAttention::dot(config.history)?,
                ScoreKind::General => {
                    let fs = config.feature_size();
                    SequenceAttention::general(&mut store, "sequence_attention", config.history, channels * fs * fs)?
                }
            })
        } else {
            None
        };
        let cell_in = if sequence.is_some() { 2 * channels } else { channels };
        let cell = DenseGatedCell::new(&mut store, "cell", cell_in, config.hidden_channels, config.candidate_kernel)?;
        let head_hidden = DenseLayer::new(
            &mut store,
            "head.hidden",
            config.hidden_channels,
            config.head_width,
            Activation::Relu,
        );
        let head_norm = BatchNorm::new(&mut store, "head.bn", config.head_width);
        let head_out = DenseLayer::new(&mut store, "head.out", config.head_width, 1, Activation::None);
        init_parameters(&mut store, scheme, seed);
        let head_dropout = Dropout::new(config.dropout, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(RiModel {
            config,
            store,
            backbone,
            mask,
            cell,
            sequence,
            head_hidden,
            head_norm,
            head_dropout,
            head_out,
        })
    }

    pub fn config(&self) -> &RiModelConfig {
        &self.config
    }

    pub fn history(&self) -> usize {
        self.config.history
    }

    pub fn cell(&self) -> &DenseGatedCell {
        &self.cell
    }

    pub fn self_attention(&self) -> Option<&SelfAttentionMask> {
        self.mask.as_ref()
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.head_dropout.reseed(seed);
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.frame_size || shape[3] != c.frame_size {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), c.in_channels, c.frame_size, c.frame_size],
            });
        }
        if shape[0] <= c.history {
            return Err(Error::InvalidArgument(alloc::format!(
                "series of {} frames is not longer than the history length {}",
                shape[0],
                c.history
            )));
        }
        Ok(())
    }

    /// Per-frame backbone features `[T,C,h,w]`, after self-attention when present.
    fn features(&mut self, g: &mut Graph, frames: Var, mode: Mode) -> Result<(Var, Option<Var>)> {
        let mut x = frames;
        for (conv, bn) in &self.backbone {
            x = conv.forward(g, &self.store, x)?;
            x = bn.forward(g, &mut self.store, x, mode)?;
            x = g.tape.relu(x);
        }
        match &self.mask {
            Some(m) => {
                let (out, mask) = m.attend(g, &self.store, x)?;
                Ok((out, Some(mask)))
            }
            None => Ok((x, None)),
        }
    }

    /// Records the forward pass of one series `[T,C,S,S]` on `g`; yields
    /// `T − T_h` logits aligned to frames `T_h..T`.
    pub fn forward(&mut self, g: &mut Graph, frames: Var, mode: Mode) -> Result<ForwardOutput> {
        let mut out = self.forward_batch(g, &[frames], mode)?;
        Ok(out.pop().expect("one series in, one out"))
    }

    /// Forward pass of several series at once. Batch normalization pools its
    /// statistics over every frame of every series; the recurrence and both
    /// attentions run per series.
    pub fn forward_batch(&mut self, g: &mut Graph, series: &[Var], mode: Mode) -> Result<Vec<ForwardOutput>> {
        if series.is_empty() {
            return Err(Error::Empty("forward batch"));
        }
        let history = self.config.history;
        let mut lengths = Vec::with_capacity(series.len());
        for &s in series {
            let shape = g.tape.shape(s).to_vec();
            self.check_input(&shape)?;
            lengths.push(shape[0]);
        }
        let frames = if series.len() == 1 { series[0] } else { g.tape.concat(series, 0)? };
        let (features, masks) = self.features(g, frames, mode)?;
        let fshape = g.tape.shape(features).to_vec();
        let pad = self.sequence.as_ref().map(|_| g.constant(Tensor::zeros(&fshape[1..])));

        let mut pooled = Vec::with_capacity(series.len());
        let mut series_masks = Vec::with_capacity(series.len());
        let mut start = 0;
        for &t_len in &lengths {
            let range = start..start + t_len;
            start += t_len;
            series_masks.push(match masks {
                Some(m) if series.len() == 1 => Some(m),
                Some(m) => Some(g.tape.slice(m, 0, range.clone())?),
                None => None,
            });
            let frame_feats: Vec<Var> = range
                .map(|t| g.tape.index_axis0(features, t))
                .collect::<Result<_>>()?;
            let mut state = self.cell.zero_state(g, fshape[2], fshape[3]);
            let mut retained = Vec::with_capacity(t_len - history);
            for t in 0..t_len {
                let x = frame_feats[t];
                let input = match (&self.sequence, pad) {
                    (Some(sa), _) if t >= history => {
                        sa.attend(g, &self.store, x, &frame_feats[t - history..t])?.0
                    }
                    // too little history: the context half is zero
                    (Some(_), Some(zeros)) => g.tape.concat(&[x, zeros], 0)?,
                    _ => x,
                };
                state = self.cell.step(g, &self.store, input, state)?;
                if t >= history {
                    retained.push(state.h);
                }
            }
            let hidden = g.tape.stack(&retained)?;
            pooled.push(g.tape.global_avg_pool(hidden)?);
        }

        let pooled = if pooled.len() == 1 { pooled[0] } else { g.tape.concat(&pooled, 0)? };
        let z = self.head_hidden.forward(g, &self.store, pooled)?;
        let z = self.head_norm.forward(g, &mut self.store, z, mode)?;
        let z = self.head_dropout.forward(g, z, mode);
        let z = self.head_out.forward(g, &self.store, z)?;
        let total: usize = lengths.iter().map(|t| t - history).sum();
        let z = g.tape.reshape(z, &[total])?;

        let mut out = Vec::with_capacity(series.len());
        let mut start = 0;
        for (t_len, masks) in lengths.iter().zip(series_masks) {
            let n = t_len - history;
            let logits = if series.len() == 1 { z } else { g.tape.slice(z, 0, start..start + n)? };
            start += n;
            out.push(ForwardOutput { logits, masks });
        }
        Ok(out)
    }

    /// Eval-mode prediction for one series, with the self-attention masks when present.
    pub fn predict(&mut self, frames: &Tensor) -> Result<(PredictionSeries, Option<Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let out = self.forward(&mut g, x, Mode::Eval)?;
        let logits = g.value(out.logits).data().to_vec();
        let masks = out.masks.map(|m| g.value(m).clone());
        Ok((PredictionSeries::from_logits(logits, self.config.history), masks))
    }

    /// Mean class-weighted cross entropy over the batch plus the L2 penalty.
    pub fn objective(&mut self, g: &mut Graph, batch: &[Example<'_>], mode: Mode, reg: RegPolicy) -> Result<ObjectiveTerms> {
        if batch.is_empty() {
            return Err(Error::Empty("objective batch"));
        }
        let history = self.config.history;
        let mut inputs = Vec::with_capacity(batch.len());
        for ex in batch {
            let t_len = ex.frames.shape().first().copied().unwrap_or(0);
            if ex.labels.len() != t_len {
                return Err(Error::LengthMismatch {
                    op: "labels vs frames",
                    left: ex.labels.len(),
                    right: t_len,
                });
            }
            inputs.push(g.constant(ex.frames.clone()));
        }
        let outputs = self.forward_batch(g, &inputs, mode)?;
        let mut ce_terms = Vec::with_capacity(batch.len());
        for (ex, out) in batch.iter().zip(outputs) {
            ce_terms.push(weighted_ce_loss(g, out.logits, &ex.labels[history..], self.config.pos_weight)?);
        }
        let mut ce = ce_terms[0];
        for &t in &ce_terms[1..] {
            ce = g.tape.add(ce, t)?;
        }
        let ce = g.tape.scale(ce, 1.0 / batch.len() as f64);
        let l2 = l2_penalty(g, &self.store, reg);
        let total = g.tape.add(ce, l2)?;
        Ok(ObjectiveTerms { total, ce, l2 })
    }

    /// Gradient of the objective accumulated into the store; returns the terms.
    pub fn compute_gradients(&mut self, batch: &[Example<'_>], mode: Mode, reg: RegPolicy) -> Result<StepStats> {
        self.store.zero_grad();
        let mut g = Graph::new();
        let terms = self.objective(&mut g, batch, mode, reg)?;
        let stats = StepStats {
            objective: g.value(terms.total).item(),
            ce: g.value(terms.ce).item(),
            l2: g.value(terms.l2).item(),
        };
        g.backward(terms.total)?;
        g.collect_grads(&mut self.store);
        Ok(stats)
    }

    /// One Adam step on the training objective.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &[Example<'_>], reg: RegPolicy) -> Result<StepStats> {
        let stats = self.compute_gradients(batch, Mode::Train, reg)?;
        if !stats.objective.is_finite() {
            return Ok(stats);
        }
        adam.step(&mut self.store)?;
        Ok(stats)
    }

    /// Names and shapes of every stored tensor, in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }
}
