//! Spatial self-attention masking and Luong-style sequence attention.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvLayer, Graph, Init, ParamId, ParamKind, ParamStore};
use crate::tape::Var;

/// Multiplicative mask `sigmoid(conv(x))` from a bias-free, activation-free
/// convolution with as many output channels as input channels.
#[derive(Debug, Clone)]
pub struct SelfAttentionMask {
    pub conv: ConvLayer,
}

impl SelfAttentionMask {
    /// `kernel` must be odd; same-padding keeps the spatial grid.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(alloc::format!("mask kernel must be odd, got {kernel}")));
        }
        let conv = ConvLayer::new(
            store,
            &alloc::format!("{name}.mask"),
            channels,
            channels,
            kernel,
            1,
            (kernel - 1) / 2,
            false,
            Activation::None,
        );
        Ok(SelfAttentionMask { conv })
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels
    }

    /// Applies the mask to `x` (`[C,H,W]` or `[N,C,H,W]`); returns `(mask ⊙ x, mask)`.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = g.tape.shape(x);
        let c_axis = shape.len().wrapping_sub(3);
        if !(shape.len() == 3 || shape.len() == 4) || shape[c_axis] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "self attention",
                lhs: shape.to_vec(),
                rhs: alloc::vec![self.channels()],
            });
        }
        let logits = self.conv.forward(g, store, x)?;
        let mask = g.tape.sigmoid(logits);
        let out = g.tape.mul(mask, x)?;
        Ok((out, mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// `⟨x_t, x_τ⟩ / √d` on flattened maps.
    Dot,
    /// Learned bilinear form `x_tᵀ·W·x_τ`.
    General,
}

/// Similarity-weighted convex combination of the previous `history` frames,
/// concatenated to the current frame along the channel axis.
#[derive(Debug, Clone)]
pub struct SequenceAttention {
    history: usize,
    kind: ScoreKind,
    /// `[d, d]` for the general score.
    bilinear: Option<ParamId>,
}

impl SequenceAttention {
    pub fn dot(history: usize) -> Result<Self> {
        if history == 0 {
            return Err(Error::InvalidArgument("history length must be positive".into()));
        }
        Ok(SequenceAttention {
            history,
            kind: ScoreKind::Dot,
            bilinear: None,
        })
    }

    /// General score over frames of `dim` flattened elements.
    pub fn general(store: &mut ParamStore, name: &str, history: usize, dim: usize) -> Result<Self> {
        let mut sa = Self::dot(history)?;
        sa.kind = ScoreKind::General;
        sa.bilinear = Some(store.register(
            alloc::format!("{name}.bilinear"),
            &[dim, dim],
            ParamKind::Weight,
            Init::FanIn(dim),
        ));
        Ok(sa)
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.bilinear.into_iter().collect()
    }

    fn check(&self, g: &Graph, current: Var, history: &[Var]) -> Result<()> {
        if history.len() != self.history {
            return Err(Error::LengthMismatch {
                op: "sequence attention history",
                left: history.len(),
                right: self.history,
            });
        }
        let shape = g.tape.shape(current);
        for &h in history {
            if g.tape.shape(h) != shape {
                return Err(Error::ShapeMismatch {
                    op: "sequence attention",
                    lhs: shape.to_vec(),
                    rhs: g.tape.shape(h).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Attention weights `[T_h]` over `history` (oldest first): softmax of the
    /// raw similarity scores.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, current: Var, history: &[Var]) -> Result<Var> {
        self.check(g, current, history)?;
        let d = g.value(current).numel();
        let stacked = g.tape.stack(history)?;
        let frames = g.tape.reshape(stacked, &[self.history, d])?;
        let raw = match self.kind {
            ScoreKind::Dot => {
                let q = g.tape.reshape(current, &[d, 1])?;
                let s = g.tape.matmul(frames, q)?;
                g.tape.scale(s, 1.0 / libm::sqrt(d as f64))
            }
            ScoreKind::General => {
                let w = g.param(store, self.bilinear.expect("general score has weights"));
                let q = g.tape.reshape(current, &[1, d])?;
                let u = g.tape.matmul(q, w)?;
                let u = g.tape.reshape(u, &[d, 1])?;
                g.tape.matmul(frames, u)?
            }
        };
        let raw = g.tape.reshape(raw, &[self.history])?;
        g.tape.softmax(raw)
    }

    /// `[x_t, Σ_τ a_τ·x_τ]` along the channel axis; also returns the weights.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, current: Var, history: &[Var]) -> Result<(Var, Var)> {
        let weights = self.scores(g, store, current, history)?;
        let shape = g.tape.shape(current).to_vec();
        if shape.is_empty() {
            return Err(Error::Rank {
                op: "sequence attention",
                expected: 3,
                shape,
            });
        }
        let d: usize = shape.iter().product();
        let stacked = g.tape.stack(history)?;
        let frames = g.tape.reshape(stacked, &[self.history, d])?;
        let w = g.tape.reshape(weights, &[1, self.history])?;
        let context = g.tape.matmul(w, frames)?;
        let context = g.tape.reshape(context, &shape)?;
        let out = g.tape.concat(&[current, context], 0)?;
        Ok((out, weights))
    }
}
