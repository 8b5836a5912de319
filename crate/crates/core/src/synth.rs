//! Synthetic tropical-cyclone series.
//!
//! Each series carries an intensity track (knots, one value per 3-hour frame)
//! made of a bounded random walk with injected rapid-intensification episodes,
//! and two-channel frames rendered from that track: an infrared-like cloud
//! shield whose extent grows with intensity, an eye that opens above a
//! threshold, a logarithmic spiral band, and a microwave-like eyewall ring.
//!
//! Frames are rendered larger than the model input so rotation augmentation
//! followed by a center crop never exposes fill values in the field of view.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::tensor::{round_to_f32, Tensor};

pub const FRAME_INTERVAL_HOURS: f64 = 3.0;
/// 24 hours at the frame interval.
pub const HORIZON_FRAMES: usize = 8;
pub const DEFAULT_RI_THRESHOLD: f64 = 30.0;
pub const SOURCE_SIZE: usize = 80;
pub const CROP_SIZE: usize = 64;
pub const CHANNELS: usize = 2;

const MIN_INTENSITY: f64 = 10.0;
const MAX_INTENSITY: f64 = 185.0;

/// Intensity-dependent vortex geometry, in pixels of the source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VortexGeometry {
    pub shield_radius_base: f64,
    pub shield_radius_per_kt: f64,
    pub eye_radius: f64,
    pub eye_onset_kt: f64,
    /// Spiral pitch `b` in `θ = phase + ln(r/R)/b`, tightening with intensity.
    pub band_pitch_base: f64,
    pub band_pitch_per_kt: f64,
    /// Cyclonic rotation of the band pattern per frame, radians.
    pub band_rotation_per_frame: f64,
}

impl Default for VortexGeometry {
    fn default() -> Self {
        VortexGeometry {
            shield_radius_base: 6.0,
            shield_radius_per_kt: 0.2,
            eye_radius: 3.0,
            eye_onset_kt: 60.0,
            band_pitch_base: 0.5,
            band_pitch_per_kt: 0.002,
            band_rotation_per_frame: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    /// Frames per series.
    pub frames: usize,
    pub intensity_range: (f64, f64),
    /// Poisson mean of RI episodes per series.
    pub ri_rate: f64,
    /// Random-walk step standard deviation, knots per frame.
    pub walk_sigma: f64,
    /// Episode intensification, knots per frame.
    pub ri_step_range: (f64, f64),
    /// Episode length in frames, inclusive.
    pub ri_duration_range: (usize, usize),
    pub geometry: VortexGeometry,
    pub noise: f64,
    pub source_size: usize,
    pub ri_threshold: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            frames: 32,
            intensity_range: (20.0, 90.0),
            ri_rate: 0.5,
            walk_sigma: 3.0,
            ri_step_range: (4.0, 6.0),
            ri_duration_range: (8, 12),
            geometry: VortexGeometry::default(),
            noise: 0.05,
            source_size: SOURCE_SIZE,
            ri_threshold: DEFAULT_RI_THRESHOLD,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        let (lo, hi) = self.intensity_range;
        if self.frames <= HORIZON_FRAMES {
            return bad("series need more frames than the 24-hour horizon (at least 9)");
        }
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return bad("intensity range must satisfy 0 <= lo < hi");
        }
        if !(self.ri_rate >= 0.0 && self.ri_rate.is_finite()) {
            return bad("RI rate must be finite and non-negative");
        }
        if !(self.walk_sigma >= 0.0 && self.walk_sigma.is_finite()) {
            return bad("walk sigma must be finite and non-negative");
        }
        let (slo, shi) = self.ri_step_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad("RI step range must satisfy 0 < lo <= hi");
        }
        let (dlo, dhi) = self.ri_duration_range;
        if dlo == 0 || dlo > dhi {
            return bad("RI duration range must satisfy 0 < lo <= hi");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if self.source_size < 8 {
            return bad("source frames must be at least 8 pixels");
        }
        if self.ri_threshold.is_nan() || self.ri_threshold <= 0.0 {
            return bad("RI threshold must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcSeries {
    pub id: u64,
    /// `[T, 2, S, S]`; channel 0 infrared-like, channel 1 microwave-like.
    pub frames: Tensor,
    /// Knots per frame.
    pub intensity: Vec<f64>,
    /// `None` where no 24-hour lookahead exists.
    pub labels: Vec<Option<bool>>,
}

impl TcSeries {
    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    /// `I[t+8] − I[t]` where defined.
    pub fn intensity_change(&self) -> Vec<Option<f64>> {
        (0..self.len())
            .map(|t| self.intensity.get(t + HORIZON_FRAMES).map(|later| later - self.intensity[t]))
            .collect()
    }
}

/// `label_t = I[t+h] − I[t] ≥ threshold`; the trailing `h` frames are unlabeled.
pub fn label_ri(intensity: &[f64], threshold: f64, horizon: usize) -> Result<Vec<Option<bool>>> {
    if intensity.len() <= horizon {
        return Err(Error::InvalidArgument(alloc::format!(
            "series of {} frames is too short for a {horizon}-frame horizon",
            intensity.len()
        )));
    }
    Ok((0..intensity.len())
        .map(|t| intensity.get(t + horizon).map(|&later| later - intensity[t] >= threshold))
        .collect())
}

fn series_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Intensity track: bounded random walk plus Poisson-many RI episodes.
pub fn intensity_track(p: &GenParams, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let t_len = p.frames;
    let (lo, hi) = p.intensity_range;
    let start = rng.random_range(lo..hi);
    let episodes = if p.ri_rate > 0.0 {
        let d = Poisson::new(p.ri_rate).map_err(|e| Error::InvalidArgument(alloc::format!("{e}")))?;
        d.sample(rng) as usize
    } else {
        0
    };
    let mut boost = vec![0.0; t_len];
    for _ in 0..episodes {
        let begin = rng.random_range(0..t_len);
        let (dlo, dhi) = p.ri_duration_range;
        let dur = rng.random_range(dlo..=dhi);
        let (slo, shi) = p.ri_step_range;
        let rate = if slo < shi { rng.random_range(slo..shi) } else { slo };
        for b in boost.iter_mut().skip(begin).take(dur) {
            *b += rate;
        }
    }
    let walk = Normal::new(0.0, p.walk_sigma).map_err(|e| Error::InvalidArgument(alloc::format!("{e}")))?;
    let mut track = Vec::with_capacity(t_len);
    let mut level = start;
    for b in boost {
        track.push(level);
        let step = if p.walk_sigma > 0.0 { walk.sample(rng) } else { 0.0 };
        level = (level + step + b).clamp(MIN_INTENSITY, MAX_INTENSITY);
    }
    Ok(track)
}

/// Renders one `[2, S, S]` frame for `intensity` with band orientation `phase`.
/// Pass `noise = None` for the noise-free rendering.
pub fn render_frame(
    intensity: f64,
    phase: f64,
    size: usize,
    geometry: &VortexGeometry,
    noise: Option<(f64, &mut ChaCha8Rng)>,
) -> Tensor {
    let g = geometry;
    let i = intensity.max(0.0);
    let center = (size as f64 - 1.0) / 2.0;
    let shield_r = g.shield_radius_base + g.shield_radius_per_kt * i;
    let amp = 0.5 + 0.005 * i.min(150.0);
    let eye_depth = if i > g.eye_onset_kt {
        ((i - g.eye_onset_kt) / 30.0).min(1.0) * 0.6 * amp
    } else {
        0.0
    };
    let pitch = (g.band_pitch_base - g.band_pitch_per_kt * i).max(0.15);
    let ring_r = 0.35 * shield_r;
    let ring_w = 1.5 + 0.02 * i;
    let rain_amp = 0.2 + 0.008 * i.min(150.0);

    let plane = size * size;
    let mut data = vec![0.0; CHANNELS * plane];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let r = libm::sqrt(dx * dx + dy * dy);
            let theta = libm::atan2(dy, dx);

            let q = r / shield_r;
            let q2 = q * q;
            let shield = amp / (1.0 + q2 * q2);
            let eye = eye_depth * libm::exp(-(r * r) / (g.eye_radius * g.eye_radius));

            let band = if r > 0.5 {
                let arm = phase + libm::log(r / shield_r) / pitch;
                let mut d = libm::fmod(theta - arm, TAU);
                if d > PI {
                    d -= TAU;
                } else if d < -PI {
                    d += TAU;
                }
                let env = (r - 1.5 * shield_r) / (0.6 * shield_r);
                0.3 * amp * libm::exp(-d * d / (2.0 * 0.35 * 0.35)) * libm::exp(-env * env)
            } else {
                0.0
            };
            let ring_d = (r - ring_r) / ring_w;
            let ring = rain_amp * libm::exp(-ring_d * ring_d);

            let o = y * size + x;
            data[o] = shield - eye + band;
            data[plane + o] = ring + 0.5 * band;
        }
    }
    if let Some((sigma, rng)) = noise {
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            for v in &mut data {
                *v += n.sample(rng);
            }
        }
    }
    Tensor::new(&[CHANNELS, size, size], data).expect("frame shape")
}

fn track_and_stream(p: &GenParams, id: u64) -> Result<(ChaCha8Rng, Vec<f64>, Vec<Option<bool>>)> {
    p.validate()?;
    let mut rng = series_rng(p.seed, id);
    let intensity = intensity_track(p, &mut rng)?;
    let labels = label_ri(&intensity, p.ri_threshold, HORIZON_FRAMES)?;
    Ok((rng, intensity, labels))
}

/// Intensity track and labels of series `id` without rendering its frames;
/// identical to the corresponding fields of [`generate_series`].
pub fn generate_track(p: &GenParams, id: u64) -> Result<(Vec<f64>, Vec<Option<bool>>)> {
    let (_, intensity, labels) = track_and_stream(p, id)?;
    Ok((intensity, labels))
}

/// Generates series `id` of the dataset seeded by `p.seed`. Each id draws from
/// its own random stream, so series can be generated independently.
pub fn generate_series(p: &GenParams, id: u64) -> Result<TcSeries> {
    let (mut rng, intensity, labels) = track_and_stream(p, id)?;
    let mut phase = rng.random_range(0.0..TAU);
    let mut frames = Vec::with_capacity(p.frames);
    for &i in &intensity {
        frames.push(render_frame(i, phase, p.source_size, &p.geometry, Some((p.noise, &mut rng))));
        phase += p.geometry.band_rotation_per_frame;
    }
    let mut frames = Tensor::stack(&frames)?;
    round_to_f32(&mut frames);
    Ok(TcSeries {
        id,
        frames,
        intensity,
        labels,
    })
}

pub fn generate_dataset(p: &GenParams, count: usize) -> Result<Vec<TcSeries>> {
    if count == 0 {
        return Err(Error::InvalidArgument("at least one series must be generated".into()));
    }
    (0..count as u64).map(|id| generate_series(p, id)).collect()
}

/// Fraction of labeled frames that are RI.
pub fn ri_base_rate(series: &[TcSeries]) -> f64 {
    let (mut pos, mut n) = (0usize, 0usize);
    for s in series {
        for l in s.labels.iter().flatten() {
            n += 1;
            pos += *l as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        pos as f64 / n as f64
    }
}

/// Window of `size × size` centered on the two trailing axes. For an odd
/// difference the extra row/column is dropped on the far side.
pub fn crop_center(t: &Tensor, size: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(Error::Rank {
            op: "crop_center",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if size > h || size > w || size == 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "cannot crop {size}x{size} from {h}x{w}"
        )));
    }
    if size == h && size == w {
        return Ok(t.clone());
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let planes = t.numel() / (h * w);
    let mut data = Vec::with_capacity(planes * size * size);
    for p in 0..planes {
        let base = p * h * w;
        for y in oy..oy + size {
            data.extend_from_slice(&t.data()[base + y * w + ox..base + y * w + ox + size]);
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = size;
    out_shape[r - 1] = size;
    Tensor::new(&out_shape, data)
}

/// Rotates every channel of a square `[C, S, S]` frame by `angle` radians about
/// its center with bilinear resampling. Samples falling outside the source are
/// filled with the mean of that channel's border pixels.
pub fn rotate_frame(frame: &Tensor, angle: f64) -> Result<Tensor> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::InvalidArgument(alloc::format!(
            "rotation needs square [C,S,S] frames, got {shape:?}"
        )));
    }
    let (channels, s) = (shape[0], shape[1]);
    let c = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    let last = (s - 1) as f64;
    let tol = 1e-9;
    let mut out = vec![0.0; frame.numel()];
    for ch in 0..channels {
        let src = &frame.data()[ch * s * s..(ch + 1) * s * s];
        let fill = border_mean(src, s);
        let dst = &mut out[ch * s * s..(ch + 1) * s * s];
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                // inverse map: rotate the output position by −angle
                let sx = c + cos * dx + sin * dy;
                let sy = c - sin * dx + cos * dy;
                dst[y * s + x] = if sx < -tol || sy < -tol || sx > last + tol || sy > last + tol {
                    fill
                } else {
                    bilinear(src, s, sx.clamp(0.0, last), sy.clamp(0.0, last))
                };
            }
        }
    }
    Tensor::new(shape, out)
}

fn border_mean(plane: &[f64], s: usize) -> f64 {
    if s == 1 {
        return plane[0];
    }
    let mut sum = 0.0;
    for i in 0..s {
        sum += plane[i] + plane[(s - 1) * s + i];
    }
    for i in 1..s - 1 {
        sum += plane[i * s] + plane[i * s + s - 1];
    }
    sum / (4 * s - 4) as f64
}

fn bilinear(plane: &[f64], s: usize, x: f64, y: f64) -> f64 {
    if s == 1 {
        return plane[0];
    }
    let x0 = (libm::floor(x) as usize).min(s - 2);
    let y0 = (libm::floor(y) as usize).min(s - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * s + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates each frame of `[T, C, S, S]` by its own angle drawn uniformly from
/// `[0, 2π)`.
pub fn augment_rotate<R: Rng + ?Sized>(frames: &Tensor, rng: &mut R) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(Error::Rank {
            op: "augment_rotate",
            expected: 4,
            shape: shape.to_vec(),
        });
    }
    let rotated = (0..shape[0])
        .map(|t| rotate_frame(&frames.index_axis0(t), rng.random_range(0.0..TAU)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rotated)
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per channel over every pixel of
    /// every frame of the `[T,C,H,W]` training tensors.
    pub fn fit(series: &[&Tensor]) -> Result<Self> {
        let Some(first) = series.first() else {
            return Err(Error::Empty("normalizer fit"));
        };
        let channels = match first.shape() {
            [_, c, _, _] => *c,
            other => {
                return Err(Error::Rank {
                    op: "normalizer fit",
                    expected: 4,
                    shape: other.to_vec(),
                })
            }
        };
        let mut counts = vec![0usize; channels];
        let mut sums = vec![0.0; channels];
        for t in series {
            let shape = t.shape();
            if shape.len() != 4 || shape[1] != channels {
                return Err(Error::ShapeMismatch {
                    op: "normalizer fit",
                    lhs: first.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            let plane = shape[2] * shape[3];
            if plane == 0 {
                continue;
            }
            for (i, chunk) in t.data().chunks(plane).enumerate() {
                sums[i % channels] += chunk.iter().sum::<f64>();
                counts[i % channels] += plane;
            }
        }
        if counts.contains(&0) {
            return Err(Error::Empty("normalizer fit"));
        }
        let mean: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; channels];
        for t in series {
            let plane = t.shape()[2] * t.shape()[3];
            if plane == 0 {
                continue;
            }
            for (i, chunk) in t.data().chunks(plane).enumerate() {
                let m = mean[i % channels];
                sq[i % channels] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().zip(&counts).map(|(s, &n)| libm::sqrt(s / n as f64)).collect();
        if let Some(c) = std.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "channel {c} has zero or non-finite spread and cannot be standardized"
            )));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(x − μ_c) / σ_c` for `[C,H,W]` or `[T,C,H,W]`.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let shape = t.shape();
        let c_axis = match shape.len() {
            3 => 0,
            4 => 1,
            _ => {
                return Err(Error::Rank {
                    op: "normalize",
                    expected: 4,
                    shape: shape.to_vec(),
                })
            }
        };
        if shape[c_axis] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: shape.to_vec(),
                rhs: alloc::vec![self.channels()],
            });
        }
        let plane = shape[c_axis + 1] * shape[c_axis + 2];
        let mut out = t.clone();
        if plane > 0 {
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let c = i % self.channels();
                let (m, s) = (self.mean[c], self.std[c]);
                for v in chunk {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(out)
    }
}

/// Series ids assigned to training and validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
}

impl DatasetSplit {
    /// FNV-1a over both id lists, for reproducibility audits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for id in &self.train {
            feed(&id.to_le_bytes());
        }
        feed(b"|");
        for id in &self.validation {
            feed(&id.to_le_bytes());
        }
        h
    }
}

/// Seeded random partition holding out `max(1, ⌊n·fraction⌋)` series for
/// validation. Both lists come back sorted.
pub fn split_dataset(ids: &[u64], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = ids.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "at least two series are needed for a train/validation split".into(),
        ));
    }
    let n_val = (libm::floor(n as f64 * fraction) as usize).clamp(1, n - 1);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut validation = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(DatasetSplit { train, validation })
}
