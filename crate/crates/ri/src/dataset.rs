//! The `RITC` dataset file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "RITC"  u16 version  u32 series count  u16 channels  u32 frame size S
//! per series:
//!   u64 id  u32 T
//!   T × f64   intensity (kt)
//!   T × u8    label present (0/1)
//!   T × u8    label value (0/1, 0 where absent)
//!   T·C·S·S × f32 frames, row-major [T, C, S, S]
//! ```
//!
//! Frames are stored at single precision; the generator already rounds them,
//! so generated datasets round-trip bit-exactly.

use std::path::Path;

use ri_core::synth::TcSeries;
use ri_core::Tensor;

use crate::format::{FormatError, Reader, Writer};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"RITC";
pub const VERSION: u16 = 1;
const KIND: &str = "dataset";

fn invalid(detail: String) -> FormatError {
    FormatError::Invalid { kind: KIND, detail }
}

pub fn encode_dataset(series: &[TcSeries]) -> Result<Vec<u8>, FormatError> {
    let (channels, size) = match series.first().map(|s| s.frames.shape()) {
        Some(&[_, c, h, w]) if h == w => (c, h),
        Some(shape) => return Err(invalid(format!("frames must be [T, C, S, S], got {shape:?}"))),
        None => (0, 0),
    };
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u32(u32::try_from(series.len()).map_err(|_| invalid("too many series".into()))?);
    w.u16(channels as u16);
    w.u32(size as u32);
    for s in series {
        let t_len = s.len();
        if s.frames.shape() != [t_len, channels, size, size] || s.labels.len() != t_len {
            return Err(invalid(format!(
                "series {} has frames {:?}, {} intensities and {} labels; expected [{t_len}, {channels}, {size}, {size}]",
                s.id,
                s.frames.shape(),
                t_len,
                s.labels.len()
            )));
        }
        w.u64(s.id);
        w.u32(t_len as u32);
        for &v in &s.intensity {
            w.f64(v);
        }
        for l in &s.labels {
            w.u8(l.is_some() as u8);
        }
        for l in &s.labels {
            w.u8(l.unwrap_or(false) as u8);
        }
        for &v in s.frames.data() {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

fn flag(r: &Reader<'_>, b: u8, what: &str) -> Result<bool, FormatError> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(r.invalid(format!("{what} byte {b} is neither 0 nor 1"))),
    }
}

/// Parses a whole dataset; any defect rejects the file as a whole.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<TcSeries>, FormatError> {
    let mut r = Reader::new(KIND, bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32("series count")? as usize;
    let channels = r.u16("channel count")? as usize;
    let size = r.u32("frame size")? as usize;
    // smallest possible record: id and length
    r.expect(count, 12, "series records")?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64("series id")?;
        let t_len = r.u32("series length")? as usize;
        r.expect(t_len, 10, "intensity and label blocks")?;
        let intensity = (0..t_len).map(|_| r.f64("intensity")).collect::<Result<Vec<_>, _>>()?;
        let present = r.take(t_len, "label presence")?;
        let values = r.take(t_len, "label values")?;
        let mut labels = Vec::with_capacity(t_len);
        for (&p, &v) in present.iter().zip(values) {
            let value = flag(&r, v, "label")?;
            labels.push(if flag(&r, p, "label presence")? { Some(value) } else { None });
        }
        let n = t_len * channels * size * size;
        r.expect(n, 4, "frames")?;
        let frames = (0..n).map(|_| r.f32("frames").map(f64::from)).collect::<Result<Vec<_>, _>>()?;
        let frames = Tensor::new(&[t_len, channels, size, size], frames).map_err(|e| invalid(e.to_string()))?;
        out.push(TcSeries {
            id,
            frames,
            intensity,
            labels,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_dataset(path: &Path, series: &[TcSeries]) -> Result<(), Error> {
    let bytes = encode_dataset(series)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<TcSeries>, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}
