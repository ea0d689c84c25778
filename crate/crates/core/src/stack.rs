//! Field-stack files.
//!
//! Layout: the 8-byte magic `RFSTACK1`, a little-endian `u32` byte length,
//! a UTF-8 JSON header of that length, then `frames × channels × height ×
//! width` 32-bit little-endian IEEE-754 floats, row-major and frame-major.
//! Single-channel stacks omit `channels` from the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldSequence, STEP_MINUTES};

pub const STACK_MAGIC: &[u8; 8] = b"RFSTACK1";

pub const UNITS_RAIN: &str = "mm/h";
pub const UNITS_DBZ: &str = "dBZ";
pub const UNITS_MOTION: &str = "px/step";
pub const UNITS_SOURCE: &str = "mm/h/step";

fn is_one(c: &usize) -> bool {
    *c == 1
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dx_km: f64,
    pub step_minutes: u32,
    pub units: String,
    pub t0_index: i64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub channels: usize,
}

impl StackHeader {
    pub fn values_per_frame(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Raw decoded stack: header plus the flat payload.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    pub header: StackHeader,
    pub data: Vec<f32>,
}

impl FieldStack {
    pub fn new(header: StackHeader, data: Vec<f32>) -> Result<Self> {
        let expected = header.frames * header.values_per_frame();
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "header declares {expected} values, payload has {}",
                data.len()
            )));
        }
        Ok(FieldStack { header, data })
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.header.values_per_frame();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.data.len());
        out.extend_from_slice(STACK_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != STACK_MAGIC {
            return Err(Error::BadMagic {
                expected: "RFSTACK1",
            });
        }
        let len_bytes = bytes
            .get(8..12)
            .ok_or_else(|| Error::MalformedHeader("missing header length".into()))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| {
            Error::MalformedHeader(format!(
                "header length {len} exceeds file size {}",
                bytes.len()
            ))
        })?;
        let header: StackHeader =
            serde_json::from_slice(json).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.channels == 0 {
            return Err(Error::MalformedHeader("zero channels".into()));
        }
        let count = header
            .frames
            .checked_mul(header.values_per_frame())
            .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
        let payload = &bytes[12 + len..];
        let expected = count * 4;
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::DimensionMismatch(format!(
                "header declares {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FieldStack { header, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl From<&FieldSequence> for FieldStack {
    fn from(seq: &FieldSequence) -> Self {
        let (height, width) = seq.geometry().unwrap_or((0, 0));
        let dx_km = seq.fields().first().map_or(1.0, |f| f.dx_km);
        let mut data = Vec::with_capacity(seq.len() * height * width);
        for f in seq.fields() {
            data.extend_from_slice(f.values());
        }
        FieldStack {
            header: StackHeader {
                frames: seq.len(),
                height,
                width,
                dx_km,
                step_minutes: seq.step_minutes,
                units: UNITS_RAIN.into(),
                t0_index: seq.t0(),
                channels: 1,
            },
            data,
        }
    }
}

impl TryFrom<FieldStack> for FieldSequence {
    type Error = Error;

    fn try_from(stack: FieldStack) -> Result<Self> {
        let h = &stack.header;
        if h.units != UNITS_RAIN {
            return Err(Error::MalformedHeader(format!(
                "expected units {UNITS_RAIN}, found {}",
                h.units
            )));
        }
        if h.channels != 1 {
            return Err(Error::DimensionMismatch(format!(
                "rain stacks have one channel, found {}",
                h.channels
            )));
        }
        let n = h.height * h.width;
        let frames = stack.data.chunks(n.max(1)).map(<[f32]>::to_vec).collect();
        let frames = if h.frames == 0 { Vec::new() } else { frames };
        let mut seq = FieldSequence::from_frames(h.height, h.width, frames, h.dx_km, h.t0_index)?;
        seq.step_minutes = h.step_minutes;
        Ok(seq)
    }
}

pub fn write_stack(seq: &FieldSequence, path: impl AsRef<Path>) -> Result<()> {
    FieldStack::from(seq).write(path)
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<FieldSequence> {
    FieldSequence::try_from(FieldStack::read(path)?)
}

/// Stack of multi-channel frames with arbitrary units (motion, source-sink).
pub fn channel_stack(
    frames: &[Vec<f32>],
    channels: usize,
    height: usize,
    width: usize,
    units: &str,
    t0_index: i64,
) -> Result<FieldStack> {
    let mut data = Vec::with_capacity(frames.len() * channels * height * width);
    for f in frames {
        data.extend_from_slice(f);
    }
    FieldStack::new(
        StackHeader {
            frames: frames.len(),
            height,
            width,
            dx_km: 1.0,
            step_minutes: STEP_MINUTES,
            units: units.into(),
            t0_index,
            channels,
        },
        data,
    )
}
