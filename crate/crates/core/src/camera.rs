//! Deterministic synthetic camera frames.
//!
//! Pixel `(y, x, c)` is `(3x + 5y + 64c + index) mod 256`, except that the
//! red channel of the first four pixels holds the frame index as a
//! little-endian `u32` so frames are byte-decodable.

use alloc::vec::Vec;

use crate::time::Timestamp;

pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 64;
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraFrame {
    pub index: u32,
    pub ts: Timestamp,
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width x 3`.
    pub pixels: Vec<u8>,
}

/// Renders frame `index` at the given size. A pure function of its inputs.
pub fn render(index: u32, height: usize, width: usize) -> Vec<u8> {
    let mut px = Vec::with_capacity(height * width * CHANNELS);
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                px.push(((3 * x + 5 * y + 64 * c) as u32).wrapping_add(index) as u8);
            }
        }
    }
    for (i, b) in index.to_le_bytes().iter().enumerate() {
        if let Some(p) = px.get_mut(i * CHANNELS) {
            *p = *b;
        }
    }
    px
}

pub fn camera_frame(index: u32, ts: Timestamp, height: usize, width: usize) -> CameraFrame {
    CameraFrame {
        index,
        ts,
        height,
        width,
        pixels: render(index, height, width),
    }
}

/// Recovers the frame index from the first four pixels.
pub fn decode_index(pixels: &[u8]) -> Option<u32> {
    if pixels.len() < 4 * CHANNELS {
        return None;
    }
    let b = [pixels[0], pixels[CHANNELS], pixels[2 * CHANNELS], pixels[3 * CHANNELS]];
    Some(u32::from_le_bytes(b))
}
