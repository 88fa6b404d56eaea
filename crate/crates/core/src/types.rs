//! Image values, paired samples and seeding shared by every module.
//!
//! In-model images hold real values in `[-1, 1]` (the generator ends in
//! `tanh`). Byte images only appear at I/O boundaries, converted through
//! [`normalize`] and [`denormalize`]. Interchange layout is row-major
//! height × width × channel.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OVERHEAD_SIDE: usize = 128;
pub const GROUND_SIDE: usize = 64;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Seed for the `index`-th independent sub-stream (`seed ⊕ mix(index)`).
    pub fn derive(self, index: u64) -> Seed {
        // splitmix64 finalizer so neighbouring indices decorrelate.
        let mut z = index.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Seed(self.0 ^ z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandCover {
    Rural,
    Urban,
}

impl LandCover {
    pub const ALL: [LandCover; 2] = [LandCover::Rural, LandCover::Urban];

    pub fn index(self) -> usize {
        match self {
            LandCover::Rural => 0,
            LandCover::Urban => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(LandCover::Rural),
            1 => Some(LandCover::Urban),
            _ => None,
        }
    }
}

impl fmt::Display for LandCover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LandCover::Rural => "rural",
            LandCover::Urban => "urban",
        })
    }
}

/// Maps a byte value to `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_value(v: u8) -> f32 {
    (f64::from(v) / 127.5 - 1.0) as f32
}

/// Inverse of [`normalize_value`] up to quantization; out-of-range inputs clamp.
pub fn denormalize_value(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((f64::from(v) + 1.0) * 127.5).round() as u8
}

/// Normalizes an `h × w × 3` integer image. Values outside `[0, 255]` are
/// rejected with the coordinate of the first offender.
pub fn normalize(raw: &[i64], h: usize, w: usize) -> Result<Vec<f32>> {
    if raw.len() != h * w * CHANNELS {
        return Err(Error::InvalidInput(format!(
            "raw buffer has {} values, expected {}",
            raw.len(),
            h * w * CHANNELS
        )));
    }
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            if (0..=255).contains(&v) {
                Ok(normalize_value(v as u8))
            } else {
                Err(Error::PixelOutOfRange {
                    row: i / (w * CHANNELS),
                    col: (i / CHANNELS) % w,
                    channel: i % CHANNELS,
                    value: v,
                })
            }
        })
        .collect()
}

pub fn normalize_bytes(raw: &[u8]) -> Vec<f32> {
    raw.iter().copied().map(normalize_value).collect()
}

pub fn denormalize(t: &[f32]) -> Vec<u8> {
    t.iter().copied().map(denormalize_value).collect()
}

/// A square RGB image of side `SIDE` with values in `[-1, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image<const SIDE: usize> {
    pixels: Vec<f32>,
}

pub type OverheadImage = Image<OVERHEAD_SIDE>;
pub type GroundImage = Image<GROUND_SIDE>;

impl<const SIDE: usize> Image<SIDE> {
    pub const SIDE: usize = SIDE;
    pub const LEN: usize = SIDE * SIDE * CHANNELS;

    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != Self::LEN {
            return Err(Error::ImageShape {
                expected_h: SIDE,
                expected_w: SIDE,
                h: pixels.len() / (SIDE * CHANNELS),
                w: SIDE,
                c: CHANNELS,
            });
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::ImageValue { index });
        }
        Ok(Self { pixels })
    }

    /// Builds an image from values that may slightly overshoot `[-1, 1]`.
    pub fn from_clamped(mut pixels: Vec<f32>) -> Result<Self> {
        for v in &mut pixels {
            if v.is_finite() {
                *v = v.clamp(-1.0, 1.0);
            }
        }
        Self::new(pixels)
    }

    pub fn filled(rgb: [f32; 3]) -> Result<Self> {
        Self::new(rgb.iter().copied().cycle().take(Self::LEN).collect())
    }

    pub fn from_bytes(bytes: &[u8], h: usize, w: usize) -> Result<Self> {
        if h != SIDE || w != SIDE || bytes.len() != h * w * CHANNELS {
            return Err(Error::ImageShape {
                expected_h: SIDE,
                expected_w: SIDE,
                h,
                w,
                c: bytes.len() / (h * w).max(1),
            });
        }
        Self::new(normalize_bytes(bytes))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        denormalize(&self.pixels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * SIDE + col) * CHANNELS + channel]
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * SIDE + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0f64; 3];
        for px in self.pixels.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (SIDE * SIDE) as f64;
        acc.map(|v| v / n)
    }
}

impl<const SIDE: usize> fmt::Debug for Image<SIDE> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mean_rgb();
        write!(
            f,
            "Image<{SIDE}x{SIDE}x3>(mean=[{:.3}, {:.3}, {:.3}])",
            m[0], m[1], m[2]
        )
    }
}

/// One co-located overhead/ground pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub overhead: OverheadImage,
    pub ground: GroundImage,
    pub location_id: String,
    pub label: Option<LandCover>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(255), 1.0);
        let v = normalize_value(127);
        assert!((f64::from(v) - (127.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((f64::from(v) + 0.003_921_568_6).abs() < 1e-7);
    }

    #[test]
    fn denormalize_endpoints_and_clamp() {
        assert_eq!(denormalize_value(-1.0), 0);
        assert_eq!(denormalize_value(1.0), 255);
        assert_eq!(denormalize_value(3.0), 255);
        assert_eq!(denormalize_value(-7.5), 0);
    }

    #[test]
    fn byte_roundtrip_is_exact_for_all_values() {
        for b in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(b)), b);
        }
    }

    #[test]
    fn normalize_is_strictly_monotonic() {
        for b in 0..255u8 {
            assert!(normalize_value(b) < normalize_value(b + 1));
        }
    }

    #[test]
    fn normalize_rejects_with_coordinate() {
        let mut raw = vec![0i64; 2 * 3 * 3];
        raw[(3 + 2) * 3 + 1] = 256;
        match normalize(&raw, 2, 3) {
            Err(Error::PixelOutOfRange {
                row: 1,
                col: 2,
                channel: 1,
                value: 256,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        raw[(3 + 2) * 3 + 1] = -1;
        assert!(normalize(&raw, 2, 3).is_err());
    }

    #[test]
    fn image_rejects_wrong_shape_and_values() {
        assert!(GroundImage::new(vec![0.0; 10]).is_err());
        let mut px = vec![0.0; GroundImage::LEN];
        px[5] = 1.5;
        assert!(matches!(
            GroundImage::new(px.clone()),
            Err(Error::ImageValue { index: 5 })
        ));
        px[5] = f32::NAN;
        assert!(GroundImage::new(px).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s = Seed(42);
        assert_ne!(s.derive(0), s.derive(1));
        assert_eq!(s.derive(3), s.derive(3));
    }
}
