//! Browser bindings: render synthetic scene pairs, inspect the grayscale
//! patch baseline, and compute inception scores from class posteriors.

use groundview::evaluation::{
    grayscale_patch_features, inception_score_from_predictions, PATCH_SIDE, PATCH_START,
};
use groundview::scene::make_sample;
use groundview::types::{Image, LandCover, PairedSample, Seed};
use wasm_bindgen::prelude::*;

fn sample(seed: u64, index: u32, urban: bool) -> PairedSample {
    let klass = if urban {
        LandCover::Urban
    } else {
        LandCover::Rural
    };
    make_sample(Seed(seed), index as usize, klass)
}

fn rgba<const SIDE: usize>(img: &Image<SIDE>) -> Vec<u8> {
    img.to_bytes()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// RGBA bytes of a 128×128 overhead tile with the baseline patch outlined.
pub fn overhead_pixels(seed: u64, index: u32, urban: bool, outline: bool) -> Vec<u8> {
    let mut px = rgba(&sample(seed, index, urban).overhead);
    if outline {
        let side = groundview::types::OVERHEAD_SIDE;
        let (lo, hi) = (PATCH_START - 1, PATCH_START + PATCH_SIDE);
        for r in lo..=hi {
            for c in lo..=hi {
                if r == lo || r == hi || c == lo || c == hi {
                    px[(r * side + c) * 4..][..3].copy_from_slice(&[255, 0, 255]);
                }
            }
        }
    }
    px
}

/// RGBA bytes of the matching 64×64 ground-level view.
pub fn ground_pixels(seed: u64, index: u32, urban: bool) -> Vec<u8> {
    rgba(&sample(seed, index, urban).ground)
}

/// The 100 luma values of the centered patch, row-major.
pub fn patch_values(seed: u64, index: u32, urban: bool) -> Vec<f64> {
    grayscale_patch_features(&sample(seed, index, urban).overhead)
}

/// Parses rows of whitespace- or comma-separated probabilities and returns
/// `[mean, std]` of the inception score.
pub fn score_text(text: &str, splits: usize, seed: u64) -> Result<Vec<f64>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no rows".into());
    }
    let r =
        inception_score_from_predictions(&rows, splits, Seed(seed)).map_err(|e| e.to_string())?;
    Ok(vec![r.inception_score_mean, r.inception_score_std])
}

#[wasm_bindgen(js_name = overheadPixels)]
pub fn overhead_pixels_js(seed: u64, index: u32, urban: bool, outline: bool) -> Vec<u8> {
    overhead_pixels(seed, index, urban, outline)
}

#[wasm_bindgen(js_name = groundPixels)]
pub fn ground_pixels_js(seed: u64, index: u32, urban: bool) -> Vec<u8> {
    ground_pixels(seed, index, urban)
}

#[wasm_bindgen(js_name = patchValues)]
pub fn patch_values_js(seed: u64, index: u32, urban: bool) -> Vec<f64> {
    patch_values(seed, index, urban)
}

#[wasm_bindgen(js_name = inceptionScore)]
pub fn inception_score_js(text: &str, splits: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    score_text(text, splits, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_buffers_have_rgba_sizes() {
        assert_eq!(overhead_pixels(1, 0, true, false).len(), 128 * 128 * 4);
        assert_eq!(ground_pixels(1, 0, false).len(), 64 * 64 * 4);
        let plain = overhead_pixels(1, 0, true, false);
        let framed = overhead_pixels(1, 0, true, true);
        assert_ne!(plain, framed);
        let corner = ((PATCH_START - 1) * 128 + PATCH_START - 1) * 4;
        assert_eq!(framed[corner..corner + 4], [255, 0, 255, 255]);
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(ground_pixels(5, 3, true), ground_pixels(5, 3, true));
        assert_ne!(ground_pixels(5, 3, true), ground_pixels(5, 3, false));
    }

    #[test]
    fn patch_has_one_hundred_values() {
        let v = patch_values(2, 1, false);
        assert_eq!(v.len(), 100);
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn score_text_parses_rows() {
        let r = score_text("0.9, 0.1\n0.1 0.9\n", 1, 0).unwrap();
        assert!((r[0] - 1.44500).abs() < 1e-4);
        assert_eq!(r[1], 0.0);
        assert!(score_text("0.5 0.5\nx y", 1, 0)
            .unwrap_err()
            .contains("line 2"));
        assert!(score_text("0.7 0.7", 1, 0).is_err());
        assert!(score_text("", 1, 0).is_err());
    }
}
