//! Procedural paired scenes.
//!
//! A [`WorldGrid`] is a 16×16 map of terrain tokens. The overhead render paints
//! each cell as an 8×8 block; the ground render looks east from the tile center
//! along the center row, so the ground view depends on nothing but the cells
//! `(CENTER_ROW, CENTER_COL..16)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    normalize_value, GroundImage, LandCover, OverheadImage, PairedSample, Seed, CHANNELS,
    GROUND_SIDE, OVERHEAD_SIDE,
};

pub const GRID: usize = 16;
pub const CELL_PX: usize = OVERHEAD_SIDE / GRID;
pub const CENTER_ROW: usize = GRID / 2;
pub const CENTER_COL: usize = GRID / 2;
/// Number of center-row cells visible from the viewpoint.
pub const VIEW_CELLS: usize = GRID - CENTER_COL;
pub const NOISE_AMPLITUDE: f32 = 0.05;
/// First ground-image row below the sky.
pub const HORIZON_ROW: usize = GROUND_SIDE / 3;

pub const URBAN_MIN_BUILT: f64 = 0.35;
pub const RURAL_MAX_BUILT: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terrain {
    Grass,
    Tree,
    Road,
    House,
    Water,
}

impl Terrain {
    pub const ALL: [Terrain; 5] = [
        Terrain::Grass,
        Terrain::Tree,
        Terrain::Road,
        Terrain::House,
        Terrain::Water,
    ];

    pub fn is_built(self) -> bool {
        matches!(self, Terrain::Road | Terrain::House)
    }

    pub fn palette_bytes(self) -> [u8; 3] {
        match self {
            Terrain::Grass => [86, 150, 64],
            Terrain::Tree => [34, 96, 44],
            Terrain::Road => [120, 120, 124],
            Terrain::House => [184, 82, 62],
            Terrain::Water => [52, 104, 178],
        }
    }

    pub fn color(self) -> [f32; 3] {
        self.palette_bytes().map(normalize_value)
    }
}

pub const SKY_BYTES: [u8; 3] = [160, 200, 236];

pub fn sky_color() -> [f32; 3] {
    SKY_BYTES.map(normalize_value)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldGrid {
    pub cells: [[Terrain; GRID]; GRID],
    pub klass: LandCover,
    pub seed: Seed,
}

impl WorldGrid {
    pub fn uniform(terrain: Terrain, klass: LandCover, seed: Seed) -> Self {
        Self {
            cells: [[terrain; GRID]; GRID],
            klass,
            seed,
        }
    }

    pub fn built_fraction(&self) -> f64 {
        let built = self.cells.iter().flatten().filter(|t| t.is_built()).count();
        built as f64 / (GRID * GRID) as f64
    }

    /// The cells seen from the viewpoint, nearest first.
    pub fn view_row(&self) -> [Terrain; VIEW_CELLS] {
        let mut out = [Terrain::Grass; VIEW_CELLS];
        out.copy_from_slice(&self.cells[CENTER_ROW][CENTER_COL..]);
        out
    }
}

pub fn make_world(seed: Seed, target: LandCover) -> WorldGrid {
    let mut rng = seed.derive(0x5CE7E).rng();
    let mut world = WorldGrid::uniform(Terrain::Grass, target, seed);
    match target {
        LandCover::Rural => fill_rural(&mut world.cells, &mut rng),
        LandCover::Urban => fill_urban(&mut world.cells, &mut rng),
    }
    debug_assert!(match target {
        LandCover::Rural => world.built_fraction() <= RURAL_MAX_BUILT,
        LandCover::Urban => world.built_fraction() >= URBAN_MIN_BUILT,
    });
    world
}

type Cells = [[Terrain; GRID]; GRID];

fn grow_blob(cells: &mut Cells, rng: &mut impl Rng, terrain: Terrain, steps: usize) {
    let mut r = rng.random_range(0..GRID) as i64;
    let mut c = rng.random_range(0..GRID) as i64;
    for _ in 0..steps {
        cells[r as usize][c as usize] = terrain;
        match rng.random_range(0..4) {
            0 => r += 1,
            1 => r -= 1,
            2 => c += 1,
            _ => c -= 1,
        }
        r = r.clamp(0, GRID as i64 - 1);
        c = c.clamp(0, GRID as i64 - 1);
    }
}

fn fill_rural(cells: &mut Cells, rng: &mut impl Rng) {
    for _ in 0..rng.random_range(2..6) {
        let steps = rng.random_range(8..40);
        grow_blob(cells, rng, Terrain::Tree, steps);
    }
    if rng.random_bool(0.5) {
        let steps = rng.random_range(6..24);
        grow_blob(cells, rng, Terrain::Water, steps);
    }
    if rng.random_bool(0.6) {
        // A single country lane, kept off the center row and away from the
        // two nearest view cells.
        if rng.random_bool(0.5) {
            let row = loop {
                let r = rng.random_range(1..GRID - 1);
                if r != CENTER_ROW {
                    break r;
                }
            };
            for c in 0..GRID {
                cells[row][c] = Terrain::Road;
            }
            for _ in 0..rng.random_range(0..4) {
                let c = rng.random_range(0..GRID);
                let r = if rng.random_bool(0.5) {
                    row - 1
                } else {
                    row + 1
                };
                if r != CENTER_ROW {
                    cells[r][c] = Terrain::House;
                }
            }
        } else {
            let col = loop {
                let c = rng.random_range(1..GRID - 1);
                if c != CENTER_COL && c != CENTER_COL + 1 {
                    break c;
                }
            };
            for row in cells.iter_mut() {
                row[col] = Terrain::Road;
            }
            for _ in 0..rng.random_range(0..4) {
                let r = rng.random_range(0..GRID);
                let c = if rng.random_bool(0.5) {
                    col - 1
                } else {
                    col + 1
                };
                if r != CENTER_ROW {
                    cells[r][c] = Terrain::House;
                }
            }
        }
    }
}

fn fill_urban(cells: &mut Cells, rng: &mut impl Rng) {
    let spacing = rng.random_range(3..6);
    let row_offset = rng.random_range(0..spacing);
    let col_offset = rng.random_range(0..spacing);
    let house_p = rng.random_range(0.55..0.9);
    for (r, row) in cells.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = if r % spacing == row_offset || c % spacing == col_offset {
                Terrain::Road
            } else if rng.random_bool(house_p) {
                Terrain::House
            } else if rng.random_bool(0.5) {
                Terrain::Tree
            } else {
                Terrain::Grass
            };
        }
    }
    if rng.random_bool(0.3) {
        let steps = rng.random_range(4..12);
        grow_blob(cells, rng, Terrain::Tree, steps);
    }
    // Street frontage along the view: built everywhere except at most two
    // far cells.
    for c in CENTER_COL..GRID {
        if !cells[CENTER_ROW][c].is_built() {
            cells[CENTER_ROW][c] = if rng.random_bool(0.5) {
                Terrain::House
            } else {
                Terrain::Road
            };
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let c = rng.random_range(CENTER_COL + 2..GRID);
        cells[CENTER_ROW][c] = if rng.random_bool(0.5) {
            Terrain::Tree
        } else {
            Terrain::Grass
        };
    }
    let mut open: Vec<(usize, usize)> = (0..GRID * GRID)
        .map(|i| (i / GRID, i % GRID))
        .filter(|&(r, c)| !cells[r][c].is_built())
        .collect();
    open.shuffle(rng);
    let need = (URBAN_MIN_BUILT * (GRID * GRID) as f64).ceil() as usize;
    let mut built = GRID * GRID - open.len();
    while built < need {
        let (r, c) = open.pop().expect("grid has open cells while under-built");
        if r == CENTER_ROW && c >= CENTER_COL {
            continue;
        }
        cells[r][c] = Terrain::House;
        built += 1;
    }
}

fn noise(rng: &mut impl Rng) -> f32 {
    rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)
}

fn paint(px: &mut [f32], color: [f32; 3], rng: &mut impl Rng) {
    for (ch, v) in px.iter_mut().enumerate() {
        *v = (color[ch] + noise(rng)).clamp(-1.0, 1.0);
    }
}

pub fn render_overhead(world: &WorldGrid) -> OverheadImage {
    let mut rng = world.seed.derive(0x0E7).rng();
    let mut pixels = vec![0f32; OverheadImage::LEN];
    for y in 0..OVERHEAD_SIDE {
        for x in 0..OVERHEAD_SIDE {
            let color = world.cells[y / CELL_PX][x / CELL_PX].color();
            let i = (y * OVERHEAD_SIDE + x) * CHANNELS;
            paint(&mut pixels[i..i + CHANNELS], color, &mut rng);
        }
    }
    OverheadImage::new(pixels).expect("rendered overhead is in range")
}

/// Ground rows `[start, end)` of each view band, nearest cell first.
/// Band heights fall off as `1 / (distance + 1)`.
pub fn band_rows() -> [(usize, usize); VIEW_CELLS] {
    let depth = GROUND_SIDE - HORIZON_ROW;
    let weights: Vec<f64> = (0..VIEW_CELLS).map(|d| 1.0 / (d as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut bands = [(0, 0); VIEW_CELLS];
    let mut cum = 0.0;
    let mut lower = GROUND_SIDE;
    for (d, w) in weights.iter().enumerate() {
        cum += w;
        let upper = GROUND_SIDE - (depth as f64 * cum / total).round() as usize;
        bands[d] = (upper, lower);
        lower = upper;
    }
    bands
}

pub fn render_ground(world: &WorldGrid) -> GroundImage {
    let mut rng = world.seed.derive(0x6D).rng();
    let view = world.view_row();
    let mut row_color = [sky_color(); GROUND_SIDE];
    for (d, (start, end)) in band_rows().into_iter().enumerate() {
        for color in &mut row_color[start..end] {
            *color = view[d].color();
        }
    }
    let mut pixels = vec![0f32; GroundImage::LEN];
    for (y, color) in row_color.iter().enumerate() {
        for x in 0..GROUND_SIDE {
            let i = (y * GROUND_SIDE + x) * CHANNELS;
            paint(&mut pixels[i..i + CHANNELS], *color, &mut rng);
        }
    }
    GroundImage::new(pixels).expect("rendered ground is in range")
}

pub fn make_sample(seed: Seed, index: usize, klass: LandCover) -> PairedSample {
    let world = make_world(seed.derive(index as u64), klass);
    PairedSample {
        overhead: render_overhead(&world),
        ground: render_ground(&world),
        location_id: format!("syn-{index:06}"),
        label: Some(klass),
    }
}

/// The class schedule of [`make_dataset`]: exactly `round(n * balance)` urban
/// slots, placed by a seeded shuffle.
pub fn dataset_labels(seed: Seed, n: usize, class_balance: f64) -> Result<Vec<LandCover>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "a dataset needs at least 2 samples, got {n}"
        )));
    }
    if !(class_balance > 0.0 && class_balance < 1.0) {
        return Err(Error::InvalidInput(format!(
            "class balance must lie strictly between 0 and 1, got {class_balance}"
        )));
    }
    let n_urban = (n as f64 * class_balance).round() as usize;
    let mut labels: Vec<LandCover> = (0..n)
        .map(|i| {
            if i < n_urban {
                LandCover::Urban
            } else {
                LandCover::Rural
            }
        })
        .collect();
    labels.shuffle(&mut seed.derive(0xDA7A).rng());
    Ok(labels)
}

pub fn make_dataset(seed: Seed, n: usize, class_balance: f64) -> Result<Vec<PairedSample>> {
    let labels = dataset_labels(seed, n, class_balance)?;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, klass)| make_sample(seed, i, klass))
        .collect())
}

/// Recovers the land-cover class by counting pixels within 0.1 (per channel)
/// of the road or house palette colors.
pub fn label_from_overhead(img: &OverheadImage) -> Option<LandCover> {
    let built = [Terrain::Road.color(), Terrain::House.color()];
    let hits = img
        .pixels()
        .chunks_exact(CHANNELS)
        .filter(|px| {
            built
                .iter()
                .any(|c| (0..CHANNELS).all(|ch| (px[ch] - c[ch]).abs() <= 0.1))
        })
        .count();
    let frac = hits as f64 / (OVERHEAD_SIDE * OVERHEAD_SIDE) as f64;
    if frac >= URBAN_MIN_BUILT {
        Some(LandCover::Urban)
    } else if frac <= RURAL_MAX_BUILT {
        Some(LandCover::Rural)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn palette_colors_are_well_separated() {
        let mut colors: Vec<[f32; 3]> = Terrain::ALL.iter().map(|t| t.color()).collect();
        colors.push(sky_color());
        for (i, a) in colors.iter().enumerate() {
            for b in &colors[i + 1..] {
                let d = (0..3).map(|c| (a[c] - b[c]).abs()).fold(0f32, f32::max);
                assert!(d > 0.3, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn make_world_is_deterministic() {
        assert_eq!(
            make_world(Seed(7), LandCover::Urban),
            make_world(Seed(7), LandCover::Urban)
        );
        assert_ne!(
            make_world(Seed(7), LandCover::Urban).cells,
            make_world(Seed(8), LandCover::Urban).cells
        );
    }

    #[test]
    fn class_fractions_hold_over_many_seeds() {
        for s in 0..500 {
            let r = make_world(Seed(s), LandCover::Rural);
            assert!(r.built_fraction() <= RURAL_MAX_BUILT, "seed {s}");
            let u = make_world(Seed(s), LandCover::Urban);
            assert!(u.built_fraction() >= URBAN_MIN_BUILT, "seed {s}");
        }
        assert!(make_world(Seed(7), LandCover::Rural).built_fraction() <= 0.15);
    }

    #[test]
    fn view_rows_separate_classes() {
        for s in 0..300 {
            let r = make_world(Seed(s), LandCover::Rural).view_row();
            assert!(r.iter().filter(|t| t.is_built()).count() <= 1);
            assert!(!r[0].is_built() && !r[1].is_built());
            let u = make_world(Seed(s), LandCover::Urban).view_row();
            assert!(u.iter().filter(|t| t.is_built()).count() >= VIEW_CELLS - 2);
            assert!(u[0].is_built() && u[1].is_built());
        }
    }

    #[test]
    fn urban_worlds_rarely_collide() {
        let grids: HashSet<_> = (0..1000)
            .map(|s| make_world(Seed(s), LandCover::Urban).cells)
            .collect();
        let duplicates = 1000 - grids.len();
        assert!(duplicates <= 1, "{duplicates} duplicate grids");
    }

    #[test]
    fn all_grass_overhead_mean_matches_palette() {
        let world = WorldGrid::uniform(Terrain::Grass, LandCover::Rural, Seed(3));
        let img = render_overhead(&world);
        let mean = img.mean_rgb();
        let grass = Terrain::Grass.color();
        for c in 0..3 {
            assert!((mean[c] - f64::from(grass[c])).abs() <= 0.05);
        }
        assert!(img
            .pixels()
            .chunks_exact(3)
            .all(|px| (0..3).all(|c| (px[c] - grass[c]).abs() <= NOISE_AMPLITUDE + 1e-6)));
    }

    #[test]
    fn renders_are_deterministic() {
        let world = make_world(Seed(11), LandCover::Urban);
        assert_eq!(render_overhead(&world), render_overhead(&world));
        assert_eq!(render_ground(&world), render_ground(&world));
    }

    #[test]
    fn urban_overhead_has_enough_built_pixels() {
        let built = [Terrain::Road.color(), Terrain::House.color()];
        for s in 0..20 {
            let img = render_overhead(&make_world(Seed(s), LandCover::Urban));
            let mut hits = 0usize;
            for y in 0..OVERHEAD_SIDE {
                for x in 0..OVERHEAD_SIDE {
                    let px = img.rgb(y, x);
                    if built
                        .iter()
                        .any(|c| (0..3).all(|ch| (px[ch] - c[ch]).abs() <= 0.1))
                    {
                        hits += 1;
                    }
                }
            }
            assert!(hits as f64 >= 0.35 * (OVERHEAD_SIDE * OVERHEAD_SIDE) as f64);
        }
    }

    #[test]
    fn all_grass_ground_is_sky_over_grass() {
        let world = WorldGrid::uniform(Terrain::Grass, LandCover::Rural, Seed(5));
        let img = render_ground(&world);
        let (grass, sky) = (Terrain::Grass.color(), sky_color());
        for y in 0..GROUND_SIDE {
            let expect = if y < HORIZON_ROW { sky } else { grass };
            for x in 0..GROUND_SIDE {
                let px = img.rgb(y, x);
                for c in 0..3 {
                    assert!((px[c] - expect[c]).abs() <= NOISE_AMPLITUDE + 1e-6);
                }
            }
        }
    }

    #[test]
    fn ground_ignores_cells_off_the_center_row() {
        let world = make_world(Seed(21), LandCover::Urban);
        let mut other = world.clone();
        other.cells[0][0] = Terrain::Water;
        other.cells[GRID - 1][0] = Terrain::Water;
        other.cells[CENTER_ROW - 1][CENTER_COL] = Terrain::Water;
        assert_eq!(render_ground(&world), render_ground(&other));
        assert_ne!(render_overhead(&world), render_overhead(&other));
    }

    #[test]
    fn bands_tile_the_ground_region() {
        let bands = band_rows();
        assert_eq!(bands[0].1, GROUND_SIDE);
        assert_eq!(bands[VIEW_CELLS - 1].0, HORIZON_ROW);
        for w in bands.windows(2) {
            assert_eq!(w[0].0, w[1].1);
        }
        for (d, &(s, e)) in bands.iter().enumerate() {
            assert!(e > s, "band {d} empty");
            if d > 0 {
                assert!(e - s <= bands[d - 1].1 - bands[d - 1].0);
            }
        }
    }

    #[test]
    fn dataset_balance_and_determinism() {
        let a = make_dataset(Seed(1), 100, 0.5).unwrap();
        let urban = a
            .iter()
            .filter(|s| s.label == Some(LandCover::Urban))
            .count();
        assert_eq!(urban, 50);
        let b = make_dataset(Seed(1), 100, 0.5).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|s| s.location_id.clone()).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn dataset_rejects_bad_arguments() {
        assert!(make_dataset(Seed(1), 1, 0.5).is_err());
        assert!(make_dataset(Seed(1), 10, 0.0).is_err());
        assert!(make_dataset(Seed(1), 10, 1.0).is_err());
    }

    #[test]
    fn labels_recoverable_from_pixels() {
        for s in make_dataset(Seed(9), 200, 0.4).unwrap() {
            assert_eq!(label_from_overhead(&s.overhead), s.label);
        }
    }

    #[test]
    fn per_sample_generation_matches_serial() {
        let serial = make_dataset(Seed(4), 12, 0.5).unwrap();
        let labels = dataset_labels(Seed(4), 12, 0.5).unwrap();
        for i in (0..12).rev() {
            assert_eq!(make_sample(Seed(4), i, labels[i]), serial[i]);
        }
    }
}
