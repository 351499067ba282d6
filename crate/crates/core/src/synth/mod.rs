//! Procedural cross-view scenes.
//!
//! Every location owns a persistent layout of patch-aligned objects. The
//! gallery view renders that layout upright and adds its own distractors. The
//! query view jitters and rotates the layout by a right angle, adds
//! independent distractors, occluders and weather.
//!
//! Object patterns are symmetric under quarter turns, so a rotated object
//! covers exactly one cell and looks the same as the upright one.

mod featurize;
mod store;
mod weather;

pub use featurize::{FeatureMap, Featurizer, FEATURIZER_SEED};
pub use store::{
    generate_dataset, load_dataset, read_grid, write_grid, Dataset, DatasetManifest, FileEntry,
    Splits, MANIFEST_VERSION,
};
pub use weather::{apply_weather, Weather, WeatherKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Side length of one object cell in pixels; equals the featurizer patch.
pub const CELL: usize = 4;
/// Ground distance between neighbouring locations.
pub const LOCATION_SPACING_M: f64 = 50.0;
pub const BACKGROUND: f32 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub grid_size: usize,
    pub n_objects: usize,
    pub object_vocab_size: usize,
    pub distractor_rate: f64,
    pub occlusion_rate: f64,
    pub weather: Weather,
    pub seed: u64,
    /// Rotate the query view by a random right angle.
    pub rotate: bool,
    /// Maximum whole-cell translation of the query layout.
    pub jitter: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            grid_size: 32,
            n_objects: 6,
            object_vocab_size: 12,
            distractor_rate: 0.0,
            occlusion_rate: 0.0,
            weather: Weather::default(),
            seed: 0,
            rotate: true,
            jitter: 1,
        }
    }
}

impl SceneSpec {
    /// Distractor 0.4, occlusion 0.2, fog then snow at severity 0.5.
    pub fn corrupted() -> Self {
        SceneSpec {
            distractor_rate: 0.4,
            occlusion_rate: 0.2,
            weather: Weather {
                kind: WeatherKind::FogSnow,
                severity: 0.5,
            },
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("distractor_rate", self.distractor_rate),
            ("occlusion_rate", self.occlusion_rate),
            ("weather severity", self.weather.severity),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(config_err!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.grid_size == 0 || self.grid_size % CELL != 0 {
            return Err(config_err!(
                "grid_size {} must be a positive multiple of {CELL}",
                self.grid_size
            ));
        }
        let cells = self.cells();
        if cells < 2 * self.jitter + 1 {
            return Err(config_err!("jitter {} too large for {cells} cells", self.jitter));
        }
        let free = (cells - 2 * self.jitter).pow(2);
        if self.n_objects == 0 || self.n_objects > free {
            return Err(config_err!(
                "n_objects {} must be in 1..={free} for this grid",
                self.n_objects
            ));
        }
        if self.object_vocab_size == 0 || self.object_vocab_size > PALETTE.len() {
            return Err(config_err!(
                "object_vocab_size must be in 1..={}",
                PALETTE.len()
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_size / CELL
    }
}

/// `size × size × 3` image, row-major, channel last.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub size: usize,
    pub data: Vec<f32>,
}

impl RawGrid {
    pub fn filled(size: usize, v: f32) -> Self {
        RawGrid {
            size,
            data: vec![v; size * size * 3],
        }
    }

    pub fn px(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.size + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_px(&mut self, r: usize, c: usize, v: [f32; 3]) {
        let i = (r * self.size + c) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    /// Quarter turns counter-clockwise.
    pub fn rotated(&self, quarter_turns: usize) -> RawGrid {
        let n = self.size;
        let mut out = self.clone();
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = match quarter_turns % 4 {
                    0 => (r, c),
                    1 => (c, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - c),
                    _ => (n - 1 - c, r),
                };
                out.set_px(r, c, self.px(sr, sc));
            }
        }
        out
    }

    /// Cyclic shift by whole pixels (rows down, cols right).
    pub fn rolled(&self, dr: isize, dc: isize) -> RawGrid {
        let n = self.size as isize;
        let mut out = self.clone();
        for r in 0..n {
            for c in 0..n {
                let sr = (r - dr).rem_euclid(n) as usize;
                let sc = (c - dc).rem_euclid(n) as usize;
                out.set_px(r as usize, c as usize, self.px(sr, sc));
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &RawGrid) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub row: usize,
    pub col: usize,
    pub kind: usize,
}

/// View-specific perturbations applied to one pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisanceLog {
    pub rotation_deg: u32,
    pub jitter: (i64, i64),
    pub distractors_q: usize,
    pub distractors_g: usize,
    pub occluders_q: usize,
    pub weather: Weather,
}

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub location_id: usize,
    pub raw_q: RawGrid,
    pub raw_g: RawGrid,
    pub coords: (f64, f64),
    pub nuisance: NuisanceLog,
}

const PALETTE: [[f32; 3]; 12] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.55, 0.30, 0.10],
    [0.95, 0.95, 0.95],
    [0.50, 0.90, 0.55],
    [0.45, 0.15, 0.55],
    [0.60, 0.60, 0.20],
];

/// 4×4 masks invariant under quarter turns.
fn pattern_mask(kind: usize, r: usize, c: usize) -> bool {
    let edge = r == 0 || r == 3 || c == 0 || c == 3;
    let center = (1..=2).contains(&r) && (1..=2).contains(&c);
    match kind % 4 {
        0 => true,
        1 => edge,
        2 => center,
        _ => center || (edge && !((r == 0 || r == 3) && (c == 0 || c == 3))),
    }
}

fn paint(grid: &mut RawGrid, obj: PlacedObject) {
    let color = PALETTE[obj.kind];
    for r in 0..CELL {
        for c in 0..CELL {
            if pattern_mask(obj.kind, r, c) {
                grid.set_px(obj.row * CELL + r, obj.col * CELL + c, color);
            }
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one location, independent of generation order.
pub fn location_seed(seed: u64, location_id: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ (location_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Planar position of a location on a square lattice.
pub fn location_coords(location_id: usize, n_locations: usize) -> (f64, f64) {
    let width = (n_locations as f64).sqrt().ceil().max(1.0) as usize;
    (
        (location_id % width) as f64 * LOCATION_SPACING_M,
        (location_id / width) as f64 * LOCATION_SPACING_M,
    )
}

/// The persistent objects of a location in gallery (upright) coordinates.
pub fn canonical_layout(spec: &SceneSpec, location_id: usize) -> Vec<PlacedObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(location_seed(spec.seed, location_id));
    let lo = spec.jitter;
    let span = spec.cells() - 2 * spec.jitter;
    let free: Vec<(usize, usize)> = (0..span * span).map(|i| (lo + i / span, lo + i % span)).collect();
    let picks = rand::seq::index::sample(&mut rng, free.len(), spec.n_objects);
    picks
        .iter()
        .map(|i| PlacedObject {
            row: free[i].0,
            col: free[i].1,
            kind: rng.random_range(0..spec.object_vocab_size),
        })
        .collect()
}

/// Candidate distractors drawn up front so that the set present at a lower
/// rate is always a subset of the set present at a higher rate.
fn distractors(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Vec<PlacedObject> {
    let cells = spec.cells();
    let mut out = Vec::new();
    for _ in 0..spec.n_objects {
        let u: f64 = rng.random();
        let obj = PlacedObject {
            row: rng.random_range(0..cells),
            col: rng.random_range(0..cells),
            kind: rng.random_range(0..spec.object_vocab_size),
        };
        if u < spec.distractor_rate {
            out.push(obj);
        }
    }
    out
}

fn occlude(rng: &mut ChaCha8Rng, grid: &mut RawGrid, spec: &SceneSpec) -> usize {
    let n = grid.size;
    let mut count = 0;
    for _ in 0..spec.n_objects {
        let u: f64 = rng.random();
        let h = rng.random_range(CELL..=2 * CELL);
        let w = rng.random_range(CELL..=2 * CELL);
        let r0 = rng.random_range(0..=n - h);
        let c0 = rng.random_range(0..=n - w);
        if u < spec.occlusion_rate {
            count += 1;
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    grid.set_px(r, c, [0.02, 0.02, 0.02]);
                }
            }
        }
    }
    count
}

/// Render one cross-view pair. `draw` selects the nuisance realization; draw 0
/// is the pair stored in a dataset.
pub fn render_pair(spec: &SceneSpec, location_id: usize, n_locations: usize, draw: u64) -> Result<ScenePair> {
    spec.validate()?;
    let layout = canonical_layout(spec, location_id);
    let base = location_seed(spec.seed, location_id);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(base ^ splitmix64(draw.wrapping_add(1))));

    let quarter = if spec.rotate { rng.random_range(0..4usize) } else { 0 };
    let j = spec.jitter as i64;
    let (dy, dx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
    let weather_seed: u64 = rng.random();
    let mut rng_q = ChaCha8Rng::seed_from_u64(rng.random());
    let mut rng_g = ChaCha8Rng::seed_from_u64(rng.random());

    let mut raw_g = RawGrid::filled(spec.grid_size, BACKGROUND);
    for &o in &layout {
        paint(&mut raw_g, o);
    }
    let dist_g = distractors(&mut rng_g, spec);
    for &o in &dist_g {
        paint(&mut raw_g, o);
    }

    let mut raw_q = RawGrid::filled(spec.grid_size, BACKGROUND);
    for &o in &layout {
        let moved = PlacedObject {
            row: (o.row as i64 + dy) as usize,
            col: (o.col as i64 + dx) as usize,
            kind: o.kind,
        };
        paint(&mut raw_q, moved);
    }
    let dist_q = distractors(&mut rng_q, spec);
    for &o in &dist_q {
        paint(&mut raw_q, o);
    }
    let mut raw_q = raw_q.rotated(quarter);
    let occluders = occlude(&mut rng_q, &mut raw_q, spec);
    let raw_q = apply_weather(&raw_q, spec.weather.kind, spec.weather.severity, weather_seed)?;

    Ok(ScenePair {
        location_id,
        raw_q,
        raw_g,
        coords: location_coords(location_id, n_locations),
        nuisance: NuisanceLog {
            rotation_deg: 90 * quarter as u32,
            jitter: (dy, dx),
            distractors_q: dist_q.len(),
            distractors_g: dist_g.len(),
            occluders_q: occluders,
            weather: spec.weather,
        },
    })
}

/// All pairs of a dataset, in location order.
pub fn generate_pairs(spec: &SceneSpec, n_locations: usize) -> Result<Vec<ScenePair>> {
    if n_locations < 2 {
        return Err(config_err!("need at least 2 locations, got {n_locations}"));
    }
    (0..n_locations)
        .map(|id| render_pair(spec, id, n_locations, 0))
        .collect()
}

/// Seeded 80/20 split of location ids, each list sorted.
pub fn split_locations(n_locations: usize, seed: u64) -> Splits {
    let mut ids: Vec<usize> = (0..n_locations).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED_5911));
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let n_train = ((n_locations as f64 * 0.8).round() as usize).clamp(1, n_locations.saturating_sub(1).max(1));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Splits { train, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> SceneSpec {
        SceneSpec {
            rotate: false,
            jitter: 0,
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn nuisance_free_views_are_equal() {
        let spec = clean();
        for id in 0..5 {
            let p = render_pair(&spec, id, 5, 0).unwrap();
            assert_eq!(p.raw_q, p.raw_g);
        }
    }

    #[test]
    fn patterns_are_rotation_symmetric() {
        for kind in 0..4 {
            for r in 0..4 {
                for c in 0..4 {
                    assert_eq!(pattern_mask(kind, r, c), pattern_mask(kind, c, 3 - r));
                }
            }
        }
    }

    #[test]
    fn roll_wraps_and_inverts() {
        let mut g = RawGrid::filled(5, 0.0);
        g.set_px(0, 4, [1.0, 2.0, 3.0]);
        let r = g.rolled(1, 2);
        assert_eq!(r.px(1, 1), [1.0, 2.0, 3.0]);
        assert_eq!(r.rolled(-1, -2), g);
        assert_eq!(g.rolled(5, -10), g);
    }

    #[test]
    fn rotation_only_query_is_a_rotated_gallery() {
        let spec = SceneSpec {
            jitter: 0,
            seed: 4,
            ..SceneSpec::default()
        };
        for id in 0..6 {
            let p = render_pair(&spec, id, 6, 0).unwrap();
            let k = (p.nuisance.rotation_deg / 90) as usize;
            assert_eq!(p.raw_q, p.raw_g.rotated(k));
        }
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let p = render_pair(&SceneSpec::default(), 0, 2, 0).unwrap();
        assert_eq!(p.raw_g.rotated(1).rotated(1).rotated(1).rotated(1), p.raw_g);
    }

    #[test]
    fn distractor_rate_increases_disagreement() {
        let mut prev = -1.0;
        for rate in [0.0, 0.2, 0.4, 0.6] {
            let spec = SceneSpec {
                distractor_rate: rate,
                ..clean()
            };
            let pairs = generate_pairs(&spec, 40).unwrap();
            let d: f64 = pairs.iter().map(|p| p.raw_q.mean_abs_diff(&p.raw_g)).sum::<f64>() / 40.0;
            assert!(d > prev, "rate {rate}: {d} <= {prev}");
            prev = d;
        }
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let s = split_locations(64, 7);
        assert_eq!(s.train.len(), 51);
        assert_eq!(s.test.len(), 13);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        let two = split_locations(2, 0);
        assert_eq!((two.train.len(), two.test.len()), (1, 1));
    }

    #[test]
    fn invalid_rates_rejected() {
        let spec = SceneSpec {
            distractor_rate: 1.5,
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
