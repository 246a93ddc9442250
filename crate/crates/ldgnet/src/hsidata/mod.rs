//! Hyperspectral scene containers and sampling: cubes, label rasters,
//! band-wise normalization, mirror-padded patch extraction, augmentation,
//! stratified splits, and synthetic cross-scene generation.

mod io;
mod synth;

pub use io::{cube_from_bytes, cube_to_bytes, labels_from_bytes, labels_to_bytes, load_cube, load_labels, save_cube, save_labels};
pub use synth::{generate_synthetic_pair, BandShift, SynthSpec};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HsiError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("patch size must be odd, got {0}")]
    EvenPatch(usize),
    #[error("coordinates ({0}, {1}) outside a {2}x{3} raster")]
    OutOfRaster(usize, usize, usize, usize),
    #[error("labels are {lh}x{lw} but cube is {ch}x{cw}")]
    DimsDiffer { lh: usize, lw: usize, ch: usize, cw: usize },
    #[error("class {0} has {1} labeled pixels; need at least 2")]
    ClassTooSmall(u16, usize),
    #[error("split fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("non-finite value in cube")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, HsiError>;

/// An H x W scene of d-band reflectance, stored band-sequential
/// (band-major, then row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    values: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * bands {
            return Err(HsiError::BadHeader(format!(
                "{}x{}x{} cube cannot hold {} values",
                height,
                width,
                bands,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(HsiError::NonFinite);
        }
        Ok(HsiCube { height, width, bands, values })
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.values[(band * self.height + row) * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// One band's H*W plane.
    pub fn band(&self, band: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.values[band * plane..(band + 1) * plane]
    }
}

/// Per-pixel class ids; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    labels: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(HsiError::BadHeader(format!(
                "{}x{} raster cannot hold {} labels",
                height,
                width,
                labels.len()
            )));
        }
        Ok(LabelRaster { height, width, labels })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Highest class id present.
    pub fn class_count(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Flat indices of labeled pixels, row-major order.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != 0).collect()
    }

    pub fn check_matches(&self, cube: &HsiCube) -> Result<()> {
        if self.height != cube.height || self.width != cube.width {
            return Err(HsiError::DimsDiffer {
                lh: self.height,
                lw: self.width,
                ch: cube.height,
                cw: cube.width,
            });
        }
        Ok(())
    }
}

/// A labeled source scene and the unseen target scene it generalizes to.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source: (HsiCube, LabelRaster),
    pub target: (HsiCube, LabelRaster),
    pub classes: u16,
}

/// One classification sample: an s x s x d window around a pixel, stored
/// band-major like the cube it came from.
#[derive(Debug, Clone)]
pub struct Patch {
    pub size: usize,
    pub bands: usize,
    pub values: Vec<f64>,
    pub label: u16,
}

/// Band-wise min-max scaling to [0, 1]; a constant band maps to all zeros.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let plane = cube.height * cube.width;
    let mut out = Vec::with_capacity(cube.values.len());
    for b in 0..cube.bands {
        let band = cube.band(b);
        let lo = band.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = band.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span == 0.0 {
            out.extend(std::iter::repeat_n(0.0, plane));
        } else {
            out.extend(band.iter().map(|v| (v - lo) / span));
        }
    }
    HsiCube { height: cube.height, width: cube.width, bands: cube.bands, values: out }
}

/// Map an out-of-range coordinate back inside [0, n) by mirror reflection
/// about the borders (the border sample itself is not repeated).
pub(crate) fn mirror_index(coord: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let mut c = coord;
    let n = n as isize;
    loop {
        if c < 0 {
            c = -c;
        } else if c >= n {
            c = 2 * (n - 1) - c;
        } else {
            return c as usize;
        }
    }
}

/// The s x s x d window centered on (row, col), mirror-reflected at the
/// borders. The returned patch carries label 0; callers attach one.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, size: usize) -> Result<Patch> {
    if size % 2 == 0 {
        return Err(HsiError::EvenPatch(size));
    }
    if row >= cube.height || col >= cube.width {
        return Err(HsiError::OutOfRaster(row, col, cube.height, cube.width));
    }
    let half = (size / 2) as isize;
    let mut values = Vec::with_capacity(size * size * cube.bands);
    for b in 0..cube.bands {
        for dr in -half..=half {
            let r = mirror_index(row as isize + dr, cube.height);
            for dc in -half..=half {
                let c = mirror_index(col as isize + dc, cube.width);
                values.push(cube.get(b, r, c));
            }
        }
    }
    Ok(Patch { size, bands: cube.bands, values, label: 0 })
}

/// Deterministic core of [`augment_patch`]: optional horizontal/vertical
/// flips, a multiplicative gain, then per-value additive noise.
pub fn augment_patch_with(patch: &Patch, flip_h: bool, flip_v: bool, gain: f64, noise: &[f64]) -> Patch {
    assert_eq!(noise.len(), patch.values.len());
    let s = patch.size;
    let mut values = Vec::with_capacity(patch.values.len());
    for b in 0..patch.bands {
        for r in 0..s {
            let src_r = if flip_v { s - 1 - r } else { r };
            for c in 0..s {
                let src_c = if flip_h { s - 1 - c } else { c };
                values.push(patch.values[(b * s + src_r) * s + src_c]);
            }
        }
    }
    for (v, n) in values.iter_mut().zip(noise) {
        *v = *v * gain + n;
    }
    Patch { size: s, bands: patch.bands, values, label: patch.label }
}

/// Random flip plus random radiation noise: flips with probability 0.5
/// each, gain from U[0.9, 1.1], additive noise from U[-0.02, 0.02].
pub fn augment_patch<R: Rng>(patch: &Patch, rng: &mut R) -> Patch {
    let flip_h = rng.random::<f64>() < 0.5;
    let flip_v = rng.random::<f64>() < 0.5;
    let gain = rng.random_range(0.9..1.1);
    let noise: Vec<f64> = (0..patch.values.len()).map(|_| rng.random_range(-0.02..0.02)).collect();
    augment_patch_with(patch, flip_h, flip_v, gain, &noise)
}

/// Stratified train/validation split over labeled pixels. Each class
/// contributes round(fraction * n_c) pixels to the training side; both
/// sides are returned as sorted flat indices.
pub fn split_train_val(labels: &LabelRaster, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HsiError::BadFraction(fraction));
    }
    let classes = labels.class_count();
    let mut rng = crate::stream::rng(seed, "split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 1..=classes {
        let mut idx: Vec<usize> = (0..labels.labels.len()).filter(|&i| labels.labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(HsiError::ClassTooSmall(class, idx.len()));
        }
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let n_train = (fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_cube() -> HsiCube {
        // 5x5, 2 bands, values encode (band, row, col) for easy checking
        let mut v = Vec::new();
        for b in 0..2 {
            for r in 0..5 {
                for c in 0..5 {
                    v.push((100 * b + 10 * r + c) as f64);
                }
            }
        }
        HsiCube::new(5, 5, 2, v).unwrap()
    }

    #[test]
    fn normalize_scales_each_band_to_unit_range() {
        let cube = HsiCube::new(1, 2, 2, vec![2.0, 4.0, 7.0, 7.0]).unwrap();
        let n = normalize(&cube);
        assert_eq!(n.band(0), &[0.0, 1.0]);
        assert_eq!(n.band(1), &[0.0, 0.0]); // constant band rule
    }

    #[test]
    fn normalize_preserves_order() {
        let mut rng = crate::stream::rng(3, "test");
        let vals: Vec<f64> = (0..40).map(|_| rng.random_range(-4.0..9.0)).collect();
        let cube = HsiCube::new(5, 8, 1, vals.clone()).unwrap();
        let n = normalize(&cube);
        let lo = n.band(0).iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = n.band(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                assert_eq!(vals[i] < vals[j], n.band(0)[i] < n.band(0)[j]);
            }
        }
    }

    #[test]
    fn interior_patch_is_the_literal_window() {
        let cube = toy_cube();
        let p = extract_patch(&cube, 2, 2, 3).unwrap();
        let band0: Vec<f64> = p.values[..9].to_vec();
        assert_eq!(band0, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 31.0, 32.0, 33.0]);
    }

    #[test]
    fn corner_patch_mirrors_rows_and_cols() {
        let cube = toy_cube();
        let p = extract_patch(&cube, 0, 0, 3).unwrap();
        // rows sampled (1,0,1), cols (1,0,1)
        let band0: Vec<f64> = p.values[..9].to_vec();
        assert_eq!(band0, vec![11.0, 10.0, 11.0, 1.0, 0.0, 1.0, 11.0, 10.0, 11.0]);
    }

    #[test]
    fn even_patch_size_is_an_error() {
        let cube = toy_cube();
        assert!(matches!(extract_patch(&cube, 2, 2, 4), Err(HsiError::EvenPatch(4))));
    }

    #[test]
    fn augment_identity_when_nothing_drawn() {
        let cube = toy_cube();
        let p = extract_patch(&cube, 2, 2, 3).unwrap();
        let same = augment_patch_with(&p, false, false, 1.0, &vec![0.0; p.values.len()]);
        assert_eq!(same.values, p.values);
    }

    #[test]
    fn double_flip_is_a_half_turn() {
        let cube = toy_cube();
        let p = extract_patch(&cube, 2, 2, 3).unwrap();
        let flipped = augment_patch_with(&p, true, true, 1.0, &vec![0.0; p.values.len()]);
        for b in 0..p.bands {
            for i in 0..9 {
                assert_eq!(flipped.values[b * 9 + i], p.values[b * 9 + (8 - i)]);
            }
        }
    }

    #[test]
    fn augment_replays_exactly_per_seed() {
        let cube = toy_cube();
        let p = extract_patch(&cube, 1, 3, 3).unwrap();
        let run = || {
            let mut rng = crate::stream::rng(99, "aug");
            augment_patch(&p, &mut rng).values
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        // 10 pixels per class over a 4x5 raster
        let labels: Vec<u16> = (0..20).map(|i| if i < 10 { 1 } else { 2 }).collect();
        let raster = LabelRaster::new(4, 5, labels).unwrap();
        let (train, val) = split_train_val(&raster, 0.8, 7).unwrap();
        let count = |set: &[usize], class: u16| set.iter().filter(|&&i| raster.labels()[i] == class).count();
        assert_eq!(count(&train, 1), 8);
        assert_eq!(count(&train, 2), 8);
        assert_eq!(count(&val, 1), 2);
        assert_eq!(count(&val, 2), 2);
        // disjoint and exhaustive
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        // replay
        let (t2, v2) = split_train_val(&raster, 0.8, 7).unwrap();
        assert_eq!((train, val), (t2, v2));
    }

    #[test]
    fn two_pixel_class_splits_one_and_one() {
        let raster = LabelRaster::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let (train, val) = split_train_val(&raster, 0.5, 1).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(val.len(), 2);
    }

    #[test]
    fn undersized_class_is_an_error() {
        let raster = LabelRaster::new(1, 3, vec![1, 1, 2]).unwrap();
        assert!(matches!(split_train_val(&raster, 0.5, 1), Err(HsiError::ClassTooSmall(2, 1))));
    }

    proptest! {
        #[test]
        fn mirror_index_stays_in_range(coord in -40isize..40, n in 1usize..12) {
            let m = mirror_index(coord, n);
            prop_assert!(m < n);
        }

        #[test]
        fn mirror_index_is_identity_inside(n in 2usize..12, frac in 0.0f64..1.0) {
            let coord = ((n - 1) as f64 * frac) as isize;
            prop_assert_eq!(mirror_index(coord, n), coord as usize);
        }
    }
}
