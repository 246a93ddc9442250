//! Synthetic cross-scene pairs: Gaussian class spectra placed in Voronoi
//! blobs, with a per-band gain/offset/quadratic shift applied to the
//! target domain.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DomainPair, HsiCube, HsiError, LabelRaster, Result};
use crate::stream;

/// Per-band target-domain transform: v -> gain*v + offset + nonlinearity*v^2.
#[derive(Debug, Clone, PartialEq)]
pub struct BandShift {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub nonlinearity: Vec<f64>,
}

impl BandShift {
    pub fn uniform(gain: f64, offset: f64, nonlinearity: f64, bands: usize) -> Self {
        BandShift {
            gain: vec![gain; bands],
            offset: vec![offset; bands],
            nonlinearity: vec![nonlinearity; bands],
        }
    }

    pub fn identity(bands: usize) -> Self {
        Self::uniform(1.0, 0.0, 0.0, bands)
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: u16,
    pub bands: usize,
    pub source_height: usize,
    pub source_width: usize,
    pub target_height: usize,
    pub target_width: usize,
    /// Standard deviation of the per-band Gaussian around each class mean.
    pub covariance_scale: f64,
    pub shift: BandShift,
    /// Voronoi seeds per class.
    pub blob_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            bands: 8,
            source_height: 48,
            source_width: 48,
            target_height: 48,
            target_width: 48,
            covariance_scale: 0.06,
            shift: BandShift::uniform(1.1, 0.1, 0.05, 8),
            blob_count: 6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HsiError::BadSpec(msg.into()));
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.bands == 0 || self.blob_count == 0 {
            return bad("bands and blob_count must be positive");
        }
        if self.source_height * self.source_width == 0 || self.target_height * self.target_width == 0 {
            return bad("scene extents must be positive");
        }
        if !(self.covariance_scale > 0.0) {
            return bad("covariance scale must be positive");
        }
        if self.shift.gain.len() != self.bands
            || self.shift.offset.len() != self.bands
            || self.shift.nonlinearity.len() != self.bands
        {
            return bad("shift parameter vectors must have one entry per band");
        }
        if self.shift.gain.iter().any(|&g| !(g > 0.0)) {
            return bad("gains must be positive");
        }
        Ok(())
    }
}

/// Smooth per-class mean spectra in roughly [0.05, 0.95].
fn class_spectra(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = stream::rng(spec.seed, "synth.means");
    let denom = (spec.bands.max(2) - 1) as f64;
    (0..spec.classes)
        .map(|_| {
            let base: f64 = rng.random_range(0.35..0.65);
            let comps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(0.05..0.18),
                        rng.random_range(0.5..3.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            (0..spec.bands)
                .map(|b| {
                    let t = b as f64 / denom;
                    let mut v = base;
                    for (amp, freq, phase) in &comps {
                        v += amp * (std::f64::consts::TAU * (freq * t + phase)).sin();
                    }
                    v.clamp(0.05, 0.95)
                })
                .collect()
        })
        .collect()
}

/// Contiguous class blobs: every pixel takes the class of its nearest seed.
fn blob_layout(rng: &mut impl Rng, h: usize, w: usize, classes: u16, blobs: usize) -> LabelRaster {
    let mut seeds = Vec::with_capacity(classes as usize * blobs);
    for class in 1..=classes {
        for _ in 0..blobs {
            let r = rng.random_range(0..h);
            let c = rng.random_range(0..w);
            seeds.push((r as isize, c as isize, class));
        }
    }
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut best = usize::MAX;
            let mut label = 1;
            for &(sr, sc, class) in &seeds {
                let dr = sr - r as isize;
                let dc = sc - c as isize;
                let d = (dr * dr + dc * dc) as usize;
                if d < best {
                    best = d;
                    label = class;
                }
            }
            labels.push(label);
        }
    }
    LabelRaster::new(h, w, labels).expect("sized by construction")
}

/// Gaussian reflectance around each pixel's class mean, band-sequential
/// draw order, quantized to f32 so files and memory agree bit-for-bit.
fn fill_scene(
    rng: &mut impl Rng,
    labels: &LabelRaster,
    spectra: &[Vec<f64>],
    sigma: f64,
    shift: Option<&BandShift>,
) -> HsiCube {
    let (h, w) = (labels.height, labels.width);
    let mut values = Vec::with_capacity(h * w * spectra[0].len());
    for b in 0..spectra[0].len() {
        for r in 0..h {
            for c in 0..w {
                let class = labels.get(r, c) as usize - 1;
                let noise: f64 = rng.sample(StandardNormal);
                let mut v = spectra[class][b] + sigma * noise;
                if let Some(s) = shift {
                    v = s.gain[b] * v + s.offset[b] + s.nonlinearity[b] * v * v;
                }
                values.push(v as f32 as f64);
            }
        }
    }
    HsiCube::new(h, w, spectra[0].len(), values).expect("finite by construction")
}

/// Build a deterministic source/target pair from the spec. The target
/// shares the source's class spectra but has its own spatial layout and
/// the per-band shift applied.
pub fn generate_synthetic_pair(spec: &SynthSpec) -> Result<DomainPair> {
    spec.validate()?;
    let spectra = class_spectra(spec);

    let mut src_rng = stream::rng(spec.seed, "synth.source");
    let src_labels = blob_layout(&mut src_rng, spec.source_height, spec.source_width, spec.classes, spec.blob_count);
    let src_cube = fill_scene(&mut src_rng, &src_labels, &spectra, spec.covariance_scale, None);

    let mut tgt_rng = stream::rng(spec.seed, "synth.target");
    let tgt_labels = blob_layout(&mut tgt_rng, spec.target_height, spec.target_width, spec.classes, spec.blob_count);
    let tgt_cube = fill_scene(&mut tgt_rng, &tgt_labels, &spectra, spec.covariance_scale, Some(&spec.shift));

    Ok(DomainPair { source: (src_cube, src_labels), target: (tgt_cube, tgt_labels), classes: spec.classes })
}
