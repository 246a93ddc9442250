//! Scratch harness for sizing the synthetic ablation experiment.
//! Not part of the test suite; run with --release.

use ldgnet::hsidata::{generate_synthetic_pair, BandShift, SynthSpec};
use ldgnet::textpipe::synthetic_catalog;
use ldgnet::trainer::{evaluate, fit, TrainConfig, Variant};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let classes: u16 = env_or("CLASSES", 5);
    let bands: usize = env_or("BANDS", 8);
    let size: usize = env_or("SIZE", 40);
    let sigma: f64 = env_or("SIGMA", 0.10);
    let blobs: usize = env_or("BLOBS", 6);
    let epochs: usize = env_or("EPOCHS", 8);
    let eta: f64 = env_or("ETA", 3e-3);
    let lambda: f64 = env_or("LAMBDA", 1.0);
    let alpha: f64 = env_or("ALPHA", 0.3);
    let batch: usize = env_or("BATCH", 16);
    let patch: usize = env_or("PATCH", 9);
    let dsem: usize = env_or("DSEM", 16);
    let w1: usize = env_or("W1", 4);
    let w2: usize = env_or("W2", 8);
    let seeds: u64 = env_or("SEEDS", 5);

    println!(
        "classes={classes} bands={bands} size={size} sigma={sigma} blobs={blobs} epochs={epochs} eta={eta} lambda={lambda} alpha={alpha} batch={batch} patch={patch} dsem={dsem} widths=[{w1},{w2}]"
    );

    let mut diffs = Vec::new();
    let mut wins = 0;
    for seed in 0..seeds {
        let spec = SynthSpec {
            classes,
            bands,
            source_height: size,
            source_width: size,
            target_height: size,
            target_width: size,
            covariance_scale: sigma,
            shift: BandShift::uniform(1.1, 0.1, 0.05, bands),
            blob_count: blobs,
            seed: 1000 + seed,
        };
        let pair = generate_synthetic_pair(&spec).unwrap();
        let catalog = synthetic_catalog(classes);
        let base = TrainConfig {
            eta,
            lambda,
            alpha,
            batch_size: batch,
            epochs,
            patch_size: patch,
            seed: 5000 + seed,
            augment: true,
            widths: [w1, w2],
            semantic_dim: dsem,
            text_layers: 1,
            text_width: 32,
            text_heads: 2,
            bpe_merges: 128,
            ..Default::default()
        };

        let t0 = std::time::Instant::now();
        let mut oa = std::collections::BTreeMap::new();
        for variant in [Variant::Cls, Variant::Full] {
            let config = TrainConfig { variant, ..base.clone() };
            let fitted = fit(&pair.source.0, &pair.source.1, &catalog, &config).unwrap();
            let m = evaluate(&fitted.store, &pair.target.0, &pair.target.1).unwrap();
            oa.insert(variant.name(), (m.oa, fitted.validation.oa));
        }
        let (cls_oa, cls_val) = oa["cls"];
        let (full_oa, full_val) = oa["full"];
        let diff = full_oa - cls_oa;
        if diff > 0.0 {
            wins += 1;
        }
        diffs.push(diff);
        println!(
            "seed {seed}: cls target={:.4} (val {:.4}) | full target={:.4} (val {:.4}) | diff={:+.4} | {:.1}s",
            cls_oa,
            cls_val,
            full_oa,
            full_val,
            diff,
            t0.elapsed().as_secs_f64()
        );
    }
    let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
    println!("mean uplift: {:+.4} | wins {}/{}", mean, wins, diffs.len());
}
