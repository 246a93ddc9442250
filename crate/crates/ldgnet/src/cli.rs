//! Command-line surface: synthesis, training, evaluation, grid search,
//! ablation, map rendering, and feature export. Outputs are written
//! atomically (temp file + rename), and every command is deterministic
//! under a fixed seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::hsidata::{self, BandShift, SynthSpec};
use crate::params::ParamStore;
use crate::textpipe::{load_class_meta, synthetic_catalog};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(#[from] hsidata::HsiError),
    #[error("{0}")]
    Text(#[from] crate::textpipe::TextError),
    #[error("{0}")]
    Train(#[from] trainer::TrainError),
    #[error("{0}")]
    Params(#[from] crate::params::ParamError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad config {path}: {message}")]
    BadConfig { path: PathBuf, message: String },
    #[error("bad shift spec `{0}`: expected GAIN,OFFSET,NONLIN")]
    BadShift(String),
    #[error("palette has no entry for class id {0}")]
    MissingPaletteEntry(u16),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ldgnet", version, about = "Cross-scene hyperspectral classification with language-aligned features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target scene pair plus class metadata.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: u16,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        /// Target-domain per-band transform: GAIN,OFFSET,NONLIN
        #[arg(long, default_value = "1.1,0.1,0.05")]
        shift: String,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, default_value_t = 6)]
        blobs: usize,
        #[arg(long, default_value_t = 0.06)]
        sigma: f64,
    },
    /// Train on a labeled source scene and save the best-validation model.
    Train {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a labeled scene and write metrics JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a full-scene classification map as binary PPM.
    Map {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        palette: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coordinate-wise hyperparameter search; writes a CSV of cells.
    Grid {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all four ablation variants; writes a CSV.
    Ablate {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        src_labels: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        tgt_labels: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export semantic-space features of labeled pixels as CSV.
    ExportFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and run one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, seed, classes, bands, shift, height, width, blobs, sigma } => {
            cmd_synth(&out, seed, classes, bands, &shift, height, width, blobs, sigma)
        }
        Command::Train { src, labels, meta, config, out } => cmd_train(&src, &labels, &meta, &config, &out),
        Command::Eval { model, tgt, labels, out } => cmd_eval(&model, &tgt, &labels, &out),
        Command::Map { model, tgt, palette, out } => cmd_map(&model, &tgt, &palette, &out),
        Command::Grid { src, labels, meta, config, out } => cmd_grid(&src, &labels, &meta, &config, &out),
        Command::Ablate { src, src_labels, tgt, tgt_labels, meta, config, out } => {
            cmd_ablate(&src, &src_labels, &tgt, &tgt_labels, &meta, &config, &out)
        }
        Command::ExportFeatures { model, tgt, labels, out } => cmd_export(&model, &tgt, &labels, &out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Write through a temp file in the same directory, then rename into
/// place, so interrupted runs never leave truncated artifacts.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn parse_shift(text: &str, bands: usize) -> Result<BandShift> {
    let parts: Vec<f64> = text.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>().ok_or_else(
        || CliError::BadShift(text.to_string()),
    )?;
    if parts.len() != 3 {
        return Err(CliError::BadShift(text.to_string()));
    }
    Ok(BandShift::uniform(parts[0], parts[1], parts[2], bands))
}

/// Fixed, well-separated render colors; class ids wrap around the table.
fn default_palette(classes: u16) -> BTreeMap<String, [u8; 3]> {
    const COLORS: [[u8; 3]; 10] = [
        [228, 26, 28],
        [55, 126, 184],
        [77, 175, 74],
        [152, 78, 163],
        [255, 127, 0],
        [255, 255, 51],
        [166, 86, 40],
        [247, 129, 191],
        [153, 153, 153],
        [64, 224, 208],
    ];
    let mut palette = BTreeMap::new();
    palette.insert("0".to_string(), [0, 0, 0]);
    for id in 1..=classes {
        palette.insert(id.to_string(), COLORS[(id as usize - 1) % COLORS.len()]);
    }
    palette
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    seed: u64,
    classes: u16,
    bands: usize,
    shift: &str,
    height: usize,
    width: usize,
    blobs: usize,
    sigma: f64,
) -> Result<()> {
    let spec = SynthSpec {
        classes,
        bands,
        source_height: height,
        source_width: width,
        target_height: height,
        target_width: width,
        covariance_scale: sigma,
        shift: parse_shift(shift, bands)?,
        blob_count: blobs,
        seed,
    };
    let pair = hsidata::generate_synthetic_pair(&spec)?;
    let catalog = synthetic_catalog(classes);

    atomic_write(&out.join("source.hsic"), &hsidata::cube_to_bytes(&pair.source.0))?;
    atomic_write(&out.join("source.hsil"), &hsidata::labels_to_bytes(&pair.source.1))?;
    atomic_write(&out.join("target.hsic"), &hsidata::cube_to_bytes(&pair.target.0))?;
    atomic_write(&out.join("target.hsil"), &hsidata::labels_to_bytes(&pair.target.1))?;
    atomic_write(
        &out.join("meta.json"),
        serde_json::to_string_pretty(&catalog).expect("plain struct").as_bytes(),
    )?;
    atomic_write(
        &out.join("palette.json"),
        serde_json::to_string_pretty(&default_palette(classes)).expect("plain map").as_bytes(),
    )?;

    // run metadata: the full spec every random draw flowed from
    #[derive(serde::Serialize)]
    struct RunMeta<'a> {
        seed: u64,
        classes: u16,
        bands: usize,
        height: usize,
        width: usize,
        blobs: usize,
        sigma: f64,
        shift: &'a BandShiftMeta,
    }
    #[derive(serde::Serialize)]
    struct BandShiftMeta {
        gain: f64,
        offset: f64,
        nonlinearity: f64,
    }
    let s = BandShiftMeta {
        gain: spec.shift.gain[0],
        offset: spec.shift.offset[0],
        nonlinearity: spec.shift.nonlinearity[0],
    };
    let meta = RunMeta { seed, classes, bands, height, width, blobs, sigma, shift: &s };
    atomic_write(
        &out.join("synth.json"),
        serde_json::to_string_pretty(&meta).expect("plain struct").as_bytes(),
    )?;
    println!("synth: wrote {} ({}x{}x{} source/target, {} classes)", out.display(), height, width, bands, classes);
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::BadConfig { path: path.to_path_buf(), message: e.to_string() })
}

fn cmd_train(src: &Path, labels: &Path, meta: &Path, config: &Path, out: &Path) -> Result<()> {
    let cube = hsidata::load_cube(src)?;
    let raster = hsidata::load_labels(labels)?;
    let catalog = load_class_meta(meta)?;
    let config = load_config(config)?;
    let fitted = trainer::fit(&cube, &raster, &catalog, &config)?;
    atomic_write(out, &fitted.store.to_bytes())?;
    println!(
        "train: variant={} best_epoch={} val_oa={:.4} val_kappa={:.4} -> {}",
        config.variant.name(),
        fitted.best_epoch,
        fitted.validation.oa,
        fitted.validation.kappa,
        out.display()
    );
    Ok(())
}

fn cmd_eval(model: &Path, tgt: &Path, labels: &Path, out: &Path) -> Result<()> {
    let store = ParamStore::load(model)?;
    let cube = hsidata::load_cube(tgt)?;
    let raster = hsidata::load_labels(labels)?;
    let metrics = trainer::evaluate(&store, &cube, &raster)?;
    atomic_write(out, serde_json::to_string(&metrics).expect("plain struct").as_bytes())?;
    println!("eval: oa={:.4} kappa={:.4} -> {}", metrics.oa, metrics.kappa, out.display());
    Ok(())
}

/// Binary PPM (P6) of a class-index grid; id 0 renders black and every
/// nonzero id must have a palette entry.
pub fn render_map(grid: &[u16], width: usize, height: usize, palette: &BTreeMap<String, [u8; 3]>) -> Result<Vec<u8>> {
    assert_eq!(grid.len(), width * height);
    let mut out = Vec::with_capacity(width * height * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", width, height).as_bytes());
    for &id in grid {
        let rgb = match palette.get(&id.to_string()) {
            Some(rgb) => *rgb,
            None if id == 0 => [0, 0, 0],
            None => return Err(CliError::MissingPaletteEntry(id)),
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

fn cmd_map(model: &Path, tgt: &Path, palette: &Path, out: &Path) -> Result<()> {
    let store = ParamStore::load(model)?;
    let cube = hsidata::load_cube(tgt)?;
    let text = fs::read_to_string(palette).map_err(io_err(palette))?;
    let palette: BTreeMap<String, [u8; 3]> = serde_json::from_str(&text)
        .map_err(|e| CliError::BadConfig { path: palette.to_path_buf(), message: e.to_string() })?;
    let grid = trainer::predict_map(&store, &cube)?;
    let ppm = render_map(&grid, cube.width, cube.height, &palette)?;
    atomic_write(out, &ppm)?;
    println!("map: {}x{} -> {}", cube.width, cube.height, out.display());
    Ok(())
}

fn cmd_grid(src: &Path, labels: &Path, meta: &Path, config: &Path, out: &Path) -> Result<()> {
    let cube = hsidata::load_cube(src)?;
    let raster = hsidata::load_labels(labels)?;
    let catalog = load_class_meta(meta)?;
    let base = load_config(config)?;
    let result = trainer::grid_search(
        &cube,
        &raster,
        &catalog,
        &base,
        &trainer::default_eta_grid(),
        &trainer::default_lambda_grid(),
        &trainer::default_alpha_grid(),
    )?;
    let mut csv = String::from("eta,lambda,alpha,val_oa\n");
    for cell in &result.cells {
        let _ = writeln!(csv, "{},{},{},{}", cell.eta, cell.lambda, cell.alpha, cell.val_oa);
    }
    atomic_write(out, csv.as_bytes())?;
    println!(
        "grid: best eta={} lambda={} alpha={} val_oa={:.4} ({} cells) -> {}",
        result.best.eta,
        result.best.lambda,
        result.best.alpha,
        result.best_oa,
        result.cells.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    src: &Path,
    src_labels: &Path,
    tgt: &Path,
    tgt_labels: &Path,
    meta: &Path,
    config: &Path,
    out: &Path,
) -> Result<()> {
    let catalog = load_class_meta(meta)?;
    let pair = hsidata::DomainPair {
        source: (hsidata::load_cube(src)?, hsidata::load_labels(src_labels)?),
        target: (hsidata::load_cube(tgt)?, hsidata::load_labels(tgt_labels)?),
        classes: catalog.class_count(),
    };
    let base = load_config(config)?;
    let rows = trainer::ablate(&pair, &catalog, &base)?;
    let mut csv = String::from("variant,oa,kappa\n");
    for (variant, m) in &rows {
        let _ = writeln!(csv, "{},{},{}", variant.name(), m.oa, m.kappa);
    }
    atomic_write(out, csv.as_bytes())?;
    for (variant, m) in &rows {
        println!("ablate: {} oa={:.4} kappa={:.4}", variant.name(), m.oa, m.kappa);
    }
    println!("ablate: table -> {}", out.display());
    Ok(())
}

fn cmd_export(model: &Path, tgt: &Path, labels: &Path, out: &Path) -> Result<()> {
    let store = ParamStore::load(model)?;
    let cube = hsidata::load_cube(tgt)?;
    let raster = hsidata::load_labels(labels)?;
    let rows = trainer::export_features(&store, &cube, &raster)?;
    let dim = rows.first().map(|(_, _, _, f)| f.len()).unwrap_or(0);
    let mut csv = String::from("row,col,label");
    for i in 0..dim {
        let _ = write!(csv, ",f{}", i);
    }
    csv.push('\n');
    for (r, c, label, feat) in &rows {
        let _ = write!(csv, "{},{},{}", r, c, label);
        for v in feat {
            let _ = write!(csv, ",{}", v);
        }
        csv.push('\n');
    }
    atomic_write(out, csv.as_bytes())?;
    println!("export-features: {} rows x {} dims -> {}", rows.len(), dim, out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_single_pixel_layout() {
        let mut palette = BTreeMap::new();
        palette.insert("1".to_string(), [255u8, 0, 0]);
        let ppm = render_map(&[1], 1, 1, &palette).unwrap();
        assert_eq!(ppm, b"P6\n1 1\n255\n\xff\x00\x00");
    }

    #[test]
    fn ppm_renders_unlabeled_as_black() {
        let mut palette = BTreeMap::new();
        palette.insert("1".to_string(), [10u8, 20, 30]);
        let ppm = render_map(&[0, 1], 2, 1, &palette).unwrap();
        assert_eq!(&ppm[..11], b"P6\n2 1\n255\n");
        assert_eq!(&ppm[11..], &[0, 0, 0, 10, 20, 30]);
    }

    #[test]
    fn ppm_missing_palette_entry_is_an_error() {
        let palette = BTreeMap::new();
        assert!(matches!(render_map(&[3], 1, 1, &palette), Err(CliError::MissingPaletteEntry(3))));
    }

    #[test]
    fn shift_spec_parses_three_numbers() {
        let s = parse_shift("1.2, 0.05, 0.01", 3).unwrap();
        assert_eq!(s.gain, vec![1.2; 3]);
        assert_eq!(s.offset, vec![0.05; 3]);
        assert_eq!(s.nonlinearity, vec![0.01; 3]);
        assert!(parse_shift("1.2,0.05", 3).is_err());
        assert!(parse_shift("a,b,c", 3).is_err());
    }
}
