use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vexel_core::codec::{Codec, SvgMatrix, DEFAULT_SEQ_LEN};
use vexel_core::conditioning::{
    document_features, load_features, write_atomic, write_vxf, FeatureCache, DEFAULT_D_P,
};
use vexel_core::normalize::{
    normalize, DocStats, NormalizeOptions, StatsReport, DEFAULT_CANVAS, DEFAULT_PRECISION,
};
use vexel_core::raster::rasterize;
use vexel_core::svg::{parse_svg, serialize_svg, CoordMode, Document};
use vexel_models::dit::{text_to_svg, train_dit, VsDit};
use vexel_models::vae::{train_vae, TrainOptions, VpVae};
use vexel_models::{
    checks, load_config, load_examples, read_manifest, write_trace_csv, DitConfig, FeatureSource,
    VaeConfig,
};
use vexel_nn::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::error::CliError;

/// Largest relative gradient error accepted by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;
/// Checkpoint file name inside a `train-vae` output directory.
const VAE_FILE: &str = "vae";
const CACHE_ENV: &str = "VEXEL_CACHE";

#[derive(Debug, Parser)]
#[command(
    name = "vexel",
    version,
    about = "SVG normalization, encoding and latent diffusion generation"
)]
pub struct Cli {
    /// Print errors as one JSON object per line
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize an SVG file, or every .svg file in a directory
    Clean(CleanArgs),
    /// Render an SVG to a binary PPM
    Raster(RasterArgs),
    /// Encode an SVG into a command matrix (.mat)
    Encode(EncodeArgs),
    /// Decode a command matrix (.mat) into an SVG
    Decode(DecodeArgs),
    /// Write pixel features (.vxf) for an SVG
    Features(FeaturesArgs),
    /// Element statistics over SVG files or directories
    Stats(StatsArgs),
    /// Train the vector-pixel VAE
    TrainVae(TrainVaeArgs),
    /// Train the latent diffusion transformer against a trained VAE
    TrainDit(TrainDitArgs),
    /// Generate an SVG from a text prompt
    Sample(SampleArgs),
    /// Check analytic gradients of both model losses by finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PRECISION)]
    pub precision: u32,
    #[arg(long, default_value_t = DEFAULT_CANVAS)]
    pub canvas: u32,
    /// Write before/after element counts and byte sizes as JSON
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Emit relative path coordinates
    #[arg(long)]
    pub relative: bool,
}

#[derive(Debug, Args)]
pub struct RasterArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    pub seq_len: usize,
    #[arg(long, default_value_t = DEFAULT_CANVAS)]
    pub canvas: u32,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CANVAS)]
    pub canvas: u32,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Compute features with the built-in extractor (default)
    #[arg(long, conflicts_with = "import")]
    pub stub: bool,
    /// Copy precomputed features from a .vxf file after checking its shape
    #[arg(long)]
    pub import: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_D_P)]
    pub d_p: usize,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    pub seq_len: usize,
    #[arg(long, default_value_t = DEFAULT_CANVAS)]
    pub canvas: u32,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Write the report here instead of standard output
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CANVAS)]
    pub canvas: u32,
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Preset name (default, tiny) or JSON config file
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the checkpoint and loss trace
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainDitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// VAE checkpoint file, or a `train-vae` output directory
    #[arg(long)]
    pub vae: PathBuf,
    /// Preset name (tiny, S, B, L) or JSON config file
    #[arg(long, default_value = "tiny")]
    pub config: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; the loss trace is written next to it
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub dit: PathBuf,
    /// Guidance weight (defaults to the checkpoint config)
    #[arg(long)]
    pub cfg: Option<f64>,
    /// DDIM steps (defaults to the checkpoint config)
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write a PPM preview
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub preview_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Preset name used for both models
    #[arg(long, default_value = "tiny")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Clean(a) => clean(&a),
        Command::Raster(a) => raster(&a),
        Command::Encode(a) => encode(&a),
        Command::Decode(a) => decode(&a),
        Command::Features(a) => features(&a),
        Command::Stats(a) => stats(&a),
        Command::TrainVae(a) => train_vae_cmd(&a),
        Command::TrainDit(a) => train_dit_cmd(&a),
        Command::Sample(a) => sample(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

fn read_svg(path: &Path) -> Result<(Document, usize), CliError> {
    let text = read_text(path)?;
    let doc = parse_svg(&text).map_err(|source| CliError::Svg {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((doc, text.len()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(CliError::io(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write(path, text.as_bytes())
}

fn normalized(doc: &Document, canvas: u32, precision: u32) -> Document {
    normalize(doc, NormalizeOptions { canvas, precision })
}

/// `.svg` files directly inside `dir`, sorted by name.
fn svg_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("svg")))
        .collect();
    files.sort();
    Ok(files)
}

fn clean_one(input: &Path, output: &Path, a: &CleanArgs) -> Result<StatsReport, CliError> {
    let (doc, before_bytes) = read_svg(input)?;
    let out = normalized(&doc, a.canvas, a.precision);
    let mode = if a.relative {
        CoordMode::Relative
    } else {
        CoordMode::Absolute
    };
    let text = serialize_svg(&out, mode);
    write(output, text.as_bytes())?;
    Ok(StatsReport {
        file: Some(input.display().to_string()),
        before: DocStats::of(&doc, before_bytes),
        after: DocStats::of(&out, text.len()),
    })
}

fn clean(a: &CleanArgs) -> Result<(), CliError> {
    if !a.input.is_dir() {
        let report = clean_one(&a.input, &a.output, a)?;
        if let Some(path) = &a.stats {
            write_json(path, &report)?;
        }
        return Ok(());
    }
    let files = svg_files(&a.input)?;
    fs::create_dir_all(&a.output).map_err(CliError::io(&a.output))?;
    let mut reports = Vec::new();
    let mut failed = 0;
    for file in &files {
        let name = file.file_name().expect("listed files have names");
        match clean_one(file, &a.output.join(name), a) {
            Ok(r) => reports.push(r),
            Err(e) => {
                failed += 1;
                eprintln!("skipped: {e}");
            }
        }
    }
    if let Some(path) = &a.stats {
        write_json(path, &reports)?;
    }
    if failed > 0 {
        return Err(CliError::Batch {
            failed,
            total: files.len(),
        });
    }
    Ok(())
}

fn raster(a: &RasterArgs) -> Result<(), CliError> {
    let (doc, _) = read_svg(&a.input)?;
    let mut bytes = Vec::new();
    rasterize(&doc, a.size)
        .write_ppm(&mut bytes)
        .map_err(CliError::io(&a.output))?;
    write(&a.output, &bytes)
}

fn encode(a: &EncodeArgs) -> Result<(), CliError> {
    let (doc, _) = read_svg(&a.input)?;
    let doc = normalized(&doc, a.canvas, DEFAULT_PRECISION);
    let m = Codec::new(a.seq_len, a.canvas)
        .encode(&doc)
        .map_err(|source| CliError::Codec {
            path: a.input.clone(),
            source,
        })?;
    let mut bytes = Vec::new();
    m.write_mat(&mut bytes).map_err(CliError::io(&a.output))?;
    write(&a.output, &bytes)
}

fn decode(a: &DecodeArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.input).map_err(CliError::io(&a.input))?;
    let codec_err = |source| CliError::Codec {
        path: a.input.clone(),
        source,
    };
    let m = SvgMatrix::read_mat(bytes.as_slice()).map_err(codec_err)?;
    let doc = Codec::new(m.rows.len(), a.canvas)
        .decode(&m)
        .map_err(codec_err)?;
    write(
        &a.output,
        serialize_svg(&doc, CoordMode::Absolute).as_bytes(),
    )
}

fn feature_source() -> FeatureSource {
    FeatureSource::new(std::env::var_os(CACHE_ENV).map(FeatureCache::new))
}

fn features(a: &FeaturesArgs) -> Result<(), CliError> {
    let m = match &a.import {
        Some(path) => load_features(path, Some((a.seq_len, a.d_p)))?,
        None => {
            let (doc, _) = read_svg(&a.input)?;
            let doc = normalized(&doc, a.canvas, DEFAULT_PRECISION);
            match std::env::var_os(CACHE_ENV) {
                Some(dir) => {
                    let dir = PathBuf::from(dir);
                    FeatureCache::new(&dir)
                        .features(&doc, a.d_p, a.seq_len)
                        .map_err(CliError::io(&dir))?
                }
                None => document_features(&doc, a.d_p, a.seq_len),
            }
        }
    };
    let mut bytes = Vec::new();
    write_vxf(&m, &mut bytes).map_err(CliError::io(&a.output))?;
    write(&a.output, &bytes)
}

#[derive(Debug, Serialize)]
struct FileStats {
    file: String,
    elements: usize,
    counts: BTreeMap<String, usize>,
    bytes: usize,
}

#[derive(Debug, Serialize)]
struct CorpusStats {
    files: usize,
    elements: usize,
    counts: BTreeMap<String, usize>,
    /// Number of documents per normalized element count.
    elements_per_document: BTreeMap<usize, usize>,
    per_file: Vec<FileStats>,
}

fn stats(a: &StatsArgs) -> Result<(), CliError> {
    let mut files = Vec::new();
    for input in &a.inputs {
        if input.is_dir() {
            files.extend(svg_files(input)?);
        } else {
            files.push(input.clone());
        }
    }
    let mut report = CorpusStats {
        files: files.len(),
        elements: 0,
        counts: BTreeMap::new(),
        elements_per_document: BTreeMap::new(),
        per_file: Vec::new(),
    };
    for file in &files {
        let (doc, _) = read_svg(file)?;
        let doc = normalized(&doc, a.canvas, DEFAULT_PRECISION);
        let bytes = serialize_svg(&doc, CoordMode::Absolute).len();
        let s = DocStats::of(&doc, bytes);
        for (k, v) in &s.counts {
            *report.counts.entry(k.clone()).or_default() += v;
        }
        report.elements += s.total();
        *report.elements_per_document.entry(s.total()).or_default() += 1;
        report.per_file.push(FileStats {
            file: file.display().to_string(),
            elements: s.total(),
            counts: s.counts,
            bytes,
        });
    }
    match &a.output {
        Some(path) => write_json(path, &report),
        None => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            // a closed pipe on the reader side is not an error for a report
            let _ = writeln!(io::stdout().lock(), "{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(load_checkpoint(path)?)
}

fn vae_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(VAE_FILE)
    } else {
        path.to_path_buf()
    }
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    Ok(save_checkpoint(path, ckpt)?)
}

fn train_vae_cmd(a: &TrainVaeArgs) -> Result<(), CliError> {
    let cfg: VaeConfig = load_config(&a.config)?;
    let examples = load_examples(&read_manifest(&a.manifest)?, cfg.canvas)?;
    let mut features = feature_source();
    let mut rows = Vec::new();
    let model = train_vae(
        &examples,
        cfg,
        TrainOptions {
            steps: a.steps,
            seed: a.seed,
        },
        &mut features,
        |r| rows.push(*r),
    )?;
    fs::create_dir_all(&a.output).map_err(CliError::io(&a.output))?;
    save(&a.output.join(VAE_FILE), &model.to_checkpoint())?;
    write(&a.output.join("vae_loss.csv"), &write_trace_csv(&rows)?)?;
    if let Some(last) = rows.last() {
        println!("step {} mse {:.6e} kl {:.6e}", last.step, last.mse, last.kl);
    }
    Ok(())
}

fn trace_path(checkpoint: &Path) -> PathBuf {
    let name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    checkpoint.with_file_name(format!("{name}_loss.csv"))
}

fn train_dit_cmd(a: &TrainDitArgs) -> Result<(), CliError> {
    let cfg: DitConfig = load_config(&a.config)?;
    let vae = VpVae::from_checkpoint(&load(&vae_path(&a.vae))?)?;
    let examples = load_examples(&read_manifest(&a.manifest)?, vae.cfg.canvas)?;
    let mut features = feature_source();
    let mut rows = Vec::new();
    let model = train_dit(&examples, &vae, cfg, a.steps, a.seed, &mut features, |r| {
        rows.push(*r)
    })?;
    save(&a.output, &model.to_checkpoint())?;
    write(&trace_path(&a.output), &write_trace_csv(&rows)?)?;
    if let Some(last) = rows.last() {
        println!("step {} loss {:.6e}", last.step, last.loss);
    }
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<(), CliError> {
    let vae = VpVae::from_checkpoint(&load(&vae_path(&a.vae))?)?;
    let dit = VsDit::from_checkpoint(&load(&a.dit)?)?;
    let w = a.cfg.unwrap_or(dit.cfg.cfg_scale);
    let steps = a.steps.unwrap_or(dit.cfg.sample_steps);
    let doc = text_to_svg(&a.prompt, &vae, &dit, w, steps, a.seed)?;
    write(
        &a.output,
        serialize_svg(&doc, CoordMode::Absolute).as_bytes(),
    )?;
    if let Some(path) = &a.png {
        let mut bytes = Vec::new();
        rasterize(&doc, a.preview_size)
            .write_ppm(&mut bytes)
            .map_err(CliError::io(path))?;
        write(path, &bytes)?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let vae_cfg: VaeConfig = load_config(&a.config)?;
    let dit_cfg: DitConfig = load_config(&a.config)?;
    let vae = checks::vae_gradcheck(vae_cfg, a.seed, None)?;
    println!(
        "vae max_rel_error {:.3e} ({} coordinates)",
        vae.max_rel_error, vae.checked
    );
    let dit = checks::dit_gradcheck(dit_cfg, a.seed, None)?;
    println!(
        "dit max_rel_error {:.3e} ({} coordinates)",
        dit.max_rel_error, dit.checked
    );
    let failing: Vec<String> = [("vae", &vae), ("dit", &dit)]
        .iter()
        .filter(|(_, r)| !(r.max_rel_error < GRADCHECK_TOL))
        .map(|(n, r)| format!("{n} {:.3e} at {:?}", r.max_rel_error, r.worst))
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failing.join("; ")))
    }
}
