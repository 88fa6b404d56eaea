//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for runtime
//! faults (I/O failures, non-finite losses, an underfit scene classifier).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::discriminator::{extract_features, DiscriminatorConfig, GroundSlot};
use crate::error::{Error, Result};
use crate::evaluation::{
    classify_land_cover, grayscale_patch_features, inception_score, train_scene_classifier,
    FeatureSource, StoredClassifier, DEFAULT_SPLITS,
};
use crate::generator::{GeneratorConfig, Variant};
use crate::io::{load_checkpoint, load_dataset, write_dataset, write_json, write_png};
use crate::scene::make_dataset;
use crate::training::{train, GenLossForm, Profile, TrainConfig, TrainState};
use crate::types::{
    GroundImage, LandCover, OverheadImage, PairedSample, Seed, CHANNELS, GROUND_SIDE, OVERHEAD_SIDE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAULT: i32 = 2;

pub const GRID_FILE: &str = "grid.png";
pub const SCORE_FILE: &str = "score.json";
pub const CLASSIFICATION_FILE: &str = "classification.json";

#[derive(Debug, Parser)]
#[command(
    name = "groundview",
    version,
    about = "Synthesize ground-level views from overhead tiles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paired dataset as PNGs plus a manifest.
    SynthData(SynthDataArgs),
    /// Train the conditional GAN.
    Train(TrainArgs),
    /// Write an overhead | generated | real comparison grid.
    Generate(GenerateArgs),
    /// Inception score of generated views.
    Score(ScoreArgs),
    /// Rural/urban classification from extracted features.
    Classify(ClassifyArgs),
    /// Train the synthetic scene classifier used by `score`.
    TrainClassifier(TrainClassifierArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of urban samples.
    #[arg(long, default_value_t = 0.5)]
    pub balance: f64,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub gen_loss_form: Option<GenLossForm>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; only `--epochs` may change the schedule.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of rows (manifest entries) in the grid.
    #[arg(long)]
    pub grid: usize,
    /// Must match the checkpoint's variant when given.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Scene-classifier file, or a JSON constant stub.
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SPLITS)]
    pub splits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Grayscale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SlotArg {
    Generated,
    Zero,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Required unless `--baseline` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_train: usize,
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// What fills the discriminator's ground-image slot.
    #[arg(long, value_enum, default_value_t = SlotArg::Generated)]
    pub slot: SlotArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output file for the classifier.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// JSON run configuration for `train`. Every key is optional; unknown keys
/// are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub variant: Option<Variant>,
    /// Overrides the profile's generator; its variant yields to `variant`.
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Fully merged `train` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    /// Applies flag overrides (flags win) and validates the result.
    pub fn resolve(mut self, args: &TrainArgs) -> Result<ResolvedRun> {
        let t = &mut self.train;
        if let Some(v) = args.epochs {
            t.epochs = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = args.seed {
            t.seed = Seed(v);
        }
        if let Some(v) = args.profile {
            t.profile = v;
        }
        if let Some(v) = args.gen_loss_form {
            t.gen_loss_form = v;
        }
        if let Some(v) = args.checkpoint_every {
            t.checkpoint_every = v;
        }
        t.validate()?;
        let variant = args
            .variant
            .or(self.variant)
            .or(self.generator.map(|g| g.variant))
            .unwrap_or(Variant::Concat);
        let mut generator = self
            .generator
            .unwrap_or_else(|| self.train.profile.generator(variant));
        generator.variant = variant;
        generator.validate()?;
        let discriminator = self
            .discriminator
            .unwrap_or_else(|| self.train.profile.discriminator());
        discriminator.validate()?;
        let missing = |what: &str| Error::Config(format!("no {what} given (flag or config)"));
        Ok(ResolvedRun {
            train: self.train,
            generator,
            discriminator,
            data: args
                .data
                .clone()
                .or(self.data)
                .ok_or_else(|| missing("--data"))?,
            out: args
                .out
                .clone()
                .or(self.out)
                .ok_or_else(|| missing("--out"))?,
        })
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        e if e.is_validation() => EXIT_USAGE,
        _ => EXIT_FAULT,
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::SynthData(a) => cmd_synth_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Score(a) => cmd_score(&a, out),
        Command::Classify(a) => cmd_classify(&a, out),
        Command::TrainClassifier(a) => cmd_train_classifier(&a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

pub fn cmd_synth_data(a: &SynthDataArgs, out: &mut dyn Write) -> Result<()> {
    if !a.force && dir_is_nonempty(&a.out)? {
        return Err(Error::InvalidInput(format!(
            "{} is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    let samples = make_dataset(Seed(a.seed), a.n, a.balance)?;
    let manifest = write_dataset(&a.out, &samples)?;
    say(out, format_args!("{}", manifest.display()))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let resolved = match &a.resume {
        Some(ckpt) => {
            let data = a.data.clone().or(config.data.clone());
            let dir = a.out.clone().or(config.out.clone());
            let mut state = load_checkpoint(ckpt)?;
            if let Some(v) = a.variant {
                check_variant(v, state.generator.config().variant)?;
            }
            if let Some(e) = a.epochs {
                state.config.epochs = e;
            }
            let (Some(data), Some(dir)) = (data, dir) else {
                return Err(Error::Config("--data and --out are required".into()));
            };
            return run_training(state, &data, &dir, out);
        }
        None => config.resolve(a)?,
    };
    let fresh = TrainState::new(resolved.train, resolved.generator, resolved.discriminator)?;
    run_training(fresh, &resolved.data, &resolved.out, out)
}

fn run_training(state: TrainState, data: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let dataset = load_dataset(data)?;
    let state = train(state, &dataset, dir, out)?;
    let final_path = dir.join(crate::training::FINAL_CHECKPOINT);
    say(
        out,
        format_args!(
            "finished {} epochs ({} steps); checkpoint {}",
            state.epoch,
            state.step,
            final_path.display()
        ),
    )
}

fn check_variant(requested: Variant, stored: Variant) -> Result<()> {
    if requested == stored {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint holds a {stored} generator but --variant {requested} was given"
        )))
    }
}

/// Nearest-neighbor 2× upscale of a ground view to overhead size.
fn upscale(img: &GroundImage) -> Vec<u8> {
    let src = img.to_bytes();
    let mut out = Vec::with_capacity(OVERHEAD_SIDE * OVERHEAD_SIDE * CHANNELS);
    for row in 0..OVERHEAD_SIDE {
        for col in 0..OVERHEAD_SIDE {
            let i = ((row / 2) * GROUND_SIDE + col / 2) * CHANNELS;
            out.extend_from_slice(&src[i..i + CHANNELS]);
        }
    }
    out
}

/// RGB bytes of a grid with one row per sample: overhead | generated | real,
/// each tile 128×128 (ground views upscaled 2×).
pub fn render_grid(
    rows: &[(&OverheadImage, &GroundImage, &GroundImage)],
) -> (Vec<u8>, usize, usize) {
    let tile = OVERHEAD_SIDE;
    let (h, w) = (rows.len() * tile, 3 * tile);
    let mut out = vec![0u8; h * w * CHANNELS];
    for (r, (overhead, generated, real)) in rows.iter().enumerate() {
        let tiles = [overhead.to_bytes(), upscale(generated), upscale(real)];
        for (t, bytes) in tiles.iter().enumerate() {
            for y in 0..tile {
                let dst = ((r * tile + y) * w + t * tile) * CHANNELS;
                let src = y * tile * CHANNELS;
                out[dst..dst + tile * CHANNELS].copy_from_slice(&bytes[src..src + tile * CHANNELS]);
            }
        }
    }
    (out, h, w)
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    if a.grid == 0 {
        return Err(Error::InvalidInput("--grid must be at least 1".into()));
    }
    let state = load_checkpoint(&a.checkpoint)?;
    if let Some(v) = a.variant {
        check_variant(v, state.generator.config().variant)?;
    }
    let data = load_dataset(&a.data)?;
    if a.grid > data.len() {
        return Err(Error::InvalidInput(format!(
            "--grid {} exceeds the manifest's {} entries",
            a.grid,
            data.len()
        )));
    }
    let chosen = &data[..a.grid];
    let overheads: Vec<&OverheadImage> = chosen.iter().map(|s| &s.overhead).collect();
    let generated = state.generator.generate_batch(&overheads)?;
    let rows: Vec<_> = chosen
        .iter()
        .zip(&generated)
        .map(|(s, g)| (&s.overhead, g, &s.ground))
        .collect();
    let (bytes, h, w) = render_grid(&rows);
    let path = a.out.join(GRID_FILE);
    write_png(&path, &bytes, h, w)?;
    say(out, format_args!("{}", path.display()))
}

pub fn cmd_score(a: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let classifier = StoredClassifier::load(&a.classifier)?;
    let data = load_dataset(&a.data)?;
    let overheads: Vec<&OverheadImage> = data.iter().map(|s| &s.overhead).collect();
    let generated = state.generator.generate_batch(&overheads)?;
    let refs: Vec<&GroundImage> = generated.iter().collect();
    let report = inception_score(&refs, classifier.as_dyn(), a.splits, Seed(a.seed))?;
    let path = a.out.join(SCORE_FILE);
    write_json(&report, &path)?;
    say(
        out,
        format_args!("variant  images  splits  inception_score"),
    )?;
    say(
        out,
        format_args!(
            "{:<7}  {:>6}  {:>6}  {:.4} ± {:.4}",
            state.generator.config().variant,
            report.n_images,
            report.n_splits,
            report.inception_score_mean,
            report.inception_score_std
        ),
    )
}

fn labels_of(data: &[PairedSample]) -> Result<Vec<LandCover>> {
    data.iter()
        .enumerate()
        .map(|(index, s)| {
            s.label.ok_or_else(|| Error::ManifestEntry {
                index,
                reason: "classification needs a label on every entry".into(),
            })
        })
        .collect()
}

pub fn cmd_classify(a: &ClassifyArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let labels = labels_of(&data)?;
    let overheads: Vec<&OverheadImage> = data.iter().map(|s| &s.overhead).collect();
    let (features, source) = match (a.baseline, &a.checkpoint) {
        (Some(Baseline::Grayscale), _) => (
            overheads
                .iter()
                .map(|o| grayscale_patch_features(o))
                .collect(),
            FeatureSource::GrayscalePatch,
        ),
        (None, Some(ckpt)) => {
            let state = load_checkpoint(ckpt)?;
            let slot = match a.slot {
                SlotArg::Generated => GroundSlot::Generated,
                SlotArg::Zero => GroundSlot::Zero,
            };
            let raw = extract_features(&state.generator, &state.discriminator, &overheads, slot)?;
            let features: Vec<Vec<f64>> = raw
                .into_iter()
                .map(|v| v.into_iter().map(f64::from).collect())
                .collect();
            (features, FeatureSource::CganFeatures)
        }
        (None, None) => {
            return Err(Error::Config(
                "--checkpoint is required unless --baseline is given".into(),
            ))
        }
    };
    let report = classify_land_cover(&features, &labels, a.n_train, Seed(a.seed), source)?;
    let path = a.out.join(CLASSIFICATION_FILE);
    write_json(&report, &path)?;
    let source = serde_json::to_value(report.feature_source).expect("enum serializes");
    say(out, format_args!("features         train  test  accuracy"))?;
    say(
        out,
        format_args!(
            "{:<15}  {:>5}  {:>4}  {:.4}",
            source.as_str().unwrap_or_default(),
            report.n_train,
            report.n_test,
            report.accuracy
        ),
    )
}

pub fn cmd_train_classifier(a: &TrainClassifierArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let model = train_scene_classifier(&data, Seed(a.seed))?;
    model.save(&a.out)?;
    say(
        out,
        format_args!(
            "holdout accuracy {:.4}; classifier {}",
            model.holdout_accuracy(),
            a.out.display()
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["groundview", "train"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => a,
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn flags_override_config_values() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"train": {"epochs": 3, "batch_size": 8}, "variant": "low", "data": "a.json", "out": "o"}"#,
        )
        .unwrap();
        let r = cfg
            .clone()
            .resolve(&train_args(&["--epochs", "5", "--variant", "high"]))
            .unwrap();
        assert_eq!(r.train.epochs, 5);
        assert_eq!(r.train.batch_size, 8);
        assert_eq!(r.generator.variant, Variant::High);
        assert_eq!(r.data, PathBuf::from("a.json"));
        let r = cfg.resolve(&train_args(&[])).unwrap();
        assert_eq!(r.generator.variant, Variant::Low);
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        let bad = RunConfig::default().resolve(&train_args(&[
            "--batch-size",
            "1",
            "--data",
            "d",
            "--out",
            "o",
        ]));
        assert!(matches!(bad, Err(e) if e.is_validation()));
        assert!(RunConfig::default()
            .resolve(&train_args(&["--out", "o"]))
            .is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut o = Vec::new();
        let mut e = Vec::new();
        assert_eq!(run(["groundview", "bogus"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["groundview", "--help"], &mut o, &mut e), EXIT_OK);
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("d");
        let t = target.to_str().unwrap();
        assert_eq!(
            run(
                ["groundview", "synth-data", "--out", t, "--n", "1"],
                &mut o,
                &mut e
            ),
            EXIT_USAGE
        );
    }

    #[test]
    fn grid_layout_places_tiles() {
        let o = OverheadImage::filled([1.0, -1.0, -1.0]).unwrap();
        let g = GroundImage::filled([-1.0, 1.0, -1.0]).unwrap();
        let r = GroundImage::filled([-1.0, -1.0, 1.0]).unwrap();
        let (bytes, h, w) = render_grid(&[(&o, &g, &r), (&o, &g, &r)]);
        assert_eq!((h, w), (256, 384));
        let px = |y: usize, x: usize| &bytes[(y * w + x) * 3..(y * w + x) * 3 + 3];
        assert_eq!(px(200, 10), [255, 0, 0]);
        assert_eq!(px(200, 130), [0, 255, 0]);
        assert_eq!(px(5, 383), [0, 0, 255]);
    }
}
