//! `fcnn-asc`: feature extraction, training, evaluation, inspection and
//! synthetic data generation for the sub-spectral factorized CNN.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, manifest or
//! incompatible inputs), 2 runtime error (I/O, corrupt files, failed training).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use anyhow::{bail, Context, Result};
use asc_core::audio::{decode_wav, logmel, write_wav, FrameParams, SampleFormat};
use asc_core::checkpoint::{load_features, save_features, Checkpoint};
use asc_core::dataset::{Manifest, ManifestRow, Split};
use asc_core::eval::evaluate;
use asc_core::model::{FactorizationComparison, ModelSpec, ParameterReport};
use asc_core::synth::{self, SynthSpec};
use asc_core::tensor::Tensor;
use asc_core::train::{train_with_progress, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

/// Extension of per-clip feature files.
const FEATURE_EXT: &str = "feat";
const INDEX_FILE: &str = "index.tsv";
const MANIFEST_FILE: &str = "manifest.tsv";
const SYNTH_SAMPLE_RATE: u32 = 48_000;

#[derive(Parser)]
#[command(name = "fcnn-asc", version, about = "Factorized-CNN acoustic scene classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract log-mel features for every manifest row.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        audio_dir: PathBuf,
        #[arg(long, value_parser = ["40", "200"])]
        mel_bins: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus its evaluation report.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-layer parameter counts, the factorized/full ratio and the model spec.
    Inspect {
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// With --preset: inspect the square-kernel build instead.
        #[arg(long, requires = "preset")]
        full: bool,
    },
    /// Generate a synthetic dataset with one held-out city.
    Synth {
        /// TOML file with generator settings; omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Render WAV files instead of writing feature files directly.
        #[arg(long)]
        wav: bool,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features_dir: PathBuf,
    /// TOML with optional `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Comma-separated: none, mixup, specaug.
    #[arg(long, value_delimiter = ',')]
    augment: Vec<AugmentArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// L2-normalize embeddings before the triplet loss.
    #[arg(long)]
    normalize_embeddings: bool,
    /// Independent runs with seeds seed, seed+1, …
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    #[value(name = "ce+triplet")]
    CeTriplet,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AugmentArg {
    None,
    Mixup,
    Specaug,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Logmel40,
    Logmel200,
}

/// Error caused by user input rather than by the work itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some() || e.downcast_ref::<asc_core::Error>().is_some_and(|c| c.is_validation())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Features { manifest, audio_dir, mel_bins, out } => {
            cmd_features(&manifest, &audio_dir, mel_bins.parse().expect("restricted by clap"), &out)
        }
        Command::Train(args) => cmd_train(&args),
        Command::Eval { checkpoint, manifest, features_dir, split, out } => {
            cmd_eval(&checkpoint, &manifest, &features_dir, split, out.as_deref())
        }
        Command::Inspect { checkpoint, preset, full } => cmd_inspect(checkpoint.as_deref(), preset, full),
        Command::Synth { spec, out_dir, seed, wav } => cmd_synth(spec.as_deref(), &out_dir, seed, wav),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Manifest::parse(&text).with_context(|| format!("in {}", path.display()))
}

/// Where the features of a manifest row live.
fn feature_path(dir: &Path, row: &ManifestRow) -> PathBuf {
    dir.join(Path::new(&row.path).with_extension(FEATURE_EXT))
}

fn modified(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

fn cmd_features(manifest: &Path, audio_dir: &Path, mel_bins: usize, out: &Path) -> Result<()> {
    let m = read_manifest(manifest)?;
    let params = FrameParams::default();
    let (mut written, mut skipped, mut failed) = (0, 0, 0);
    let mut index = String::from("path\tfeatures\tchannels\tmel_bins\tframes\n");
    for (i, row) in m.rows.iter().enumerate() {
        let src = audio_dir.join(&row.path);
        let dst = feature_path(out, row);
        let up_to_date = matches!((modified(&src), modified(&dst)), (Some(s), Some(d)) if d >= s)
            && load_features(&dst).is_ok_and(|t| t.shape()[1] == mel_bins);
        let result = if up_to_date {
            skipped += 1;
            load_features(&dst).map_err(anyhow::Error::from)
        } else {
            extract(&src, &dst, mel_bins, params).inspect(|_| written += 1)
        };
        match result {
            Ok(t) => {
                let rel = dst.strip_prefix(out).unwrap_or(&dst);
                let s = t.shape();
                index.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", row.path, rel.display(), s[0], s[1], s[2]));
            }
            Err(e) => {
                failed += 1;
                eprintln!("row {} ({}): {e:#}", i + 2, row.path);
            }
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let index_path = out.join(INDEX_FILE);
    std::fs::write(&index_path, index).with_context(|| format!("writing {}", index_path.display()))?;
    println!("features: {written} written, {skipped} up to date, {failed} failed");
    if failed > 0 {
        bail!("{failed} of {} rows failed", m.rows.len());
    }
    Ok(())
}

fn extract(src: &Path, dst: &Path, mel_bins: usize, params: FrameParams) -> Result<Tensor<f32>> {
    let clip = decode_wav(src)?;
    let fm = logmel(&clip, mel_bins, params)?;
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_features(dst, &fm.values)?;
    Ok(fm.values)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<toml::Table>,
    #[serde(default)]
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

/// The preset matching the feature mel bins, overlaid with the config's `[model]` keys.
fn resolve_spec(overrides: Option<&toml::Table>, mel_bins: usize, channels: usize, classes: usize) -> Result<ModelSpec> {
    let mut base = if mel_bins == 200 { ModelSpec::logmel200() } else { ModelSpec::logmel40() };
    base.mel_bins = mel_bins;
    base.channels[0] = channels;
    base.num_classes = classes;
    let mut table = toml::Table::try_from(&base).expect("spec is TOML-representable");
    if let Some(o) = overrides {
        table.extend(o.clone());
    }
    let spec: ModelSpec = table.try_into().map_err(|e| invalid(format!("[model]: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn output_paths(checkpoint: &Path, repeat: Option<u64>) -> (PathBuf, PathBuf, PathBuf) {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let stem = match repeat {
        Some(r) => format!("{stem}.r{r}"),
        None => stem.to_string(),
    };
    let dir = checkpoint.parent().unwrap_or(Path::new(""));
    let ext = checkpoint.extension().and_then(|s| s.to_str()).unwrap_or("ckpt");
    (dir.join(format!("{stem}.{ext}")), dir.join(format!("{stem}.report.toml")), dir.join(format!("{stem}.curve.csv")))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg_file = read_config(args.config.as_deref())?;
    let mut cfg = cfg_file.train;
    match args.loss {
        Some(LossArg::Ce) => cfg.loss.use_triplet = false,
        Some(LossArg::CeTriplet) => cfg.loss.use_triplet = true,
        None => {}
    }
    if !args.augment.is_empty() {
        if args.augment.contains(&AugmentArg::None) && args.augment.len() > 1 {
            return Err(invalid("--augment none cannot be combined with other augmentations"));
        }
        cfg.augment.mixup = args.augment.contains(&AugmentArg::Mixup);
        cfg.augment.spec_augment = args.augment.contains(&AugmentArg::Specaug);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.loss.normalize_embeddings |= args.normalize_embeddings;
    if args.repeats == 0 {
        return Err(invalid("--repeats must be >= 1"));
    }
    cfg.validate()?;

    let manifest = read_manifest(&args.manifest)?;
    if cfg.loss.use_triplet {
        manifest.require_cities()?;
        let train_cities: BTreeSet<&str> =
            manifest.rows.iter().filter(|r| r.split == Split::Train).map(|r| r.city.as_str()).collect();
        if train_cities.len() < 2 {
            eprintln!("warning: only one training city; every triplet positive will be a same-city fallback");
        }
    }
    let mut data = manifest.load_dataset(None, |row| Ok(load_features(&feature_path(&args.features_dir, row))?))?;
    let [c, m, _] = data.validate()?;
    let spec = resolve_spec(cfg_file.model.as_ref(), m, c, data.scenes.len())?;
    let norm = data.normalize()?;
    let train_cities: BTreeSet<String> = data.train_cities().into_iter().map(|c| data.cities[c].clone()).collect();
    eprintln!(
        "training on {} clips ({} eval) from {} scenes; train cities: {:?}",
        data.train.len(),
        data.eval.len(),
        data.scenes.len(),
        train_cities
    );

    let mut summary = Vec::new();
    for r in 0..args.repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.checked_add(r).ok_or_else(|| invalid("seed overflow"))?;
        let outcome = train_with_progress(&spec, &data, &run_cfg, |rec| {
            if !args.quiet {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                eprintln!(
                    "epoch {:>4}  loss {:.4}  train {}  eval {}  unseen {}",
                    rec.epoch,
                    rec.train_loss,
                    fmt(rec.train_accuracy),
                    fmt(rec.eval_accuracy),
                    fmt(rec.unseen_city_accuracy)
                );
            }
        })?;
        let (ck_path, report_path, curve_path) =
            output_paths(&args.out_checkpoint, (args.repeats > 1).then_some(r));
        let mut ck = Checkpoint::from_model(&outcome.model, data.scenes.clone());
        ck.norm = Some(norm.clone());
        ck.train = Some(run_cfg);
        ck.rng = Some(outcome.rng);
        if let Some(parent) = ck_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        ck.save(&ck_path)?;
        std::fs::write(&report_path, outcome.report.to_text())
            .with_context(|| format!("writing {}", report_path.display()))?;
        std::fs::write(&curve_path, outcome.report.curve_csv())
            .with_context(|| format!("writing {}", curve_path.display()))?;
        let rep = &outcome.report;
        println!(
            "run {r}: overall {:.4}, unseen city {}, checkpoint {}",
            rep.overall_accuracy,
            rep.unseen_city_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
            ck_path.display()
        );
        summary.push((rep.overall_accuracy, rep.unseen_city_accuracy));
    }
    if summary.len() > 1 {
        let n = summary.len() as f64;
        let overall = summary.iter().map(|s| s.0).sum::<f64>() / n;
        let unseen: Option<f64> = summary.iter().map(|s| s.1).sum::<Option<f64>>().map(|v| v / n);
        println!(
            "mean over {} runs: overall {overall:.4}, unseen city {}",
            summary.len(),
            unseen.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, features_dir: &Path, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.model()?;
    let m = read_manifest(manifest)?;
    let spec = model.spec();
    let mut data = m.load_dataset(Some(&ck.scenes), |row| {
        let path = feature_path(features_dir, row);
        let t = load_features(&path)?;
        let s = t.shape();
        if s[1] != spec.mel_bins || s[0] != spec.channels[0] {
            return Err(asc_core::Error::Config(format!(
                "{} has {} channels × {} mel bins but the checkpoint expects {} × {}",
                path.display(),
                s[0],
                s[1],
                spec.channels[0],
                spec.mel_bins
            )));
        }
        Ok(t)
    })?;
    if let Some(norm) = &ck.norm {
        for ex in data.train.iter_mut().chain(data.eval.iter_mut()) {
            norm.apply(&mut ex.features)?;
        }
    }
    let train_cities: BTreeSet<String> = data.train_cities().into_iter().map(|c| data.cities[c].clone()).collect();
    let examples: Vec<_> = match split {
        SplitArg::Train => data.train.clone(),
        SplitArg::Eval => data.eval.clone(),
        SplitArg::All => data.train.iter().chain(&data.eval).cloned().collect(),
    };
    if examples.is_empty() {
        return Err(invalid("the selected split has no clips"));
    }
    let report = evaluate(&model, &data, &examples, &train_cities)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_inspect(checkpoint: Option<&Path>, preset: Option<Preset>, full: bool) -> Result<()> {
    let (spec, scenes, total_check) = match (checkpoint, preset) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let model = ck.model()?;
            (ck.spec.clone(), Some(ck.scenes), Some(model.parameter_count()))
        }
        (None, Some(p)) => {
            let spec = match p {
                Preset::Logmel40 => ModelSpec::logmel40(),
                Preset::Logmel200 => ModelSpec::logmel200(),
            };
            (spec.with_factorized(!full), None, None)
        }
        (None, None) => return Err(invalid("pass --checkpoint or --preset")),
    };
    let report = ParameterReport::for_spec(&spec)?;
    if let Some(n) = total_check {
        if n != report.total {
            bail!("checkpoint holds {n} parameters but its spec implies {}", report.total);
        }
    }
    let width = report.layers.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>10}", "layer", "params");
    for (layer, n) in &report.layers {
        println!("{layer:<width$}  {n:>10}");
    }
    println!("{:<width$}  {:>10}", "total", report.total);
    let cmp = FactorizationComparison::for_spec(&spec)?;
    println!("factorized {} / full {} = ratio {:.4}", cmp.factorized, cmp.full, cmp.ratio());
    if let Some(scenes) = scenes {
        println!("scenes = {scenes:?}");
    }
    println!("\n[spec]\n{}", toml::to_string(&spec).expect("spec is TOML-representable"));
    Ok(())
}

fn cmd_synth(spec_path: Option<&Path>, out_dir: &Path, seed: Option<u64>, wav: bool) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| invalid(format!("synth spec {}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    if spec.num_cities < 2 {
        eprintln!("warning: a single city leaves nothing held out and no cross-city triplet positives");
    }
    let clips = synth::generate(&spec)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = synth::manifest(&clips, "wav");
    for (clip, row) in clips.iter().zip(&manifest.rows) {
        if wav {
            let audio = synth::render_audio(clip, FrameParams::default(), SYNTH_SAMPLE_RATE)?;
            write_wav(out_dir.join(&row.path), &audio, SampleFormat::Float32)?;
        } else {
            save_features(&feature_path(out_dir, row), &clip.log_features())?;
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
    let held = spec.held_out().map_or("none".into(), SynthSpec::city_name);
    println!(
        "synth: {} clips ({} scenes × {} cities, held-out city {held}) → {}",
        clips.len(),
        spec.num_scenes,
        spec.num_cities,
        out_dir.display()
    );
    Ok(())
}
