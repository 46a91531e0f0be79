//! Batch front end for the tempofuse pipeline.
//!
//! Every subcommand reads and writes plain files; errors come out as one
//! `error: ...` line on stderr with a nonzero exit so shell pipelines can
//! react to them.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use tempofuse::data::{
    build_manifest, read_manifest_csv, read_split_csv, split_dataset, synth_click_dataset,
    write_manifest_csv, write_split_csv, DatasetManifest, Partition, SplitSpec, SyntheticSpec,
};
use tempofuse::features::{
    apply_zscore, chunk_time_axis, estimate_file_tempo, extract_features, feature_path,
    read_feature_file, write_feature_file, FeatureKind, FeatureParams, CHUNK_LEN,
};
use tempofuse::models::{fd_check_model, ArchConfig, Batch, Checkpoint, ModelKind};
use tempofuse::nn::{Mode, Tape, Tensor};
use tempofuse::train::{
    confusion_to_matrix, evaluate, export_confusion_csv, export_epochs_csv, export_per_class_csv,
    export_tempo_csv, fit_normalization, load_chunks, train, write_pgm, TrainConfig,
};
use tempofuse::{Error, Result};

/// Feature and training defaults follow the reference analysis settings:
/// 2048-sample windows with hop 512 at 22050 Hz, 128 Mel bins, 200-frame
/// chunks; training uses batch 256, 200 epochs, learning rate 0.005.
#[derive(Parser)]
#[command(name = "tempofuse", version, about = "EDM subgenre classification pipeline", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic click-track corpus with a manifest
    Synth(SynthArgs),
    /// Compute and cache Mel-spectrogram and tempogram features
    Extract(ExtractArgs),
    /// Estimate each song's global tempo into a CSV
    Tempo(TempoArgs),
    /// Train a classifier and write a checkpoint plus epochs.csv
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split partition
    Eval(EvalArgs),
    /// Classify a single WAV file with a trained checkpoint
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; one subdirectory per class
    #[arg(long)]
    out: PathBuf,
    /// JSON synthesis spec; defaults to the built-in five-class suite
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Songs per class for the built-in suite
    #[arg(long, default_value_t = 100)]
    songs_per_class: usize,
    /// Song length in seconds for the built-in suite
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Base seed; fully determines every sample
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for rendering (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct FeatureArgs {
    /// Analysis segment in seconds, `start:end` (e.g. 15:45), or `full`.
    /// Analysis always uses 2048-sample windows, hop 512, 128 Mel bins,
    /// and 200-frame chunks at 22050 Hz.
    #[arg(long, default_value = "full")]
    segment: String,
}

#[derive(Args)]
struct ExtractArgs {
    /// Dataset root: one subdirectory of WAV files per class
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV; read if present, otherwise scanned and written here
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Feature cache directory (overrides TEMPOFUSE_CACHE)
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    feature: FeatureArgs,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct TempoArgs {
    /// Dataset root: one subdirectory of WAV files per class
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV; read if present, otherwise scanned and written here
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output CSV (song_id,class,bpm)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    feature: FeatureArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root: one subdirectory of WAV files per class
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV; read if present, otherwise scanned and written here
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split CSV; read if present, otherwise an 8:1:1 split is drawn
    /// from --seed and written here
    #[arg(long)]
    split: Option<PathBuf>,
    /// Feature cache directory (overrides TEMPOFUSE_CACHE)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Model kind: mel_only, ftg_only, actg_only, early, late
    #[arg(long)]
    mode: String,
    /// Output directory for model.tfck and epochs.csv
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override it, it overrides built-ins
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epochs [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Chunks per batch [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.005]
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout before the output layer [default: 0.5]
    #[arg(long)]
    dropout: Option<f64>,
    /// Epochs without validation improvement before stopping;
    /// 0 trains the full schedule [default: 20]
    #[arg(long)]
    patience: Option<usize>,
    /// Seed for initialization, shuffling, and dropout [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Train the reduced-capacity architecture (2 blocks, 8 channels)
    #[arg(long, default_value_t = false)]
    reduced: bool,
    #[command(flatten)]
    feature: FeatureArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root: one subdirectory of WAV files per class
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV; read if present, otherwise scanned and written here
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split CSV; must already exist so scores refer to a known split
    #[arg(long)]
    split: Option<PathBuf>,
    /// Feature cache directory (overrides TEMPOFUSE_CACHE)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Partition to score: train, valid, or test
    #[arg(long, default_value = "test")]
    partition: String,
    /// Output directory for CSV reports and PGM renders
    #[arg(long)]
    out: PathBuf,
    /// Chunks per forward batch
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV file to classify
    #[arg(long)]
    wav: PathBuf,
    #[command(flatten)]
    feature: FeatureArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model kind to check, or `all`
    #[arg(long, default_value = "all")]
    mode: String,
    /// First seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds per model kind
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Coordinates sampled per parameter tensor
    #[arg(long, default_value_t = 12)]
    max_coords: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        // Single line, stable prefix: scripts match on "error: ".
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Tempo(a) => cmd_tempo(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn parse_mode(s: &str) -> Result<ModelKind> {
    ModelKind::parse(s).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "mode must be one of mel_only, ftg_only, actg_only, early, late; got `{s}`"
        ))
    })
}

fn parse_segment(s: &str) -> Result<Option<(f64, f64)>> {
    if s == "full" {
        return Ok(None);
    }
    let err = || {
        Error::InvalidArgument(format!(
            "segment must be `start:end` in seconds or `full`, got `{s}`"
        ))
    };
    let (a, b) = s.split_once(':').ok_or_else(err)?;
    let start: f64 = a.parse().map_err(|_| err())?;
    let end: f64 = b.parse().map_err(|_| err())?;
    if !(start >= 0.0 && end > start && end.is_finite()) {
        return Err(err());
    }
    Ok(Some((start, end)))
}

fn feature_params(feature: &FeatureArgs) -> Result<FeatureParams> {
    Ok(FeatureParams {
        segment: parse_segment(&feature.segment)?,
        ..FeatureParams::default()
    })
}

/// Shortest file the analysis can use: the whole segment when one is
/// given, otherwise enough samples for a single 200-frame chunk.
fn min_duration_s(params: &FeatureParams) -> f64 {
    match params.segment {
        Some((_, end)) => end,
        None => ((CHUNK_LEN - 1) * params.hop) as f64 / params.sample_rate as f64,
    }
}

fn cache_dir(flag: &Option<PathBuf>, root: &Path) -> PathBuf {
    if let Some(dir) = flag {
        return dir.clone();
    }
    if let Ok(env) = std::env::var("TEMPOFUSE_CACHE") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    root.join("feature_cache")
}

fn load_or_build_manifest(
    root: &Path,
    flag: &Option<PathBuf>,
    min_duration: f64,
) -> Result<DatasetManifest> {
    let path = flag.clone().unwrap_or_else(|| root.join("manifest.csv"));
    if path.exists() {
        return read_manifest_csv(&path);
    }
    let manifest = build_manifest(root, min_duration)?;
    write_manifest_csv(&manifest, &path)?;
    Ok(manifest)
}

fn load_or_make_split(
    manifest: &DatasetManifest,
    root: &Path,
    flag: &Option<PathBuf>,
    seed: u64,
) -> Result<SplitSpec> {
    let path = flag.clone().unwrap_or_else(|| root.join("split.csv"));
    if path.exists() {
        return read_split_csv(&path);
    }
    let split = split_dataset(manifest, (8, 1, 1), seed)?;
    write_split_csv(&split, &path)?;
    Ok(split)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Format {
                path: path.clone(),
                detail: format!("bad synthesis spec: {e}"),
            })?
        }
        None => SyntheticSpec::default_suite(a.songs_per_class, a.duration),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = thread_pool(a.jobs)?.install(|| synth_click_dataset(&spec, &a.out, a.seed))?;
    write_manifest_csv(&manifest, &a.out.join("manifest.csv"))?;
    println!(
        "synthesized {} songs in {} classes -> {}",
        manifest.len(),
        manifest.n_classes(),
        a.out.display()
    );
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let params = feature_params(&a.feature)?;
    let manifest = load_or_build_manifest(&a.root, &a.manifest, min_duration_s(&params))?;
    let cache = cache_dir(&a.cache, &a.root);
    std::fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
    let jobs: Vec<(usize, &tempofuse::data::ManifestEntry)> = manifest
        .entries()
        .iter()
        .enumerate()
        .collect();
    let results: Vec<Result<bool>> = thread_pool(a.jobs)?.install(|| {
        jobs.par_iter()
            .map(|&(_, entry)| {
                let out = feature_path(&cache, &entry.song_id);
                if out.exists() {
                    // Cached features are immutable; an existing file wins.
                    return Ok(false);
                }
                let wav = a.root.join(&entry.relative_path);
                let label = manifest.label_of(entry) as u32;
                let rec = extract_features(&wav, &entry.song_id, label, &params)?;
                write_feature_file(&rec, &out)?;
                Ok(true)
            })
            .collect()
    });
    let mut extracted = 0usize;
    let mut skipped = 0usize;
    for r in results {
        if r? {
            extracted += 1;
        } else {
            skipped += 1;
        }
    }
    println!(
        "extracted {extracted} skipped {skipped} -> {}",
        cache.display()
    );
    Ok(())
}

fn cmd_tempo(a: TempoArgs) -> Result<()> {
    let params = feature_params(&a.feature)?;
    let manifest = load_or_build_manifest(&a.root, &a.manifest, min_duration_s(&params))?;
    let mut rows = Vec::with_capacity(manifest.len());
    for entry in manifest.entries() {
        let bpm = estimate_file_tempo(&a.root.join(&entry.relative_path), &params, 60.0, 200.0)?;
        rows.push((entry.song_id.clone(), entry.class_name.clone(), bpm));
    }
    export_tempo_csv(&rows, &a.out)?;
    println!("wrote {} ({} songs)", a.out.display(), rows.len());
    Ok(())
}

/// Optional overrides loaded from --config; any field a flag does not
/// set falls back to this, then to the built-in defaults.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    dropout: Option<f64>,
    patience: Option<usize>,
    seed: Option<u64>,
}

fn read_config_file(path: &Option<PathBuf>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        detail: format!("bad config: {e}"),
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let kind = parse_mode(&a.mode)?;
    let file = read_config_file(&a.config)?;
    let params = feature_params(&a.feature)?;
    let manifest = load_or_build_manifest(&a.root, &a.manifest, min_duration_s(&params))?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let split = load_or_make_split(&manifest, &a.root, &a.split, seed)?;
    let cache = cache_dir(&a.cache, &a.root);

    let mut arch = if a.reduced {
        ArchConfig::reduced(kind, manifest.n_classes())
    } else {
        ArchConfig::full(kind, manifest.n_classes())
    };
    arch.dropout = a.dropout.or(file.dropout).unwrap_or(arch.dropout);
    let mut cfg = TrainConfig::new(arch);
    cfg.epochs = a.epochs.or(file.epochs).unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.or(file.batch_size).unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.patience = a.patience.or(file.patience).unwrap_or(cfg.patience);
    cfg.seed = seed;
    cfg.validate()?;

    let stats = fit_normalization(&manifest, &split, &cache)?;
    let train_set = load_chunks(&manifest, &split, Partition::Train, &cache, &cfg.arch, &stats)?;
    let valid_set = load_chunks(&manifest, &split, Partition::Valid, &cache, &cfg.arch, &stats)?;
    println!(
        "training {} on {} chunks ({} songs), validating on {} chunks ({} songs)",
        kind.name(),
        train_set.n_chunks(),
        train_set.n_songs(),
        valid_set.n_chunks(),
        valid_set.n_songs()
    );
    let outcome = train(&cfg, &train_set, &valid_set)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        class_names: manifest.classes().to_vec(),
        stats: stats.to_vec(),
    };
    let model_path = a.out.join("model.tfck");
    checkpoint.save(&model_path)?;
    export_epochs_csv(&outcome.reports, &a.out.join("epochs.csv"))?;
    println!(
        "best epoch {} with validation song accuracy {:.4}; {} epochs run",
        outcome.best_epoch,
        outcome.best_val_song_acc,
        outcome.reports.len()
    );
    println!("wrote {}", model_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let partition = Partition::parse(&a.partition).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "partition must be train, valid, or test, got `{}`",
            a.partition
        ))
    })?;
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_or_build_manifest(&a.root, &a.manifest, 0.0)?;
    if manifest.classes() != &ckpt.class_names[..] {
        return Err(Error::Dataset(format!(
            "checkpoint was trained on classes [{}], dataset has [{}]",
            ckpt.class_names.join(" "),
            manifest.classes().join(" ")
        )));
    }
    let split_path = a.split.clone().unwrap_or_else(|| a.root.join("split.csv"));
    let split = read_split_csv(&split_path)?;
    let cache = cache_dir(&a.cache, &a.root);
    let store = load_chunks(&manifest, &split, partition, &cache, ckpt.model.cfg(), &ckpt.stats)?;
    let out = evaluate(&mut ckpt.model, &store, a.batch_size)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    export_confusion_csv(&out.confusion, &ckpt.class_names, &a.out.join("confusion.csv"))?;
    export_per_class_csv(&out.per_class, &ckpt.class_names, &a.out.join("per_class.csv"))?;
    write_pgm(&confusion_to_matrix(&out.confusion), &a.out.join("confusion.pgm"))?;
    render_sample_features(&store, &manifest, &cache, &a.out)?;
    println!("chunk_accuracy,{:.6}", out.chunk_accuracy);
    println!("song_accuracy,{:.6}", out.song_accuracy);
    println!("reports -> {}", a.out.display());
    Ok(())
}

/// PGM renders of the first scored song's raw features, for eyeballing
/// what the classifier consumed.
fn render_sample_features(
    store: &tempofuse::train::ChunkStore,
    manifest: &DatasetManifest,
    cache: &Path,
    out: &Path,
) -> Result<()> {
    let Some(song) = store.song_ids.first() else {
        return Ok(());
    };
    if manifest.entry(song).is_none() {
        return Ok(());
    }
    let rec = read_feature_file(&feature_path(cache, song))?;
    for kind in FeatureKind::ALL {
        let name = format!("sample_{}_{}.pgm", song, kind.name());
        write_pgm(rec.matrix(kind), &out.join(name))?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let params = feature_params(&a.feature)?;
    let rec = extract_features(&a.wav, "input", 0, &params)?;
    let arch = ckpt.model.cfg().clone();
    let kind = arch.kind;

    // Normalize with the checkpoint's training statistics, then chunk.
    let mut chunked: Vec<(FeatureKind, Vec<tempofuse::mat::Matrix>)> = Vec::new();
    for (feature_kind, used, want_bins) in [
        (FeatureKind::Mel, kind.needs_mel(), arch.mel_bins),
        (FeatureKind::FourierTg, kind.needs_ftg(), arch.ftg_bins),
        (FeatureKind::AcTg, kind.needs_actg(), arch.actg_bins),
    ] {
        if !used {
            continue;
        }
        let raw = rec.matrix(feature_kind);
        if raw.rows() != want_bins {
            return Err(Error::Shape(format!(
                "{} has {} bins, the checkpoint expects {want_bins}",
                feature_kind.name(),
                raw.rows()
            )));
        }
        let stats = ckpt.stats_for(feature_kind).ok_or_else(|| {
            Error::Checkpoint(format!(
                "checkpoint carries no normalization statistics for {}",
                feature_kind.name()
            ))
        })?;
        let normalized = apply_zscore(raw, stats)?;
        chunked.push((feature_kind, chunk_time_axis(&normalized, arch.chunk_len)));
    }
    let n_chunks = chunked.iter().map(|(_, c)| c.len()).min().unwrap_or(0);
    if n_chunks == 0 {
        return Err(Error::EmptyInput(format!(
            "{} is too short for a {}-frame analysis chunk",
            a.wav.display(),
            arch.chunk_len
        )));
    }
    let tensor_of = |feature_kind: FeatureKind, lead: bool| -> Option<Tensor<f32>> {
        chunked.iter().find(|(k, _)| *k == feature_kind).map(|(_, chunks)| {
            let bins = chunks[0].rows();
            let mut data = Vec::with_capacity(n_chunks * bins * arch.chunk_len);
            for chunk in &chunks[..n_chunks] {
                data.extend_from_slice(chunk.data());
            }
            let shape: Vec<usize> = if lead {
                vec![n_chunks, 1, bins, arch.chunk_len]
            } else {
                vec![n_chunks, bins, arch.chunk_len]
            };
            Tensor::from_vec(&shape, data).expect("chunk dimensions agree")
        })
    };
    let batch = Batch {
        mel: tensor_of(FeatureKind::Mel, true),
        ftg: tensor_of(FeatureKind::FourierTg, false),
        actg: tensor_of(FeatureKind::AcTg, false),
    };

    let mut tape = Tape::new(Mode::Eval);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let pass = ckpt.model.forward(&mut tape, &batch, &mut rng)?;
    let logits = tape.value(pass.logits);
    let n_classes = arch.n_classes;

    let mut mean_softmax = vec![0.0f64; n_classes];
    let mut votes = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let row = &logits.data()[c * n_classes..(c + 1) * n_classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (acc, e) in mean_softmax.iter_mut().zip(&exps) {
            *acc += e / sum;
        }
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        votes.push(best);
    }
    for v in &mut mean_softmax {
        *v /= n_chunks as f64;
    }
    let winner = tempofuse::train::vote_song_predictions(&votes, n_classes)?;

    for (c, &v) in votes.iter().enumerate() {
        println!("chunk,{c},{}", ckpt.class_names[v]);
    }
    for (name, p) in ckpt.class_names.iter().zip(&mean_softmax) {
        println!("score,{name},{p:.6}");
    }
    println!("prediction,{}", ckpt.class_names[winner]);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let kinds: Vec<ModelKind> = if a.mode == "all" {
        ModelKind::ALL.to_vec()
    } else {
        vec![parse_mode(&a.mode)?]
    };
    const TOL: f64 = 1e-4;
    let mut failures = 0usize;
    for kind in kinds {
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        let mut kinks = 0usize;
        for seed in a.seed..a.seed + a.seeds {
            let report = fd_check_model(kind, seed, a.max_coords)?;
            worst = worst.max(report.max_rel_err);
            checked += report.checked;
            kinks += report.skipped_kinks;
        }
        let ok = worst < TOL;
        if !ok {
            failures += 1;
        }
        println!(
            "gradcheck,{},seeds={},checked={checked},kinks={kinks},max_rel_err={worst:.3e},{}",
            kind.name(),
            a.seeds,
            if ok { "pass" } else { "fail" }
        );
    }
    if failures > 0 {
        return Err(Error::Tape(format!(
            "{failures} model kind(s) exceeded the {TOL:.0e} gradient tolerance"
        )));
    }
    Ok(())
}
