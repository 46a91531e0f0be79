//! Training loop, chunk- and song-level evaluation, and report exports.
//!
//! Data flows in one direction: cached feature records are normalized
//! with training-split statistics, cut into chunks, and packed into flat
//! per-partition stores; the loop shuffles chunk indices per epoch and
//! keeps the parameters of the best validation-song-accuracy epoch.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{splitmix64, DatasetManifest, Partition, SplitSpec};
use crate::error::{Error, Result};
use crate::features::{
    apply_zscore, chunk_time_axis, feature_path, read_feature_file, FeatureKind,
    NormalizationStats, ZscoreFit,
};
use crate::mat::Matrix;
use crate::models::{ArchConfig, Batch, Model};
use crate::nn::{Adam, Mode, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Architecture to train; `arch.kind` picks the model family.
    pub arch: ArchConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without a new best validation song accuracy before the loop
    /// stops. 0 disables early stopping.
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig) -> TrainConfig {
        TrainConfig {
            arch,
            batch_size: 256,
            epochs: 200,
            lr: 0.005,
            seed: 0,
            patience: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} is below the batchnorm minimum of 2",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs = 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr = {}", self.lr)));
        }
        Ok(())
    }
}

struct Modality {
    bins: usize,
    /// [n_chunks, bins, chunk_len], chunk-major.
    data: Vec<f32>,
}

/// Flat, normalized chunk storage for one partition. Chunk order is the
/// load order: songs sorted by id, chunks in time order within a song.
pub struct ChunkStore {
    pub partition: Partition,
    pub n_classes: usize,
    pub chunk_len: usize,
    /// Per-chunk label, parallel with the modality data.
    pub labels: Vec<usize>,
    /// Per-chunk owning song index.
    pub chunk_song: Vec<usize>,
    pub song_ids: Vec<String>,
    pub song_labels: Vec<usize>,
    mel: Option<Modality>,
    ftg: Option<Modality>,
    actg: Option<Modality>,
}

impl ChunkStore {
    pub fn n_chunks(&self) -> usize {
        self.labels.len()
    }

    pub fn n_songs(&self) -> usize {
        self.song_ids.len()
    }

    /// Pack the chunks at `idxs` into one batch, plus their labels.
    pub fn gather(&self, idxs: &[usize]) -> (Batch<f32>, Vec<usize>) {
        let n = idxs.len();
        let pick = |m: &Option<Modality>, lead: bool| -> Option<Tensor<f32>> {
            m.as_ref().map(|m| {
                let per = m.bins * self.chunk_len;
                let mut data = Vec::with_capacity(n * per);
                for &i in idxs {
                    data.extend_from_slice(&m.data[i * per..(i + 1) * per]);
                }
                let shape: Vec<usize> = if lead {
                    vec![n, 1, m.bins, self.chunk_len]
                } else {
                    vec![n, m.bins, self.chunk_len]
                };
                Tensor::from_vec(&shape, data).expect("chunk dimensions agree")
            })
        };
        let batch = Batch {
            mel: pick(&self.mel, true),
            ftg: pick(&self.ftg, false),
            actg: pick(&self.actg, false),
        };
        let labels = idxs.iter().map(|&i| self.labels[i]).collect();
        (batch, labels)
    }
}

fn cached_record(
    cache_dir: &Path,
    manifest: &DatasetManifest,
    song_id: &str,
) -> Result<crate::features::FeatureRecord> {
    let entry = manifest.entry(song_id).ok_or_else(|| {
        Error::Dataset(format!("split references unknown song {song_id}"))
    })?;
    let path = feature_path(cache_dir, song_id);
    if !path.exists() {
        return Err(Error::Dataset(format!(
            "missing feature cache for {song_id} at {} (run extract first)",
            path.display()
        )));
    }
    let rec = read_feature_file(&path)?;
    let want = manifest.label_of(entry) as u32;
    if rec.label != want {
        return Err(Error::Dataset(format!(
            "stale feature cache for {song_id}: cached label {}, manifest says {want}",
            rec.label
        )));
    }
    Ok(rec)
}

/// Fit per-bin z-score statistics for all three features over the
/// training split only, streaming one record at a time.
pub fn fit_normalization(
    manifest: &DatasetManifest,
    split: &SplitSpec,
    cache_dir: &Path,
) -> Result<[NormalizationStats; 3]> {
    let songs = split.songs(Partition::Train);
    if songs.is_empty() {
        return Err(Error::EmptyInput("training split has no songs".into()));
    }
    let mut fits: Vec<ZscoreFit> = FeatureKind::ALL.iter().map(|&k| ZscoreFit::new(k)).collect();
    for song in songs {
        let rec = cached_record(cache_dir, manifest, song)?;
        for (fit, &kind) in fits.iter_mut().zip(&FeatureKind::ALL) {
            fit.add(rec.matrix(kind))?;
        }
    }
    let mut out = fits.into_iter().map(|f| f.finish());
    Ok([
        out.next().unwrap()?,
        out.next().unwrap()?,
        out.next().unwrap()?,
    ])
}

fn stats_for(stats: &[NormalizationStats], kind: FeatureKind) -> Result<&NormalizationStats> {
    stats
        .iter()
        .find(|s| s.feature_kind == kind)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("no normalization stats for {}", kind.name()))
        })
}

/// Load one partition into a chunk store: normalize each needed feature
/// with the given (training-split) statistics, chunk it to the model's
/// window, and keep the per-song minimum chunk count so modalities stay
/// aligned.
pub fn load_chunks(
    manifest: &DatasetManifest,
    split: &SplitSpec,
    partition: Partition,
    cache_dir: &Path,
    arch: &ArchConfig,
    stats: &[NormalizationStats],
) -> Result<ChunkStore> {
    let songs = split.songs(partition);
    if songs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "empty split: no {} songs",
            partition.name()
        )));
    }
    let kind = arch.kind;
    let chunk_len = arch.chunk_len;
    let needed: Vec<(FeatureKind, usize)> = [
        (FeatureKind::Mel, arch.mel_bins, kind.needs_mel()),
        (FeatureKind::FourierTg, arch.ftg_bins, kind.needs_ftg()),
        (FeatureKind::AcTg, arch.actg_bins, kind.needs_actg()),
    ]
    .into_iter()
    .filter(|&(_, _, used)| used)
    .map(|(k, bins, _)| (k, bins))
    .collect();
    let mut store = ChunkStore {
        partition,
        n_classes: manifest.n_classes(),
        chunk_len,
        labels: Vec::new(),
        chunk_song: Vec::new(),
        song_ids: Vec::new(),
        song_labels: Vec::new(),
        mel: None,
        ftg: None,
        actg: None,
    };
    for song in songs {
        let rec = cached_record(cache_dir, manifest, song)?;
        let label = rec.label as usize;
        let mut per_kind: Vec<(FeatureKind, Vec<Matrix>)> = Vec::new();
        for &(k, want_bins) in &needed {
            let raw = rec.matrix(k);
            if raw.rows() != want_bins {
                return Err(Error::Shape(format!(
                    "cached {} for {song} has {} bins, the model expects {want_bins}",
                    k.name(),
                    raw.rows()
                )));
            }
            let normalized = apply_zscore(raw, stats_for(stats, k)?)?;
            per_kind.push((k, chunk_time_axis(&normalized, chunk_len)));
        }
        let n_chunks = per_kind
            .iter()
            .map(|(_, c)| c.len())
            .min()
            .expect("at least one modality");
        if n_chunks == 0 {
            return Err(Error::Dataset(format!(
                "song {song} yields no {chunk_len}-frame chunks"
            )));
        }
        let song_idx = store.song_ids.len();
        store.song_ids.push(song.to_string());
        store.song_labels.push(label);
        for _ in 0..n_chunks {
            store.labels.push(label);
            store.chunk_song.push(song_idx);
        }
        for (k, chunks) in &per_kind {
            let bins = chunks[0].rows();
            let slot = match k {
                FeatureKind::Mel => &mut store.mel,
                FeatureKind::FourierTg => &mut store.ftg,
                FeatureKind::AcTg => &mut store.actg,
            };
            let m = slot.get_or_insert_with(|| Modality {
                bins,
                data: Vec::new(),
            });
            if m.bins != bins {
                return Err(Error::Shape(format!(
                    "song {song}: {} has {bins} bins, store expects {}",
                    k.name(),
                    m.bins
                )));
            }
            for chunk in &chunks[..n_chunks] {
                m.data.extend_from_slice(chunk.data());
            }
        }
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_chunk_acc: f64,
    pub val_song_acc: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Parameters and running statistics of the best epoch.
    pub model: Model<f32>,
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_song_acc: f64,
}

/// Train a fresh model on `train_set`, selecting the epoch with the best
/// validation song accuracy. Fully determined by the config seed.
pub fn train(
    cfg: &TrainConfig,
    train_set: &ChunkStore,
    valid_set: &ChunkStore,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.partition != Partition::Train {
        return Err(Error::InvalidArgument(format!(
            "parameter updates must come from the train split, got {}",
            train_set.partition.name()
        )));
    }
    if train_set.n_chunks() == 0 {
        return Err(Error::EmptyInput("no training chunks".into()));
    }
    if let Some(&bad) = train_set
        .labels
        .iter()
        .chain(&valid_set.labels)
        .find(|&&l| l >= cfg.arch.n_classes)
    {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            cfg.arch.n_classes
        )));
    }
    let mut model: Model<f32> = Model::init(cfg.arch.clone(), cfg.seed)?;
    let mut adam: Adam<f32> = Adam::new(cfg.lr, &model.param_sizes());
    // Independent streams per role so batch order and dropout masks stay
    // stable even if one consumer changes how much randomness it draws.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 2));
    let mut order: Vec<usize> = (0..train_set.n_chunks()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Vec<Tensor<f32>>, Vec<crate::nn::BnState<f32>>)> = None;
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (bi, idxs) in order.chunks(cfg.batch_size).enumerate() {
            if idxs.len() < 2 {
                // Batchnorm needs at least two samples; drop the remnant.
                continue;
            }
            let (batch, labels) = train_set.gather(idxs);
            let mut tape = Tape::new(Mode::Train);
            let pass = model.forward(&mut tape, &batch, &mut dropout_rng)?;
            let loss_id = tape.cross_entropy(pass.logits, &labels)?;
            let loss = tape.value(loss_id).scalar_value() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("loss = {loss}"),
                });
            }
            loss_sum += loss * idxs.len() as f64;
            seen += idxs.len();
            tape.backward(loss_id)?;
            let grads: Vec<Option<&Tensor<f32>>> =
                pass.param_ids.iter().map(|&id| tape.grad(id)).collect();
            let mut params: Vec<&mut Tensor<f32>> = model.tensors_mut().iter_mut().collect();
            adam.step(&mut params, &grads);
        }
        if seen == 0 {
            return Err(Error::EmptyInput(
                "every training batch fell below 2 chunks".into(),
            ));
        }
        let train_loss = loss_sum / seen as f64;
        let val = evaluate(&mut model, valid_set, cfg.batch_size)?;
        reports.push(EpochReport {
            epoch,
            train_loss,
            val_chunk_acc: val.chunk_accuracy,
            val_song_acc: val.song_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if val.song_accuracy > best_acc {
            best_acc = val.song_accuracy;
            best_epoch = epoch;
            best = Some(model.state_clone());
        }
        if cfg.patience > 0 {
            if best_acc >= 1.0 {
                break;
            }
            if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }
    model.restore_state(&best.expect("at least one epoch ran"));
    Ok(TrainOutcome {
        model,
        reports,
        best_epoch,
        best_val_song_acc: best_acc,
    })
}

/// Argmax with ties broken toward the lowest class index.
fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Modal class over one song's chunk predictions; ties break toward the
/// lowest class index.
pub fn vote_song_predictions(chunk_preds: &[usize], n_classes: usize) -> Result<usize> {
    if chunk_preds.is_empty() {
        return Err(Error::EmptyInput("no chunk predictions to vote on".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &p in chunk_preds {
        if p >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "prediction {p} out of range for {n_classes} classes"
            )));
        }
        counts[p] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Song-level confusion counts; rows are true classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u32>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn record(&mut self, true_class: usize, pred_class: usize) -> Result<()> {
        if true_class >= self.n || pred_class >= self.n {
            return Err(Error::InvalidArgument(format!(
                "label pair ({true_class}, {pred_class}) out of range for {} classes",
                self.n
            )));
        }
        self.counts[true_class * self.n + pred_class] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u32 {
        self.counts[true_class * self.n + pred_class]
    }

    pub fn row_sum(&self, true_class: usize) -> u32 {
        self.counts[true_class * self.n..(true_class + 1) * self.n]
            .iter()
            .sum()
    }

    pub fn trace(&self) -> u32 {
        (0..self.n).map(|i| self.count(i, i)).sum()
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

pub fn confusion_matrix(
    true_labels: &[usize],
    pred_labels: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone)]
pub struct PerClassAccuracy {
    pub class: usize,
    pub chunk_acc: f64,
    pub song_acc: f64,
}

pub struct EvalOutcome {
    pub chunk_accuracy: f64,
    pub song_accuracy: f64,
    pub chunk_preds: Vec<usize>,
    pub song_preds: Vec<usize>,
    /// Song-level confusion; row sums equal per-class song counts.
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<PerClassAccuracy>,
}

/// Eval-mode pass over a whole store: chunk argmax, per-song majority
/// vote, confusion matrix, and per-class accuracies.
pub fn evaluate(
    model: &mut Model<f32>,
    store: &ChunkStore,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if store.n_chunks() == 0 {
        return Err(Error::EmptyInput("no chunks to evaluate".into()));
    }
    let n_classes = model.cfg().n_classes;
    let mut chunk_preds = Vec::with_capacity(store.n_chunks());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
    let idxs: Vec<usize> = (0..store.n_chunks()).collect();
    for batch_idxs in idxs.chunks(batch_size.max(1)) {
        let (batch, _) = store.gather(batch_idxs);
        let mut tape = Tape::new(Mode::Eval);
        let pass = model.forward(&mut tape, &batch, &mut dropout_rng)?;
        let logits = tape.value(pass.logits);
        for r in 0..batch_idxs.len() {
            chunk_preds.push(argmax_row(
                &logits.data()[r * n_classes..(r + 1) * n_classes],
            ));
        }
    }
    let mut correct_chunks = 0usize;
    for (&p, &t) in chunk_preds.iter().zip(&store.labels) {
        if p == t {
            correct_chunks += 1;
        }
    }
    let mut song_votes: Vec<Vec<usize>> = vec![Vec::new(); store.n_songs()];
    for (&song, &pred) in store.chunk_song.iter().zip(&chunk_preds) {
        song_votes[song].push(pred);
    }
    let mut song_preds = Vec::with_capacity(store.n_songs());
    for votes in &song_votes {
        song_preds.push(vote_song_predictions(votes, n_classes)?);
    }
    let confusion = confusion_matrix(&store.song_labels, &song_preds, n_classes)?;
    let mut per_class = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let chunk_total = store.labels.iter().filter(|&&l| l == class).count();
        let chunk_hit = chunk_preds
            .iter()
            .zip(&store.labels)
            .filter(|&(&p, &t)| t == class && p == class)
            .count();
        let song_total = confusion.row_sum(class);
        per_class.push(PerClassAccuracy {
            class,
            chunk_acc: if chunk_total == 0 {
                0.0
            } else {
                chunk_hit as f64 / chunk_total as f64
            },
            song_acc: if song_total == 0 {
                0.0
            } else {
                confusion.count(class, class) as f64 / song_total as f64
            },
        });
    }
    let song_hits = song_preds
        .iter()
        .zip(&store.song_labels)
        .filter(|&(&p, &t)| p == t)
        .count();
    Ok(EvalOutcome {
        chunk_accuracy: correct_chunks as f64 / store.n_chunks() as f64,
        song_accuracy: song_hits as f64 / store.n_songs() as f64,
        chunk_preds,
        song_preds,
        confusion,
        per_class,
    })
}

pub fn export_epochs_csv(reports: &[EpochReport], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_chunk_acc,val_song_acc,seconds\n");
    for r in reports {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.3}",
            r.epoch, r.train_loss, r.val_chunk_acc, r.val_song_acc, r.seconds
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn export_confusion_csv(
    cm: &ConfusionMatrix,
    classes: &[String],
    path: &Path,
) -> Result<()> {
    if classes.len() != cm.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "{} class names for a {}-class confusion matrix",
            classes.len(),
            cm.n_classes()
        )));
    }
    let mut out = String::from("true_class");
    for c in classes {
        write!(out, ",{c}").expect("string write");
    }
    out.push('\n');
    for (r, class) in classes.iter().enumerate() {
        write!(out, "{class}").expect("string write");
        for p in 0..cm.n_classes() {
            write!(out, ",{}", cm.count(r, p)).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn export_per_class_csv(
    per_class: &[PerClassAccuracy],
    classes: &[String],
    path: &Path,
) -> Result<()> {
    if classes.len() != per_class.len() {
        return Err(Error::InvalidArgument(format!(
            "{} class names for {} per-class rows",
            classes.len(),
            per_class.len()
        )));
    }
    let mut out = String::from("class,chunk_acc,song_acc\n");
    for (row, class) in per_class.iter().zip(classes) {
        writeln!(out, "{class},{:.6},{:.6}", row.chunk_acc, row.song_acc)
            .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn export_tempo_csv(rows: &[(String, String, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("song_id,class,bpm\n");
    for (song, class, bpm) in rows {
        writeln!(out, "{song},{class},{bpm:.3}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PGM, min-max scaled. Deterministic: identical input
/// bytes produce identical files.
pub fn write_pgm(m: &Matrix, path: &Path) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::EmptyInput("empty matrix for PGM".into()));
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in m.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(
            "non-finite values in PGM input".into(),
        ));
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    bytes.extend(m.data().iter().map(|&v| ((v - lo) * scale).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn confusion_to_matrix(cm: &ConfusionMatrix) -> Matrix {
    let n = cm.n_classes();
    let data: Vec<f32> = (0..n * n)
        .map(|i| cm.counts[i] as f32)
        .collect();
    Matrix::from_vec(n, n, data).expect("square confusion matrix")
}
