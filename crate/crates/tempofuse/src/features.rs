//! Fixed-width chunking, z-score normalization, and the binary feature cache.
//!
//! Cache layout (little-endian): magic "TFR1" | u32 version | u32 label |
//! u32 matrix count | per matrix { u8 kind tag, u32 rows, u32 cols,
//! rows*cols f32 row-major } | u32 CRC32. The checksum covers every byte
//! after the magic and is verified before any payload is interpreted, so a
//! truncated file fails the checksum instead of yielding garbage.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::audio;
use crate::dsp;
use crate::error::{Error, Result};
use crate::mat::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const CHUNK_LEN: usize = 200;
const MAGIC: &[u8; 4] = b"TFR1";
const TAG_STATS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Mel,
    FourierTg,
    AcTg,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Mel, FeatureKind::FourierTg, FeatureKind::AcTg];

    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::Mel => 0,
            FeatureKind::FourierTg => 1,
            FeatureKind::AcTg => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<FeatureKind> {
        match tag {
            0 => Some(FeatureKind::Mel),
            1 => Some(FeatureKind::FourierTg),
            2 => Some(FeatureKind::AcTg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::FourierTg => "fourier_tg",
            FeatureKind::AcTg => "ac_tg",
        }
    }
}

/// All chunks of one feature matrix of one song.
#[derive(Debug, Clone)]
pub struct ChunkSet {
    pub chunks: Vec<Matrix>,
    pub source_id: String,
    pub label: u32,
}

/// Non-overlapping windows of chunk_len frames; the trailing remainder is
/// discarded. Fewer than chunk_len frames yield an empty list.
pub fn chunk_time_axis(m: &Matrix, chunk_len: usize) -> Vec<Matrix> {
    assert!(chunk_len >= 1, "chunk_len must be >= 1");
    let n_chunks = m.cols() / chunk_len;
    (0..n_chunks)
        .map(|i| {
            m.slice_cols(i * chunk_len, chunk_len)
                .expect("chunk window inside matrix")
        })
        .collect()
}

/// Per-bin mean and population standard deviation, fit on the training
/// split only.
#[derive(Debug, Clone)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub feature_kind: FeatureKind,
}

const STD_FLOOR: f64 = 1e-8;

/// Pool every frame of every matrix and compute per-bin statistics.
/// The standard deviation uses the population convention and is floored
/// at 1e-8 so constant bins stay usable.
pub fn fit_zscore<'a, I>(mats: I, feature_kind: FeatureKind) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut fit = ZscoreFit::new(feature_kind);
    for m in mats {
        fit.add(m)?;
    }
    fit.finish()
}

/// Incremental form of [`fit_zscore`] for callers that stream matrices
/// from disk instead of holding them all at once.
#[derive(Debug, Clone)]
pub struct ZscoreFit {
    feature_kind: FeatureKind,
    sums: Vec<f64>,
    sq_sums: Vec<f64>,
    count: u64,
}

impl ZscoreFit {
    pub fn new(feature_kind: FeatureKind) -> ZscoreFit {
        ZscoreFit {
            feature_kind,
            sums: Vec::new(),
            sq_sums: Vec::new(),
            count: 0,
        }
    }

    pub fn add(&mut self, m: &Matrix) -> Result<()> {
        if self.sums.is_empty() {
            self.sums = vec![0.0; m.rows()];
            self.sq_sums = vec![0.0; m.rows()];
        } else if m.rows() != self.sums.len() {
            return Err(Error::Shape(format!(
                "{} matrices disagree on bin count: {} vs {}",
                self.feature_kind.name(),
                m.rows(),
                self.sums.len()
            )));
        }
        for (b, (sum, sq)) in self.sums.iter_mut().zip(self.sq_sums.iter_mut()).enumerate() {
            for &v in m.row(b) {
                *sum += v as f64;
                *sq += v as f64 * v as f64;
            }
        }
        self.count += m.cols() as u64;
        Ok(())
    }

    pub fn finish(self) -> Result<NormalizationStats> {
        if self.count == 0 {
            return Err(Error::EmptyInput(format!(
                "no frames to fit {} statistics on",
                self.feature_kind.name()
            )));
        }
        let n = self.count as f64;
        let mean: Vec<f32> = self.sums.iter().map(|&s| (s / n) as f32).collect();
        let std: Vec<f32> = self
            .sums
            .iter()
            .zip(&self.sq_sums)
            .map(|(&s, &sq)| {
                let var = (sq / n - (s / n) * (s / n)).max(0.0);
                var.sqrt().max(STD_FLOOR) as f32
            })
            .collect();
        Ok(NormalizationStats {
            mean,
            std,
            feature_kind: self.feature_kind,
        })
    }
}

/// out[b, t] = (m[b, t] - mean[b]) / std[b].
pub fn apply_zscore(m: &Matrix, stats: &NormalizationStats) -> Result<Matrix> {
    if m.rows() != stats.mean.len() {
        return Err(Error::Shape(format!(
            "matrix has {} bins but {} stats cover {}",
            m.rows(),
            stats.feature_kind.name(),
            stats.mean.len()
        )));
    }
    let mut out = m.clone();
    for b in 0..out.rows() {
        let (mean, inv_std) = (stats.mean[b], 1.0 / stats.std[b]);
        for v in out.row_mut(b) {
            *v = (*v - mean) * inv_std;
        }
    }
    Ok(out)
}

/// The three extracted feature matrices of one song.
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub song_id: String,
    pub label: u32,
    pub mel: Matrix,
    pub fourier_tg: Matrix,
    pub ac_tg: Matrix,
}

impl FeatureRecord {
    pub fn matrix(&self, kind: FeatureKind) -> &Matrix {
        match kind {
            FeatureKind::Mel => &self.mel,
            FeatureKind::FourierTg => &self.fourier_tg,
            FeatureKind::AcTg => &self.ac_tg,
        }
    }
}

/// Front-end settings shared by every extraction run. All values default
/// to the analysis chain the models were designed around.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParams {
    /// Seconds to analyze, or None for the whole file.
    pub segment: Option<(f64, f64)>,
    /// Everything is resampled to this rate before analysis.
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub tempo_window: usize,
}

impl Default for FeatureParams {
    fn default() -> FeatureParams {
        FeatureParams {
            segment: None,
            sample_rate: 22_050,
            window_len: 2_048,
            hop: 512,
            tempo_window: dsp::DEFAULT_TEMPO_WINDOW,
        }
    }
}

fn prepared_clip(path: &Path, params: &FeatureParams) -> Result<audio::AudioClip> {
    let clip = audio::load_wav(path)?;
    let clip = audio::resample(&clip, params.sample_rate)?;
    match params.segment {
        Some((start, end)) => audio::slice_segment(&clip, start, end),
        None => Ok(clip),
    }
}

/// Run the whole front end on one file: decode, resample, optionally
/// slice, then compute the Mel-spectrogram and both tempograms.
pub fn extract_features(
    path: &Path,
    song_id: &str,
    label: u32,
    params: &FeatureParams,
) -> Result<FeatureRecord> {
    let clip = prepared_clip(path, params)?;
    let cfg = dsp::StftConfig::new(params.window_len, params.hop)?;
    let mel = dsp::mel_spectrogram(&clip, &cfg)?;
    let novelty = dsp::novelty_curve(&mel);
    let fourier_tg = dsp::fourier_tempogram(&novelty, params.tempo_window)?;
    let ac_tg = dsp::autocorrelation_tempogram(&novelty, params.tempo_window)?;
    Ok(FeatureRecord {
        song_id: song_id.to_string(),
        label,
        mel: mel.values,
        fourier_tg: fourier_tg.values,
        ac_tg: ac_tg.values,
    })
}

/// Global tempo of one file from its Fourier tempogram.
pub fn estimate_file_tempo(
    path: &Path,
    params: &FeatureParams,
    bpm_min: f64,
    bpm_max: f64,
) -> Result<f64> {
    let clip = prepared_clip(path, params)?;
    let cfg = dsp::StftConfig::new(params.window_len, params.hop)?;
    let mel = dsp::mel_spectrogram(&clip, &cfg)?;
    let novelty = dsp::novelty_curve(&mel);
    let tg = dsp::fourier_tempogram(&novelty, params.tempo_window)?;
    dsp::estimate_global_tempo(&tg, bpm_min, bpm_max)
}

/// Cache location of one song's features.
pub fn feature_path(cache_dir: &Path, song_id: &str) -> PathBuf {
    cache_dir.join(format!("{song_id}.tfr"))
}

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        Encoder {
            buf: magic.to_vec(),
        }
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn matrix(&mut self, tag: u8, m: &Matrix) -> Result<()> {
        if m.is_empty() {
            return Err(Error::InvalidArgument(
                "refusing to serialize an empty matrix".into(),
            ));
        }
        self.buf.push(tag);
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Append the checksum and write the buffer atomically.
    pub(crate) fn finish(mut self, path: &Path) -> Result<()> {
        let crc = crc32fast::hash(&self.buf[4..]);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        let parent = path.parent().unwrap_or_else(|| Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(path, e))?;
        tmp.write_all(&self.buf).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }
}

pub(crate) struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    /// Validates magic and checksum up front.
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < magic.len() + 16 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("file too short ({} bytes)", bytes.len()),
            });
        }
        if &bytes[..magic.len()] != magic {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "bad magic".into(),
            });
        }
        let body = &bytes[magic.len()..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        Ok(Decoder {
            bytes: &bytes[..bytes.len() - 4],
            pos: magic.len(),
            path,
        })
    }

    pub(crate) fn path(&self) -> &Path {
        self.path
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: "payload shorter than its headers claim".into(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn matrix(&mut self) -> Result<(u8, Matrix)> {
        let tag = self.u8()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 28) {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("implausible matrix shape {rows}x{cols}"),
            });
        }
        let raw = self.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let m = Matrix::from_vec(rows, cols, data).expect("length follows from shape");
        Ok((tag, m))
    }

    pub(crate) fn expect_done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Persist one song's features. The song id is carried by the file name.
pub fn write_feature_file(rec: &FeatureRecord, path: &Path) -> Result<()> {
    let mut enc = Encoder::new(MAGIC);
    enc.u32(FORMAT_VERSION);
    enc.u32(rec.label);
    enc.u32(3);
    for kind in FeatureKind::ALL {
        enc.matrix(kind.tag(), rec.matrix(kind))?;
    }
    enc.finish(path)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(&bytes, path, MAGIC)?;
    let version = dec.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let label = dec.u32()?;
    let count = dec.u32()?;
    if count != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("feature record holds {count} matrices, expected 3"),
        });
    }
    let mut slots: [Option<Matrix>; 3] = [None, None, None];
    for _ in 0..3 {
        let (tag, m) = dec.matrix()?;
        let kind = FeatureKind::from_tag(tag).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("unknown matrix kind tag {tag}"),
        })?;
        let slot = &mut slots[tag as usize];
        if slot.is_some() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("duplicate {} matrix", kind.name()),
            });
        }
        *slot = Some(m);
    }
    dec.expect_done()?;
    let [mel, fourier_tg, ac_tg] = slots.map(Option::unwrap);
    let song_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureRecord {
        song_id,
        label,
        mel,
        fourier_tg,
        ac_tg,
    })
}

/// Persist normalization statistics for all three feature kinds in the
/// record framing: one 2 x n_bins matrix (mean row, std row) per kind,
/// all tagged as stats, ordered mel, fourier, autocorrelation.
pub fn write_stats_file(path: &Path, stats: &[NormalizationStats; 3]) -> Result<()> {
    for (s, kind) in stats.iter().zip(FeatureKind::ALL) {
        if s.feature_kind != kind {
            return Err(Error::InvalidArgument(format!(
                "stats must be ordered mel, fourier, autocorrelation; slot {} holds {}",
                kind.name(),
                s.feature_kind.name()
            )));
        }
        if s.mean.len() != s.std.len() || s.mean.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "malformed {} stats",
                s.feature_kind.name()
            )));
        }
    }
    let mut enc = Encoder::new(MAGIC);
    enc.u32(FORMAT_VERSION);
    enc.u32(0);
    enc.u32(3);
    for s in stats {
        let mut m = Matrix::zeros(2, s.mean.len());
        m.row_mut(0).copy_from_slice(&s.mean);
        m.row_mut(1).copy_from_slice(&s.std);
        enc.matrix(TAG_STATS, &m)?;
    }
    enc.finish(path)
}

pub fn read_stats_file(path: &Path) -> Result<[NormalizationStats; 3]> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(&bytes, path, MAGIC)?;
    let version = dec.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let _label = dec.u32()?;
    let count = dec.u32()?;
    if count != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("stats file holds {count} matrices, expected 3"),
        });
    }
    let mut out = Vec::with_capacity(3);
    for kind in FeatureKind::ALL {
        let (tag, m) = dec.matrix()?;
        if tag != TAG_STATS || m.rows() != 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("slot {} is not a stats matrix", kind.name()),
            });
        }
        out.push(NormalizationStats {
            mean: m.row(0).to_vec(),
            std: m.row(1).to_vec(),
            feature_kind: kind,
        });
    }
    dec.expect_done()?;
    Ok(out.try_into().expect("exactly three stats"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|i| i as f32 * 0.37 - 4.0).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn chunking_matches_paper_arithmetic() {
        let chunks = chunk_time_axis(&Matrix::zeros(128, 5168), 200);
        assert_eq!(chunks.len(), 25);
        assert_eq!(5168 - 25 * 200, 168);
        assert_eq!(chunk_time_axis(&Matrix::zeros(128, 1292), 200).len(), 6);
        assert_eq!(chunk_time_axis(&Matrix::zeros(16, 200), 200).len(), 1);
        assert!(chunk_time_axis(&Matrix::zeros(16, 199), 200).is_empty());
    }

    #[test]
    fn chunks_partition_the_leading_frames() {
        let m = numbered(3, 10);
        let chunks = chunk_time_axis(&m, 4);
        assert_eq!(chunks.len(), 2);
        for (i, c) in chunks.iter().enumerate() {
            assert_eq!(c.rows(), 3);
            assert_eq!(c.cols(), 4);
            for b in 0..3 {
                for t in 0..4 {
                    assert_eq!(c.get(b, t), m.get(b, i * 4 + t));
                }
            }
        }
    }

    #[test]
    fn fit_zscore_constant_record_floors_std() {
        let mut m = Matrix::zeros(4, 9);
        m.data_mut().fill(2.5);
        let stats = fit_zscore([&m], FeatureKind::Mel).unwrap();
        assert!(stats.mean.iter().all(|&v| (v - 2.5).abs() < 1e-7));
        assert!(stats.std.iter().all(|&v| v == 1e-8));
    }

    #[test]
    fn fit_zscore_uses_population_convention() {
        let a = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let stats = fit_zscore([&a, &b], FeatureKind::FourierTg).unwrap();
        assert!((stats.mean[0] - 1.0).abs() < 1e-7);
        assert!((stats.std[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn fit_zscore_rejects_empty_and_mismatched_input() {
        assert!(fit_zscore([], FeatureKind::Mel).is_err());
        let a = Matrix::zeros(4, 3);
        let b = Matrix::zeros(5, 3);
        assert!(fit_zscore([&a, &b], FeatureKind::Mel).is_err());
    }

    #[test]
    fn normalized_set_refits_to_standard_stats() {
        let mats: Vec<Matrix> = (0..5).map(|i| numbered(6, 40 + i)).collect();
        let stats = fit_zscore(mats.iter(), FeatureKind::AcTg).unwrap();
        let normalized: Vec<Matrix> = mats
            .iter()
            .map(|m| apply_zscore(m, &stats).unwrap())
            .collect();
        let refit = fit_zscore(normalized.iter(), FeatureKind::AcTg).unwrap();
        for b in 0..6 {
            assert!(refit.mean[b].abs() < 1e-6, "bin {b} mean {}", refit.mean[b]);
            assert!((refit.std[b] - 1.0).abs() < 1e-6, "bin {b} std {}", refit.std[b]);
        }
    }

    #[test]
    fn apply_zscore_identity_and_round_trip() {
        let m = numbered(3, 7);
        let identity = NormalizationStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
            feature_kind: FeatureKind::Mel,
        };
        assert_eq!(apply_zscore(&m, &identity).unwrap().data(), m.data());

        let stats = fit_zscore([&m], FeatureKind::Mel).unwrap();
        let z = apply_zscore(&m, &stats).unwrap();
        for b in 0..3 {
            for t in 0..7 {
                let back = z.get(b, t) as f64 * stats.std[b] as f64 + stats.mean[b] as f64;
                assert!((back - m.get(b, t) as f64).abs() < 1e-6);
            }
        }

        let mean_broadcast = {
            let mut out = Matrix::zeros(3, 7);
            for b in 0..3 {
                out.row_mut(b).fill(stats.mean[b]);
            }
            out
        };
        let zeroed = apply_zscore(&mean_broadcast, &stats).unwrap();
        assert!(zeroed.data().iter().all(|&v| v.abs() < 1e-4));

        let wrong = Matrix::zeros(4, 7);
        assert!(apply_zscore(&wrong, &stats).is_err());
    }

    fn sample_record() -> FeatureRecord {
        FeatureRecord {
            song_id: "song_0007".into(),
            label: 13,
            mel: numbered(128, 31),
            fourier_tg: numbered(193, 32),
            ac_tg: numbered(384, 32),
        }
    }

    #[test]
    fn feature_file_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("song_0007.tfr");
        let rec = sample_record();
        write_feature_file(&rec, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.song_id, "song_0007");
        assert_eq!(back.label, 13);
        assert_eq!(back.mel.data(), rec.mel.data());
        assert_eq!(back.fourier_tg.data(), rec.fourier_tg.data());
        assert_eq!(back.ac_tg.data(), rec.ac_tg.data());
    }

    #[test]
    fn truncated_file_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tfr");
        write_feature_file(&sample_record(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1000]).unwrap();
        match read_feature_file(&path) {
            Err(Error::Checksum { .. }) => {}
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tfr");
        write_feature_file(&sample_record(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tfr");
        fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn empty_matrix_is_rejected_at_write_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tfr");
        let mut rec = sample_record();
        rec.mel = Matrix::zeros(128, 0);
        assert!(write_feature_file(&rec, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn stats_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.tfr");
        let stats = [
            NormalizationStats {
                mean: vec![1.0; 128],
                std: vec![2.0; 128],
                feature_kind: FeatureKind::Mel,
            },
            NormalizationStats {
                mean: vec![-0.5; 193],
                std: vec![0.25; 193],
                feature_kind: FeatureKind::FourierTg,
            },
            NormalizationStats {
                mean: vec![0.125; 384],
                std: vec![4.0; 384],
                feature_kind: FeatureKind::AcTg,
            },
        ];
        write_stats_file(&path, &stats).unwrap();
        let back = read_stats_file(&path).unwrap();
        for (a, b) in stats.iter().zip(&back) {
            assert_eq!(a.feature_kind, b.feature_kind);
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.std, b.std);
        }
    }

    #[test]
    fn stats_file_enforces_canonical_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tfr");
        let s = NormalizationStats {
            mean: vec![0.0; 8],
            std: vec![1.0; 8],
            feature_kind: FeatureKind::AcTg,
        };
        let stats = [s.clone(), s.clone(), s];
        assert!(write_stats_file(&path, &stats).is_err());
    }
}
