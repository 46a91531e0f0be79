//! Dataset plumbing: directory manifests, stratified train/valid/test
//! splits, and a synthetic click-track corpus for end-to-end checks.
//!
//! Layout convention is `root/<class_name>/<song>.wav`. Song ids are file
//! stems and must be globally unique. Class indices always follow the
//! lexicographic order of class names, so every consumer agrees on them
//! without extra bookkeeping.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub song_id: String,
    /// Path relative to the dataset root, always with `/` separators.
    pub relative_path: String,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    classes: Vec<String>,
}

/// Characters that would break the single-quote-free CSV files or the
/// directory layout.
fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Dataset(format!("empty {what}")));
    }
    if value.contains([',', '"', '\n', '\r']) {
        return Err(Error::Dataset(format!(
            "{what} {value:?} contains CSV metacharacters"
        )));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<DatasetManifest> {
        if entries.is_empty() {
            return Err(Error::Dataset("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        let mut classes = BTreeSet::new();
        for e in &entries {
            check_field(&e.song_id, "song id")?;
            check_field(&e.class_name, "class name")?;
            check_field(&e.relative_path, "relative path")?;
            if !seen.insert(e.song_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate song id {}", e.song_id)));
            }
            classes.insert(e.class_name.clone());
        }
        Ok(DatasetManifest {
            entries,
            classes: classes.into_iter().collect(),
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Class names in index order (lexicographic).
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    /// Label of an entry; entries always carry a known class.
    pub fn label_of(&self, entry: &ManifestEntry) -> usize {
        self.class_index(&entry.class_name)
            .expect("entry class is in the class table")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, song_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.song_id == song_id)
    }
}

/// Scan `root/<class>/<song>.wav` into a manifest. Classes and songs are
/// visited in sorted order, so the result is stable across runs.
///
/// With `min_duration_s > 0`, every file's header is checked and songs
/// shorter than the requested analysis window are rejected here rather
/// than failing deep inside feature extraction.
pub fn build_manifest(root: &Path, min_duration_s: f64) -> Result<DatasetManifest> {
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push((name, path));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    class_dirs.sort();
    let mut entries = Vec::new();
    for (class_name, dir) in &class_dirs {
        let mut files: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_file() && path.extension().is_some_and(|x| x == "wav") {
                files.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {class_name} has no .wav files"
            )));
        }
        files.sort();
        for file in files {
            let path = dir.join(&file);
            if min_duration_s > 0.0 {
                let dur = audio::wav_duration_s(&path)?;
                if dur + 1e-9 < min_duration_s {
                    return Err(Error::Dataset(format!(
                        "{} is {dur:.2}s, analysis window needs {min_duration_s:.2}s",
                        path.display()
                    )));
                }
            }
            let stem = Path::new(&file)
                .file_stem()
                .expect("file has .wav extension")
                .to_string_lossy()
                .into_owned();
            entries.push(ManifestEntry {
                song_id: stem,
                relative_path: format!("{class_name}/{file}"),
                class_name: class_name.clone(),
            });
        }
    }
    DatasetManifest::new(entries)
}

pub fn write_manifest_csv(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::from("song_id,relative_path,class_name\n");
    for e in manifest.entries() {
        writeln!(out, "{},{},{}", e.song_id, e.relative_path, e.class_name)
            .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest_csv(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("song_id,relative_path,class_name") => {}
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad manifest header {other:?}"),
            })
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: want 3 fields, got {}", i + 2, fields.len()),
            });
        }
        entries.push(ManifestEntry {
            song_id: fields[0].to_string(),
            relative_path: fields[1].to_string(),
            class_name: fields[2].to_string(),
        });
    }
    DatasetManifest::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Valid, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Partition> {
        match s {
            "train" => Some(Partition::Train),
            "valid" => Some(Partition::Valid),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Song-to-partition assignment. Iteration follows song id order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSpec {
    assignment: BTreeMap<String, Partition>,
}

impl SplitSpec {
    pub fn partition_of(&self, song_id: &str) -> Option<Partition> {
        self.assignment.get(song_id).copied()
    }

    pub fn songs(&self, partition: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == partition)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &p in self.assignment.values() {
            c[p as usize] += 1;
        }
        c
    }
}

/// Stratified split: shuffle each class with the seed, then cut at the
/// cumulative ratio boundaries, so per-class counts differ from the exact
/// ratios by at most one song.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<SplitSpec> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 || ratios.0 == 0 {
        return Err(Error::InvalidArgument(format!(
            "unusable split ratios {ratios:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for class in manifest.classes() {
        let mut songs: Vec<&str> = manifest
            .entries()
            .iter()
            .filter(|e| &e.class_name == class)
            .map(|e| e.song_id.as_str())
            .collect();
        if songs.len() < Partition::ALL.len() {
            return Err(Error::Dataset(format!(
                "class {class} has {} songs, need at least {}",
                songs.len(),
                Partition::ALL.len()
            )));
        }
        songs.shuffle(&mut rng);
        let n = songs.len() as f64;
        let cut1 = (n * ratios.0 as f64 / total as f64).round() as usize;
        let cut2 = (n * (ratios.0 + ratios.1) as f64 / total as f64).round() as usize;
        let cut2 = cut2.clamp(cut1, songs.len());
        for (i, song) in songs.iter().enumerate() {
            let p = if i < cut1 {
                Partition::Train
            } else if i < cut2 {
                Partition::Valid
            } else {
                Partition::Test
            };
            assignment.insert(song.to_string(), p);
        }
    }
    Ok(SplitSpec { assignment })
}

pub fn write_split_csv(split: &SplitSpec, path: &Path) -> Result<()> {
    let mut out = String::from("song_id,partition\n");
    for (song, p) in &split.assignment {
        writeln!(out, "{song},{}", p.name()).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_split_csv(path: &Path) -> Result<SplitSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("song_id,partition") => {}
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad split header {other:?}"),
            })
        }
    }
    let mut assignment = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((song, part)) = line.split_once(',') else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: want 2 fields", i + 2),
            });
        };
        let Some(p) = Partition::parse(part) else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: unknown partition {part:?}", i + 2),
            });
        };
        if assignment.insert(song.to_string(), p).is_some() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: duplicate song id {song}", i + 2),
            });
        }
    }
    Ok(SplitSpec { assignment })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timbre {
    Click,
    NoiseBurst,
    ToneBurst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub bpm: f64,
    pub timbre: Timbre,
    /// Per-event timing jitter as a fraction of the beat period.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<SynthClass>,
    pub songs_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl SyntheticSpec {
    /// Five classes spanning the common EDM tempo range, with alternating
    /// timbres so spectral and rhythmic cues both vary.
    pub fn default_suite(songs_per_class: usize, duration_s: f64) -> SyntheticSpec {
        let classes = [
            ("bpm090", 90.0, Timbre::Click),
            ("bpm110", 110.0, Timbre::NoiseBurst),
            ("bpm128", 128.0, Timbre::ToneBurst),
            ("bpm140", 140.0, Timbre::Click),
            ("bpm170", 170.0, Timbre::NoiseBurst),
        ];
        SyntheticSpec {
            classes: classes
                .into_iter()
                .map(|(name, bpm, timbre)| SynthClass {
                    name: name.to_string(),
                    bpm,
                    timbre,
                    jitter: 0.02,
                })
                .collect(),
            songs_per_class,
            duration_s,
            sample_rate: 22_050,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("no synthetic classes".into()));
        }
        if self.songs_per_class == 0 {
            return Err(Error::InvalidArgument("songs_per_class is 0".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "duration_s = {}",
                self.duration_s
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate = 0".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            check_field(&c.name, "class name")?;
            if c.name.contains(['/', '\\']) {
                return Err(Error::InvalidArgument(format!(
                    "class name {:?} is not a plain directory name",
                    c.name
                )));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate class name {}",
                    c.name
                )));
            }
            if !(c.bpm > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "class {}: bpm = {}",
                    c.name, c.bpm
                )));
            }
            if !(0.0..=0.2).contains(&c.jitter) {
                return Err(Error::InvalidArgument(format!(
                    "class {}: jitter {} outside [0, 0.2]",
                    c.name, c.jitter
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Each song draws from its own stream, so synthesis order (and thread
/// count) cannot change any file's bytes.
fn song_seed(base: u64, class_idx: usize, song_idx: usize) -> u64 {
    let h = splitmix64(base ^ class_idx as u64);
    splitmix64(h ^ song_idx as u64)
}

/// Additively render one event: an exponential swell into an exponential
/// decay, shaped by the class timbre. The attack is log-linear on purpose:
/// under the analysis chain's log compression it spreads onset energy
/// evenly over several frames, which keeps a beat train's tempo
/// fundamental dominant over its harmonics.
fn render_event(
    buf: &mut [f32],
    timbre: Timbre,
    onset_s: f64,
    amp: f32,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) {
    let sr = sample_rate as f64;
    let attack: f64 = 0.080;
    let (tau, length_s) = match timbre {
        Timbre::Click => (0.025, attack + 0.10),
        Timbre::NoiseBurst => (0.050, attack + 0.20),
        Timbre::ToneBurst => (0.060, attack + 0.24),
    };
    let start = (onset_s * sr).round() as i64;
    let len = (length_s * sr).round() as i64;
    for k in 0..len {
        let idx = start + k;
        let t = k as f64 / sr;
        let env = if t < attack {
            // Rises through five time constants, from -43 dB to full scale.
            ((t - attack) * 5.0 / attack).exp()
        } else {
            (-(t - attack) / tau).exp()
        };
        let wave = match timbre {
            Timbre::Click => (2.0 * std::f64::consts::PI * 1500.0 * t).sin(),
            // Draw even for clipped indices to keep the stream aligned.
            Timbre::NoiseBurst => rng.gen_range(-1.0..1.0),
            Timbre::ToneBurst => {
                0.6 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                    + 0.4 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
            }
        };
        if (0..buf.len() as i64).contains(&idx) {
            buf[idx as usize] += amp * (env * wave) as f32;
        }
    }
}

fn render_song(class: &SynthClass, duration_s: f64, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut buf = vec![0.0f32; n];
    let period = 60.0 / class.bpm;
    let phase: f64 = rng.gen_range(0.0..period);
    let n_events = ((duration_s - phase) / period).floor() as usize + 1;
    for k in 0..n_events {
        let jitter = rng.gen_range(-1.0..1.0) * class.jitter * period;
        let amp: f32 = rng.gen_range(0.7..0.9);
        render_event(
            &mut buf,
            class.timbre,
            phase + k as f64 * period + jitter,
            amp,
            sample_rate,
            &mut rng,
        );
    }
    for v in &mut buf {
        *v = v.clamp(-1.0, 1.0);
    }
    AudioClip::from_samples(buf, sample_rate).expect("non-empty synthetic clip")
}

/// Write the synthetic corpus under `out_dir` and return its manifest.
/// Same spec and seed always produce bit-identical WAV files.
pub fn synth_click_dataset(
    spec: &SyntheticSpec,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut jobs = Vec::new();
    let mut entries = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let dir = out_dir.join(&class.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for si in 0..spec.songs_per_class {
            let file = format!("{}_{si:03}.wav", class.name);
            let path = dir.join(&file);
            entries.push(ManifestEntry {
                song_id: format!("{}_{si:03}", class.name),
                relative_path: format!("{}/{file}", class.name),
                class_name: class.name.clone(),
            });
            jobs.push((ci, si, path));
        }
    }
    jobs.par_iter().try_for_each(|(ci, si, path)| {
        let class = &spec.classes[*ci];
        let clip = render_song(
            class,
            spec.duration_s,
            spec.sample_rate,
            song_seed(seed, *ci, *si),
        );
        audio::write_wav(path, &clip)
    })?;
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{self, StftConfig};

    fn touch_wav(path: &Path, seconds: f64) {
        let n = (22_050.0 * seconds) as usize;
        let clip = AudioClip::from_samples(vec![0.01; n], 22_050).unwrap();
        audio::write_wav(path, &clip).unwrap();
    }

    fn sample_tree(root: &Path) {
        for class in ["breaks", "ambient"] {
            std::fs::create_dir_all(root.join(class)).unwrap();
            for i in 0..3 {
                touch_wav(&root.join(class).join(format!("{class}{i}.wav")), 0.5);
            }
        }
    }

    // 2 classes x 3 files, classes sorted, stable across runs.
    #[test]
    fn manifest_scans_sorted_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        let m1 = build_manifest(dir.path(), 0.0).unwrap();
        assert_eq!(m1.len(), 6);
        assert_eq!(m1.classes(), ["ambient", "breaks"]);
        assert_eq!(m1.entries()[0].song_id, "ambient0");
        assert_eq!(m1.entries()[0].relative_path, "ambient/ambient0.wav");
        assert_eq!(m1.label_of(&m1.entries()[0]), 0);
        let m2 = build_manifest(dir.path(), 0.0).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn manifest_rejects_empty_class_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        std::fs::create_dir_all(dir.path().join("empty_class")).unwrap();
        let err = build_manifest(dir.path(), 0.0).unwrap_err();
        assert!(err.to_string().contains("empty_class"), "{err}");
        std::fs::remove_dir(dir.path().join("empty_class")).unwrap();

        // Same stem in two classes collides globally.
        touch_wav(&dir.path().join("breaks").join("ambient0.wav"), 0.5);
        let err = build_manifest(dir.path(), 0.0).unwrap_err();
        assert!(err.to_string().contains("ambient0"), "{err}");
    }

    #[test]
    fn manifest_enforces_minimum_duration() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        assert!(build_manifest(dir.path(), 0.4).is_ok());
        let err = build_manifest(dir.path(), 2.0).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{err}");
        assert!(err.to_string().contains("2.00"), "{err}");
    }

    #[test]
    fn manifest_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        let m = build_manifest(dir.path(), 0.0).unwrap();
        let csv = dir.path().join("manifest.csv");
        write_manifest_csv(&m, &csv).unwrap();
        assert_eq!(read_manifest_csv(&csv).unwrap(), m);
    }

    #[test]
    fn manifest_csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(
            read_manifest_csv(&path),
            Err(Error::Format { .. })
        ));
        std::fs::write(&path, "song_id,relative_path,class_name\nonly,two\n").unwrap();
        assert!(matches!(
            read_manifest_csv(&path),
            Err(Error::Format { .. })
        ));
    }

    fn flat_manifest(per_class: &[(&str, usize)]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (class, n) in per_class {
            for i in 0..*n {
                entries.push(ManifestEntry {
                    song_id: format!("{class}_{i:04}"),
                    relative_path: format!("{class}/{class}_{i:04}.wav"),
                    class_name: class.to_string(),
                });
            }
        }
        DatasetManifest::new(entries).unwrap()
    }

    // 2,500 songs per class at 8:1:1 leave 250 test songs per
    // class; 10 songs split 8/1/1.
    #[test]
    fn split_hits_exact_ratio_counts() {
        let m = flat_manifest(&[("a", 2500), ("b", 2500)]);
        let split = split_dataset(&m, (8, 1, 1), 1).unwrap();
        assert_eq!(split.counts(), [4000, 500, 500]);
        for class in ["a", "b"] {
            let per: Vec<usize> = Partition::ALL
                .iter()
                .map(|&p| {
                    split
                        .songs(p)
                        .iter()
                        .filter(|s| s.starts_with(class))
                        .count()
                })
                .collect();
            assert_eq!(per, [2000, 250, 250]);
        }

        let m = flat_manifest(&[("a", 10)]);
        let split = split_dataset(&m, (8, 1, 1), 1).unwrap();
        assert_eq!(split.counts(), [8, 1, 1]);
    }

    // Determinism plus disjoint-and-exhaustive coverage.
    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let m = flat_manifest(&[("a", 37), ("b", 11)]);
        let s1 = split_dataset(&m, (8, 1, 1), 42).unwrap();
        let s2 = split_dataset(&m, (8, 1, 1), 42).unwrap();
        assert_eq!(s1, s2);
        let s3 = split_dataset(&m, (8, 1, 1), 43).unwrap();
        assert_ne!(s1, s3, "different seed should move at least one song");
        assert_eq!(s1.len(), m.len());
        for e in m.entries() {
            assert!(s1.partition_of(&e.song_id).is_some());
        }
        let [tr, va, te] = s1.counts();
        assert_eq!(tr + va + te, m.len());
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_ratios() {
        let m = flat_manifest(&[("a", 2)]);
        assert!(matches!(
            split_dataset(&m, (8, 1, 1), 0),
            Err(Error::Dataset(_))
        ));
        let m = flat_manifest(&[("a", 10)]);
        assert!(split_dataset(&m, (0, 1, 1), 0).is_err());
    }

    #[test]
    fn split_csv_round_trips() {
        let m = flat_manifest(&[("a", 9), ("b", 6)]);
        let split = split_dataset(&m, (8, 1, 1), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        write_split_csv(&split, &path).unwrap();
        assert_eq!(read_split_csv(&path).unwrap(), split);

        std::fs::write(&path, "song_id,partition\nx,weekend\n").unwrap();
        assert!(matches!(read_split_csv(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_spec_validation() {
        let spec = SyntheticSpec::default_suite(4, 10.0);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.classes.len(), 5);
        let bpms: Vec<f64> = spec.classes.iter().map(|c| c.bpm).collect();
        assert_eq!(bpms, [90.0, 110.0, 128.0, 140.0, 170.0]);

        let mut bad = spec.clone();
        bad.classes[0].jitter = 0.25;
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.classes[1].bpm = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.classes[2].name = "a,b".into();
        assert!(bad.validate().is_err());
    }

    // Same spec and seed, twice, byte for byte.
    #[test]
    fn synthesis_is_bit_deterministic() {
        let mut spec = SyntheticSpec::default_suite(2, 2.0);
        spec.classes.truncate(2);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_click_dataset(&spec, d1.path(), 9).unwrap();
        let m2 = synth_click_dataset(&spec, d2.path(), 9).unwrap();
        assert_eq!(m1, m2);
        for e in m1.entries() {
            let b1 = std::fs::read(d1.path().join(&e.relative_path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&e.relative_path)).unwrap();
            assert_eq!(b1, b2, "{}", e.relative_path);
        }
        // Scanning the written tree agrees with the returned manifest.
        assert_eq!(build_manifest(d1.path(), 0.0).unwrap(), m1);
    }

    // 120 BPM for 30 s puts successive onsets 0.5 s apart, so
    // 59-61 events fit depending on the phase draw.
    #[test]
    fn synthesis_places_expected_event_count() {
        let spec = SyntheticSpec {
            classes: vec![SynthClass {
                name: "c120".into(),
                bpm: 120.0,
                timbre: Timbre::Click,
                jitter: 0.0,
            }],
            songs_per_class: 1,
            duration_s: 30.0,
            sample_rate: 22_050,
        };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_click_dataset(&spec, dir.path(), 3).unwrap();
        let clip = audio::load_wav(&dir.path().join(&m.entries()[0].relative_path)).unwrap();
        let gap = (0.25 * 0.5 * 22_050.0) as usize;
        let mut events = 0;
        let mut last: i64 = -(gap as i64);
        for (i, &s) in clip.samples().iter().enumerate() {
            if s.abs() > 0.2 && i as i64 - last >= gap as i64 {
                events += 1;
                last = i as i64;
            } else if s.abs() > 0.2 {
                last = i as i64;
            }
        }
        assert!(
            (59..=61).contains(&events),
            "expected about 60 events, found {events}"
        );
    }

    // [DERIVED: dsp oracle] jitter-free clicks land the global tempo
    // estimate within one Fourier-tempogram bin of the class BPM.
    #[test]
    fn synthesis_tempo_matches_class_bpm() {
        let spec = SyntheticSpec {
            classes: vec![SynthClass {
                name: "c120".into(),
                bpm: 120.0,
                timbre: Timbre::Click,
                jitter: 0.0,
            }],
            songs_per_class: 1,
            duration_s: 15.0,
            sample_rate: 22_050,
        };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_click_dataset(&spec, dir.path(), 11).unwrap();
        let clip = audio::load_wav(&dir.path().join(&m.entries()[0].relative_path)).unwrap();
        let cfg = StftConfig::new(2048, 512).unwrap();
        let mel = dsp::mel_spectrogram(&clip, &cfg).unwrap();
        let nov = dsp::novelty_curve(&mel);
        let tg = dsp::fourier_tempogram(&nov, dsp::DEFAULT_TEMPO_WINDOW).unwrap();
        let est = dsp::estimate_global_tempo(&tg, 60.0, 200.0).unwrap();
        let bin_width = 60.0 * mel.frame_rate / dsp::DEFAULT_TEMPO_WINDOW as f64;
        assert!(
            (est - 120.0).abs() <= bin_width,
            "estimated {est:.2} BPM, bin width {bin_width:.2}"
        );
    }
}
