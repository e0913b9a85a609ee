//! Dataset ingestion: directory scan, stratified splits and batching.

mod image;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::image::{decode_image_bytes, load_image, resize_bilinear, OctImage};
use crate::{ClassLabel, Error, Result, IMAGE_LEN, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::ParseError(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: ClassLabel,
    #[serde(default)]
    pub split: Option<Split>,
}

/// The dataset's files, their labels and (once split) their partition.
/// Serialised as `{seed, classes, entries: [{path, class, split}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: Vec<ClassLabel>,
    pub entries: Vec<ManifestEntry>,
    /// Non-fatal problems found while scanning.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> DatasetManifest {
        DatasetManifest {
            seed: 0,
            classes: ClassLabel::ALL.to_vec(),
            entries,
            warnings: vec![],
        }
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class).or_insert(0) += 1;
        }
        counts
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let bytes = fs::read(path.as_ref())?;
        serde_json::from_slice(&bytes).map_err(|e| Error::ParseError(format!("{}: {e}", path.as_ref().display())))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists every decodable image under `<root>/<ClassName>/`. Class directory
/// names match case-insensitively; anything else is reported as a warning.
pub fn scan_dataset_dir(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} is not a directory", root.display()),
        )));
    }
    let mut warnings = Vec::new();
    let mut class_dirs: BTreeMap<ClassLabel, Vec<PathBuf>> = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match ClassLabel::from_name(&name) {
            Some(class) => class_dirs.entry(class).or_default().push(dir),
            None => warnings.push(format!("ignoring unrecognised directory {}", dir.display())),
        }
    }
    if class_dirs.len() < NUM_CLASSES {
        let missing = ClassLabel::ALL
            .iter()
            .filter(|c| !class_dirs.contains_key(c))
            .map(|c| c.name().to_string())
            .collect();
        return Err(Error::MissingClassDir {
            root: root.to_path_buf(),
            found: class_dirs.len(),
            missing,
        });
    }

    let mut candidates = Vec::new();
    for (class, dirs) in &class_dirs {
        for dir in dirs {
            let mut files = Vec::new();
            collect_files(dir, &mut files)?;
            candidates.extend(files.into_iter().map(|p| (*class, p)));
        }
    }
    // header probe only; full decoding happens at load time
    let probed: Vec<(ClassLabel, PathBuf, bool)> = candidates
        .into_par_iter()
        .map(|(class, path)| {
            let ok = ::image::ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .ok()
                .and_then(|r| r.into_dimensions().ok())
                .is_some();
            (class, path, ok)
        })
        .collect();
    let mut entries = Vec::new();
    for (class, path, ok) in probed {
        if ok {
            entries.push(ManifestEntry { path, class, split: None });
        } else {
            warnings.push(format!("skipping undecodable file {}", path.display()));
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    entries.sort_by(|a, b| (a.class, &a.path).cmp(&(b.class, &b.path)));
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DatasetManifest {
        seed: 0,
        classes: ClassLabel::ALL.to_vec(),
        entries,
        warnings,
    })
}

/// Per-class sizes for `(train, val, test)`; every split keeps at least one
/// example whenever the class has three or more.
fn stratum_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let mut train = (n as f64 * fractions.0).round() as usize;
    let mut val = ((n as f64 * fractions.1).round() as usize).min(n - train.min(n));
    train = train.min(n);
    let mut test = n - train - val;
    if n >= 3 {
        for slot in [&mut val, &mut test] {
            if *slot == 0 {
                *slot = 1;
                train -= 1;
            }
        }
    }
    debug_assert_eq!(train + val + test, n);
    (train, val, test)
}

/// Stratified, seeded assignment of every entry to train/val/test.
pub fn make_splits(manifest: &DatasetManifest, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(fractions));
    }
    let mut out = manifest.clone();
    out.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..out.entries.len()).filter(|&i| out.entries[i].class == class).collect();
        idx.sort_by(|&i, &j| out.entries[i].path.cmp(&out.entries[j].path));
        idx.shuffle(&mut rng);
        let (train, val, _) = stratum_sizes(idx.len(), fractions);
        for (k, &i) in idx.iter().enumerate() {
            out.entries[i].split = Some(if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}

/// `N` images (interleaved 224×224×3 each) with `N×8` label rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<f32>,
}

impl Batch {
    pub fn new(images: Vec<f32>, labels: Vec<f32>) -> Result<Batch> {
        let n = labels.len() / NUM_CLASSES;
        if n == 0 || labels.len() != n * NUM_CLASSES || images.len() != n * IMAGE_LEN {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} image floats and {} label floats is inconsistent",
                images.len(),
                labels.len()
            )));
        }
        for row in labels.chunks_exact(NUM_CLASSES) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::ShapeMismatch(format!("label row sums to {s}")));
            }
        }
        Ok(Batch { images, labels })
    }

    pub fn from_images(images: &[OctImage], classes: &[ClassLabel]) -> Result<Batch> {
        if images.len() != classes.len() {
            return Err(Error::LengthMismatch {
                truths: classes.len(),
                predictions: images.len(),
            });
        }
        let mut px = Vec::with_capacity(images.len() * IMAGE_LEN);
        for img in images {
            px.extend_from_slice(img.pixels());
        }
        let labels = classes.iter().flat_map(|c| c.one_hot()).collect();
        Batch::new(px, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len() / NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn label(&self, i: usize) -> &[f32] {
        &self.labels[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }

    /// Index of the largest label entry per row (first on ties).
    pub fn target_classes(&self) -> Vec<usize> {
        self.labels.chunks_exact(NUM_CLASSES).map(argmax_f32).collect()
    }
}

/// Index of the largest value (first on ties).
pub fn argmax_f64(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Yields one split's examples in batches, loading images on demand.
///
/// With a shuffle seed the order is a deterministic function of
/// `(seed, epoch)`; without one the manifest order is kept.
pub struct BatchIter {
    items: Vec<(PathBuf, ClassLabel)>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    pub fn num_batches(&self) -> usize {
        self.items.len().div_ceil(self.batch_size)
    }

    pub fn num_examples(&self) -> usize {
        self.items.len()
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.items.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.items.len());
        let chunk = &self.items[self.pos..end];
        self.pos = end;
        let loaded: Result<Vec<OctImage>> = chunk.par_iter().map(|(p, _)| load_image(p)).collect();
        let classes: Vec<ClassLabel> = chunk.iter().map(|(_, c)| *c).collect();
        Some(loaded.and_then(|imgs| Batch::from_images(&imgs, &classes)))
    }
}

pub fn batch_iterator(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::InvalidTrainConfig("batch_size must be >= 1".into()));
    }
    let mut items: Vec<(PathBuf, ClassLabel)> = manifest
        .split_entries(split)
        .into_iter()
        .map(|e| (e.path.clone(), e.class))
        .collect();
    if items.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        items.shuffle(&mut rng);
    }
    Ok(BatchIter {
        items,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{Rgb, RgbImage};
    use std::collections::HashSet;

    fn write_fixture(root: &Path, classes: &[&str], per_class: usize) {
        for (ci, name) in classes.iter().enumerate() {
            let dir = root.join(name);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                RgbImage::from_pixel(16, 12, Rgb([ci as u8 * 20, i as u8, 0]))
                    .save(dir.join(format!("img{i}.png")))
                    .unwrap();
            }
        }
    }

    fn fake_manifest(per_class: usize) -> DatasetManifest {
        let entries = ClassLabel::ALL
            .iter()
            .flat_map(|&c| {
                (0..per_class).map(move |i| ManifestEntry {
                    path: PathBuf::from(format!("{}/{i:04}.png", c.name())),
                    class: c,
                    split: None,
                })
            })
            .collect();
        DatasetManifest::from_entries(entries)
    }

    #[test]
    fn scan_finds_all_classes() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<&str> = ClassLabel::ALL.iter().map(|c| c.name()).collect();
        write_fixture(dir.path(), &names, 3);
        fs::create_dir_all(dir.path().join("extras")).unwrap();
        fs::write(dir.path().join("AMD/notes.txt"), "not an image").unwrap();
        let m = scan_dataset_dir(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 24);
        assert_eq!(m.class_counts().len(), 8);
        assert!(m.class_counts().values().all(|&c| c == 3));
        assert_eq!(m.warnings.len(), 2, "{:?}", m.warnings);
    }

    #[test]
    fn scan_is_case_insensitive() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = ClassLabel::ALL.iter().map(|c| c.name().to_lowercase()).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        write_fixture(dir.path(), &refs, 1);
        assert_eq!(scan_dataset_dir(dir.path()).unwrap().entries.len(), 8);
    }

    #[test]
    fn scan_with_seven_classes_fails() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<&str> = ClassLabel::ALL[..7].iter().map(|c| c.name()).collect();
        write_fixture(dir.path(), &names, 2);
        match scan_dataset_dir(dir.path()) {
            Err(Error::MissingClassDir { found, missing, .. }) => {
                assert_eq!(found, 7);
                assert_eq!(missing, vec!["NORMAL".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scan_with_no_images_fails() {
        let dir = tempfile::tempdir().unwrap();
        for c in ClassLabel::ALL {
            fs::create_dir_all(dir.path().join(c.name())).unwrap();
        }
        assert!(matches!(scan_dataset_dir(dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn stratified_split_arithmetic() {
        let m = make_splits(&fake_manifest(100), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(m.split_len(Split::Train), 640);
        assert_eq!(m.split_len(Split::Val), 80);
        assert_eq!(m.split_len(Split::Test), 80);
        for class in ClassLabel::ALL {
            let count = |s| m.entries.iter().filter(|e| e.class == class && e.split == Some(s)).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (80, 10, 10));
        }
        assert_eq!(m.seed, 7);
    }

    #[test]
    fn splits_are_deterministic_and_seed_dependent() {
        let base = fake_manifest(20);
        let a = make_splits(&base, (0.8, 0.1, 0.1), 7).unwrap();
        let b = make_splits(&base, (0.8, 0.1, 0.1), 7).unwrap();
        let c = make_splits(&base, (0.8, 0.1, 0.1), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn small_classes_still_cover_every_split() {
        let m = make_splits(&fake_manifest(3), (0.8, 0.1, 0.1), 1).unwrap();
        for s in Split::ALL {
            assert_eq!(m.split_len(s), 8);
        }
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let m = fake_manifest(5);
        for f in [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.9, 0.2, -0.1)] {
            assert!(matches!(make_splits(&m, f, 0), Err(Error::InvalidFractions(_))));
        }
    }

    #[test]
    fn manifest_json_schema() {
        let m = make_splits(&fake_manifest(3), (0.8, 0.1, 0.1), 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["seed"], 2);
        assert_eq!(v["classes"][0], "AMD");
        let e = &v["entries"][0];
        assert!(e["path"].is_string() && e["class"].is_string() && e["split"].is_string());
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path().join("m.json")).unwrap();
        assert_eq!(DatasetManifest::load(dir.path().join("m.json")).unwrap(), m);
    }

    fn on_disk_split(n_per_class: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<&str> = ClassLabel::ALL.iter().map(|c| c.name()).collect();
        write_fixture(dir.path(), &names, n_per_class);
        let mut m = scan_dataset_dir(dir.path()).unwrap();
        for e in &mut m.entries {
            e.split = Some(Split::Train);
        }
        (dir, m)
    }

    #[test]
    fn batches_cover_split_exactly_once() {
        let (_dir, mut m) = on_disk_split(9);
        m.entries.truncate(70);
        let it = batch_iterator(&m, Split::Train, 32, Some(5), 0).unwrap();
        assert_eq!(it.num_batches(), 3);
        let batches: Vec<Batch> = it.map(|b| b.unwrap()).collect();
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![32, 32, 6]);
        // every label row is one-hot
        for b in &batches {
            for i in 0..b.len() {
                let row = b.label(i);
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(row.iter().sum::<f32>(), 1.0);
            }
        }
        // multiset of (image, class) equals the split
        let mut seen: Vec<(Vec<u32>, usize)> = batches
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| (b.image(i).iter().map(|v| v.to_bits()).collect(), argmax_f32(b.label(i)))))
            .collect();
        seen.sort();
        let mut expect: Vec<(Vec<u32>, usize)> = m
            .entries
            .iter()
            .map(|e| (load_image(&e.path).unwrap().pixels().iter().map(|v| v.to_bits()).collect(), e.class.index()))
            .collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch_only() {
        let (_dir, m) = on_disk_split(4);
        let order = |seed, epoch| -> Vec<usize> {
            batch_iterator(&m, Split::Train, 8, Some(seed), epoch)
                .unwrap()
                .flat_map(|b| b.unwrap().target_classes())
                .collect()
        };
        assert_eq!(order(3, 0), order(3, 0));
        let distinct: HashSet<Vec<usize>> = [order(3, 0), order(3, 1), order(4, 0)].into_iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn empty_split_is_an_error() {
        let m = fake_manifest(2);
        assert!(matches!(batch_iterator(&m, Split::Val, 4, None, 0), Err(Error::EmptySplit(_))));
    }
}
