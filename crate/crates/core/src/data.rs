//! Seeded synthetic benchmark generation and the on-disk feature format.
//!
//! A dataset directory holds a `manifest.json` plus, for every modality and
//! split, three blobs: features (`f32` LE, row-major `[count, L, raw_dim]`),
//! labels (`i32` LE) and sample ids (`u64` LE). Each blob is recorded with
//! its SHA-256 digest.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MilError, Result};
use crate::model::FeatureSequence;
use crate::params::{derive_rng, gaussian};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Pointwise nonlinearity applied after a modality's linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Tanh,
    Abs,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Tanh => x.tanh(),
            Transform::Abs => x.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub raw_dim: usize,
    pub transform: Transform,
    /// Multiplier applied before the nonlinearity.
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub name: String,
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub seq_len: usize,
    pub latent_dim: usize,
    pub counts: SplitCounts,
    /// Spread of class centres in latent space.
    pub center_scale: f64,
    /// Per-sample scatter around the class centre.
    pub class_scatter: f64,
    /// Per-token additive noise.
    pub noise: f64,
    /// Fraction of variance in each modality map that comes from a map
    /// shared by every modality; the rest is modality specific.
    pub shared_fraction: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let m = |name: &str, transform| ModalitySpec {
            name: name.into(),
            raw_dim: 64,
            transform,
            gain: 1.0,
        };
        Self {
            name: "synthetic-mil".into(),
            num_classes: 10,
            modalities: vec![
                m("rgb", Transform::Identity),
                m("flow", Transform::Tanh),
                m("audio", Transform::Abs),
            ],
            seq_len: 8,
            latent_dim: 16,
            counts: SplitCounts {
                train: 700,
                val: 100,
                test: 200,
            },
            center_scale: 1.0,
            class_scatter: 0.5,
            noise: 0.1,
            shared_fraction: 0.8,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MilError::config("num_classes", "must be at least 2"));
        }
        if self.modalities.len() < 2 {
            return Err(MilError::config("modalities", "need at least 2 modalities"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.modalities {
            if m.raw_dim == 0 {
                return Err(MilError::config("raw_dim", format!("modality {} has raw_dim 0", m.name)));
            }
            if m.name.is_empty() || !seen.insert(m.name.as_str()) {
                return Err(MilError::config("modalities", format!("empty or duplicate name {:?}", m.name)));
            }
            if !m.gain.is_finite() {
                return Err(MilError::config("gain", "must be finite"));
            }
        }
        if self.seq_len == 0 || self.latent_dim == 0 {
            return Err(MilError::config("seq_len", "seq_len and latent_dim must be positive"));
        }
        let c = self.counts;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(MilError::config("counts", "every split needs at least one sample"));
        }
        for (field, v) in [
            ("center_scale", self.center_scale),
            ("class_scatter", self.class_scatter),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MilError::config(field, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(MilError::config("shared_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub count: usize,
    pub features: BlobRef,
    pub labels: BlobRef,
    pub ids: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecords {
    pub train: SplitRecord,
    pub val: SplitRecord,
    pub test: SplitRecord,
}

impl SplitRecords {
    pub fn get(&self, kind: SplitKind) -> &SplitRecord {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRecord {
    pub id: usize,
    pub name: String,
    pub raw_dim: usize,
    pub seq_len: usize,
    pub splits: SplitRecords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub version: u32,
    pub num_classes: usize,
    pub modalities: Vec<ModalityRecord>,
    /// Test-sample ids present in every modality, for late fusion.
    #[serde(default)]
    pub paired_test_ids: Option<Vec<u64>>,
    /// Directory the blob paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

/// One split of one modality held in memory, tokens flattened to
/// `[count * L, raw_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub seq_len: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> Result<FeatureSequence> {
        if i >= self.len() {
            return Err(MilError::Index {
                context: "split sample".into(),
                index: i,
                len: self.len(),
            });
        }
        let l = self.seq_len;
        FeatureSequence::new(self.features.slice(ndarray::s![i * l..(i + 1) * l, ..]).to_owned())
    }

    /// Tokens of the given samples stacked as `[indices.len() * L, raw_dim]`.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let l = self.seq_len;
        let mut out = Array2::zeros((indices.len() * l, self.raw_dim()));
        for (k, &i) in indices.iter().enumerate() {
            out.slice_mut(ndarray::s![k * l..(k + 1) * l, ..])
                .assign(&self.features.slice(ndarray::s![i * l..(i + 1) * l, ..]));
        }
        out
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Iterator over `(sequence, label)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (FeatureSequence, usize)> + '_ {
        (0..self.len()).map(move |i| (self.sample(i).expect("in range"), self.labels[i]))
    }
}

/// All data one phase may touch: a single modality's three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDataset {
    pub modality: String,
    pub num_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl PhaseDataset {
    pub fn seq_len(&self) -> usize {
        self.train.seq_len
    }

    pub fn raw_dim(&self) -> usize {
        self.train.raw_dim()
    }
}

/// Test features of every modality, aligned by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTestSet {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    /// `(modality, split)` with rows in `ids` order.
    pub modalities: Vec<(String, Split)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_blob(dir: &Path, rel: &str, bytes: &[u8]) -> Result<BlobRef> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MilError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| MilError::io(&path, e))?;
    Ok(BlobRef {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
    })
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Write one split in the blob format and return its record.
pub fn write_split(dir: &Path, modality: &str, kind: SplitKind, split: &Split) -> Result<SplitRecord> {
    let base = format!("{modality}/{}", kind.as_str());
    let features = write_blob(dir, &format!("{base}.features.bin"), &f32_bytes(split.features.iter().copied()))?;
    let label_bytes: Vec<u8> = split.labels.iter().flat_map(|&y| (y as i32).to_le_bytes()).collect();
    let labels = write_blob(dir, &format!("{base}.labels.bin"), &label_bytes)?;
    let id_bytes: Vec<u8> = split.ids.iter().flat_map(|id| id.to_le_bytes()).collect();
    let ids = write_blob(dir, &format!("{base}.ids.bin"), &id_bytes)?;
    Ok(SplitRecord {
        count: split.len(),
        features,
        labels,
        ids,
    })
}

/// Latent vectors and labels for one split; class `i mod C` keeps splits
/// balanced.
fn latents(spec: &BenchmarkSpec, centers: &Array2<f64>, kind: SplitKind, count: usize) -> (Array2<f64>, Vec<usize>) {
    let d = spec.latent_dim;
    let mut z = Array2::zeros((count, d));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let y = i % spec.num_classes;
        let mut rng = derive_rng(spec.seed, &format!("data.latent.{}", kind.as_str()), i as u64);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            z[[i, j]] = centers[[y, j]] + spec.class_scatter * e;
        }
        labels.push(y);
    }
    (z, labels)
}

fn id_offset(spec: &BenchmarkSpec, kind: SplitKind) -> u64 {
    match kind {
        SplitKind::Train => 0,
        SplitKind::Val => spec.counts.train as u64,
        SplitKind::Test => (spec.counts.train + spec.counts.val) as u64,
    }
}

/// Generate the benchmark in memory (values already rounded to `f32`).
pub fn synthesize(spec: &BenchmarkSpec) -> Result<Vec<(ModalitySpec, [Split; 3])>> {
    spec.validate()?;
    let d_lat = spec.latent_dim;
    let centers = gaussian(spec.num_classes, d_lat, spec.center_scale, &mut derive_rng(spec.seed, "data.centers", 0));
    let shared = gaussian(spec.modalities[0].raw_dim, d_lat, 1.0, &mut derive_rng(spec.seed, "data.shared_map", 0));
    let split_latents: Vec<_> = SplitKind::ALL
        .iter()
        .map(|&k| {
            let count = match k {
                SplitKind::Train => spec.counts.train,
                SplitKind::Val => spec.counts.val,
                SplitKind::Test => spec.counts.test,
            };
            latents(spec, &centers, k, count)
        })
        .collect();

    let mut out = Vec::new();
    for (mi, m) in spec.modalities.iter().enumerate() {
        let mut map_rng = derive_rng(spec.seed, "data.modality_map", mi as u64);
        let private = gaussian(m.raw_dim, d_lat, 1.0, &mut map_rng);
        let bias = gaussian(1, m.raw_dim, 0.5, &mut map_rng).remove_axis(ndarray::Axis(0));
        let map = if spec.shared_fraction > 0.0 && shared.nrows() == m.raw_dim {
            &shared * spec.shared_fraction.sqrt() + &private * (1.0 - spec.shared_fraction).sqrt()
        } else {
            private
        };
        // unit-variance pre-activations for unit-variance latents
        let map = map / (d_lat as f64).sqrt();
        let splits: Vec<Split> = SplitKind::ALL
            .iter()
            .zip(&split_latents)
            .map(|(&kind, (z, labels))| {
                let count = labels.len();
                let clean = z.dot(&map.t()) + &bias;
                let l = spec.seq_len;
                let mut features = Array2::zeros((count * l, m.raw_dim));
                for i in 0..count {
                    let mut rng = derive_rng(spec.seed, &format!("data.tokens.{}.{}", m.name, kind.as_str()), i as u64);
                    for t in 0..l {
                        for j in 0..m.raw_dim {
                            let e: f64 = rng.sample(StandardNormal);
                            let v = m.transform.apply(m.gain * clean[[i, j]]) + spec.noise * e;
                            features[[i * l + t, j]] = v as f32 as f64;
                        }
                    }
                }
                let ids = (0..count as u64).map(|i| id_offset(spec, kind) + i).collect();
                Split {
                    features,
                    labels: labels.clone(),
                    ids,
                    seq_len: l,
                }
            })
            .collect();
        let [train, val, test]: [Split; 3] = splits.try_into().expect("three splits");
        out.push((m.clone(), [train, val, test]));
    }
    Ok(out)
}

/// Generate the benchmark and write it under `out`. Refuses to overwrite an
/// existing manifest unless `force` is set.
pub fn generate_benchmark(spec: &BenchmarkSpec, out: &Path, force: bool) -> Result<DatasetManifest> {
    spec.validate()?;
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(MilError::config(
            "out",
            format!("{} already exists; pass --force to overwrite", manifest_path.display()),
        ));
    }
    fs::create_dir_all(out).map_err(|e| MilError::io(out, e))?;
    let data = synthesize(spec)?;
    let mut modalities = Vec::new();
    for (id, (m, splits)) in data.iter().enumerate() {
        let [train, val, test] = splits;
        modalities.push(ModalityRecord {
            id,
            name: m.name.clone(),
            raw_dim: m.raw_dim,
            seq_len: spec.seq_len,
            splits: SplitRecords {
                train: write_split(out, &m.name, SplitKind::Train, train)?,
                val: write_split(out, &m.name, SplitKind::Val, val)?,
                test: write_split(out, &m.name, SplitKind::Test, test)?,
            },
        });
    }
    let paired = data[0].1[2].ids.clone();
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        version: FORMAT_VERSION,
        num_classes: spec.num_classes,
        modalities,
        paired_test_ids: Some(paired),
        root: out.to_path_buf(),
    };
    write_manifest(&manifest, out)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| MilError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| MilError::io(&path, e))?;
    Ok(path)
}

/// Read and structurally validate a manifest. `path` may be the manifest
/// file or the directory containing it. Blobs are read lazily by
/// [`DatasetManifest::load_split`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| MilError::io(&file, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| MilError::json(&file, e))?;
    manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.num_classes == 0 {
        return Err(MilError::Data("manifest num_classes is 0".into()));
    }
    let mut seen = BTreeSet::new();
    for m in &manifest.modalities {
        if !seen.insert(m.name.as_str()) {
            return Err(MilError::Data(format!("duplicate modality {}", m.name)));
        }
        if m.raw_dim == 0 || m.seq_len == 0 {
            return Err(MilError::Data(format!("modality {} has zero raw_dim or seq_len", m.name)));
        }
    }
    Ok(manifest)
}

fn read_blob(root: &Path, blob: &BlobRef, expected_len: usize) -> Result<Vec<u8>> {
    let path = root.join(&blob.path);
    let bytes = fs::read(&path).map_err(|e| MilError::io(&path, e))?;
    if bytes.len() != expected_len {
        return Err(MilError::Integrity {
            blob: path,
            reason: format!("expected {expected_len} bytes, found {}", bytes.len()),
        });
    }
    let digest = sha256_hex(&bytes);
    if digest != blob.sha256 {
        return Err(MilError::Integrity {
            blob: path,
            reason: format!("sha256 mismatch: manifest {}, file {digest}", blob.sha256),
        });
    }
    Ok(bytes)
}

impl DatasetManifest {
    pub fn modality(&self, name: &str) -> Result<&ModalityRecord> {
        self.modalities.iter().find(|m| m.name == name).ok_or_else(|| {
            let names: Vec<_> = self.modalities.iter().map(|m| m.name.as_str()).collect();
            MilError::config("phase_order", format!("unknown modality {name:?}; available: {}", names.join(",")))
        })
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    /// Read, checksum and validate one split.
    pub fn load_split(&self, modality: &str, kind: SplitKind) -> Result<Split> {
        let m = self.modality(modality)?;
        let rec = m.splits.get(kind);
        let n = rec.count;
        let fbytes = read_blob(&self.root, &rec.features, n * m.seq_len * m.raw_dim * 4)?;
        let lbytes = read_blob(&self.root, &rec.labels, n * 4)?;
        let ibytes = read_blob(&self.root, &rec.ids, n * 8)?;
        let values: Vec<f64> = fbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(MilError::Data(format!(
                "{}: non-finite feature at index {pos}",
                self.root.join(&rec.features.path).display()
            )));
        }
        let features = Array2::from_shape_vec((n * m.seq_len, m.raw_dim), values)
            .map_err(|e| MilError::Data(format!("feature blob shape: {e}")))?;
        let mut labels = Vec::with_capacity(n);
        for (i, c) in lbytes.chunks_exact(4).enumerate() {
            let y = i32::from_le_bytes(c.try_into().expect("4 bytes"));
            if y < 0 || y as usize >= self.num_classes {
                return Err(MilError::Data(format!(
                    "{} sample {i}: label {y} outside 0..{}",
                    self.root.join(&rec.labels.path).display(),
                    self.num_classes
                )));
            }
            labels.push(y as usize);
        }
        let ids = ibytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Split {
            features,
            labels,
            ids,
            seq_len: m.seq_len,
        })
    }

    /// All three splits of `modality`, checking that their ids are disjoint.
    pub fn load_phase(&self, modality: &str) -> Result<PhaseDataset> {
        let train = self.load_split(modality, SplitKind::Train)?;
        let val = self.load_split(modality, SplitKind::Val)?;
        let test = self.load_split(modality, SplitKind::Test)?;
        let mut seen = BTreeSet::new();
        for id in train.ids.iter().chain(&val.ids).chain(&test.ids) {
            if !seen.insert(*id) {
                return Err(MilError::Data(format!("modality {modality}: sample id {id} appears in two splits")));
            }
        }
        Ok(PhaseDataset {
            modality: modality.to_string(),
            num_classes: self.num_classes,
            train,
            val,
            test,
        })
    }

    /// Test splits of `modalities` aligned on the paired id index. Every
    /// paired id must exist in every modality with a consistent label.
    pub fn load_paired_test(&self, modalities: &[String]) -> Result<PairedTestSet> {
        let ids = self
            .paired_test_ids
            .clone()
            .ok_or_else(|| MilError::Data("manifest has no paired test index".into()))?;
        let mut labels: Option<Vec<usize>> = None;
        let mut out = Vec::new();
        for name in modalities {
            let split = self.load_split(name, SplitKind::Test)?;
            let pos: HashMap<u64, usize> = split.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let mut order = Vec::with_capacity(ids.len());
            for id in &ids {
                match pos.get(id) {
                    Some(&i) => order.push(i),
                    None => return Err(MilError::Data(format!("paired test id {id} missing from modality {name}"))),
                }
            }
            let aligned = Split {
                features: split.gather(&order),
                labels: split.gather_labels(&order),
                ids: ids.clone(),
                seq_len: split.seq_len,
            };
            match &labels {
                None => labels = Some(aligned.labels.clone()),
                Some(l) if *l != aligned.labels => {
                    return Err(MilError::Data(format!("paired labels disagree for modality {name}")));
                }
                Some(_) => {}
            }
            out.push((name.clone(), aligned));
        }
        Ok(PairedTestSet {
            ids,
            labels: labels.unwrap_or_default(),
            modalities: out,
        })
    }
}

/// Mean over tokens for every sample of a split: `[count, raw_dim]`.
pub fn pooled_features(split: &Split) -> Array2<f64> {
    crate::tape::mean_pool(split.features.view(), split.seq_len)
}

/// Class histogram of a split.
pub fn class_counts(split: &Split, num_classes: usize) -> Array1<usize> {
    let mut c = Array1::zeros(num_classes);
    for &y in &split.labels {
        c[y] += 1;
    }
    c
}
