//! Dataset generation, splits and the JSONL manifest.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgm::{quantized, read_pgm, write_pgm};
use super::render::{render_image, SynthConfig, SynthImage};
use super::SynthError;
use crate::rng::{stream_rng, Stream};
use crate::score::{sample_record, OaScoreRecord};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.81, val: 0.09, test: 0.10 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), SynthError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(SynthError::Config(format!("split ratios {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Item counts: train and val are floored, test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64) * self.train + 1e-9).floor() as usize;
        let val = (((n as f64) * self.val + 1e-9).floor() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// One manifest line: the record's fields plus image path and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub record: OaScoreRecord,
    pub image_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), SynthError> {
    let file = fs::File::create(path).map_err(|e| SynthError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for entry in &manifest.entries {
        let line = serde_json::to_string(entry).expect("manifest entries serialize");
        writeln!(out, "{line}").map_err(|e| SynthError::io(path, e))?;
    }
    out.flush().map_err(|e| SynthError::io(path, e))
}

/// Parses a JSONL manifest. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, SynthError> {
    let file = fs::File::open(path).map_err(|e| SynthError::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SynthError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| SynthError::Manifest { line: i + 1, message: e.to_string() })?;
        if !seen.insert(entry.record.id.clone()) {
            return Err(SynthError::Manifest { line: i + 1, message: format!("duplicate id {:?}", entry.record.id) });
        }
        entries.push(entry);
    }
    Ok(DatasetManifest { entries })
}

/// Records and images generated in memory. Images are quantized exactly as
/// a PGM round trip would leave them.
pub fn synthesize(
    n: usize,
    cfg: &SynthConfig,
    ratios: &SplitRatios,
) -> Result<(DatasetManifest, Vec<SynthImage>), SynthError> {
    if n < 10 {
        return Err(SynthError::Config(format!("dataset size {n} below 10")));
    }
    cfg.validate()?;
    ratios.validate()?;
    let (n_train, n_val, _) = ratios.counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(cfg.seed, Stream::Split, 0));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let items: Vec<(ManifestEntry, SynthImage)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let item_seed = cfg.seed ^ i as u64;
            let id = format!("oa-{i:05}");
            let record = sample_record(&mut stream_rng(item_seed, Stream::Records, 0), id.clone());
            let image = quantized(&render_image(&record, cfg, item_seed)?);
            let entry = ManifestEntry { record, image_path: format!("{IMAGE_DIR}/{id}.pgm"), split: splits[i] };
            Ok((entry, image))
        })
        .collect::<Result<_, SynthError>>()?;
    let (entries, images) = items.into_iter().unzip();
    Ok((DatasetManifest { entries }, images))
}

/// Writes `n` items under `out_dir`: `images/<id>.pgm` and `manifest.jsonl`.
pub fn generate_dataset(
    n: usize,
    cfg: &SynthConfig,
    ratios: &SplitRatios,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    let (manifest, images) = synthesize(n, cfg, ratios)?;
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| SynthError::io(&image_dir, e))?;
    manifest.entries.par_iter().zip(images.par_iter()).try_for_each(|(entry, image)| {
        let path = out_dir.join(&entry.image_path);
        let file = fs::File::create(&path).map_err(|e| SynthError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_pgm(image, &mut w).and_then(|_| w.flush()).map_err(|e| SynthError::io(&path, e))
    })?;
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads every image referenced by `manifest`, relative to `root`.
pub fn load_images(manifest: &DatasetManifest, root: &Path) -> Result<Vec<SynthImage>, SynthError> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = root.join(&e.image_path);
            let file = fs::File::open(&path).map_err(|err| SynthError::io(&path, err))?;
            read_pgm(BufReader::new(file)).map_err(|err| SynthError::io(&path, err))
        })
        .collect()
}

/// Manifest plus decoded images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<SynthImage>,
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn in_memory(n: usize, cfg: &SynthConfig, ratios: &SplitRatios) -> Result<Self, SynthError> {
        let (manifest, images) = synthesize(n, cfg, ratios)?;
        Ok(Dataset { manifest, images, root: None })
    }

    /// Opens a dataset from its manifest path or its directory.
    pub fn open(path: &Path) -> Result<Self, SynthError> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = read_manifest(&manifest_path)?;
        let images = load_images(&manifest, &root)?;
        Ok(Dataset { manifest, images, root: Some(root) })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split(split).map(|(i, _)| i).collect()
    }

    pub fn record(&self, i: usize) -> &OaScoreRecord {
        &self.manifest.entries[i].record
    }
}
