//! Synthetic data pipeline: scene generation, SCL remapping, tiling and
//! labelling, balancing/splitting, pixel and patch sampling, augmentation,
//! and dataset directories on disk.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobArray};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod augment;
pub mod scene;
pub mod tiles;

pub use augment::{augment, augment_record, Dihedral};
pub use scene::{generate_scene, generate_scene_with, remap_scl, Scene, SceneOptions};
pub use tiles::{
    balance_and_split, balance_and_split_indices, sample_pixels, tile_and_label, SampleMode, TileRecord,
    CLOUDY_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One training example: model input plus its target (a `[1, 1]` label or a
/// `[1, h, w, 1]` mask).
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub input: Tensor,
    pub target: Tensor,
    pub label: u8,
    pub cloud_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(split: Split, records: Vec<Record>) -> Self {
        Dataset { split, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[not_cloudy, cloudy]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let cloudy = self.records.iter().filter(|r| r.label == 1).count();
        [self.records.len() - cloudy, cloudy]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

pub const INDEX: &str = "index.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    split: Split,
    class_counts: [usize; 2],
    records: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    file: String,
    label: u8,
    cloud_fraction: f64,
}

/// Writes `index.json` plus one `.cfw` per record (input, then target).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, r) in ds.records.iter().enumerate() {
        let file = format!("r{i:06}.cfw");
        blob::write_file(&dir.join(&file), &[BlobArray::from_tensor(&r.input), BlobArray::from_tensor(&r.target)])?;
        records.push(IndexEntry { file, label: r.label, cloud_fraction: r.cloud_fraction });
    }
    let index = IndexFile { split: ds.split, class_counts: ds.class_counts(), records };
    fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(INDEX))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(INDEX).display())))?;
    let index: IndexFile = serde_json::from_str(&text).map_err(|e| Error::Data(format!("dataset index: {e}")))?;
    let mut records = Vec::with_capacity(index.records.len());
    for e in index.records {
        let arrays = blob::read_file(&dir.join(&e.file))?;
        let [input, target]: [BlobArray; 2] = arrays
            .try_into()
            .map_err(|_| Error::Data(format!("{}: expected input and target arrays", e.file)))?;
        records.push(Record { input: input.into_tensor()?, target: target.into_tensor()?, label: e.label, cloud_fraction: e.cloud_fraction });
    }
    let ds = Dataset { split: index.split, records };
    if ds.class_counts() != index.class_counts {
        return Err(Error::Data("class counts in index do not match records".into()));
    }
    Ok(ds)
}

/// Reads a plain raster of `h x w x 13` little-endian f32 values: twelve
/// reflectance bands followed by the scene-class code.
pub fn import_raster(path: &Path, h: usize, w: usize) -> Result<Scene> {
    let bytes = fs::read(path)?;
    let want = h * w * 13 * 4;
    if bytes.len() != want {
        return Err(Error::Data(format!("raster has {} bytes, expected {want} for {h}x{w}x13 f32", bytes.len())));
    }
    let mut reflectance = Vec::with_capacity(h * w * scene::BANDS);
    let mut scl = Vec::with_capacity(h * w);
    for (i, px) in bytes.chunks_exact(13 * 4).enumerate() {
        let vals: Vec<f32> = px.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(v) = vals[..12].iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite reflectance {v} at pixel {i}")));
        }
        let code = vals[12];
        if code.fract() != 0.0 || !(0.0..scene::scl::CLASS_COUNT as f32).contains(&code) {
            return Err(Error::Data(format!("invalid scene class {code} at pixel {i}")));
        }
        reflectance.extend_from_slice(&vals[..12]);
        scl.push(code as u8);
    }
    Ok(Scene { height: h, width: w, reflectance, scl, seed: 0 })
}
