//! Model packages: a directory holding `model.json` and `weights.cfw`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobArray, BlobData};
use crate::error::{Error, Result};
use crate::ir::graph::{Graph, NodeSpec, RawNode};
use crate::ir::shape::all_param_shapes;
use crate::ir::{LayerParams, Weights};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "model.json";
pub const WEIGHTS: &str = "weights.cfw";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Manifest {
    pub schema_version: u32,
    pub arch_name: String,
    pub input_shape: Vec<usize>,
    pub nodes: Vec<RawNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<serde_json::Value>,
}

impl Manifest {
    pub(crate) fn from_graph(g: &Graph, pruning: Option<serde_json::Value>) -> Result<Self> {
        Ok(Manifest {
            schema_version: SCHEMA_VERSION,
            arch_name: g.arch_name.clone(),
            input_shape: g.input_shape.clone(),
            nodes: g.raw_nodes()?,
            pruning,
        })
    }

    pub(crate) fn into_graph(self) -> Result<Graph> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::ModelIo(format!("unsupported schema_version {}", self.schema_version)));
        }
        let nodes = self.nodes.into_iter().map(NodeSpec::try_from).collect::<Result<Vec<_>>>()?;
        Graph::from_nodes(&self.arch_name, self.input_shape, nodes).map_err(|e| match e {
            Error::ModelIo(_) => e,
            other => Error::ModelIo(format!("invalid graph in manifest: {other}")),
        })
    }
}

/// Checks that `weights` holds exactly the parameter tensors `g` needs.
pub fn check_weights(g: &Graph, weights: &Weights) -> Result<()> {
    let expected = all_param_shapes(g)?;
    for (id, (k, b)) in &expected {
        let p = weights.get(id).ok_or_else(|| Error::ModelIo(format!("missing weights for {id:?}")))?;
        if p.kernel.shape() != k.as_slice() || p.bias.shape() != b.as_slice() {
            return Err(Error::ModelIo(format!(
                "weights for {id:?} have shapes {:?}/{:?}, expected {k:?}/{b:?}",
                p.kernel.shape(),
                p.bias.shape()
            )));
        }
    }
    if let Some(extra) = weights.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::ModelIo(format!("weights for unknown node {extra:?}")));
    }
    Ok(())
}

pub fn save_model(g: &Graph, weights: &Weights, dir: &Path) -> Result<()> {
    save_model_with(g, weights, dir, None)
}

/// Saves a package, optionally embedding a pruning provenance section.
pub fn save_model_with(g: &Graph, weights: &Weights, dir: &Path, pruning: Option<serde_json::Value>) -> Result<()> {
    check_weights(g, weights)?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest::from_graph(g, pruning)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    // BTreeMap iteration is already ordered by node id.
    let arrays: Vec<BlobArray> = weights
        .values()
        .flat_map(|p| [BlobArray::from_tensor(&p.kernel), BlobArray::from_tensor(&p.bias)])
        .collect();
    blob::write_file(&dir.join(WEIGHTS), &arrays)
}

pub fn load_model(dir: &Path) -> Result<(Graph, Weights)> {
    let (g, w, _) = load_model_with(dir)?;
    Ok((g, w))
}

pub fn load_model_with(dir: &Path) -> Result<(Graph, Weights, Option<serde_json::Value>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let pruning = manifest.pruning.clone();
    let g = manifest.into_graph()?;
    let arrays = blob::read_file(&dir.join(WEIGHTS))?;
    let expected = all_param_shapes(&g).map_err(|e| Error::ModelIo(e.to_string()))?;
    let mut ids: Vec<&String> = expected.keys().collect();
    ids.sort();
    if arrays.len() != 2 * ids.len() {
        return Err(Error::ModelIo(format!(
            "blob holds {} arrays, manifest needs {}",
            arrays.len(),
            2 * ids.len()
        )));
    }
    let mut weights = Weights::new();
    let mut it = arrays.into_iter();
    for id in ids {
        let (k, b) = (it.next().unwrap(), it.next().unwrap());
        for a in [&k, &b] {
            if !matches!(a.data, BlobData::F32(_) | BlobData::F64(_)) {
                return Err(Error::ModelIo(format!("non-float weights for {id:?}")));
            }
        }
        let p = LayerParams { kernel: k.into_tensor()?, bias: b.into_tensor()? };
        weights.insert(id.clone(), p);
    }
    check_weights(&g, &weights)?;
    Ok((g, weights, pruning))
}
