//! Layer-graph IR, architecture builders, shape inference and cost
//! accounting.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{init_weights, InitScheme, Tensor};

pub mod arch;
pub mod cost;
pub mod graph;
pub mod io;
pub mod shape;

pub use arch::{build_architecture, build_architecture_at, Arch};
pub use cost::{cost_report, count_flops, count_params, CostReport, NodeCost};
pub use graph::{ActivationKind, ConvParams, DenseParams, Graph, NodeSpec, Op, Padding, PoolParams, TransposedConvParams};
pub use io::{load_model, save_model};
pub use shape::infer_shapes;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Parameters keyed by node id.
pub type Weights = BTreeMap<String, LayerParams>;

/// Glorot-uniform kernels and zero biases, drawn in node-id order.
pub fn init_params(g: &Graph, rng: &mut Rng) -> Result<Weights> {
    let mut w = Weights::new();
    for (id, (k, b)) in shape::all_param_shapes(g)?.into_iter().collect::<BTreeMap<_, _>>() {
        let kernel = init_weights(&k, rng, InitScheme::GlorotUniform)?;
        let bias = init_weights(&b, rng, InitScheme::Zeros)?;
        w.insert(id, LayerParams { kernel, bias });
    }
    Ok(w)
}

/// Sum of squared kernel entries over all layers.
pub fn l2_norm_sq(w: &Weights) -> f64 {
    w.values().flat_map(|p| p.kernel.to_f64_vec()).map(|x| x * x).sum()
}
