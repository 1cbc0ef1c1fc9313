//! Lowering to a linear execution plan for a single-engine int8 accelerator,
//! with an activation-buffer capacity check and a roofline latency estimate.
//!
//! Byte accounting is one byte per activation element for every plan, which
//! models the deployed int8 form even when compiling a float graph.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{cost_report, infer_shapes, Graph, Op};
use crate::quant::QuantizedModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceModel {
    pub name: String,
    pub macs_per_cycle: u64,
    pub clock_hz: f64,
    pub activation_capacity_bytes: u64,
    /// Entries per activation bank; kept for provenance, the capacity rule uses
    /// `activation_capacity_bytes`.
    pub bank_depth: u64,
    pub memory_bytes_per_cycle: f64,
    pub efficiency: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        DeviceModel {
            name: "B1600-like".into(),
            macs_per_cycle: 1600,
            clock_hz: 300e6,
            activation_capacity_bytes: 4 << 20,
            bank_depth: 2048,
            memory_bytes_per_cycle: 16.0,
            efficiency: 1.0,
        }
    }
}

impl DeviceModel {
    pub fn with_capacity(bytes: u64) -> Self {
        DeviceModel { activation_capacity_bytes: bytes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.macs_per_cycle > 0
            && self.clock_hz > 0.0
            && self.activation_capacity_bytes > 0
            && self.bank_depth > 0
            && self.memory_bytes_per_cycle > 0.0;
        if !positive || !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Argument(format!("invalid device model {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanStep {
    pub node: String,
    pub kind: &'static str,
    pub inputs: Vec<String>,
    pub output: String,
    /// Buffers whose last reader is this step.
    pub frees: Vec<String>,
    pub footprint_bytes: u64,
    pub macs: u64,
    pub bytes_moved: u64,
    pub cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionPlan {
    pub model: String,
    pub input_shape: Vec<usize>,
    pub steps: Vec<PlanStep>,
    pub peak_footprint_bytes: u64,
    pub total_cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapacityError {
    pub step: String,
    pub footprint: u64,
    pub capacity: u64,
}

impl fmt::Display for CapacityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} needs {} activation bytes, capacity is {}", self.step, self.footprint, self.capacity)
    }
}

impl std::error::Error for CapacityError {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub cycles: f64,
    pub milliseconds: f64,
}

/// Anything that lowers to a plan.
pub trait Compilable {
    fn graph(&self) -> &Graph;
}

impl Compilable for Graph {
    fn graph(&self) -> &Graph {
        self
    }
}

impl Compilable for QuantizedModel {
    fn graph(&self) -> &Graph {
        &self.graph
    }
}

fn numel(s: &[usize]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

fn step_cycles(macs: u64, bytes: u64, dev: &DeviceModel) -> f64 {
    let compute = macs as f64 / (dev.macs_per_cycle as f64 * dev.efficiency);
    let memory = bytes as f64 / dev.memory_bytes_per_cycle;
    compute.max(memory)
}

/// One step per non-input node in deterministic topological order. Flatten
/// and dropout are views: they alias their input buffer.
pub fn compile<M: Compilable + ?Sized>(model: &M, dev: &DeviceModel) -> Result<ExecutionPlan> {
    let g = model.graph();
    dev.validate()?;
    let order = g.topo_order()?;
    let shapes = infer_shapes(g, &g.input_shape)?;
    let costs = cost_report(g)?;

    let mut buffer_of: BTreeMap<&str, String> = BTreeMap::new();
    let mut bytes_of: BTreeMap<String, u64> = BTreeMap::new();
    for &id in &order {
        let node = g.node(id).unwrap();
        let buf = match node.op {
            Op::Flatten | Op::Dropout { .. } => buffer_of[node.inputs[0].as_str()].clone(),
            _ => id.to_string(),
        };
        bytes_of.entry(buf.clone()).or_insert_with(|| numel(&shapes[id]));
        buffer_of.insert(id, buf);
    }
    // last step index reading each buffer; the graph output stays live
    let mut last_use: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, &id) in order.iter().enumerate() {
        for inp in &g.node(id).unwrap().inputs {
            last_use.insert(buffer_of[inp.as_str()].as_str(), i);
        }
    }
    let output_buf = buffer_of[g.output_id()?].clone();

    let mut steps = Vec::new();
    for (i, &id) in order.iter().enumerate() {
        let node = g.node(id).unwrap();
        if matches!(node.op, Op::Input) {
            continue;
        }
        let mut inputs: Vec<String> = node.inputs.iter().map(|x| buffer_of[x.as_str()].clone()).collect();
        inputs.dedup();
        let output = buffer_of[id].clone();
        let aliased = inputs.contains(&output);
        let in_bytes: u64 = inputs.iter().map(|b| bytes_of[b]).sum();
        let out_bytes = if aliased { 0 } else { bytes_of[&output] };
        let c = costs.per_node[id];
        let bias_bytes = node.op.out_channels().filter(|_| node.op.has_params()).map_or(0, |n| 4 * n as u64);
        let weight_bytes = c.params.saturating_sub(bias_bytes / 4) + bias_bytes;
        let bytes_moved = if aliased { 0 } else { in_bytes + out_bytes + weight_bytes };
        let frees = inputs
            .iter()
            .filter(|b| last_use.get(b.as_str()) == Some(&i) && **b != output_buf && **b != output)
            .cloned()
            .collect();
        steps.push(PlanStep {
            node: id.to_string(),
            kind: node.op.kind(),
            footprint_bytes: in_bytes + out_bytes,
            cycles: step_cycles(c.macs, bytes_moved, dev),
            inputs,
            output,
            frees,
            macs: c.macs,
            bytes_moved,
        });
    }
    Ok(ExecutionPlan {
        model: g.arch_name.clone(),
        input_shape: g.input_shape.clone(),
        peak_footprint_bytes: steps.iter().map(|s| s.footprint_bytes).max().unwrap_or(0),
        total_cycles: steps.iter().map(|s| s.cycles).sum(),
        steps,
    })
}

/// First step whose footprint exceeds the device's activation capacity.
pub fn check_buffers(plan: &ExecutionPlan, dev: &DeviceModel) -> Result<(), CapacityError> {
    match plan.steps.iter().find(|s| s.footprint_bytes > dev.activation_capacity_bytes) {
        Some(s) => Err(CapacityError {
            step: s.node.clone(),
            footprint: s.footprint_bytes,
            capacity: dev.activation_capacity_bytes,
        }),
        None => Ok(()),
    }
}

pub fn estimate_latency(plan: &ExecutionPlan, dev: &DeviceModel) -> Latency {
    let cycles: f64 = plan.steps.iter().map(|s| step_cycles(s.macs, s.bytes_moved, dev)).sum();
    Latency { cycles, milliseconds: cycles / dev.clock_hz * 1e3 }
}

/// Single-line machine-readable verdict.
pub fn verdict(result: &Result<(), CapacityError>) -> String {
    match result {
        Ok(()) => "CAPACITY=OK".into(),
        Err(e) => format!("CAPACITY=FAIL step={}", e.step),
    }
}

/// Structured text report ending with the capacity verdict.
pub fn render_report(plan: &ExecutionPlan, dev: &DeviceModel) -> String {
    let lat = estimate_latency(plan, dev);
    let mut s = String::new();
    writeln!(s, "model {} input {:?} device {}", plan.model, plan.input_shape, dev.name).unwrap();
    writeln!(s, "{:<4} {:<24} {:<16} {:>12} {:>14} {:>12} {:>14}", "#", "node", "kind", "footprint", "macs", "bytes", "cycles").unwrap();
    for (i, st) in plan.steps.iter().enumerate() {
        writeln!(
            s,
            "{:<4} {:<24} {:<16} {:>12} {:>14} {:>12} {:>14.1}",
            i, st.node, st.kind, st.footprint_bytes, st.macs, st.bytes_moved, st.cycles
        )
        .unwrap();
    }
    writeln!(s, "peak_footprint_bytes={} capacity_bytes={}", plan.peak_footprint_bytes, dev.activation_capacity_bytes).unwrap();
    writeln!(s, "cycles={:.0} latency_ms={:.4}", lat.cycles, lat.milliseconds).unwrap();
    writeln!(s, "{}", verdict(&check_buffers(plan, dev))).unwrap();
    s
}
