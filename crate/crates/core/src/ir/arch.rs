//! Builders for the four cloud-detection networks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::graph::{
    ActivationKind, ConvParams, DenseParams, Graph, Op, Padding, PoolParams, TransposedConvParams,
};

pub const BANDS: usize = 12;
pub const L2_LAMBDA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PixelNet,
    PatchNet,
    SceneNet,
    UNet,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::PixelNet, Arch::PatchNet, Arch::SceneNet, Arch::UNet];

    pub fn name(self) -> &'static str {
        match self {
            Arch::PixelNet => "pixel_net",
            Arch::PatchNet => "patch_net",
            Arch::SceneNet => "scene_net",
            Arch::UNet => "u_net",
        }
    }

    /// Nominal input `[1, H, W, C]`.
    pub fn nominal_input(self) -> Vec<usize> {
        match self {
            Arch::PixelNet => vec![1, BANDS, 1, 1],
            Arch::PatchNet => vec![1, 5, 5, BANDS],
            Arch::SceneNet | Arch::UNet => vec![1, 256, 256, BANDS],
        }
    }

    /// Whether the spatial input size may be changed (tile models only).
    pub fn resizable(self) -> bool {
        matches!(self, Arch::SceneNet | Arch::UNet)
    }

    /// Segmentation models emit a per-pixel mask; the others one probability.
    pub fn is_segmentation(self) -> bool {
        self == Arch::UNet
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Arch(format!("unknown architecture {s:?}")))
    }
}

fn conv(out: usize, kh: usize, kw: usize, l2: f64) -> Op {
    Op::Conv2D(ConvParams { out_channels: out, kernel_h: kh, kernel_w: kw, stride: 1, padding: Padding::Same, l2_lambda: l2 })
}

fn dense(units: usize, l2: f64) -> Op {
    Op::Dense(DenseParams { units, l2_lambda: l2 })
}

fn pool(ph: usize, pw: usize, sh: usize, sw: usize) -> Op {
    Op::MaxPool2D(PoolParams { pool_h: ph, pool_w: pw, stride_h: sh, stride_w: sw, padding: Padding::Valid })
}

const RELU: Op = Op::Activation(ActivationKind::Relu);
const SIGMOID: Op = Op::Activation(ActivationKind::Sigmoid);

pub fn build_architecture(arch: Arch) -> Graph {
    build(arch, None).expect("nominal builders are valid")
}

/// Builds `arch` for a square tile of side `side` (tile models only).
pub fn build_architecture_at(arch: Arch, side: usize) -> Result<Graph> {
    build(arch, Some(side))
}

fn build(arch: Arch, side: Option<usize>) -> Result<Graph> {
    let mut input = arch.nominal_input();
    if let Some(s) = side {
        if !arch.resizable() && s != input[1] {
            return Err(Error::Arch(format!("{arch} has a fixed input size")));
        }
        input[1] = s;
        input[2] = s;
    }
    let g = match arch {
        Arch::PixelNet => pixel_like(arch, input, 0.2)?,
        Arch::PatchNet => pixel_like(arch, input, 0.5)?,
        Arch::SceneNet => scene_net(input)?,
        Arch::UNet => u_net(input)?,
    };
    g.validate()?;
    Ok(g)
}

/// Pixel-Net and Patch-Net: two 3x1 convs (128, 64) each with a 2x1
/// stride-1 pool, then dense 64 -> dropout -> dense 32 -> sigmoid unit.
fn pixel_like(arch: Arch, input: Vec<usize>, dropout: f64) -> Result<Graph> {
    let mut g = Graph::new(arch.name(), input);
    g.add("input", Op::Input, &[])?;
    g.add("conv1", conv(128, 3, 1, L2_LAMBDA), &["input"])?;
    g.add("relu1", RELU, &["conv1"])?;
    g.add("pool1", pool(2, 1, 1, 1), &["relu1"])?;
    g.add("conv2", conv(64, 3, 1, L2_LAMBDA), &["pool1"])?;
    g.add("relu2", RELU, &["conv2"])?;
    g.add("pool2", pool(2, 1, 1, 1), &["relu2"])?;
    g.add("flatten", Op::Flatten, &["pool2"])?;
    g.add("dense1", dense(64, 0.0), &["flatten"])?;
    g.add("dense1_relu", RELU, &["dense1"])?;
    g.add("dropout1", Op::Dropout { rate: dropout }, &["dense1_relu"])?;
    g.add("dense2", dense(32, 0.0), &["dropout1"])?;
    g.add("dense2_relu", RELU, &["dense2"])?;
    g.add("output", dense(1, 0.0), &["dense2_relu"])?;
    g.add("sigmoid", SIGMOID, &["output"])?;
    Ok(g)
}

/// Scene-Net: five 3x3 convs (16..256) each followed by a 3x3 stride-2 valid
/// pool, then dense 1024/512/256 with 50% dropout and a sigmoid unit.
fn scene_net(input: Vec<usize>) -> Result<Graph> {
    let mut g = Graph::new(Arch::SceneNet.name(), input);
    g.add("input", Op::Input, &[])?;
    let mut prev = "input".to_string();
    for (i, f) in [16, 32, 64, 128, 256].into_iter().enumerate() {
        let k = i + 1;
        g.add(format!("conv{k}"), conv(f, 3, 3, 0.0), &[&prev])?;
        g.add(format!("relu{k}"), RELU, &[&format!("conv{k}")])?;
        prev = g.add(format!("pool{k}"), pool(3, 3, 2, 2), &[&format!("relu{k}")])?;
    }
    g.add("flatten", Op::Flatten, &[&prev])?;
    prev = "flatten".into();
    for (i, u) in [1024, 512, 256].into_iter().enumerate() {
        let k = i + 1;
        g.add(format!("dense{k}"), dense(u, 0.0), &[&prev])?;
        g.add(format!("dense{k}_relu"), RELU, &[&format!("dense{k}")])?;
        prev = g.add(format!("dropout{k}"), Op::Dropout { rate: 0.5 }, &[&format!("dense{k}_relu")])?;
    }
    g.add("output", dense(1, 0.0), &[&prev])?;
    g.add("sigmoid", SIGMOID, &["output"])?;
    Ok(g)
}

/// U-Net with halved widths: encoder 16/32/64/128, bottleneck 256, 2x2
/// stride-2 transposed-conv upsampling with concatenated skips, 1x1 sigmoid
/// head.
fn u_net(input: Vec<usize>) -> Result<Graph> {
    let mut g = Graph::new(Arch::UNet.name(), input);
    g.add("input", Op::Input, &[])?;
    let mut prev = "input".to_string();
    let widths = [16, 32, 64, 128];
    let mut skips = Vec::new();
    for (i, &f) in widths.iter().enumerate() {
        let b = format!("enc{}", i + 1);
        g.add(format!("{b}_conv1"), conv(f, 3, 3, L2_LAMBDA), &[&prev])?;
        g.add(format!("{b}_relu1"), RELU, &[&format!("{b}_conv1")])?;
        g.add(format!("{b}_conv2"), conv(f, 3, 3, L2_LAMBDA), &[&format!("{b}_relu1")])?;
        let skip = g.add(format!("{b}_relu2"), RELU, &[&format!("{b}_conv2")])?;
        prev = g.add(format!("{b}_pool"), pool(2, 2, 2, 2), &[&skip])?;
        if i >= 2 {
            prev = g.add(format!("{b}_drop"), Op::Dropout { rate: 0.5 }, &[&prev])?;
        }
        skips.push(skip);
    }
    g.add("bott_conv1", conv(256, 3, 3, L2_LAMBDA), &[&prev])?;
    g.add("bott_relu1", RELU, &["bott_conv1"])?;
    g.add("bott_conv2", conv(256, 3, 3, L2_LAMBDA), &["bott_relu1"])?;
    g.add("bott_relu2", RELU, &["bott_conv2"])?;
    prev = g.add("bott_drop", Op::Dropout { rate: 0.5 }, &["bott_relu2"])?;
    for (i, &f) in widths.iter().enumerate().rev() {
        let b = format!("dec{}", i + 1);
        let up = g.add(
            format!("{b}_up"),
            Op::TransposedConv2D(TransposedConvParams {
                out_channels: f,
                kernel_h: 2,
                kernel_w: 2,
                stride: 2,
                l2_lambda: L2_LAMBDA,
            }),
            &[&prev],
        )?;
        g.add(format!("{b}_concat"), Op::Concat, &[&up, &skips[i]])?;
        g.add(format!("{b}_conv1"), conv(f, 3, 3, L2_LAMBDA), &[&format!("{b}_concat")])?;
        g.add(format!("{b}_relu1"), RELU, &[&format!("{b}_conv1")])?;
        g.add(format!("{b}_conv2"), conv(f, 3, 3, L2_LAMBDA), &[&format!("{b}_relu1")])?;
        prev = g.add(format!("{b}_relu2"), RELU, &[&format!("{b}_conv2")])?;
    }
    g.add("out_conv", conv(1, 1, 1, L2_LAMBDA), &[&prev])?;
    g.add("out_sigmoid", SIGMOID, &["out_conv"])?;
    Ok(g)
}
