//! Per-path CNNs, primary capsule assembly, and DropCircuit.
//!
//! A path is a small convolutional stack turning a `(1, 28, 28)` image into
//! an `(8, 7, 7)` feature map. Each of the 49 spatial cells of that map is
//! one 8-D routing unit, so `P` paths contribute `49·P` primary capsules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::capsules::{CapsuleRole, CapsuleSet, PRIMARY_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 28;
/// Side of the feature map a path emits.
pub const PRIMARY_SIDE: usize = 7;
pub const UNITS_PER_PATH: usize = PRIMARY_SIDE * PRIMARY_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Conv {
        kernel: usize,
        padding: usize,
        stride: usize,
        out_channels: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

impl Layer {
    const fn conv(out_channels: usize) -> Self {
        Layer::Conv {
            kernel: 9,
            padding: 4,
            stride: 1,
            out_channels,
        }
    }

    const POOL: Layer = Layer::MaxPool {
        kernel: 2,
        stride: 2,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Which reading of the single-path architecture to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathVariant {
    /// The six printed layers: 53,192 parameters per path.
    #[serde(rename = "table1")]
    Table1Literal,
    /// One extra 16→16 conv before the 16→8 conv: 73,944 parameters per
    /// path, which reproduces every published model size.
    #[serde(rename = "table2")]
    Table2Matched,
}

impl std::str::FromStr for PathVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(PathVariant::Table1Literal),
            "table2" => Ok(PathVariant::Table2Matched),
            other => Err(Error::config(
                "variant",
                format!("unknown path variant {other:?} (expected table1 or table2)"),
            )),
        }
    }
}

impl std::fmt::Display for PathVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PathVariant::Table1Literal => "table1",
            PathVariant::Table2Matched => "table2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    pub in_channels: usize,
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

pub fn default_path_spec(variant: PathVariant) -> PathSpec {
    let mut layers = vec![Layer::conv(16), Layer::conv(16), Layer::POOL, Layer::conv(16)];
    if variant == PathVariant::Table2Matched {
        layers.push(Layer::conv(16));
    }
    layers.extend([Layer::conv(8), Layer::POOL]);
    PathSpec {
        in_channels: 1,
        layers,
        activation: Activation::Relu,
    }
}

impl PathSpec {
    /// `(kernel, bias)` shapes of every conv layer, in order.
    pub fn conv_shapes(&self) -> Vec<([usize; 4], usize)> {
        let mut channels = self.in_channels;
        let mut shapes = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv {
                kernel,
                out_channels,
                ..
            } = *layer
            {
                shapes.push(([out_channels, channels, kernel, kernel], out_channels));
                channels = out_channels;
            }
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|(k, b)| k.iter().product::<usize>() + b)
            .sum()
    }

    /// `(channels, height, width)` after each layer for a `side × side` input.
    pub fn shape_trace(&self, side: usize) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = (self.in_channels, side, side);
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match *layer {
                Layer::Conv {
                    kernel,
                    padding,
                    stride,
                    out_channels,
                } => {
                    if kernel > h + 2 * padding || stride == 0 {
                        return Err(Error::shape(format!("conv {kernel}x{kernel} does not fit {h}x{w}")));
                    }
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = out_channels;
                }
                Layer::MaxPool { kernel, stride } => {
                    if kernel > h || kernel > w || stride == 0 {
                        return Err(Error::shape(format!("pool {kernel}x{kernel} does not fit {h}x{w}")));
                    }
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                }
            }
            trace.push((c, h, w));
        }
        Ok(trace)
    }

    /// Checks that the stack maps a 28×28 image to the `(8, 7, 7)` primary map.
    pub fn validate(&self) -> Result<()> {
        let last = self.shape_trace(IMAGE_SIDE)?.last().copied();
        if last != Some((PRIMARY_DIM, PRIMARY_SIDE, PRIMARY_SIDE)) {
            return Err(Error::config(
                "path",
                format!("path output {last:?} is not ({PRIMARY_DIM}, {PRIMARY_SIDE}, {PRIMARY_SIDE})"),
            ));
        }
        Ok(())
    }
}

/// Conv kernel and bias nodes of one path, in layer order.
#[derive(Clone, Debug)]
pub struct PathParams {
    pub convs: Vec<(Var, Var)>,
}

/// Runs one path over `image (b, 1, 28, 28)`, giving `(b, 8, 7, 7)`.
pub fn path_forward(graph: &mut Graph, spec: &PathSpec, params: &PathParams, image: Var) -> Result<Var> {
    let s = graph.shape(image);
    if s.len() != 4 || s[1] != spec.in_channels || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
        return Err(Error::shape(format!(
            "path input must be (batch, {}, {IMAGE_SIDE}, {IMAGE_SIDE}), got {s:?}",
            spec.in_channels
        )));
    }
    let mut convs = params.convs.iter();
    let mut x = image;
    for layer in &spec.layers {
        x = match *layer {
            Layer::Conv { padding, stride, .. } => {
                let &(kernel, bias) = convs
                    .next()
                    .ok_or_else(|| Error::shape("path has fewer conv parameters than conv layers"))?;
                let y = graph.conv2d(x, kernel, bias, padding, stride)?;
                match spec.activation {
                    Activation::Relu => graph.relu(y),
                }
            }
            Layer::MaxPool { kernel, stride } => graph.maxpool2d(x, kernel, stride)?,
        };
    }
    Ok(x)
}

/// Squashed primary capsules from per-path maps, ordered path-major then
/// row-major over the 7×7 grid.
pub fn assemble_primary(graph: &mut Graph, paths_out: &[Var]) -> Result<CapsuleSet> {
    let units = graph.interleave_maps(paths_out)?;
    let squashed = graph.squash(units)?;
    CapsuleSet::new(graph, squashed, CapsuleRole::Primary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    Minibatch,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropCircuitConfig {
    pub enabled: bool,
    pub drop_prob: f64,
    pub granularity: MaskGranularity,
}

impl Default for DropCircuitConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            drop_prob: 0.5,
            granularity: MaskGranularity::Minibatch,
        }
    }
}

impl DropCircuitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config(
                "drop_circuit.drop_prob",
                format!("{} is outside [0, 1)", self.drop_prob),
            ));
        }
        Ok(())
    }

    /// Multiplier applied to kept paths during training.
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.drop_prob)
    }
}

/// One keep flag per path. At least one flag is always set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathMask {
    pub keep: Vec<bool>,
    /// Draws taken before a non-empty mask came up.
    pub attempts: u32,
}

impl PathMask {
    pub fn all(paths: usize) -> Self {
        Self {
            keep: vec![true; paths],
            attempts: 0,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Draws an independent keep flag per path, redrawing whenever every path
/// came up dropped.
pub fn sample_mask(paths: usize, cfg: &DropCircuitConfig, rng: &mut impl Rng) -> Result<PathMask> {
    cfg.validate()?;
    if paths == 0 {
        return Err(Error::config("paths", "at least one path is required"));
    }
    if !cfg.enabled {
        return Ok(PathMask::all(paths));
    }
    let mut attempts = 0;
    loop {
        attempts += 1;
        let keep: Vec<bool> = (0..paths).map(|_| rng.gen::<f64>() >= cfg.drop_prob).collect();
        if keep.iter().any(|&k| k) {
            return Ok(PathMask { keep, attempts });
        }
    }
}

/// Zeroes dropped paths and rescales kept ones by `1/(1−p)` during
/// training; identity otherwise.
pub fn apply_drop(
    graph: &mut Graph,
    paths_out: &[Var],
    mask: &PathMask,
    training: bool,
    cfg: &DropCircuitConfig,
) -> Result<Vec<Var>> {
    if mask.keep.len() != paths_out.len() {
        return Err(Error::shape(format!(
            "mask covers {} paths but {} were given",
            mask.keep.len(),
            paths_out.len()
        )));
    }
    if !training || !cfg.enabled {
        return Ok(paths_out.to_vec());
    }
    let scale = cfg.keep_scale();
    Ok(paths_out
        .iter()
        .zip(&mask.keep)
        .map(|(&x, &keep)| graph.scale(x, if keep { scale } else { 0.0 }))
        .collect())
}

/// Per-sample variant of [`apply_drop`]: `masks[b]` applies to sample `b`.
pub fn apply_drop_per_sample(
    graph: &mut Graph,
    paths_out: &[Var],
    masks: &[PathMask],
    training: bool,
    cfg: &DropCircuitConfig,
) -> Result<Vec<Var>> {
    if !training || !cfg.enabled {
        return Ok(paths_out.to_vec());
    }
    let scale = cfg.keep_scale();
    let mut out = Vec::with_capacity(paths_out.len());
    for (p, &x) in paths_out.iter().enumerate() {
        let shape = graph.shape(x).to_vec();
        if shape[0] != masks.len() {
            return Err(Error::shape(format!(
                "{} sample masks for a batch of {}",
                masks.len(),
                shape[0]
            )));
        }
        let per_sample: usize = shape[1..].iter().product();
        let mut factors = Vec::with_capacity(shape.iter().product());
        for m in masks {
            let keep = *m
                .keep
                .get(p)
                .ok_or_else(|| Error::shape("sample mask shorter than path count"))?;
            factors.extend(std::iter::repeat_n(if keep { scale } else { 0.0 }, per_sample));
        }
        let f = graph.constant(Tensor::new(&shape, factors)?);
        out.push(graph.mul(x, f)?);
    }
    Ok(out)
}
