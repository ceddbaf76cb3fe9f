//! PathCapsNet and the CapsNet baseline: parameters, forward pass, losses,
//! exact parameter counts, and DigitCaps perturbation.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::capsules::{
    self, transform_shape, CapsuleRole, CapsuleSet, RoutingMode, RoutingState, DIGIT_DIM, NUM_DIGITS,
    PRIMARY_DIM,
};
use crate::error::{Error, Result};
use crate::paths::{
    self, default_path_spec, DropCircuitConfig, MaskGranularity, PathMask, PathParams, PathSpec,
    PathVariant, IMAGE_SIDE, UNITS_PER_PATH,
};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const MARGIN_POSITIVE: f64 = 0.9;
pub const MARGIN_NEGATIVE: f64 = 0.1;
pub const ABSENT_WEIGHT: f64 = 0.5;
pub const RECON_WEIGHT: f64 = 0.0005;
/// Hidden widths of the reconstruction decoder.
pub const DECODER_HIDDEN: [usize; 2] = [512, 1024];
/// Standard deviation of the transformation matrices under fan-out routing.
pub const FAN_OUT_INIT_STD: f64 = 0.2;

const BASELINE_CONV1_CHANNELS: usize = 256;
const BASELINE_PRIMARY_TYPES: usize = 32;
const BASELINE_PRIMARY_SIDE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    #[serde(rename = "pathcaps")]
    PathCapsNet { paths: usize, variant: PathVariant },
    #[serde(rename = "capsnet")]
    CapsNetBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub routing: RoutingMode,
    pub iterations: usize,
    pub drop_circuit: DropCircuitConfig,
    pub reconstruction: bool,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn path_caps(paths: usize, variant: PathVariant, routing: RoutingMode) -> Self {
        Self {
            architecture: Architecture::PathCapsNet { paths, variant },
            routing,
            iterations: 3,
            drop_circuit: DropCircuitConfig::default(),
            reconstruction: false,
            seed: 0,
        }
    }

    pub fn baseline(routing: RoutingMode) -> Self {
        Self {
            architecture: Architecture::CapsNetBaseline,
            ..Self::path_caps(1, PathVariant::Table2Matched, routing)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if let Architecture::PathCapsNet { paths, .. } = self.architecture {
            if paths < 1 {
                return Err(Error::config("paths", "must be at least 1"));
            }
        }
        self.drop_circuit.validate()?;
        if self.drop_circuit.enabled && self.architecture == Architecture::CapsNetBaseline {
            return Err(Error::config(
                "drop_circuit.enabled",
                "DropCircuit needs a multipath architecture",
            ));
        }
        Ok(())
    }

    pub fn num_paths(&self) -> usize {
        match self.architecture {
            Architecture::PathCapsNet { paths, .. } => paths,
            Architecture::CapsNetBaseline => 0,
        }
    }

    pub fn path_spec(&self) -> Option<PathSpec> {
        match self.architecture {
            Architecture::PathCapsNet { variant, .. } => Some(default_path_spec(variant)),
            Architecture::CapsNetBaseline => None,
        }
    }

    pub fn num_primary(&self) -> usize {
        match self.architecture {
            Architecture::PathCapsNet { paths, .. } => paths * UNITS_PER_PATH,
            Architecture::CapsNetBaseline => {
                BASELINE_PRIMARY_TYPES * BASELINE_PRIMARY_SIDE * BASELINE_PRIMARY_SIDE
            }
        }
    }

    /// Single-line JSON with fields in declaration order.
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("NetworkSpec serializes")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("spec", e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    /// U(±1/√fan_in)
    Uniform { fan_in: usize },
    Normal { std: f64 },
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_slots(prefix: &str, kernel: [usize; 4], out: usize) -> [Slot; 2] {
    [
        Slot {
            name: format!("{prefix}.weight"),
            shape: kernel.to_vec(),
            init: Init::Uniform {
                fan_in: kernel[1] * kernel[2] * kernel[3],
            },
        },
        Slot {
            name: format!("{prefix}.bias"),
            shape: vec![out],
            init: Init::Zero,
        },
    ]
}

/// Every parameter of `spec`, in allocation and initialization order.
fn layout(spec: &NetworkSpec) -> Vec<Slot> {
    let mut slots = Vec::new();
    match spec.architecture {
        Architecture::PathCapsNet { paths, variant } => {
            let path = default_path_spec(variant);
            for p in 0..paths {
                for (l, (k, b)) in path.conv_shapes().into_iter().enumerate() {
                    slots.extend(conv_slots(&format!("path{p}.conv{l}"), k, b));
                }
            }
        }
        Architecture::CapsNetBaseline => {
            slots.extend(conv_slots("conv1", [BASELINE_CONV1_CHANNELS, 1, 9, 9], BASELINE_CONV1_CHANNELS));
            let primary_channels = BASELINE_PRIMARY_TYPES * PRIMARY_DIM;
            slots.extend(conv_slots(
                "primarycaps",
                [primary_channels, BASELINE_CONV1_CHANNELS, 9, 9],
                primary_channels,
            ));
        }
    }
    let std = match spec.routing {
        RoutingMode::FanIn => 1.0,
        RoutingMode::FanOut => FAN_OUT_INIT_STD,
    };
    slots.push(Slot {
        name: "digitcaps.weight".into(),
        shape: transform_shape(spec.num_primary()).to_vec(),
        init: Init::Normal { std },
    });
    if spec.reconstruction {
        let widths = [NUM_DIGITS * DIGIT_DIM, DECODER_HIDDEN[0], DECODER_HIDDEN[1], IMAGE_PIXELS];
        for (i, w) in widths.windows(2).enumerate() {
            slots.push(Slot {
                name: format!("decoder.fc{}.weight", i + 1),
                shape: vec![w[1], w[0]],
                init: Init::Uniform { fan_in: w[0] },
            });
            slots.push(Slot {
                name: format!("decoder.fc{}.bias", i + 1),
                shape: vec![w[1]],
                init: Init::Zero,
            });
        }
    }
    slots
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::format(name.clone(), "duplicate parameter name"));
            }
        }
        Ok(Self { entries, index })
    }

    /// Zero tensors shaped like `spec`'s parameters.
    pub fn zeros_for(spec: &NetworkSpec) -> Self {
        let entries = layout(spec)
            .into_iter()
            .map(|s| {
                let t = Tensor::zeros(&s.shape);
                (s.name, t)
            })
            .collect();
        Self::from_entries(entries).expect("layout names are unique")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks names and shapes against what `spec` allocates.
    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        let slots = layout(spec);
        if slots.len() != self.entries.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, found {}", slots.len(), self.entries.len()),
            ));
        }
        for (slot, (name, t)) in slots.iter().zip(&self.entries) {
            if &slot.name != name || slot.shape != t.shape() {
                return Err(Error::format(
                    name.clone(),
                    format!("expected {} {:?}, found {name} {:?}", slot.name, slot.shape, t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Registers every tensor in `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(_, t)| graph.param(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor in `graph` as a constant.
    pub fn bind_constant(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(_, t)| graph.constant(t.clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// [`ModelParams`] registered as graph leaves, in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("model has no parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter after `graph.backward`, zero where the
    /// loss did not reach.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| graph.grad(v).unwrap_or_else(|| Tensor::zeros(graph.shape(v))))
            .collect()
    }
}

/// Draws fresh parameters from the `init` stream of `spec.seed`.
pub fn init_params(spec: &NetworkSpec) -> ModelParams {
    let mut rng = rng::stream(spec.seed, "init", 0);
    init_params_with(spec, &mut rng)
}

pub fn init_params_with(spec: &NetworkSpec, rng: &mut impl Rng) -> ModelParams {
    let entries = layout(spec)
        .into_iter()
        .map(|slot| {
            let n: usize = slot.shape.iter().product();
            let data: Vec<f64> = match slot.init {
                Init::Zero => vec![0.0; n],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            (slot.name, Tensor::new(&slot.shape, data).expect("slot shape"))
        })
        .collect();
    ModelParams::from_entries(entries).expect("layout names are unique")
}

/// Exact parameter total with its split into feature extractor (paths or
/// conv stem), routing transforms, and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub features: usize,
    pub routing: usize,
    pub decoder: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.features + self.routing + self.decoder
    }
}

fn conv_count(c_in: usize, c_out: usize, k: usize) -> usize {
    k * k * c_in * c_out + c_out
}

/// Closed-form parameter count of `spec`, without allocating anything.
pub fn count_parameters(spec: &NetworkSpec) -> ParamCount {
    let features = match spec.architecture {
        Architecture::PathCapsNet { paths, variant } => paths * default_path_spec(variant).param_count(),
        Architecture::CapsNetBaseline => {
            conv_count(1, BASELINE_CONV1_CHANNELS, 9)
                + conv_count(BASELINE_CONV1_CHANNELS, BASELINE_PRIMARY_TYPES * PRIMARY_DIM, 9)
        }
    };
    let routing = spec.num_primary() * NUM_DIGITS * DIGIT_DIM * PRIMARY_DIM;
    let decoder = if spec.reconstruction {
        let widths = [NUM_DIGITS * DIGIT_DIM, DECODER_HIDDEN[0], DECODER_HIDDEN[1], IMAGE_PIXELS];
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    } else {
        0
    };
    ParamCount {
        features,
        routing,
        decoder,
    }
}

/// DropCircuit masks for one training minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Masks {
    Minibatch(PathMask),
    PerSample(Vec<PathMask>),
}

/// Samples the masks for a minibatch of `batch` images.
pub fn sample_masks(spec: &NetworkSpec, batch: usize, rng: &mut impl Rng) -> Result<Masks> {
    let paths = spec.num_paths().max(1);
    Ok(match spec.drop_circuit.granularity {
        MaskGranularity::Minibatch => Masks::Minibatch(paths::sample_mask(paths, &spec.drop_circuit, rng)?),
        MaskGranularity::Sample => Masks::PerSample(
            (0..batch)
                .map(|_| paths::sample_mask(paths, &spec.drop_circuit, rng))
                .collect::<Result<_>>()?,
        ),
    })
}

/// Training-only inputs to [`forward`].
#[derive(Clone, Debug)]
pub struct TrainInputs<'a> {
    /// Selects the capsule fed to the decoder.
    pub labels: &'a [usize],
    pub masks: Masks,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub digit_caps: CapsuleSet,
    /// `(batch, 10)` capsule lengths.
    pub lengths: Var,
    pub routing_state: RoutingState,
    /// `(batch, 784)` decoder output.
    pub reconstruction: Option<Var>,
}

fn check_images(graph: &Graph, images: Var) -> Result<usize> {
    let s = graph.shape(images);
    if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
        return Err(Error::shape(format!(
            "images must be (batch, 1, {IMAGE_SIDE}, {IMAGE_SIDE}), got {s:?}"
        )));
    }
    Ok(s[0])
}

fn path_caps_primary(
    graph: &mut Graph,
    spec: &NetworkSpec,
    params: &BoundParams,
    images: Var,
    train: Option<&TrainInputs>,
) -> Result<CapsuleSet> {
    let path = spec.path_spec().expect("multipath architecture");
    let paths = spec.num_paths();
    let batch = graph.shape(images)[0];
    let drop = &spec.drop_circuit;
    let training = train.is_some();
    let whole_batch_mask = match train.map(|t| &t.masks) {
        Some(Masks::Minibatch(m)) if drop.enabled => Some(m),
        _ => None,
    };

    let mut outs = Vec::with_capacity(paths);
    for p in 0..paths {
        if whole_batch_mask.is_some_and(|m| !m.keep.get(p).copied().unwrap_or(true)) {
            // Dropped for the whole minibatch: its output is zero anyway.
            outs.push(graph.constant(Tensor::zeros(&[batch, PRIMARY_DIM, 7, 7])));
            continue;
        }
        let convs = (0..path.conv_shapes().len())
            .map(|l| {
                Ok((
                    params.var(&format!("path{p}.conv{l}.weight"))?,
                    params.var(&format!("path{p}.conv{l}.bias"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        outs.push(paths::path_forward(graph, &path, &PathParams { convs }, images)?);
    }

    let outs = match train.map(|t| &t.masks) {
        Some(Masks::Minibatch(m)) => paths::apply_drop(graph, &outs, m, training, drop)?,
        Some(Masks::PerSample(ms)) => paths::apply_drop_per_sample(graph, &outs, ms, training, drop)?,
        None => outs,
    };
    paths::assemble_primary(graph, &outs)
}

fn baseline_primary(graph: &mut Graph, params: &BoundParams, images: Var) -> Result<CapsuleSet> {
    let batch = graph.shape(images)[0];
    let (w1, b1) = (params.var("conv1.weight")?, params.var("conv1.bias")?);
    let h = graph.conv2d(images, w1, b1, 0, 1)?;
    let h = graph.relu(h);
    let (w2, b2) = (params.var("primarycaps.weight")?, params.var("primarycaps.bias")?);
    let maps = graph.conv2d(h, w2, b2, 0, 2)?;
    // (b, 36, 256) channel vectors per cell, split into 32 capsules of 8.
    let cells = graph.interleave_maps(&[maps])?;
    let caps = graph.reshape(
        cells,
        &[batch, BASELINE_PRIMARY_SIDE * BASELINE_PRIMARY_SIDE * BASELINE_PRIMARY_TYPES, PRIMARY_DIM],
    )?;
    let squashed = graph.squash(caps)?;
    CapsuleSet::new(graph, squashed, CapsuleRole::Primary)
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Predicted class per sample: the longest digit capsule, first on ties.
pub fn predictions(lengths: &Tensor) -> Vec<usize> {
    lengths.data().chunks(NUM_DIGITS).map(argmax).collect()
}

/// Runs the decoder on flattened `(batch, 160)` masked digit capsules.
pub fn decode(graph: &mut Graph, params: &BoundParams, flat_caps: Var) -> Result<Var> {
    let mut x = flat_caps;
    for layer in 1..=3 {
        let w = params.var(&format!("decoder.fc{layer}.weight"))?;
        let b = params.var(&format!("decoder.fc{layer}.bias"))?;
        let y = graph.dense(x, w, b)?;
        x = if layer < 3 { graph.relu(y) } else { graph.sigmoid(y) };
    }
    Ok(x)
}

fn selection_mask(batch: usize, chosen: &[usize]) -> Tensor {
    let mut m = Tensor::zeros(&[batch, NUM_DIGITS, DIGIT_DIM]);
    for (b, &d) in chosen.iter().enumerate() {
        let start = (b * NUM_DIGITS + d) * DIGIT_DIM;
        m.data_mut()[start..start + DIGIT_DIM].fill(1.0);
    }
    m
}

/// Full forward pass. `train` carries labels and DropCircuit masks; `None`
/// is evaluation mode (all paths active, unscaled, decoder fed the longest
/// capsule).
pub fn forward(
    graph: &mut Graph,
    spec: &NetworkSpec,
    params: &BoundParams,
    images: Var,
    train: Option<&TrainInputs>,
) -> Result<ForwardOutput> {
    let batch = check_images(graph, images)?;
    let primary = match spec.architecture {
        Architecture::PathCapsNet { .. } => path_caps_primary(graph, spec, params, images, train)?,
        Architecture::CapsNetBaseline => baseline_primary(graph, params, images)?,
    };
    let w = params.var("digitcaps.weight")?;
    let uhat = capsules::predict(graph, primary.var, w)?;
    let (v, routing_state) = capsules::route(graph, uhat, spec.routing, spec.iterations)?;
    let digit_caps = CapsuleSet::new(graph, v, CapsuleRole::Digit)?;
    let lengths = capsules::capsule_lengths(graph, v)?;

    let reconstruction = if spec.reconstruction {
        let chosen = match train {
            Some(t) => {
                if t.labels.len() != batch {
                    return Err(Error::shape(format!(
                        "{} labels for a batch of {batch}",
                        t.labels.len()
                    )));
                }
                t.labels.to_vec()
            }
            None => predictions(graph.value(lengths)),
        };
        let mask = graph.constant(selection_mask(batch, &chosen));
        let masked = graph.mul(v, mask)?;
        let flat = graph.reshape(masked, &[batch, NUM_DIGITS * DIGIT_DIM])?;
        Some(decode(graph, params, flat)?)
    } else {
        None
    };

    Ok(ForwardOutput {
        digit_caps,
        lengths,
        routing_state,
        reconstruction,
    })
}

fn one_hot(batch: usize, labels: &[usize]) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[batch, NUM_DIGITS]);
    for (b, &l) in labels.iter().enumerate() {
        if l >= NUM_DIGITS {
            return Err(Error::contract(format!("label {l} outside 0..{NUM_DIGITS}")));
        }
        t.data_mut()[b * NUM_DIGITS + l] = 1.0;
    }
    Ok(t)
}

/// Batch mean of `Σ_k T_k·max(0, 0.9−‖v_k‖)² + 0.5·(1−T_k)·max(0, ‖v_k‖−0.1)²`.
pub fn margin_loss(graph: &mut Graph, lengths: Var, labels: &[usize]) -> Result<Var> {
    let s = graph.shape(lengths).to_vec();
    if s.len() != 2 || s[1] != NUM_DIGITS || labels.len() != s[0] {
        return Err(Error::shape(format!(
            "margin loss needs (batch, {NUM_DIGITS}) lengths and one label per sample, got {s:?} and {}",
            labels.len()
        )));
    }
    let batch = s[0];
    let targets = one_hot(batch, labels)?;
    let absent = targets.map(|t| ABSENT_WEIGHT * (1.0 - t));
    let targets = graph.constant(targets);
    let absent = graph.constant(absent);

    let neg = graph.scale(lengths, -1.0);
    let short = graph.add_scalar(neg, MARGIN_POSITIVE);
    let short = graph.relu(short);
    let short = graph.square(short);
    let present_term = graph.mul(short, targets)?;

    let long = graph.add_scalar(lengths, -MARGIN_NEGATIVE);
    let long = graph.relu(long);
    let long = graph.square(long);
    let absent_term = graph.mul(long, absent)?;

    let both = graph.add(present_term, absent_term)?;
    let total = graph.sum_all(both);
    Ok(graph.scale(total, 1.0 / batch as f64))
}

/// `0.0005 ×` batch mean of the summed squared pixel error.
pub fn reconstruction_loss(graph: &mut Graph, reconstruction: Var, images: Var) -> Result<Var> {
    let batch = graph.shape(reconstruction)[0];
    let flat = graph.reshape(images, &[batch, IMAGE_PIXELS])?;
    let diff = graph.sub(reconstruction, flat)?;
    let sq = graph.square(diff);
    let total = graph.sum_all(sq);
    Ok(graph.scale(total, RECON_WEIGHT / batch as f64))
}

/// Loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub margin: Var,
    pub reconstruction: Option<Var>,
    pub total: Var,
}

pub fn total_loss(graph: &mut Graph, out: &ForwardOutput, images: Var, labels: &[usize]) -> Result<LossVars> {
    let margin = margin_loss(graph, out.lengths, labels)?;
    let reconstruction = out
        .reconstruction
        .map(|r| reconstruction_loss(graph, r, images))
        .transpose()?;
    let total = match reconstruction {
        Some(r) => graph.add(margin, r)?,
        None => margin,
    };
    Ok(LossVars {
        margin,
        reconstruction,
        total,
    })
}

/// Sweep of values written into one DigitCaps coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sweep {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            lo: -0.25,
            hi: 0.25,
            step: 0.05,
        }
    }
}

impl Sweep {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::config("sweep", format!("need lo <= hi, got {} and {}", self.lo, self.hi)));
        }
        if self.lo == self.hi {
            return Ok(vec![self.lo]);
        }
        if !(self.step > 0.0) {
            return Err(Error::config("sweep.step", "must be positive"));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|k| self.lo + k as f64 * self.step).collect())
    }
}

/// Reconstructions under single-coordinate DigitCaps edits.
#[derive(Clone, Debug)]
pub struct PerturbationGrid {
    pub input: Tensor,
    pub digit: usize,
    pub reconstruction: Tensor,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// `rows[r][k]`: dimension `dims[r]` set to `values[k]`, each `(28, 28)`.
    pub rows: Vec<Vec<Tensor>>,
    /// The selected capsule before any edit.
    pub capsule: Vec<f64>,
}

fn decode_capsule(params: &ModelParams, digit: usize, capsule: &[f64]) -> Result<Tensor> {
    let mut flat = Tensor::zeros(&[1, NUM_DIGITS * DIGIT_DIM]);
    flat.data_mut()[digit * DIGIT_DIM..(digit + 1) * DIGIT_DIM].copy_from_slice(capsule);
    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let x = g.constant(flat);
    let y = decode(&mut g, &bound, x)?;
    g.value(y).clone().reshape(&[IMAGE_SIDE, IMAGE_SIDE])
}

/// Computes DigitCaps for `image`, then for every dimension in `dims` and
/// every sweep value, replaces that coordinate of the selected capsule
/// (`digit`, or the longest one) and decodes.
pub fn perturb_digitcaps(
    spec: &NetworkSpec,
    params: &ModelParams,
    image: &Tensor,
    digit: Option<usize>,
    dims: &[usize],
    sweep: Sweep,
) -> Result<PerturbationGrid> {
    if !spec.reconstruction || params.get("decoder.fc1.weight").is_none() {
        return Err(Error::contract("perturbation needs a model trained with a reconstruction decoder"));
    }
    if let Some(&bad) = dims.iter().find(|&&d| d >= DIGIT_DIM) {
        return Err(Error::contract(format!("capsule dimension {bad} outside 0..{DIGIT_DIM}")));
    }
    if digit.is_some_and(|d| d >= NUM_DIGITS) {
        return Err(Error::contract(format!("digit {digit:?} outside 0..{NUM_DIGITS}")));
    }
    let image = image.clone().reshape(&[1, 1, IMAGE_SIDE, IMAGE_SIDE])?;
    let values = sweep.values()?;

    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let x = g.constant(image.clone());
    let out = forward(&mut g, spec, &bound, x, None)?;
    let digit = digit.unwrap_or_else(|| predictions(g.value(out.lengths))[0]);
    let caps = g.value(out.digit_caps.var).data();
    let capsule = caps[digit * DIGIT_DIM..(digit + 1) * DIGIT_DIM].to_vec();

    let reconstruction = decode_capsule(params, digit, &capsule)?;
    let rows = dims
        .iter()
        .map(|&d| {
            values
                .iter()
                .map(|&v| {
                    let mut edited = capsule.clone();
                    edited[d] = v;
                    decode_capsule(params, digit, &edited)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationGrid {
        input: image.reshape(&[IMAGE_SIDE, IMAGE_SIDE])?,
        digit,
        reconstruction,
        dims: dims.to_vec(),
        values,
        rows,
        capsule,
    })
}

/// One checked parameter coordinate.
#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Compares backpropagated gradients of the training loss with central
/// differences on selected `(parameter position, flat index)` coordinates.
/// The masks are held fixed across all evaluations.
pub fn check_parameter_gradients(
    spec: &NetworkSpec,
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    masks: &Masks,
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<Vec<CoordinateCheck>> {
    check_parameter_gradients_with(spec, params, images, labels, masks, coords, eps, None)
}

/// [`check_parameter_gradients`] with one backward rule deliberately
/// miscomputed, as a negative control.
#[doc(hidden)]
#[allow(clippy::too_many_arguments)]
pub fn check_parameter_gradients_with(
    spec: &NetworkSpec,
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    masks: &Masks,
    coords: &[(usize, usize)],
    eps: f64,
    fault: Option<autodiff::FaultyRule>,
) -> Result<Vec<CoordinateCheck>> {
    let train = TrainInputs {
        labels,
        masks: masks.clone(),
    };
    let loss_of = |p: &ModelParams, with_grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut g = Graph::new();
        if let (true, Some(rule)) = (with_grad, fault) {
            g.inject_fault(rule);
        }
        let bound = if with_grad { p.bind(&mut g) } else { p.bind_constant(&mut g) };
        let x = g.constant(images.clone());
        let out = forward(&mut g, spec, &bound, x, Some(&train))?;
        let loss = total_loss(&mut g, &out, x, labels)?.total;
        let value = g.value(loss).item()?;
        if !with_grad {
            return Ok((value, None));
        }
        g.backward(loss)?;
        Ok((value, Some(bound.grads(&g))))
    };
    let (_, grads) = loss_of(params, true)?;
    let grads = grads.expect("requested");
    let mut probe = params.clone();
    coords
        .iter()
        .map(|&(p, i)| {
            let original = params.tensor(p).data()[i];
            let numeric = autodiff::central_difference(
                |delta| {
                    probe.tensor_mut(p).data_mut()[i] = original + delta;
                    let v = loss_of(&probe, false).map(|(v, _)| v);
                    probe.tensor_mut(p).data_mut()[i] = original;
                    v
                },
                eps,
            )?;
            let analytic = grads[p].data()[i];
            Ok(CoordinateCheck {
                param: params.name(p).to_string(),
                index: i,
                analytic,
                numeric,
                relative_error: autodiff::relative_error(analytic, numeric),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
