//! Capsule nonlinearity, prediction vectors, and dynamic routing by
//! agreement.
//!
//! Routing runs over a prediction tensor `û` of shape
//! `(batch, n_primary, n_digit, dim)`. The two routing modes differ only in
//! which axis of the `(batch, n_primary, n_digit)` logits is softmax
//! normalized:
//!
//! * [`RoutingMode::FanOut`]: over digits, so each primary capsule splits a
//!   unit of weight across the digit capsules.
//! * [`RoutingMode::FanIn`]: over primaries, so the contributions arriving at
//!   each digit capsule sum to one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PRIMARY_DIM: usize = 8;
pub const DIGIT_DIM: usize = 16;
pub const NUM_DIGITS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    FanOut,
    FanIn,
}

impl RoutingMode {
    /// Axis of the `(batch, primary, digit)` logits that the softmax runs over.
    pub fn softmax_axis(self) -> usize {
        match self {
            RoutingMode::FanOut => 2,
            RoutingMode::FanIn => 1,
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::FanOut => "fan-out",
            RoutingMode::FanIn => "fan-in",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan-out" | "fanout" | "fout" => Ok(RoutingMode::FanOut),
            "fan-in" | "fanin" | "fin" => Ok(RoutingMode::FanIn),
            other => Err(Error::contract(format!(
                "unknown routing mode {other:?} (expected fan-in or fan-out)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapsuleRole {
    Primary,
    Digit,
}

impl CapsuleRole {
    pub fn dim(self) -> usize {
        match self {
            CapsuleRole::Primary => PRIMARY_DIM,
            CapsuleRole::Digit => DIGIT_DIM,
        }
    }
}

/// A `(batch, n_caps, dim)` node of a graph, tagged with its layer.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleSet {
    pub var: Var,
    pub role: CapsuleRole,
}

impl CapsuleSet {
    pub fn new(graph: &Graph, var: Var, role: CapsuleRole) -> Result<Self> {
        let shape = graph.shape(var);
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "capsule set must be (batch, caps, dim), got {shape:?}"
            )));
        }
        Ok(Self { var, role })
    }

    pub fn batch(&self, graph: &Graph) -> usize {
        graph.shape(self.var)[0]
    }

    pub fn count(&self, graph: &Graph) -> usize {
        graph.shape(self.var)[1]
    }

    pub fn dim(&self, graph: &Graph) -> usize {
        graph.shape(self.var)[2]
    }
}

/// Shape of the per-pair transformation matrices: one `digit_dim ×
/// primary_dim` matrix for every (primary unit, digit class) pair.
pub fn transform_shape(n_primary: usize) -> [usize; 4] {
    [n_primary, NUM_DIGITS, DIGIT_DIM, PRIMARY_DIM]
}

/// Logits and couplings of a finished routing pass.
#[derive(Clone, Debug)]
pub struct RoutingState {
    /// Logits used to form the final couplings.
    pub logits: Tensor,
    /// Couplings of the final iteration.
    pub couplings: Tensor,
    pub iterations: usize,
    /// Couplings of every iteration, first to last.
    pub coupling_history: Vec<Tensor>,
}

/// `‖s‖²/(1+‖s‖²) · s/‖s‖` over the last axis.
pub fn squash(graph: &mut Graph, s: Var) -> Result<Var> {
    graph.squash(s)
}

/// Prediction vectors `û_{j|i} = W_ij · u_i`.
pub fn predict(graph: &mut Graph, primary: Var, weights: Var) -> Result<Var> {
    graph.predict(primary, weights)
}

/// Softmax-normalized coupling coefficients for `(batch, primary, digit)` logits.
pub fn couplings(graph: &mut Graph, logits: Var, mode: RoutingMode) -> Result<Var> {
    if graph.shape(logits).len() != 3 {
        return Err(Error::shape(format!(
            "routing logits must be (batch, primary, digit), got {:?}",
            graph.shape(logits)
        )));
    }
    graph.softmax(logits, mode.softmax_axis())
}

/// Dynamic routing by agreement, unrolled into the graph so gradients flow
/// through every iteration.
///
/// Logits start at zero. Each iteration forms couplings, the weighted sum
/// `s_j = Σ_i c_ij û_{j|i}` and `v_j = squash(s_j)`; every iteration but the
/// last then adds the agreement `û_{j|i} · v_j` to the logits.
pub fn route(
    graph: &mut Graph,
    predictions: Var,
    mode: RoutingMode,
    iterations: usize,
) -> Result<(Var, RoutingState)> {
    if iterations < 1 {
        return Err(Error::contract("routing needs at least one iteration"));
    }
    let shape = graph.shape(predictions).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "predictions must be (batch, primary, digit, dim), got {shape:?}"
        )));
    }
    let mut logits = graph.constant(Tensor::zeros(&shape[..3]));
    let mut history = Vec::with_capacity(iterations);
    let mut last = None;
    for it in 0..iterations {
        let c = couplings(graph, logits, mode)?;
        history.push(graph.value(c).clone());
        let s = graph.weighted_sum(c, predictions)?;
        let v = graph.squash(s)?;
        last = Some((v, c, logits));
        if it + 1 < iterations {
            let agreement = graph.agreement(predictions, v)?;
            logits = graph.add(logits, agreement)?;
        }
    }
    let (v, c, b) = last.expect("at least one iteration");
    let state = RoutingState {
        logits: graph.value(b).clone(),
        couplings: graph.value(c).clone(),
        iterations,
        coupling_history: history,
    };
    Ok((v, state))
}

/// Capsule lengths: `(batch, n_caps, dim)` → `(batch, n_caps)`.
pub fn capsule_lengths(graph: &mut Graph, capsules: Var) -> Result<Var> {
    graph.norm(capsules)
}
