//! File formats: observation and signal paths, PDMP paths (JSON), belief and
//! value tables (CSV). Labels are written as in the model file.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{BeliefPath, YPath};
use crate::model::{Belief, ModelSpec};
use crate::pdmp::PdmpPath;
use crate::signal::SignalPath;
use crate::solver::{BeliefGrid, StationaryPolicy, ValueField};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("horizon {horizon} precedes the last observation jump at {last}")]
    ShortHorizon { horizon: f64, last: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelJump {
    pub t: f64,
    pub y: String,
}

/// Observed trajectory document `{"y0": ..., "jumps": [{"t": ..., "y": ...}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsDoc {
    pub y0: String,
    pub jumps: Vec<LabelJump>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

fn obs_index(model: &ModelSpec, label: &str) -> Result<usize, IoError> {
    model.obs_index(label).ok_or_else(|| IoError::UnknownLabel {
        kind: "observation",
        label: label.to_string(),
    })
}

/// Parses an observed trajectory. The horizon is taken from the argument,
/// then from the document, then from the last jump.
pub fn parse_y_path(model: &ModelSpec, json: &str, horizon: Option<f64>) -> Result<YPath, IoError> {
    let doc: ObsDoc = serde_json::from_str(json)?;
    let jumps = doc
        .jumps
        .iter()
        .map(|j| Ok((j.t, obs_index(model, &j.y)?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    let last = jumps.last().map_or(0.0, |j| j.0);
    let horizon = horizon.or(doc.horizon).unwrap_or(last);
    if horizon < last {
        return Err(IoError::ShortHorizon { horizon, last });
    }
    Ok(YPath {
        y0: obs_index(model, &doc.y0)?,
        jumps,
        horizon,
    })
}

pub fn y_path_json(model: &ModelSpec, path: &YPath) -> String {
    let doc = ObsDoc {
        y0: model.obs_labels()[path.y0].clone(),
        jumps: path
            .jumps
            .iter()
            .map(|&(t, y)| LabelJump {
                t,
                y: model.obs_labels()[y].clone(),
            })
            .collect(),
        horizon: Some(path.horizon),
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

#[derive(Serialize)]
struct StateJump<'a> {
    t: f64,
    state: &'a str,
}

#[derive(Serialize)]
struct SignalDoc<'a> {
    x0: &'a str,
    jumps: Vec<StateJump<'a>>,
    horizon: f64,
}

pub fn signal_path_json(model: &ModelSpec, path: &SignalPath) -> String {
    let doc = SignalDoc {
        x0: &model.states()[path.x0],
        jumps: path
            .jumps
            .iter()
            .map(|&(t, z)| StateJump {
                t,
                state: &model.states()[z],
            })
            .collect(),
        horizon: path.horizon,
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

#[derive(Serialize)]
struct BeliefDoc<'a> {
    y: &'a str,
    weights: &'a [f64],
}

#[derive(Serialize)]
struct PdmpJumpDoc<'a> {
    t: f64,
    y: &'a str,
    weights: &'a [f64],
}

#[derive(Serialize)]
struct PdmpDoc<'a> {
    start: BeliefDoc<'a>,
    jumps: Vec<PdmpJumpDoc<'a>>,
    horizon: f64,
    cost_sample: f64,
}

fn belief_doc<'a>(model: &'a ModelSpec, b: &'a Belief) -> BeliefDoc<'a> {
    BeliefDoc {
        y: &model.obs_labels()[b.face()],
        weights: b.weights(),
    }
}

pub fn pdmp_path_json(model: &ModelSpec, path: &PdmpPath, cost_sample: f64) -> String {
    let doc = PdmpDoc {
        start: belief_doc(model, &path.start),
        jumps: path
            .jumps
            .iter()
            .map(|j| PdmpJumpDoc {
                t: j.t,
                y: &model.obs_labels()[j.y],
                weights: j.belief.weights(),
            })
            .collect(),
        horizon: path.horizon,
        cost_sample,
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

fn push_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let mut first = true;
    for c in cells {
        if !first {
            out.push(',');
        }
        out.push_str(&c);
        first = false;
    }
    out.push('\n');
}

/// `t,face,w_0,...` with grid samples and post-jump beliefs in time order.
pub fn beliefs_csv(model: &ModelSpec, path: &BeliefPath) -> String {
    let mut out = String::new();
    push_row(
        &mut out,
        ["t".to_string(), "face".to_string()]
            .into_iter()
            .chain((0..model.n_states()).map(|i| format!("w_{i}"))),
    );
    for (t, b) in path.rows() {
        push_row(
            &mut out,
            [t.to_string(), model.obs_labels()[b.face()].clone()]
                .into_iter()
                .chain(b.weights().iter().map(|w| w.to_string())),
        );
    }
    out
}

/// `face,n_0,...,value,control` with one row per grid vertex; `n_i` counts
/// the state `i` in the vertex composition.
pub fn values_csv(model: &ModelSpec, grid: &BeliefGrid, field: &ValueField, policy: &StationaryPolicy) -> String {
    let mut out = String::new();
    push_row(
        &mut out,
        std::iter::once("face".to_string())
            .chain((0..model.n_states()).map(|i| format!("n_{i}")))
            .chain(["value".to_string(), "control".to_string()]),
    );
    for v in 0..grid.len() {
        push_row(
            &mut out,
            std::iter::once(model.obs_labels()[grid.face_of(v)].clone())
                .chain(grid.full_counts(v).into_iter().map(|n| n.to_string()))
                .chain([
                    field.values[v].to_string(),
                    model.controls()[policy.controls()[v]].clone(),
                ]),
        );
    }
    out
}

/// One line per value: `key=value`, for human summaries.
pub fn summary_line(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (i, (k, v)) in pairs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{k}={v}");
    }
    s
}
