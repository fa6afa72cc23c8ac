//! Recurrent gear-schedule policy: feature map, sequence model, clipped
//! argmax read-out, supervised training and model files.

mod dataset;
mod network;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::{GearSchedule, ShiftedSolution};
use crate::vehicle::{Gear, ReducedInput, State, VehicleParams, NUM_GEARS};

pub use dataset::{
    dataset_hash, generate_expert_data, DataConfig, DatasetHeader, ExpertDataset, ExpertSample, DATASET_FORMAT,
    DATASET_VERSION,
};
pub use network::{softmax, CellKind, Network, NetworkShape};
pub use train::{train_policy, EpochStats, Optimizer, TrainConfig, TrainReport};

pub const NUM_FEATURES: usize = 8;
pub const MODEL_FORMAT: &str = "gearmpc-policy";
pub const MODEL_VERSION: u32 = 1;

/// The `i`-th element of every sequence the policy reads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyInputStep {
    pub state: State,
    pub input: ReducedInput,
    pub reference: State,
    pub gear: Gear,
}

/// Tracking error (2), normalized speed, normalized reference speed, torque,
/// brake force, engine speed and gear number.
pub fn feature_map(q: &PolicyInputStep, params: &VehicleParams) -> [f64; NUM_FEATURES] {
    let (lo, hi) = params.velocity_bounds();
    let span = hi - lo;
    [
        q.state.p - q.reference.p,
        q.state.v - q.reference.v,
        (q.state.v - lo) / span,
        (q.reference.v - lo) / span,
        q.input.torque,
        q.input.brake,
        params.engine_speed(q.state.v, q.gear),
        q.gear.get() as f64,
    ]
}

/// Shifted solution plus the reference window: the policy's input sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub states: Vec<State>,
    pub inputs: Vec<ReducedInput>,
    pub reference: Vec<State>,
    pub gears: Vec<Gear>,
}

impl PolicyBundle {
    /// Uses the first `N` entries of `reference`.
    pub fn new(shifted: &ShiftedSolution, reference: &[State]) -> Result<Self> {
        let n = shifted.horizon();
        if reference.len() < n {
            return Err(Error::LengthMismatch { what: "reference window", got: reference.len(), expected: n });
        }
        Ok(PolicyBundle {
            states: shifted.states.clone(),
            inputs: shifted.inputs.clone(),
            reference: reference[..n].to_vec(),
            gears: shifted.gears.gears().to_vec(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        for (what, got) in [
            ("bundle inputs", self.inputs.len()),
            ("bundle reference", self.reference.len()),
            ("bundle gears", self.gears.len()),
        ] {
            if got != n {
                return Err(Error::LengthMismatch { what, got, expected: n });
            }
        }
        Ok(())
    }

    pub fn step(&self, i: usize) -> PolicyInputStep {
        PolicyInputStep {
            state: self.states[i],
            input: self.inputs[i],
            reference: self.reference[i],
            gear: self.gears[i],
        }
    }

    pub fn features(&self, params: &VehicleParams) -> Vec<[f64; NUM_FEATURES]> {
        (0..self.horizon()).map(|i| feature_map(&self.step(i), params)).collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Most probable gear per step, each clipped to within one gear of the
/// previous output.
pub fn clipped_argmax(logits: &[Vec<f64>]) -> GearSchedule {
    let mut gears: Vec<Gear> = Vec::with_capacity(logits.len());
    for z in logits {
        let best = Gear::from_index(argmax(z));
        gears.push(match gears.last() {
            None => best,
            Some(prev) => prev.step_toward(best),
        });
    }
    GearSchedule::new(gears).expect("clipping enforces the shift limit")
}

/// Per-feature affine standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer { mean: [0.0; NUM_FEATURES], std: [1.0; NUM_FEATURES] }
    }
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64; NUM_FEATURES]>) -> Self {
        let mut count = 0.0;
        let mut sum = [0.0; NUM_FEATURES];
        let mut sq = [0.0; NUM_FEATURES];
        for r in rows {
            count += 1.0;
            for k in 0..NUM_FEATURES {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        if count == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for k in 0..NUM_FEATURES {
            let mean = sum[k] / count;
            let var = (sq[k] / count - mean * mean).max(0.0);
            out.mean[k] = mean;
            out.std[k] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, f: &[f64; NUM_FEATURES]) -> Vec<f64> {
        (0..NUM_FEATURES).map(|k| (f[k] - self.mean[k]) / self.std[k]).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub dataset_hash: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub network: Network,
    pub standardizer: Standardizer,
    pub metadata: ModelMetadata,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: PolicyModel,
}

impl PolicyModel {
    pub fn new(cell: CellKind, layers: usize, hidden: usize, seed: u64) -> Self {
        let shape = NetworkShape { cell, inputs: NUM_FEATURES, hidden, layers, outputs: NUM_GEARS };
        PolicyModel {
            network: Network::init(shape, seed),
            standardizer: Standardizer::default(),
            metadata: ModelMetadata { seed, ..ModelMetadata::default() },
        }
    }

    pub fn encode(&self, bundle: &PolicyBundle, params: &VehicleParams) -> Vec<Vec<f64>> {
        bundle.features(params).iter().map(|f| self.standardizer.apply(f)).collect()
    }

    pub fn logits(&self, bundle: &PolicyBundle, params: &VehicleParams) -> Vec<Vec<f64>> {
        self.network.forward(&self.encode(bundle, params))
    }

    /// Gear probabilities per step.
    pub fn probabilities(&self, bundle: &PolicyBundle, params: &VehicleParams) -> Vec<Vec<f64>> {
        self.logits(bundle, params).iter().map(|z| softmax(z)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile { format: MODEL_FORMAT.into(), version: MODEL_VERSION, model: self.clone() };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("not a model file: {e}")))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::ModelFormat("missing or unknown format tag".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(MODEL_VERSION as u64) {
            return Err(Error::ModelFormat(format!("unsupported version {version:?}, expected {MODEL_VERSION}")));
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::ModelFormat(e.to_string()))?;
        let model = file.model;
        let shape = model.network.shape;
        if shape.inputs != NUM_FEATURES || shape.outputs != NUM_GEARS {
            return Err(Error::ModelFormat("network must map 8 features to 6 gears".into()));
        }
        if model.network.params.len() != shape.num_params() {
            return Err(Error::ModelFormat(format!(
                "expected {} parameters, found {}",
                shape.num_params(),
                model.network.params.len()
            )));
        }
        Ok(model)
    }
}

/// Gear schedule proposed by the policy for a shifted solution.
pub fn policy_forward(bundle: &PolicyBundle, model: &PolicyModel, params: &VehicleParams) -> Result<GearSchedule> {
    bundle.validate()?;
    if bundle.horizon() == 0 {
        return Err(Error::Horizon { min: 1, got: 0 });
    }
    Ok(clipped_argmax(&model.logits(bundle, params)))
}
