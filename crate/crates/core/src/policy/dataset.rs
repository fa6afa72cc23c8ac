//! Expert demonstrations: shifted-solution bundles labelled with the exact
//! controller's gear schedule, stored as JSON lines.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PolicyBundle;
use crate::control::{run_episode, ControllerConfig, ControllerKind};
use crate::error::{Error, Result};
use crate::harness::{episode_seed, generate_scenario};
use crate::nlp::GearSchedule;
use crate::vehicle::VehicleParams;

pub const DATASET_FORMAT: &str = "gearmpc-dataset";
pub const DATASET_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    pub k_sim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSample {
    pub episode: usize,
    pub step: usize,
    pub horizon: usize,
    #[serde(flatten)]
    pub bundle: PolicyBundle,
    pub label: GearSchedule,
}

impl ExpertSample {
    pub fn validate(&self) -> Result<()> {
        self.bundle.validate()?;
        let n = self.bundle.horizon();
        if n != self.horizon || self.label.len() != n {
            return Err(Error::Dataset(format!(
                "sample ({}, {}) declares horizon {} but has {} steps and a {}-step label",
                self.episode,
                self.step,
                self.horizon,
                n,
                self.label.len()
            )));
        }
        Ok(())
    }

    /// Zero-based gear indices of the label.
    pub fn label_indices(&self) -> Vec<usize> {
        self.label.gears().iter().map(|g| g.index()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertDataset {
    pub header: DatasetHeader,
    pub samples: Vec<ExpertSample>,
}

impl ExpertDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write(&self, w: &mut dyn Write) -> Result<()> {
        serde_json::to_writer(&mut *w, &self.header)?;
        writeln!(w).map_err(|e| Error::io("dataset", e))?;
        for s in &self.samples {
            serde_json::to_writer(&mut *w, s)?;
            writeln!(w).map_err(|e| Error::io("dataset", e))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header_line = match lines.next() {
            Some((_, line)) => line.map_err(|e| Error::io("dataset", e))?,
            None => return Err(Error::Dataset("empty file".into())),
        };
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Dataset(format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Dataset(format!("unknown format `{}`", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Dataset(format!("unsupported version {}, expected {DATASET_VERSION}", header.version)));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("dataset", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ExpertSample =
                serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
            s.validate()?;
            samples.push(s);
        }
        Ok(ExpertDataset { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn hash(&self) -> String {
        dataset_hash(&self.to_bytes())
    }
}

pub fn dataset_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub episodes: usize,
    pub k_sim: usize,
    pub seed: u64,
    pub controller: ControllerConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { episodes: 40, k_sim: 60, seed: 0, controller: ControllerConfig::default() }
    }
}

/// Runs the exact controller on seeded scenarios and records one sample per
/// step `1 ≤ k < k_sim`: steps that have a shifted solution and whose input
/// drives a plant transition.
pub fn generate_expert_data(cfg: &DataConfig, params: &VehicleParams) -> Result<ExpertDataset> {
    params.check_backup_assumption().into_result()?;
    let n = cfg.controller.horizon;
    let per_episode: Vec<Result<Vec<ExpertSample>>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| {
            let seed = episode_seed(cfg.seed, e);
            let scenario = generate_scenario(seed, cfg.k_sim, n, params)?;
            let mut samples = Vec::new();
            let mut sink = |obs: &crate::control::StepObservation<'_>| {
                if obs.k == 0 || obs.k >= cfg.k_sim {
                    return;
                }
                let (Some(shifted), Some(label)) = (obs.shifted, obs.schedule) else {
                    return;
                };
                if obs.source != crate::control::GearSource::Expert {
                    return;
                }
                if let Ok(bundle) = PolicyBundle::new(shifted, obs.window) {
                    samples.push(ExpertSample { episode: e, step: obs.k, horizon: n, bundle, label: label.clone() });
                }
            };
            let episode = run_episode(
                ControllerKind::Exact,
                seed,
                scenario.x0,
                &scenario.reference,
                None,
                cfg.k_sim,
                None,
                params,
                &cfg.controller,
                &mut sink,
            )?;
            if let Some(why) = &episode.result.failure {
                log::warn!("expert episode {e} (seed {seed}) aborted: {why}");
            }
            Ok(samples)
        })
        .collect();
    let mut samples = Vec::new();
    for r in per_episode {
        samples.extend(r?);
    }
    Ok(ExpertDataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            generator: "exact-gear-search".into(),
            seed: cfg.seed,
            episodes: cfg.episodes,
            horizon: n,
            k_sim: cfg.k_sim,
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DataConfig {
        DataConfig {
            episodes: 2,
            k_sim: 6,
            seed: 3,
            controller: ControllerConfig { horizon: 3, ..ControllerConfig::default() },
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let p = VehicleParams::default();
        let a = generate_expert_data(&tiny(), &p).unwrap();
        let b = generate_expert_data(&tiny(), &p).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.len() <= 2 * 5);
        assert!(!a.is_empty());
        for s in &a.samples {
            s.validate().unwrap();
            assert!(s.step >= 1 && s.step < 6);
            for w in s.label.gears().windows(2) {
                assert!(w[0].distance(w[1]) <= 1);
            }
        }
    }

    #[test]
    fn round_trip_and_rejection() {
        let p = VehicleParams::default();
        let mut cfg = tiny();
        cfg.episodes = 1;
        let d = generate_expert_data(&cfg, &p).unwrap();
        let bytes = d.to_bytes();
        let back = ExpertDataset::read(&bytes[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.hash(), d.hash());

        let text = String::from_utf8(bytes).unwrap();
        let bad_version = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(ExpertDataset::read(bad_version.as_bytes()), Err(Error::Dataset(_))));
        let truncated = &text[..text.len() / 2];
        assert!(ExpertDataset::read(truncated.as_bytes()).is_err());
        assert!(ExpertDataset::read(&b""[..]).is_err());
    }

    #[test]
    fn skipping_labels_are_rejected() {
        let p = VehicleParams::default();
        let mut cfg = tiny();
        cfg.episodes = 1;
        let d = generate_expert_data(&cfg, &p).unwrap();
        let mut text = String::from_utf8(d.to_bytes()).unwrap();
        let line = text.lines().nth(1).unwrap().to_string();
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v["label"] = serde_json::json!([1, 3, 3]);
        text = text.replacen(&line, &v.to_string(), 1);
        assert!(ExpertDataset::read(text.as_bytes()).is_err());
    }
}
