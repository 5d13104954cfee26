//! Paired-sample datasets as JSON lines, and the run configuration file.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorOptions;
use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::ingest::{PacketLine, ResourceLine};
use crate::model::{EncodingParams, LogicProfile, PairedSample, TrafficTrace};
use crate::neural::{ModelConfig, TrainConfig};
use crate::retrieval::ProbeConfig;
use crate::synth::GenConfig;

/// One dataset line. Keys are written in alphabetical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLine {
    pub label: Option<usize>,
    pub logic: Vec<ResourceLine>,
    pub packets: Vec<PacketLine>,
    pub site_id: String,
}

impl From<&PairedSample> for DatasetLine {
    fn from(s: &PairedSample) -> Self {
        DatasetLine {
            label: s.traffic.label,
            logic: s.logic.resources.iter().map(ResourceLine::from).collect(),
            packets: s.traffic.packets.iter().map(PacketLine::from).collect(),
            site_id: s.site_id.clone(),
        }
    }
}

impl DatasetLine {
    pub fn into_sample(self, line: usize) -> Result<PairedSample> {
        let parse = |message: String| Error::Parse { line, message };
        let resources = self
            .logic
            .into_iter()
            .map(ResourceLine::into_record)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse(e.to_string()))?;
        let packets = self
            .packets
            .into_iter()
            .map(PacketLine::into_record)
            .collect::<std::result::Result<Vec<_>, String>>()
            .map_err(parse)?;
        Ok(PairedSample {
            logic: LogicProfile {
                resources,
                site_id: self.site_id.clone(),
            },
            traffic: TrafficTrace {
                packets,
                site_id: self.site_id.clone(),
                label: self.label,
            },
            site_id: self.site_id,
        })
    }
}

pub fn read_dataset(text: &str) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for (i, body) in text.lines().enumerate() {
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        let line: DatasetLine = serde_json::from_str(body).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(line.into_sample(i + 1)?);
    }
    Ok(out)
}

pub fn write_dataset(samples: &[PairedSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(
            &serde_json::to_string(&DatasetLine::from(s)).expect("dataset lines serialize"),
        );
        out.push('\n');
    }
    out
}

/// Site split used when generating a synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of sites held out for evaluation.
    pub test_fraction: f64,
    /// Share of sites set aside as unmonitored for open-world runs.
    pub unmonitored_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            unmonitored_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rejection threshold on the best cosine similarity.
    pub threshold: f64,
    /// Labeled traces per class for the few-shot heads.
    pub shots: usize,
    pub tip_alpha: f64,
    pub tip_beta: f64,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: -1.0,
            shots: 4,
            tip_alpha: 1.0,
            tip_beta: 5.5,
            probe: ProbeConfig::default(),
        }
    }
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: GenConfig,
    pub split: SplitConfig,
    pub augment: AugConfig,
    /// Augmented copies generated per training pair when no augmented
    /// dataset is supplied.
    pub augment_copies: usize,
    pub encoding: EncodingParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub anchors: AnchorOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: GenConfig::default(),
            split: SplitConfig::default(),
            augment: AugConfig::default(),
            augment_copies: 1,
            encoding: EncodingParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            anchors: AnchorOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one seed to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.rng_seed = seed;
        self.augment.rng_seed = seed;
        self.model.init_seed = seed;
        self.train.rng_seed = seed;
        self.anchors.seed = seed;
        self.eval.probe.rng_seed = seed;
    }
}
