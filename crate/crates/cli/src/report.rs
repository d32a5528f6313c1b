//! JSON documents the commands emit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use lemof::metrics::{MetricsRecord, RankTable, VariantSummary};
use lemof::modality::ModalityId;
use lemof::pfn::LEVELS;
use lemof::pipeline::{PipelineModel, StageRecord, StageTiming};
use lemof::shapley::{ShapleyReport, ShapleyScale};
use lemof::{LemofError, Result};

use crate::config::RunConfig;

pub const RUN_SCHEMA: &str = "lemof-run/1";
pub const SHAPLEY_SCHEMA: &str = "lemof-shapley/1";
pub const ABLATE_SCHEMA: &str = "lemof-ablate/1";

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Everything needed to audit or repeat one training run.
#[derive(Serialize)]
pub struct RunReport<'a> {
    pub schema: &'static str,
    /// Fed back to `lemof train`, this reproduces the model file.
    pub config: &'a RunConfig,
    pub stage_losses: &'a [StageRecord],
    pub importance: [&'a ShapleyReport; 2],
    pub test_metrics: Vec<MetricsRecord>,
    pub timings: Vec<StageTiming>,
    /// SHA-256 of every file the run read or wrote, keyed by role.
    pub artifacts: BTreeMap<String, String>,
}

pub fn reports(model: &PipelineModel) -> Result<[&ShapleyReport; 2]> {
    let get = |m| {
        model.report(m).ok_or_else(|| {
            LemofError::Lifecycle(format!(
                "explanations need a model trained through s3_shapley, but this one stops at {}",
                model.stage()
            ))
        })
    };
    Ok([get(ModalityId::M1Ecg)?, get(ModalityId::M2Ehr)?])
}

#[derive(Serialize)]
pub struct LevelImportance {
    pub scale: ShapleyScale,
    /// Mean absolute attribution of levels 1 to 3.
    pub aggregate_phi: [f64; LEVELS],
    pub best_level: usize,
    pub baseline: [f64; LEVELS],
    pub sample_count: usize,
}

#[derive(Serialize)]
pub struct Explanation {
    pub schema: &'static str,
    pub modalities: BTreeMap<&'static str, LevelImportance>,
}

pub fn explain(model: &PipelineModel) -> Result<Explanation> {
    let modalities = reports(model)?
        .into_iter()
        .map(|r| {
            (
                r.modality.as_str(),
                LevelImportance {
                    scale: r.scale,
                    aggregate_phi: r.aggregate_phi,
                    best_level: r.best_level,
                    baseline: r.baseline,
                    sample_count: r.sample_count,
                },
            )
        })
        .collect();
    Ok(Explanation {
        schema: SHAPLEY_SCHEMA,
        modalities,
    })
}

#[derive(Serialize)]
pub struct Ablation {
    pub schema: &'static str,
    pub seeds: Vec<u64>,
    pub records: Vec<MetricsRecord>,
    pub mean: Vec<VariantSummary>,
    /// Variants ranked by test AUROC within each seed.
    pub ranks: RankTable,
}
