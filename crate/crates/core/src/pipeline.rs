//! The whole model: staged training, the forward pass and the joint loss
//! used for gradient verification.
//!
//! Training runs six stages in order:
//!
//! 1. encoders and level heads, per modality, on the training split;
//! 2. meta-learners on validation level predictions;
//! 3. Shapley reports on validation predictions, fixing the best levels;
//! 4. attention and the fused head on the training split, encoders frozen;
//! 5. the stacked head over (meta, best) predictions on validation;
//! 6. the final head over both stacked outputs on validation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    fuse_and_predict, select_best_reps, AttentionParams, DEFAULT_ATTENTION_DIM,
};
use crate::data::{Dataset, Sample, SplitDataset};
use crate::error::{LemofError, Result};
use crate::heads::{
    fit_logistic, level_predict, logistic_forward, meta_predict, LevelHeadParams, LogisticHyper,
    LogisticParams, LogisticRole, PredictionVector,
};
use crate::metrics::{evaluate, MetricsRecord, Variant};
use crate::modality::ModalityId;
use crate::numeric::{BoundParams, Graph, NodeId, ParamTape, RngState, TokenSeq};
use crate::pfn::{build_pfn, pfn_forward, BackboneKind, LevelStack, PfnParams, LEVELS};
use crate::shapley::{importance_report, ShapleyReport, ShapleyScale};

/// Optimizer settings of one stage. Logistic stages fit full-batch and
/// ignore `batch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub l2: f64,
}

impl StageHyper {
    fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LemofError::Config(format!(
                "{stage}: lr must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(LemofError::Config(format!(
                "{stage}: epochs must be positive"
            )));
        }
        if self.batch == 0 {
            return Err(LemofError::Config(format!(
                "{stage}: batch must be positive"
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(LemofError::Config(format!(
                "{stage}: l2 must be >= 0, got {}",
                self.l2
            )));
        }
        Ok(())
    }

    pub fn logistic(&self) -> LogisticHyper {
        LogisticHyper {
            lr: self.lr,
            epochs: self.epochs,
            l2: self.l2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityArch {
    pub backbone: BackboneKind,
    pub dims: [usize; LEVELS],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub m1_ecg: ModalityArch,
    pub m2_ehr: ModalityArch,
    pub attention_dim: usize,
}

impl ModelConfig {
    pub fn arch(&self, m: ModalityId) -> ModalityArch {
        match m {
            ModalityId::M1Ecg => self.m1_ecg,
            ModalityId::M2Ehr => self.m2_ehr,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m1_ecg: ModalityArch {
                backbone: BackboneKind::SignalConv,
                dims: [16, 32, 32],
            },
            m2_ehr: ModalityArch {
                backbone: BackboneKind::TabularMlp,
                dims: [16, 16, 16],
            },
            attention_dim: DEFAULT_ATTENTION_DIM,
        }
    }
}

/// Encoder pretraining settings, one set per modality since the two
/// backbones train independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSchedule {
    pub m1_ecg: StageHyper,
    pub m2_ehr: StageHyper,
}

impl EncoderSchedule {
    pub fn get(&self, m: ModalityId) -> StageHyper {
        match m {
            ModalityId::M1Ecg => self.m1_ecg,
            ModalityId::M2Ehr => self.m2_ehr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub s1_encoders: EncoderSchedule,
    pub s2_meta: StageHyper,
    pub s4_fusion: StageHyper,
    pub s5_omega1: StageHyper,
    pub s6_final: StageHyper,
}

impl Default for StageSchedule {
    fn default() -> Self {
        let logistic = StageHyper {
            lr: 0.5,
            epochs: 1000,
            batch: 1,
            l2: 1e-3,
        };
        StageSchedule {
            s1_encoders: EncoderSchedule {
                m1_ecg: StageHyper {
                    lr: 0.03,
                    epochs: 150,
                    batch: 32,
                    l2: 0.0,
                },
                m2_ehr: StageHyper {
                    lr: 0.01,
                    epochs: 150,
                    batch: 32,
                    l2: 0.0,
                },
            },
            s2_meta: logistic,
            s4_fusion: StageHyper {
                lr: 0.01,
                epochs: 20,
                batch: 32,
                l2: 0.0,
            },
            s5_omega1: logistic,
            s6_final: logistic,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stages: StageSchedule,
    #[serde(default)]
    pub shapley_scale: ShapleyScale,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for m in ModalityId::ALL {
            let arch = self.model.arch(m);
            if let Some(k) = arch.dims.iter().position(|&d| d == 0) {
                return Err(LemofError::Config(format!(
                    "{m}: level {} has zero width",
                    k + 1
                )));
            }
        }
        if self.model.attention_dim == 0 {
            return Err(LemofError::Config("attention_dim must be positive".into()));
        }
        let s = &self.stages;
        s.s1_encoders.m1_ecg.validate("s1_encoders.m1_ecg")?;
        s.s1_encoders.m2_ehr.validate("s1_encoders.m2_ehr")?;
        s.s2_meta.validate("s2_meta")?;
        s.s4_fusion.validate("s4_fusion")?;
        s.s5_omega1.validate("s5_omega1")?;
        s.s6_final.validate("s6_final")
    }
}

/// Training progress; a model is usable for a task once it has reached the
/// stage that task needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initialized,
    S1Encoders,
    S2Meta,
    S3Shapley,
    S4Fusion,
    S5Omega1,
    S6Final,
}

impl Stage {
    pub const TRAINING: [Stage; 6] = [
        Stage::S1Encoders,
        Stage::S2Meta,
        Stage::S3Shapley,
        Stage::S4Fusion,
        Stage::S5Omega1,
        Stage::S6Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialized => "initialized",
            Stage::S1Encoders => "s1_encoders",
            Stage::S2Meta => "s2_meta",
            Stage::S3Shapley => "s3_shapley",
            Stage::S4Fusion => "s4_fusion",
            Stage::S5Omega1 => "s5_omega1",
            Stage::S6Final => "s6_final",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// What one stage fitted, on which split, and its loss trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub modality: Option<ModalityId>,
    pub split: SplitName,
    pub samples: usize,
    /// Mini-batch stages: mean mini-batch loss over each epoch. Logistic
    /// stages: objective before the first step and after every epoch.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub seed: u64,
    pub stage_order: Vec<Stage>,
    /// The three stacked heads are fitted one after another, not jointly.
    pub head_schedule: String,
    pub records: Vec<StageRecord>,
}

impl TrainingManifest {
    pub fn records_for(&self, stage: Stage) -> impl Iterator<Item = &StageRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

pub fn modality_input(sample: &Sample, m: ModalityId) -> &TokenSeq {
    match m {
        ModalityId::M1Ecg => &sample.ecg,
        ModalityId::M2Ehr => &sample.ehr,
    }
}

/// Parameter-name prefixes of every component in [`PipelineModel::parameter_tape`].
fn pfn_prefix(m: ModalityId) -> String {
    format!("{m}.pfn.")
}

fn heads_prefix(m: ModalityId) -> String {
    format!("{m}.heads.")
}

fn meta_prefix(m: ModalityId) -> String {
    format!("{m}.meta.")
}

const ATTENTION_PREFIX: &str = "attention.";
const OMEGA1_PREFIX: &str = "omega1.";
const OMEGA2_PREFIX: &str = "omega2.";
const FINAL_PREFIX: &str = "final.";

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineModel {
    config: TrainConfig,
    stage: Stage,
    input_dims: [usize; 2],
    pfn: [PfnParams; 2],
    heads: [LevelHeadParams; 2],
    meta: [LogisticParams; 2],
    reports: [Option<ShapleyReport>; 2],
    attention: Option<AttentionParams>,
    omega1: LogisticParams,
    omega2: LogisticParams,
    final_head: LogisticParams,
    manifest: TrainingManifest,
}

impl PipelineModel {
    /// Freshly initialized model. `input_dims` are the ECG channel count and
    /// the EHR feature count.
    pub fn new(config: TrainConfig, input_dims: [usize; 2]) -> Result<Self> {
        config.validate()?;
        let init = RngState::new(config.seed).split("init");
        let pfn_for = |m: ModalityId| {
            let arch = config.model.arch(m);
            build_pfn(m, arch.backbone, input_dims[m.index()], &arch.dims, &init)
        };
        let heads_for = |m: ModalityId| LevelHeadParams::new(m, config.model.arch(m).dims, &init);
        Ok(PipelineModel {
            stage: Stage::Initialized,
            input_dims,
            pfn: [pfn_for(ModalityId::M1Ecg)?, pfn_for(ModalityId::M2Ehr)?],
            heads: [heads_for(ModalityId::M1Ecg)?, heads_for(ModalityId::M2Ehr)?],
            meta: ModalityId::ALL.map(|m| LogisticParams::zeros(LogisticRole::meta_for(m), LEVELS)),
            reports: [None, None],
            attention: None,
            omega1: LogisticParams::zeros(LogisticRole::Omega1, 4),
            omega2: LogisticParams::zeros(LogisticRole::Omega2, 2 * config.model.attention_dim),
            final_head: LogisticParams::zeros(LogisticRole::Final, 2),
            manifest: TrainingManifest {
                seed: config.seed,
                stage_order: Stage::TRAINING.to_vec(),
                head_schedule: "sequential".into(),
                records: Vec::new(),
            },
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn input_dims(&self) -> [usize; 2] {
        self.input_dims
    }

    pub fn pfn(&self, m: ModalityId) -> &PfnParams {
        &self.pfn[m.index()]
    }

    pub fn heads(&self, m: ModalityId) -> &LevelHeadParams {
        &self.heads[m.index()]
    }

    pub fn meta(&self, m: ModalityId) -> &LogisticParams {
        &self.meta[m.index()]
    }

    pub fn report(&self, m: ModalityId) -> Option<&ShapleyReport> {
        self.reports[m.index()].as_ref()
    }

    pub fn attention(&self) -> Option<&AttentionParams> {
        self.attention.as_ref()
    }

    pub fn omega1(&self) -> &LogisticParams {
        &self.omega1
    }

    pub fn omega2(&self) -> &LogisticParams {
        &self.omega2
    }

    pub fn final_head(&self) -> &LogisticParams {
        &self.final_head
    }

    pub fn manifest(&self) -> &TrainingManifest {
        &self.manifest
    }

    /// Lifecycle error unless the model has completed `stage`.
    pub fn require(&self, stage: Stage, task: &str) -> Result<()> {
        if self.stage < stage {
            return Err(LemofError::Lifecycle(format!(
                "{task} needs a model trained through {stage}, but this one stops at {}",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn best_level(&self, m: ModalityId) -> Result<usize> {
        self.report(m)
            .map(|r| r.best_level)
            .ok_or_else(|| LemofError::Lifecycle(format!("{m} has no importance report yet")))
    }

    pub fn encode(&self, sample: &Sample, m: ModalityId) -> Result<LevelStack> {
        pfn_forward(modality_input(sample, m), &self.pfn[m.index()])
    }

    /// Level predictions, with the meta prediction once stage 2 is done.
    pub fn predict_levels(&self, stack: &LevelStack) -> Result<PredictionVector> {
        let m = stack.modality;
        let pv = level_predict(stack, &self.heads[m.index()])?;
        if self.stage >= Stage::S2Meta {
            meta_predict(&pv, &self.meta[m.index()])
        } else {
            Ok(pv)
        }
    }

    pub(crate) fn restore(
        config: TrainConfig,
        stage: Stage,
        input_dims: [usize; 2],
        reports: [Option<ShapleyReport>; 2],
        manifest: TrainingManifest,
        params: &ParamTape,
    ) -> Result<Self> {
        let mut model = PipelineModel::new(config, input_dims)?;
        model.stage = stage;
        model.reports = reports;
        model.manifest = manifest;
        if stage >= Stage::S3Shapley && model.reports.iter().any(Option::is_none) {
            return Err(LemofError::Format(format!(
                "{stage} model is missing an importance report"
            )));
        }
        if stage >= Stage::S4Fusion {
            model.attention = Some(model.fresh_attention()?);
        }
        let expected = model.parameter_tape();
        let names = |t: &ParamTape| t.slots().iter().map(|s| s.name.clone()).collect::<Vec<_>>();
        if names(&expected) != names(params) {
            return Err(LemofError::Format(format!(
                "parameter blocks do not match a {stage} model: expected {} blocks, found {}",
                expected.len(),
                params.len()
            )));
        }
        model.load_parameter_tape(params)?;
        Ok(model)
    }

    fn fresh_attention(&self) -> Result<AttentionParams> {
        let dims = ModalityId::ALL.map(|m| {
            let best = self.reports[m.index()].as_ref().map_or(1, |r| r.best_level);
            self.config.model.arch(m).dims[best - 1]
        });
        AttentionParams::new(
            dims,
            self.config.model.attention_dim,
            &RngState::new(self.config.seed).split("init"),
        )
    }

    /// Every parameter under a component prefix, in a fixed order.
    pub fn parameter_tape(&self) -> ParamTape {
        let mut tape = ParamTape::new();
        let mut add = |prefix: &str, t: &ParamTape| {
            tape.extend_prefixed(prefix, t)
                .expect("prefixes are distinct")
        };
        for m in ModalityId::ALL {
            add(&pfn_prefix(m), self.pfn[m.index()].tape());
            add(&heads_prefix(m), self.heads[m.index()].tape());
            add(&meta_prefix(m), &self.meta[m.index()].to_tape());
        }
        if let Some(att) = &self.attention {
            add(ATTENTION_PREFIX, att.tape());
        }
        add(OMEGA1_PREFIX, &self.omega1.to_tape());
        add(OMEGA2_PREFIX, &self.omega2.to_tape());
        add(FINAL_PREFIX, &self.final_head.to_tape());
        tape
    }

    /// Inverse of [`Self::parameter_tape`].
    pub fn load_parameter_tape(&mut self, tape: &ParamTape) -> Result<()> {
        fn load_logistic(p: &mut LogisticParams, prefix: &str, src: &ParamTape) -> Result<()> {
            let mut t = p.to_tape();
            t.load_prefixed(prefix, src)?;
            p.load_tape(&t)
        }
        for m in ModalityId::ALL {
            let i = m.index();
            self.pfn[i].tape_mut().load_prefixed(&pfn_prefix(m), tape)?;
            self.heads[i]
                .tape_mut()
                .load_prefixed(&heads_prefix(m), tape)?;
            load_logistic(&mut self.meta[i], &meta_prefix(m), tape)?;
        }
        if let Some(att) = &mut self.attention {
            att.tape_mut().load_prefixed(ATTENTION_PREFIX, tape)?;
        }
        load_logistic(&mut self.omega1, OMEGA1_PREFIX, tape)?;
        load_logistic(&mut self.omega2, OMEGA2_PREFIX, tape)?;
        load_logistic(&mut self.final_head, FINAL_PREFIX, tape)
    }

    /// Joint objective over a batch: the mean over samples of every level,
    /// meta, stacked, fused and final cross-entropy. Gradients with respect
    /// to `tape` (laid out as [`Self::parameter_tape`]) are added into it.
    ///
    /// Training optimizes these terms stage by stage; the joint form exists so
    /// the whole differentiable path can be checked at once.
    pub fn full_loss(&self, batch: &[Sample], tape: &mut ParamTape) -> Result<f64> {
        self.joint_loss(batch, tape, true).map(|(loss, grads)| {
            *tape = grads.expect("requested");
            loss
        })
    }

    /// [`Self::full_loss`] without the gradient pass.
    pub fn full_loss_value(&self, batch: &[Sample], tape: &ParamTape) -> Result<f64> {
        Ok(self.joint_loss(batch, tape, false)?.0)
    }

    fn joint_loss(
        &self,
        batch: &[Sample],
        tape: &ParamTape,
        with_grads: bool,
    ) -> Result<(f64, Option<ParamTape>)> {
        self.require(Stage::S4Fusion, "full_loss")?;
        if batch.is_empty() {
            return Err(LemofError::Data(
                "full_loss needs at least one sample".into(),
            ));
        }
        let mut model = self.clone();
        model.load_parameter_tape(tape)?;
        let att = model
            .attention
            .as_ref()
            .expect("attention exists after stage 4");
        let best = ModalityId::ALL.map(|m| {
            model.reports[m.index()]
                .as_ref()
                .map(|r| r.best_level)
                .unwrap_or(1)
        });

        let meta_tapes = model.meta.clone().map(|p| p.to_tape());
        let (o1_tape, o2_tape, fin_tape) = (
            model.omega1.to_tape(),
            model.omega2.to_tape(),
            model.final_head.to_tape(),
        );

        let mut g = Graph::new();
        let pfn_b = model.pfn.clone().map(|p| p.tape().bind(&mut g));
        let heads_b = model.heads.clone().map(|h| h.tape().bind(&mut g));
        let meta_b = meta_tapes.clone().map(|t| t.bind(&mut g));
        let att_b = att.tape().bind(&mut g);
        let o1_b = o1_tape.bind(&mut g);
        let o2_b = o2_tape.bind(&mut g);
        let fin_b = fin_tape.bind(&mut g);

        let mut per_sample = Vec::with_capacity(batch.len());
        for sample in batch {
            let y = sample.label as f64;
            let mut terms = Vec::new();
            let mut stacked = Vec::with_capacity(4);
            let mut raw = Vec::with_capacity(2);
            for m in ModalityId::ALL {
                let i = m.index();
                let x = g.leaf(modality_input(sample, m).clone());
                let levels = model.pfn[i].forward_graph(&mut g, &pfn_b[i], x)?;
                let logits = model.heads[i].logits_graph(&mut g, &heads_b[i], &levels)?;
                let mut probs = Vec::with_capacity(LEVELS);
                for &z in &logits {
                    terms.push(g.bce_with_logits(z, y)?);
                    probs.push(g.sigmoid(z));
                }
                let pv = g.concat_cols(&probs)?;
                let meta_z = LogisticParams::logit_graph(&mut g, &meta_b[i], &meta_tapes[i], pv)?;
                terms.push(g.bce_with_logits(meta_z, y)?);
                stacked.push(g.sigmoid(meta_z));
                stacked.push(probs[best[i] - 1]);
                raw.push(levels[best[i] - 1]);
            }
            let z = g.concat_cols(&stacked)?;
            let o1_z = LogisticParams::logit_graph(&mut g, &o1_b, &o1_tape, z)?;
            terms.push(g.bce_with_logits(o1_z, y)?);

            let h1 = att.adapt_graph(&mut g, &att_b, ModalityId::M1Ecg, raw[0])?;
            let h2 = att.adapt_graph(&mut g, &att_b, ModalityId::M2Ehr, raw[1])?;
            let c = att.fuse_graph(&mut g, &att_b, h1, h2)?;
            let o2_z = LogisticParams::logit_graph(&mut g, &o2_b, &o2_tape, c)?;
            terms.push(g.bce_with_logits(o2_z, y)?);

            let o1_p = g.sigmoid(o1_z);
            let o2_p = g.sigmoid(o2_z);
            let u = g.concat_cols(&[o1_p, o2_p])?;
            let f_z = LogisticParams::logit_graph(&mut g, &fin_b, &fin_tape, u)?;
            terms.push(g.bce_with_logits(f_z, y)?);
            per_sample.push(g.sum(&terms)?);
        }
        let total = g.sum(&per_sample)?;
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        let value = g.value(loss).item();
        if !with_grads {
            return Ok((value, None));
        }
        let grads = g.backward(loss);
        let mut tape = tape.clone();

        let mut collect = |prefix: &str, mut t: ParamTape, bound: &BoundParams| -> Result<()> {
            t.zero_grads();
            t.accumulate(bound, &grads);
            tape.accumulate_prefixed(prefix, &t)
        };
        for m in ModalityId::ALL {
            let i = m.index();
            collect(&pfn_prefix(m), model.pfn[i].tape().clone(), &pfn_b[i])?;
            collect(&heads_prefix(m), model.heads[i].tape().clone(), &heads_b[i])?;
            collect(&meta_prefix(m), meta_tapes[i].clone(), &meta_b[i])?;
        }
        collect(ATTENTION_PREFIX, att.tape().clone(), &att_b)?;
        collect(OMEGA1_PREFIX, o1_tape, &o1_b)?;
        collect(OMEGA2_PREFIX, o2_tape, &o2_b)?;
        collect(FINAL_PREFIX, fin_tape, &fin_b)?;
        Ok((value, Some(tape)))
    }
}

/// Predictions of one modality inside a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityOutput {
    pub level_preds: [f64; LEVELS],
    pub meta_pred: f64,
    pub best_level: usize,
    pub best_pred: f64,
}

/// Every probability produced by one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub m1_ecg: ModalityOutput,
    pub m2_ehr: ModalityOutput,
    pub omega1: f64,
    pub omega2: f64,
    #[serde(rename = "final")]
    pub final_pred: f64,
}

impl PipelineOutput {
    pub fn modality(&self, m: ModalityId) -> &ModalityOutput {
        match m {
            ModalityId::M1Ecg => &self.m1_ecg,
            ModalityId::M2Ehr => &self.m2_ehr,
        }
    }

    /// The score an ablation variant reports.
    pub fn score(&self, variant: Variant) -> f64 {
        match variant {
            Variant::SingleEcg => self.m1_ecg.meta_pred,
            Variant::SingleEhr => self.m2_ehr.meta_pred,
            Variant::OnlyM1 => self.omega1,
            Variant::OnlyM2 => self.omega2,
            Variant::Full => self.final_pred,
        }
    }
}

/// `σ` of the stacked head over `(m1 meta, m1 best, m2 meta, m2 best)`.
pub fn omega1_predict(
    pv1: &PredictionVector,
    best1: f64,
    pv2: &PredictionVector,
    best2: f64,
    head: &LogisticParams,
) -> Result<f64> {
    if pv1.modality != ModalityId::M1Ecg || pv2.modality != ModalityId::M2Ehr {
        return Err(LemofError::Config(format!(
            "stacked head expects (m1_ecg, m2_ehr), got ({}, {})",
            pv1.modality, pv2.modality
        )));
    }
    if head.role != LogisticRole::Omega1 {
        return Err(LemofError::Config(format!(
            "stacked head has role {}",
            head.role.as_str()
        )));
    }
    let meta = |pv: &PredictionVector| {
        pv.meta_pred
            .ok_or_else(|| LemofError::Lifecycle(format!("{} has no meta prediction", pv.modality)))
    };
    logistic_forward(&[meta(pv1)?, best1, meta(pv2)?, best2], head)
}

/// `σ` of the final head over `(ŷ_Ω1, ŷ_Ω2)`.
pub fn final_predict(y1: f64, y2: f64, head: &LogisticParams) -> Result<f64> {
    if head.role != LogisticRole::Final {
        return Err(LemofError::Config(format!(
            "final head has role {}",
            head.role.as_str()
        )));
    }
    logistic_forward(&[y1, y2], head)
}

fn modality_output(pv: &PredictionVector, best_level: usize) -> ModalityOutput {
    ModalityOutput {
        level_preds: pv.level_preds,
        meta_pred: pv.meta_pred.expect("meta prediction after stage 2"),
        best_level,
        best_pred: pv.level_preds[best_level - 1],
    }
}

/// Full forward pass of one sample through a completely trained model.
pub fn run_pipeline(sample: &Sample, model: &PipelineModel) -> Result<PipelineOutput> {
    model.require(Stage::S6Final, "run_pipeline")?;
    let stacks = [
        model.encode(sample, ModalityId::M1Ecg)?,
        model.encode(sample, ModalityId::M2Ehr)?,
    ];
    let pv1 = model.predict_levels(&stacks[0])?;
    let pv2 = model.predict_levels(&stacks[1])?;
    let reports = [
        model
            .report(ModalityId::M1Ecg)
            .expect("report after stage 3"),
        model
            .report(ModalityId::M2Ehr)
            .expect("report after stage 3"),
    ];
    let out1 = modality_output(&pv1, reports[0].best_level);
    let out2 = modality_output(&pv2, reports[1].best_level);
    let omega1 = omega1_predict(&pv1, out1.best_pred, &pv2, out2.best_pred, &model.omega1)?;

    let att = model.attention.as_ref().expect("attention after stage 4");
    let (h1, h2) = select_best_reps([&stacks[0], &stacks[1]], reports, att)?;
    let (_, omega2) = fuse_and_predict(&h1, &h2, att, &model.omega2)?;
    let final_pred = final_predict(omega1, omega2, &model.final_head)?;
    Ok(PipelineOutput {
        m1_ecg: out1,
        m2_ehr: out2,
        omega1,
        omega2,
        final_pred,
    })
}

pub fn predict_dataset(model: &PipelineModel, data: &Dataset) -> Result<Vec<PipelineOutput>> {
    data.samples
        .iter()
        .map(|s| run_pipeline(s, model))
        .collect()
}

/// Metrics of every ablation variant on `data`, from one set of forward passes.
pub fn evaluate_variants(
    model: &PipelineModel,
    data: &Dataset,
    threshold: f64,
) -> Result<Vec<MetricsRecord>> {
    let outputs = predict_dataset(model, data)?;
    let labels = data.labels();
    Variant::ALL
        .into_iter()
        .map(|v| {
            let scores: Vec<f64> = outputs.iter().map(|o| o.score(v)).collect();
            evaluate(v, &scores, &labels, threshold, model.config.seed)
        })
        .collect()
}

fn check_split(data: &Dataset, name: &str) -> Result<()> {
    let labels = data.labels();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(LemofError::Data(format!(
            "{name} split needs both classes, has {pos} positive of {}",
            labels.len()
        )));
    }
    data.validate()
}

/// Mini-batch gradient descent over `n` samples. `sample_loss` records one
/// sample's loss on the graph using the bound parameters of `tapes`, in order.
fn minibatch_descent(
    tapes: &mut [&mut ParamTape],
    n: usize,
    hyper: &StageHyper,
    rng: &RngState,
    what: &str,
    mut sample_loss: impl FnMut(&mut Graph, &[BoundParams], usize) -> Result<NodeId>,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..hyper.epochs {
        order.sort_unstable();
        rng.split_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let mut g = Graph::new();
            let bound: Vec<BoundParams> = tapes.iter().map(|t| t.bind(&mut g)).collect();
            let losses = chunk
                .iter()
                .map(|&i| sample_loss(&mut g, &bound, i))
                .collect::<Result<Vec<_>>>()?;
            let total = g.sum(&losses)?;
            let loss = g.scale(total, 1.0 / chunk.len() as f64);
            let grads = g.backward(loss);
            for (t, b) in tapes.iter_mut().zip(&bound) {
                t.zero_grads();
                t.accumulate(b, &grads);
                t.add_weight_decay(hyper.l2);
                t.sgd_step(hyper.lr);
            }
            epoch_loss += g.value(loss).item() * chunk.len() as f64;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || !tapes.iter().all(|t| t.all_finite()) {
            return Err(LemofError::Numerical(format!(
                "stage {what} diverged at epoch {}",
                epoch + 1
            )));
        }
        log::debug!("{what} epoch {} loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    for t in tapes.iter_mut() {
        t.zero_grads();
    }
    Ok(history)
}

/// Validation-split quantities reused across stages once the encoders are frozen.
#[derive(Default)]
struct ValCache {
    stacks: Option<[Vec<LevelStack>; 2]>,
    preds: Option<[Vec<PredictionVector>; 2]>,
}

struct Trainer<'a> {
    model: PipelineModel,
    data: &'a SplitDataset,
    rng: RngState,
    val: ValCache,
}

impl Trainer<'_> {
    fn record(
        &mut self,
        stage: Stage,
        modality: Option<ModalityId>,
        split: SplitName,
        samples: usize,
        losses: Vec<f64>,
    ) {
        self.model.manifest.records.push(StageRecord {
            stage,
            modality,
            split,
            samples,
            losses,
        });
    }

    fn encoders(&mut self) -> Result<()> {
        let train = &self.data.train;
        let labels = train.labels();
        for m in ModalityId::ALL {
            let hyper = self.model.config.stages.s1_encoders.get(m);
            let i = m.index();
            let pfn_shape = self.model.pfn[i].clone();
            let heads_shape = self.model.heads[i].clone();
            let inputs: Vec<&TokenSeq> =
                train.samples.iter().map(|s| modality_input(s, m)).collect();
            let rng = self.rng.split(&format!("{m}.s1"));
            let (pfn, heads) = (&mut self.model.pfn[i], &mut self.model.heads[i]);
            let losses = minibatch_descent(
                &mut [pfn.tape_mut(), heads.tape_mut()],
                inputs.len(),
                &hyper,
                &rng,
                &format!("{} ({m})", Stage::S1Encoders),
                |g, b, k| {
                    let x = g.leaf(inputs[k].clone());
                    let levels = pfn_shape.forward_graph(g, &b[0], x)?;
                    let logits = heads_shape.logits_graph(g, &b[1], &levels)?;
                    let y = labels[k] as f64;
                    let terms = logits
                        .iter()
                        .map(|&z| g.bce_with_logits(z, y))
                        .collect::<Result<Vec<_>>>()?;
                    g.sum(&terms)
                },
            )?;
            self.record(
                Stage::S1Encoders,
                Some(m),
                SplitName::Train,
                inputs.len(),
                losses,
            );
        }
        Ok(())
    }

    fn val_stacks(&mut self) -> Result<&[Vec<LevelStack>; 2]> {
        if self.val.stacks.is_none() {
            let encode = |m| {
                self.data
                    .val
                    .samples
                    .iter()
                    .map(|s| self.model.encode(s, m))
                    .collect::<Result<Vec<_>>>()
            };
            self.val.stacks = Some([encode(ModalityId::M1Ecg)?, encode(ModalityId::M2Ehr)?]);
        }
        Ok(self.val.stacks.as_ref().expect("just filled"))
    }

    fn meta(&mut self) -> Result<()> {
        let labels = self.data.val.labels();
        let hyper = self.model.config.stages.s2_meta.logistic();
        let stacks = self.val_stacks()?.clone();
        let mut preds: [Vec<PredictionVector>; 2] = [Vec::new(), Vec::new()];
        for m in ModalityId::ALL {
            let i = m.index();
            let pvs = stacks[i]
                .iter()
                .map(|s| level_predict(s, &self.model.heads[i]))
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<Vec<f64>> = pvs.iter().map(|p| p.level_preds.to_vec()).collect();
            let fit = fit_logistic(LogisticRole::meta_for(m), &inputs, &labels, &hyper)
                .map_err(|e| stage_error(Stage::S2Meta, e))?;
            self.model.meta[i] = fit.params;
            preds[i] = pvs
                .iter()
                .map(|p| meta_predict(p, &self.model.meta[i]))
                .collect::<Result<Vec<_>>>()?;
            self.record(
                Stage::S2Meta,
                Some(m),
                SplitName::Val,
                labels.len(),
                fit.loss_history,
            );
        }
        self.val.preds = Some(preds);
        Ok(())
    }

    fn shapley(&mut self) -> Result<()> {
        let preds = self.val.preds.as_ref().expect("stage 2 ran");
        for m in ModalityId::ALL {
            let i = m.index();
            let report = importance_report(
                &preds[i],
                &self.model.meta[i],
                self.model.config.shapley_scale,
            )?;
            log::info!(
                "{m}: aggregate |phi| {:?}, best level {}",
                report.aggregate_phi,
                report.best_level
            );
            self.model.reports[i] = Some(report);
        }
        let n = preds[0].len();
        self.record(Stage::S3Shapley, None, SplitName::Val, n, Vec::new());
        Ok(())
    }

    fn fusion(&mut self) -> Result<()> {
        let mut att = self.model.fresh_attention()?;
        let train = &self.data.train;
        let labels = train.labels();
        let best = [
            self.model.best_level(ModalityId::M1Ecg)?,
            self.model.best_level(ModalityId::M2Ehr)?,
        ];
        let raw: Vec<[TokenSeq; 2]> = train
            .samples
            .iter()
            .map(|s| {
                let a = self
                    .model
                    .encode(s, ModalityId::M1Ecg)?
                    .levels
                    .swap_remove(best[0] - 1);
                let b = self
                    .model
                    .encode(s, ModalityId::M2Ehr)?
                    .levels
                    .swap_remove(best[1] - 1);
                Ok([a, b])
            })
            .collect::<Result<_>>()?;
        let att_shape = att.clone();
        let mut head_tape = self.model.omega2.to_tape();
        let head_shape = head_tape.clone();
        let hyper = self.model.config.stages.s4_fusion;
        let losses = minibatch_descent(
            &mut [att.tape_mut(), &mut head_tape],
            raw.len(),
            &hyper,
            &self.rng.split("s4"),
            Stage::S4Fusion.as_str(),
            |g, b, k| {
                let x1 = g.leaf(raw[k][0].clone());
                let x2 = g.leaf(raw[k][1].clone());
                let h1 = att_shape.adapt_graph(g, &b[0], ModalityId::M1Ecg, x1)?;
                let h2 = att_shape.adapt_graph(g, &b[0], ModalityId::M2Ehr, x2)?;
                let c = att_shape.fuse_graph(g, &b[0], h1, h2)?;
                let z = LogisticParams::logit_graph(g, &b[1], &head_shape, c)?;
                g.bce_with_logits(z, labels[k] as f64)
            },
        )?;
        self.model.omega2.load_tape(&head_tape)?;
        self.model.attention = Some(att);
        self.record(Stage::S4Fusion, None, SplitName::Train, raw.len(), losses);
        Ok(())
    }

    fn stacked_inputs(&self) -> Vec<Vec<f64>> {
        let preds = self.val.preds.as_ref().expect("stage 2 ran");
        let best = ModalityId::ALL.map(|m| {
            self.model.reports[m.index()]
                .as_ref()
                .expect("stage 3 ran")
                .best_level
        });
        preds[0]
            .iter()
            .zip(&preds[1])
            .map(|(p1, p2)| {
                vec![
                    p1.meta_pred.expect("meta"),
                    p1.level_preds[best[0] - 1],
                    p2.meta_pred.expect("meta"),
                    p2.level_preds[best[1] - 1],
                ]
            })
            .collect()
    }

    fn omega1(&mut self) -> Result<()> {
        let labels = self.data.val.labels();
        let inputs = self.stacked_inputs();
        let fit = fit_logistic(
            LogisticRole::Omega1,
            &inputs,
            &labels,
            &self.model.config.stages.s5_omega1.logistic(),
        )
        .map_err(|e| stage_error(Stage::S5Omega1, e))?;
        self.model.omega1 = fit.params;
        self.record(
            Stage::S5Omega1,
            None,
            SplitName::Val,
            labels.len(),
            fit.loss_history,
        );
        Ok(())
    }

    fn final_head(&mut self) -> Result<()> {
        let labels = self.data.val.labels();
        let stacked = self.stacked_inputs();
        let stacks = self.val_stacks()?.clone();
        let model = &self.model;
        let att = model.attention.as_ref().expect("stage 4 ran");
        let reports = [
            model.reports[0].as_ref().expect("stage 3 ran"),
            model.reports[1].as_ref().expect("stage 3 ran"),
        ];
        let inputs = stacked
            .iter()
            .zip(stacks[0].iter().zip(&stacks[1]))
            .map(|(z, (s1, s2))| {
                let o1 = logistic_forward(z, &model.omega1)?;
                let (h1, h2) = select_best_reps([s1, s2], reports, att)?;
                let (_, o2) = fuse_and_predict(&h1, &h2, att, &model.omega2)?;
                Ok(vec![o1, o2])
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_logistic(
            LogisticRole::Final,
            &inputs,
            &labels,
            &self.model.config.stages.s6_final.logistic(),
        )
        .map_err(|e| stage_error(Stage::S6Final, e))?;
        self.model.final_head = fit.params;
        self.record(
            Stage::S6Final,
            None,
            SplitName::Val,
            labels.len(),
            fit.loss_history,
        );
        Ok(())
    }
}

fn stage_error(stage: Stage, e: LemofError) -> LemofError {
    match e {
        LemofError::Numerical(msg) => LemofError::Numerical(format!("stage {stage}: {msg}")),
        other => other,
    }
}

/// Runs every stage.
pub fn train_pipeline(config: &TrainConfig, data: &SplitDataset) -> Result<PipelineModel> {
    Ok(train_pipeline_until(config, data, Stage::S6Final)?.0)
}

/// Runs stages up to and including `stop`, returning wall-clock time per stage.
pub fn train_pipeline_until(
    config: &TrainConfig,
    data: &SplitDataset,
    stop: Stage,
) -> Result<(PipelineModel, Vec<StageTiming>)> {
    config.validate()?;
    check_split(&data.train, "train")?;
    check_split(&data.val, "val")?;
    let first = &data.train.samples[0];
    let model = PipelineModel::new(*config, [first.ecg.cols(), first.ehr.cols()])?;
    let mut trainer = Trainer {
        model,
        data,
        rng: RngState::new(config.seed).split("train"),
        val: ValCache::default(),
    };
    let mut timings = Vec::new();
    for stage in Stage::TRAINING {
        if stage > stop {
            break;
        }
        let start = Instant::now();
        match stage {
            Stage::S1Encoders => trainer.encoders(),
            Stage::S2Meta => trainer.meta(),
            Stage::S3Shapley => trainer.shapley(),
            Stage::S4Fusion => trainer.fusion(),
            Stage::S5Omega1 => trainer.omega1(),
            Stage::S6Final => trainer.final_head(),
            Stage::Initialized => unreachable!("not a training stage"),
        }?;
        trainer.model.stage = stage;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{stage} done in {seconds:.2}s");
        timings.push(StageTiming { stage, seconds });
    }
    Ok((trainer.model, timings))
}
