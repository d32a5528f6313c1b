//! Planted-signal generator.
//!
//! Every sample carries a binary label `y` and a shared nuisance `s ~ N(0,1)`.
//! Each modality sees the label through an evidence score
//! `u = ±1 + κ·s` (plus sign for ECG, minus for EHR, `κ = 2·cross_coupling`),
//! so either modality alone is confounded by `s` while their combination
//! cancels it. The evidence is then planted at the temporal scale (ECG) or
//! feature-interaction depth (EHR) of the configured level.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{LemofError, Result};
use crate::modality::ModalityId;
use crate::numeric::{sigmoid_scalar, Matrix2D, RngState};
use crate::pfn::LEVELS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub planted_level: usize,
    pub signal_strength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlans {
    pub m1_ecg: SignalPlan,
    pub m2_ehr: SignalPlan,
}

impl SignalPlans {
    pub fn get(&self, m: ModalityId) -> SignalPlan {
        match m {
            ModalityId::M1Ecg => self.m1_ecg,
            ModalityId::M2Ehr => self.m2_ehr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub ecg_length: usize,
    pub ecg_channels: usize,
    pub ehr_dim: usize,
    pub signal_plan: SignalPlans,
    pub cross_coupling: f64,
    pub label_balance: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            ecg_length: 64,
            ecg_channels: 2,
            ehr_dim: 12,
            signal_plan: SignalPlans {
                m1_ecg: SignalPlan {
                    planted_level: 2,
                    signal_strength: 2.0,
                },
                m2_ehr: SignalPlan {
                    planted_level: 3,
                    signal_strength: 2.0,
                },
            },
            cross_coupling: 0.0,
            label_balance: 0.5,
            noise_sd: 1.0,
            seed: 7,
        }
    }
}

/// Smallest EHR width that fits every planted route.
pub const MIN_EHR_DIM: usize = 6;
/// Smallest ECG window that fits the slowest motif.
pub const MIN_ECG_LENGTH: usize = 16;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LemofError::Config(msg));
        if self.n_samples < 8 {
            return bad(format!(
                "n_samples must be at least 8, got {}",
                self.n_samples
            ));
        }
        if self.ecg_length < MIN_ECG_LENGTH {
            return bad(format!(
                "ecg_length must be at least {MIN_ECG_LENGTH}, got {}",
                self.ecg_length
            ));
        }
        if self.ecg_channels == 0 {
            return bad("ecg_channels must be positive".into());
        }
        if self.ehr_dim < MIN_EHR_DIM {
            return bad(format!(
                "ehr_dim must be at least {MIN_EHR_DIM}, got {}",
                self.ehr_dim
            ));
        }
        for m in ModalityId::ALL {
            let plan = self.signal_plan.get(m);
            if !(1..=LEVELS).contains(&plan.planted_level) {
                return bad(format!(
                    "{m}: planted_level must be 1, 2 or 3, got {}",
                    plan.planted_level
                ));
            }
            if !(plan.signal_strength >= 0.0 && plan.signal_strength.is_finite()) {
                return bad(format!("{m}: signal_strength must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.cross_coupling) {
            return bad(format!(
                "cross_coupling must lie in [0, 1], got {}",
                self.cross_coupling
            ));
        }
        if !(self.label_balance > 0.0 && self.label_balance < 1.0) {
            return bad(format!(
                "label_balance must lie in (0, 1), got {}",
                self.label_balance
            ));
        }
        let positives = self.positives();
        if positives == 0 || positives == self.n_samples {
            return bad(format!(
                "label_balance {} gives a single class at n = {}",
                self.label_balance, self.n_samples
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!(
                "noise_sd must be finite and >= 0, got {}",
                self.noise_sd
            ));
        }
        Ok(())
    }

    fn positives(&self) -> usize {
        (self.n_samples as f64 * self.label_balance).round() as usize
    }
}

/// Label-dependent amplitude of a planted oscillation. It stays positive,
/// since a sign flip under a random phase would carry no information.
fn amplitude(strength: f64, u: f64) -> f64 {
    ECG_GAIN * strength * (1.0 + 0.5 * u.tanh())
}

/// Scale of the planted ECG component per unit of signal strength.
const ECG_GAIN: f64 = 0.25;
/// Amplitude range of the label-free components at the other two scales.
const ECG_NUISANCE: (f64, f64) = (0.2, 0.6);
/// Frames per beat slot of the mid-scale train.
const BEAT_SLOT: usize = 16;
/// Gaussian width of one lobe, in frames.
const LOBE_WIDTH: f64 = 1.5;
/// Distance between the two lobes of a beat, in frames.
const LOBE_GAP: f64 = 8.0;
/// Peak height of a planted beat per unit of signal strength.
const BEAT_GAIN: f64 = 1.0;
/// Beat offsets from the slot centre are multiples of this, in frames.
const JITTER_STEP: f64 = 4.0;
/// Logit slope of lobe concordance in the evidence.
const BEAT_CONCORDANCE_SLOPE: f64 = 1.0;

/// Gaussian lobe height profile.
fn lobe(d: f64, width: f64) -> f64 {
    (-0.5 * (d / width).powi(2)).exp()
}

/// Beat train: each slot holds a beat of two lobes `LOBE_GAP` frames apart.
/// The first lobe's sign is a coin flip; the second repeats it with
/// probability `concordance`. A window narrower than the gap sees one lobe
/// with a symmetric sign whatever the label.
fn beat_train(len: usize, height: f64, concordance: f64, rng: &mut RngState) -> Vec<f64> {
    let mut x = vec![0.0; len];
    for slot in 0..len / BEAT_SLOT {
        let s0 = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let s1 = if rng.bernoulli(concordance) { s0 } else { -s0 };
        // Jitter moves a beat by whole mid-scale strides, so every beat sits
        // at the same offset to that token grid.
        let jitter = JITTER_STEP * (rng.uniform(0.0, 3.0).floor() - 1.0);
        let center = (slot * BEAT_SLOT) as f64 + BEAT_SLOT as f64 / 2.0 + jitter;
        for (t, v) in x.iter_mut().enumerate() {
            let t = t as f64;
            *v += height
                * (s0 * lobe(t - center + LOBE_GAP / 2.0, LOBE_WIDTH)
                    + s1 * lobe(t - center - LOBE_GAP / 2.0, LOBE_WIDTH));
        }
    }
    x
}

/// One scale's component over the window: a fast oscillation (level 1), a
/// beat train (level 2) or a slow drift (level 3). The planted scale depends
/// on the evidence `u` through amplitude, or for beats through how often
/// the two lobes agree in sign.
fn ecg_component(
    cfg: &SynthConfig,
    level: usize,
    planted: Option<f64>,
    rng: &mut RngState,
) -> Vec<f64> {
    let len = cfg.ecg_length;
    let phase = rng.uniform(0.0, 2.0 * PI);
    let nuisance = rng.uniform(ECG_NUISANCE.0, ECG_NUISANCE.1);
    let strength = cfg.signal_plan.m1_ecg.signal_strength;
    let a = planted.map_or(nuisance, |u| amplitude(strength, u));
    match level {
        1 => (0..len)
            .map(|t| a * (2.0 * PI * t as f64 / 4.0 + phase).sin())
            .collect(),
        2 => match planted {
            Some(u) => {
                let q = sigmoid_scalar(BEAT_CONCORDANCE_SLOPE * u);
                beat_train(len, BEAT_GAIN * strength, q, rng)
            }
            None => beat_train(len, 2.0 * nuisance, 0.5, rng),
        },
        _ => (0..len)
            .map(|t| a * (2.0 * PI * t as f64 / len as f64 + phase).sin())
            .collect(),
    }
}

fn ecg_sample(cfg: &SynthConfig, u: f64, rng: &mut RngState) -> Matrix2D {
    let planted = cfg.signal_plan.m1_ecg.planted_level;
    let mut clean = vec![0.0; cfg.ecg_length];
    for level in 1..=LEVELS {
        let part = ecg_component(cfg, level, (level == planted).then_some(u), rng);
        for (c, p) in clean.iter_mut().zip(part) {
            *c += p;
        }
    }
    let mut x = Matrix2D::zeros(cfg.ecg_length, cfg.ecg_channels);
    for ch in 0..cfg.ecg_channels {
        let gain = 1.0 - 0.5 * ch as f64 / cfg.ecg_channels as f64;
        for (t, &c) in clean.iter().enumerate() {
            let v = gain * c + cfg.noise_sd * rng.normal();
            // Stored as f32 on disk; quantize here so files round-trip exactly.
            x.set(t, ch, v as f32 as f64);
        }
    }
    x
}

/// EHR row: noise everywhere, with the evidence routed into the leading
/// features through an interaction whose order grows with the level.
fn ehr_sample(cfg: &SynthConfig, u: f64, rng: &mut RngState) -> Vec<f64> {
    let plan = cfg.signal_plan.m2_ehr;
    let mut x: Vec<f64> = (0..cfg.ehr_dim)
        .map(|_| cfg.noise_sd * rng.normal())
        .collect();
    let strength = plan.signal_strength;
    match plan.planted_level {
        1 => {
            // Additive shift on a block of features.
            for v in x.iter_mut().take(4) {
                *v += 0.5 * strength * u;
            }
        }
        2 => {
            // The evidence sets the sign agreement of a feature pair.
            let agree = rng.bernoulli(sigmoid_scalar(strength * u));
            let m = rng.uniform(0.5, 1.5) * strength;
            let s0 = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let s1 = if agree { s0 } else { -s0 };
            x[0] += m * s0;
            x[1] += m * s1;
        }
        _ => {
            // Three-way sign parity.
            let even = rng.bernoulli(sigmoid_scalar(strength * u));
            let m = rng.uniform(0.5, 1.5) * strength;
            let s0 = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let s1 = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let s2 = if even { s0 * s1 } else { -s0 * s1 };
            x[0] += m * s0;
            x[1] += m * s1;
            x[2] += m * s2;
        }
    }
    x
}

/// Deterministic planted-signal dataset.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let mut labels: Vec<u8> = (0..cfg.n_samples)
        .map(|i| u8::from(i < cfg.positives()))
        .collect();
    root.split("synth.labels").shuffle(&mut labels);

    let kappa = cfg.cross_coupling;
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = root.split_indexed("synth.sample", i as u64);
            let s = rng.normal();
            let y = if label == 1 { 1.0 } else { -1.0 };
            let ecg = ecg_sample(cfg, y + kappa * s, &mut rng.split("ecg"));
            let ehr = ehr_sample(cfg, y - kappa * s, &mut rng.split("ehr"));
            Sample {
                ecg,
                ehr: Matrix2D::row_vector(&ehr),
                label,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        ehr_features: (0..cfg.ehr_dim).map(|j| format!("feat_{j:02}")).collect(),
    })
}
