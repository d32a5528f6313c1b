//! Exact Shapley attribution of level predictions through a meta-learner,
//! and best-level selection.
//!
//! Players are the level predictions. A coalition `S` is valued by running
//! the meta-learner with coordinates in `S` taken from the sample and the
//! rest imputed from a fixed baseline. With three players all eight
//! coalitions are enumerated.

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};
use crate::heads::{LogisticParams, PredictionVector};
use crate::modality::ModalityId;
use crate::numeric::sigmoid_scalar;
use crate::pfn::LEVELS;

/// Output scale on which coalitions are valued.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyScale {
    #[default]
    Probability,
    Logit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    pub meta: LogisticParams,
    pub baseline: Vec<f64>,
    pub scale: ShapleyScale,
}

impl ValueFunction {
    pub fn new(meta: LogisticParams, baseline: Vec<f64>, scale: ShapleyScale) -> Result<Self> {
        if baseline.len() != meta.arity() {
            return Err(LemofError::dim(
                "value_function",
                (1, meta.arity()),
                (1, baseline.len()),
            ));
        }
        Ok(ValueFunction {
            meta,
            baseline,
            scale,
        })
    }

    pub fn players(&self) -> usize {
        self.baseline.len()
    }

    /// Value of the coalition encoded by the bits of `mask`.
    pub fn value(&self, p: &[f64], mask: u32) -> f64 {
        let z = self.meta.b
            + self
                .meta
                .w
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let x = if mask & (1 << i) != 0 {
                        p[i]
                    } else {
                        self.baseline[i]
                    };
                    w * x
                })
                .sum::<f64>();
        match self.scale {
            ShapleyScale::Logit => z,
            ShapleyScale::Probability => sigmoid_scalar(z),
        }
    }
}

/// Shapley weight `|S|!(n-|S|-1)!/n!` for a coalition of size `s`.
fn coalition_weight(n: usize, s: usize) -> f64 {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    fact(s) * fact(n - s - 1) / fact(n)
}

/// Exact Shapley values of `p` under `vf`, enumerating every coalition.
pub fn shapley_exact(p: &[f64], vf: &ValueFunction) -> Result<Vec<f64>> {
    let n = vf.players();
    if p.len() != n {
        return Err(LemofError::dim("shapley_exact", (1, n), (1, p.len())));
    }
    if n > 20 {
        return Err(LemofError::Config(format!(
            "{n} players is too many to enumerate"
        )));
    }
    let values: Vec<f64> = (0..1u32 << n).map(|mask| vf.value(p, mask)).collect();
    let weights: Vec<f64> = (0..n).map(|s| coalition_weight(n, s)).collect();
    let mut phi = vec![0.0; n];
    for (k, phi_k) in phi.iter_mut().enumerate() {
        let bit = 1u32 << k;
        for mask in 0..1u32 << n {
            if mask & bit != 0 {
                continue;
            }
            let size = mask.count_ones() as usize;
            *phi_k += weights[size] * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }
    Ok(phi)
}

/// Attribution summary for one modality over a validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub modality: ModalityId,
    pub scale: ShapleyScale,
    pub per_sample_phi: Vec<[f64; LEVELS]>,
    /// Mean of `|φ|` per level.
    pub aggregate_phi: [f64; LEVELS],
    /// Selected level in 1..=3.
    pub best_level: usize,
    pub baseline: [f64; LEVELS],
    pub sample_count: usize,
}

/// 1-based index of the largest entry; ties go to the lowest level.
pub fn select_best_level(aggregate: &[f64; LEVELS]) -> usize {
    let mut best = 0;
    for k in 1..LEVELS {
        if aggregate[k] > aggregate[best] {
            best = k;
        }
    }
    best + 1
}

/// Builds the report from level predictions on held-out samples.
///
/// The baseline is the per-level mean prediction over `preds`.
pub fn importance_report(
    preds: &[PredictionVector],
    meta: &LogisticParams,
    scale: ShapleyScale,
) -> Result<ShapleyReport> {
    let first = preds
        .first()
        .ok_or_else(|| LemofError::Data("importance report needs at least one sample".into()))?;
    let modality = first.modality;
    if let Some(pv) = preds.iter().find(|pv| pv.modality != modality) {
        return Err(LemofError::Config(format!(
            "mixed modalities in importance report: {modality} and {}",
            pv.modality
        )));
    }
    let n = preds.len() as f64;
    let mut baseline = [0.0; LEVELS];
    for pv in preds {
        for (b, p) in baseline.iter_mut().zip(&pv.level_preds) {
            *b += p;
        }
    }
    baseline.iter_mut().for_each(|b| *b /= n);

    let vf = ValueFunction::new(meta.clone(), baseline.to_vec(), scale)?;
    let mut per_sample_phi = Vec::with_capacity(preds.len());
    let mut aggregate = [0.0; LEVELS];
    for pv in preds {
        let phi = shapley_exact(&pv.level_preds, &vf)?;
        let phi = [phi[0], phi[1], phi[2]];
        for (a, f) in aggregate.iter_mut().zip(&phi) {
            *a += f.abs();
        }
        per_sample_phi.push(phi);
    }
    aggregate.iter_mut().for_each(|a| *a /= n);

    Ok(ShapleyReport {
        modality,
        scale,
        per_sample_phi,
        aggregate_phi: aggregate,
        best_level: select_best_level(&aggregate),
        baseline,
        sample_count: preds.len(),
    })
}

/// The level prediction the report selected.
pub fn best_prediction(pv: &PredictionVector, report: &ShapleyReport) -> Result<f64> {
    if pv.modality != report.modality {
        return Err(LemofError::Config(format!(
            "prediction vector is {} but report is {}",
            pv.modality, report.modality
        )));
    }
    if !(1..=LEVELS).contains(&report.best_level) {
        return Err(LemofError::Config(format!(
            "invalid best level {}",
            report.best_level
        )));
    }
    Ok(pv.level_preds[report.best_level - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::LogisticRole;
    use crate::numeric::RngState;
    use proptest::prelude::*;

    /// Averages marginal contributions over every player ordering, which is
    /// a different route to the same quantity than coalition weighting.
    fn permutation_oracle(p: &[f64], vf: &ValueFunction) -> Vec<f64> {
        fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut tail in permutations(rest) {
                    tail.insert(0, head);
                    out.push(tail);
                }
            }
            out
        }
        let n = p.len();
        let perms = permutations((0..n).collect());
        let mut phi = vec![0.0; n];
        for order in &perms {
            let mut mask = 0u32;
            for &k in order {
                let before = vf.value(p, mask);
                mask |= 1 << k;
                phi[k] += vf.value(p, mask) - before;
            }
        }
        phi.iter().map(|v| v / perms.len() as f64).collect()
    }

    fn meta(w: [f64; 3], b: f64) -> LogisticParams {
        LogisticParams {
            role: LogisticRole::MetaM1,
            w: w.to_vec(),
            b,
        }
    }

    #[test]
    fn frozen_probability_scale_case() {
        // Values from an independent permutation enumeration.
        let expected = [
            0.12528556033525778,
            0.04709051788938218,
            0.00785385727926946,
        ];
        let vf = ValueFunction::new(
            meta([2.0, -1.0, 0.5], 0.1),
            vec![0.5; 3],
            ShapleyScale::Probability,
        )
        .unwrap();
        let p = [0.9, 0.2, 0.6];
        let phi = shapley_exact(&p, &vf).unwrap();
        let oracle = permutation_oracle(&p, &vf);
        for k in 0..3 {
            assert!((phi[k] - expected[k]).abs() < 1e-12, "{phi:?}");
            assert!((phi[k] - oracle[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_scale_closed_form_and_dummy() {
        let vf = ValueFunction::new(
            meta([1.5, 0.0, -0.7], 2.0),
            vec![0.4, 0.5, 0.6],
            ShapleyScale::Logit,
        )
        .unwrap();
        let p = [0.9, 0.1, 0.3];
        let phi = shapley_exact(&p, &vf).unwrap();
        assert!((phi[0] - 1.5 * 0.5).abs() < 1e-12);
        assert_eq!(phi[1], 0.0);
        assert!((phi[2] - (-0.7 * -0.3)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_game() {
        let vf = ValueFunction::new(
            meta([0.8; 3], -0.3),
            vec![0.35; 3],
            ShapleyScale::Probability,
        )
        .unwrap();
        let phi = shapley_exact(&[0.7; 3], &vf).unwrap();
        assert!((phi[0] - phi[1]).abs() < 1e-15 && (phi[1] - phi[2]).abs() < 1e-15);
    }

    #[test]
    fn arity_mismatch() {
        let vf =
            ValueFunction::new(meta([1.0; 3], 0.0), vec![0.5; 3], ShapleyScale::Logit).unwrap();
        assert!(shapley_exact(&[0.5, 0.5], &vf).is_err());
        assert!(
            ValueFunction::new(meta([1.0; 3], 0.0), vec![0.5; 2], ShapleyScale::Logit).is_err()
        );
    }

    proptest! {
        #[test]
        fn efficiency_and_oracle_agreement(
            w in prop::array::uniform3(-4.0f64..4.0),
            b in -2.0f64..2.0,
            p in prop::array::uniform3(0.001f64..0.999),
            r in prop::array::uniform3(0.001f64..0.999),
            logit in any::<bool>(),
        ) {
            let scale = if logit { ShapleyScale::Logit } else { ShapleyScale::Probability };
            let vf = ValueFunction::new(meta(w, b), r.to_vec(), scale).unwrap();
            let phi = shapley_exact(&p, &vf).unwrap();
            let total: f64 = phi.iter().sum();
            prop_assert!((total - (vf.value(&p, 0b111) - vf.value(&p, 0))).abs() < 1e-12);
            let oracle = permutation_oracle(&p, &vf);
            for k in 0..3 {
                prop_assert!((phi[k] - oracle[k]).abs() < 1e-12);
            }
        }
    }

    fn pv(level_preds: [f64; 3]) -> PredictionVector {
        PredictionVector {
            modality: ModalityId::M2Ehr,
            level_preds,
            meta_pred: None,
        }
    }

    #[test]
    fn null_game_report() {
        let report = importance_report(
            &[pv([0.3, 0.6, 0.8])],
            &meta([1.0, 2.0, 3.0], 0.0),
            ShapleyScale::Probability,
        )
        .unwrap();
        assert_eq!(report.aggregate_phi, [0.0; 3]);
        assert_eq!(report.best_level, 1);
        assert_eq!(report.sample_count, 1);
        assert_eq!(best_prediction(&pv([0.3, 0.6, 0.8]), &report).unwrap(), 0.3);
    }

    #[test]
    fn empty_validation_is_an_error() {
        let err = importance_report(&[], &meta([1.0; 3], 0.0), ShapleyScale::Logit).unwrap_err();
        assert!(matches!(err, LemofError::Data(_)));
    }

    #[test]
    fn best_level_selection_and_ties() {
        assert_eq!(select_best_level(&[0.3, 0.3, 0.1]), 1);
        assert_eq!(select_best_level(&[0.1, 0.3, 0.3]), 2);
        assert_eq!(select_best_level(&[0.1, 0.2, 0.9]), 3);
        let report = ShapleyReport {
            modality: ModalityId::M2Ehr,
            scale: ShapleyScale::Probability,
            per_sample_phi: vec![],
            aggregate_phi: [0.1, 0.2, 0.9],
            best_level: 3,
            baseline: [0.5; 3],
            sample_count: 0,
        };
        assert_eq!(best_prediction(&pv([0.2, 0.4, 0.9]), &report).unwrap(), 0.9);
        let mut wrong = report.clone();
        wrong.modality = ModalityId::M1Ecg;
        assert!(best_prediction(&pv([0.2, 0.4, 0.9]), &wrong).is_err());
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let mut rng = RngState::new(21);
        for _ in 0..200 {
            let agg = [
                rng.uniform(0.0, 1.0),
                rng.uniform(0.0, 1.0),
                rng.uniform(0.0, 1.0),
            ];
            let c = rng.uniform(1e-3, 1e3);
            assert_eq!(
                select_best_level(&agg),
                select_best_level(&agg.map(|a| a * c))
            );
        }
    }

    #[test]
    fn relabeling_levels_permutes_aggregate() {
        let mut rng = RngState::new(22);
        let preds: Vec<_> = (0..30)
            .map(|_| {
                pv([
                    rng.uniform(0.05, 0.95),
                    rng.uniform(0.05, 0.95),
                    rng.uniform(0.05, 0.95),
                ])
            })
            .collect();
        let m = meta([1.2, -0.4, 2.5], 0.3);
        let base = importance_report(&preds, &m, ShapleyScale::Probability).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<_> = preds
            .iter()
            .map(|p| pv(perm.map(|j| p.level_preds[j])))
            .collect();
        let pm = meta(perm.map(|j| m.w[j]), m.b);
        let other = importance_report(&permuted, &pm, ShapleyScale::Probability).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            assert!((other.aggregate_phi[k] - base.aggregate_phi[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn signal_confined_to_one_level_is_selected() {
        // Level 2 predictions track the label; levels 1 and 3 are noise.
        let mut hits = 0;
        for seed in 0..20u64 {
            let mut rng = RngState::new(seed);
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..300 {
                let y = rng.bernoulli(0.5);
                let informative = sigmoid_scalar(if y { 1.0 } else { -1.0 } + rng.normal());
                preds.push(pv([
                    rng.uniform(0.3, 0.7),
                    informative,
                    rng.uniform(0.3, 0.7),
                ]));
                labels.push(u8::from(y));
            }
            let inputs: Vec<Vec<f64>> = preds.iter().map(|p| p.level_preds.to_vec()).collect();
            let fit = crate::heads::fit_logistic(
                LogisticRole::MetaM2,
                &inputs,
                &labels,
                &crate::heads::LogisticHyper::default(),
            )
            .unwrap();
            let report = importance_report(&preds, &fit.params, ShapleyScale::Probability).unwrap();
            hits += usize::from(report.best_level == 2);
        }
        assert!(hits >= 18, "{hits}/20");
    }
}
