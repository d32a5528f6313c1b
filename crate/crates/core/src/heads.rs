//! Level prediction heads and the logistic predictor shared by every
//! stacking step.

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};
use crate::modality::ModalityId;
use crate::numeric::matrix::softplus;
use crate::numeric::{
    sigmoid_scalar, BoundParams, Graph, Matrix2D, NodeId, ParamId, ParamTape, RngState,
};
use crate::pfn::{LevelStack, LEVELS};

/// One affine head per level, applied to the token-mean of that level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelHeadParams {
    modality: ModalityId,
    dims: [usize; LEVELS],
    heads: [(ParamId, ParamId); LEVELS],
    tape: ParamTape,
}

impl LevelHeadParams {
    /// Glorot-uniform weights, zero biases.
    pub fn new(modality: ModalityId, dims: [usize; LEVELS], rng: &RngState) -> Result<Self> {
        let mut tape = ParamTape::new();
        let mut heads = Vec::with_capacity(LEVELS);
        for (k, &d) in dims.iter().enumerate() {
            let bound = (6.0 / (d + 1) as f64).sqrt();
            let mut r = rng.split(&format!("{modality}.head{}", k + 1));
            let w = tape.push(
                format!("head{}.weight", k + 1),
                r.uniform_matrix(d, 1, -bound, bound),
            )?;
            let b = tape.push(format!("head{}.bias", k + 1), Matrix2D::zeros(1, 1))?;
            heads.push((w, b));
        }
        Ok(LevelHeadParams {
            modality,
            dims,
            heads: [heads[0], heads[1], heads[2]],
            tape,
        })
    }

    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn dims(&self) -> [usize; LEVELS] {
        self.dims
    }

    pub fn tape(&self) -> &ParamTape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut ParamTape {
        &mut self.tape
    }

    /// Replaces head `k` (1..=3).
    pub fn set_head(&mut self, k: usize, weight: &[f64], bias: f64) -> Result<()> {
        let (w, b) = self.heads[k - 1];
        if weight.len() != self.dims[k - 1] {
            return Err(LemofError::dim(
                "set_head",
                (self.dims[k - 1], 1),
                (weight.len(), 1),
            ));
        }
        *self.tape.value_mut(w) = Matrix2D::column_vector(weight);
        *self.tape.value_mut(b) = Matrix2D::scalar(bias);
        Ok(())
    }

    /// Level logits from level nodes: mean over tokens, then affine.
    pub fn logits_graph(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        levels: &[NodeId; LEVELS],
    ) -> Result<[NodeId; LEVELS]> {
        let mut out = [levels[0]; LEVELS];
        for (k, (&lvl, &(w, b))) in levels.iter().zip(&self.heads).enumerate() {
            let d = graph.value(lvl).cols();
            if d != self.dims[k] {
                return Err(LemofError::dim("level_predict", (1, self.dims[k]), (1, d)));
            }
            let pooled = graph.mean_rows(lvl)?;
            let z = graph.matmul(pooled, bound.node(w))?;
            out[k] = graph.add_row(z, bound.node(b))?;
        }
        Ok(out)
    }
}

/// Level-wise predictions of one modality, plus the stacked meta prediction
/// once it has been computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    pub modality: ModalityId,
    pub level_preds: [f64; LEVELS],
    pub meta_pred: Option<f64>,
}

pub fn level_predict(stack: &LevelStack, heads: &LevelHeadParams) -> Result<PredictionVector> {
    if stack.modality != heads.modality {
        return Err(LemofError::Config(format!(
            "level stack is {} but heads belong to {}",
            stack.modality, heads.modality
        )));
    }
    if stack.levels.len() != LEVELS {
        return Err(LemofError::Config(format!(
            "expected {LEVELS} levels, got {}",
            stack.levels.len()
        )));
    }
    let mut g = Graph::new();
    let bound = heads.tape.bind(&mut g);
    let nodes = [
        g.leaf(stack.levels[0].clone()),
        g.leaf(stack.levels[1].clone()),
        g.leaf(stack.levels[2].clone()),
    ];
    let logits = heads.logits_graph(&mut g, &bound, &nodes)?;
    Ok(PredictionVector {
        modality: stack.modality,
        level_preds: logits.map(|z| sigmoid_scalar(g.value(z).item())),
        meta_pred: None,
    })
}

/// Which stacking step a logistic predictor serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogisticRole {
    MetaM1,
    MetaM2,
    Omega1,
    Omega2,
    Final,
}

impl LogisticRole {
    pub fn meta_for(modality: ModalityId) -> Self {
        match modality {
            ModalityId::M1Ecg => LogisticRole::MetaM1,
            ModalityId::M2Ehr => LogisticRole::MetaM2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LogisticRole::MetaM1 => "meta_m1",
            LogisticRole::MetaM2 => "meta_m2",
            LogisticRole::Omega1 => "omega1",
            LogisticRole::Omega2 => "omega2",
            LogisticRole::Final => "final",
        }
    }

    /// Input arity; `fused_dim` is only consulted for `Omega2`.
    pub fn arity(self, fused_dim: usize) -> usize {
        match self {
            LogisticRole::MetaM1 | LogisticRole::MetaM2 => LEVELS,
            LogisticRole::Omega1 => 4,
            LogisticRole::Omega2 => fused_dim,
            LogisticRole::Final => 2,
        }
    }
}

/// `σ(w·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub role: LogisticRole,
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticParams {
    pub fn zeros(role: LogisticRole, arity: usize) -> Self {
        LogisticParams {
            role,
            w: vec![0.0; arity],
            b: 0.0,
        }
    }

    pub fn arity(&self) -> usize {
        self.w.len()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(LemofError::dim(
                "logistic_forward",
                (1, self.w.len()),
                (1, x.len()),
            ));
        }
        Ok(self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b)
    }

    /// Tape with slots `w` (n×1) and `b` (1×1).
    pub fn to_tape(&self) -> ParamTape {
        let mut tape = ParamTape::new();
        tape.push("w", Matrix2D::column_vector(&self.w))
            .expect("fresh tape");
        tape.push("b", Matrix2D::scalar(self.b))
            .expect("fresh tape");
        tape
    }

    pub fn load_tape(&mut self, tape: &ParamTape) -> Result<()> {
        let w = tape
            .get("w")
            .ok_or_else(|| LemofError::Format(format!("{}: missing w", self.role.as_str())))?;
        let b = tape
            .get("b")
            .ok_or_else(|| LemofError::Format(format!("{}: missing b", self.role.as_str())))?;
        if w.shape() != (self.w.len(), 1) || b.shape() != (1, 1) {
            return Err(LemofError::dim("load_tape", (self.w.len(), 1), w.shape()));
        }
        self.w.copy_from_slice(w.data());
        self.b = b.item();
        Ok(())
    }

    /// Logit node for a 1×n input node, using leaves bound from [`Self::to_tape`].
    pub fn logit_graph(
        graph: &mut Graph,
        bound: &BoundParams,
        tape: &ParamTape,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.id_of("w").expect("logistic tape has w");
        let b = tape.id_of("b").expect("logistic tape has b");
        let z = graph.matmul(x, bound.node(w))?;
        graph.add_row(z, bound.node(b))
    }
}

pub fn logistic_forward(x: &[f64], params: &LogisticParams) -> Result<f64> {
    Ok(sigmoid_scalar(params.logit(x)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LogisticHyper {
    fn default() -> Self {
        LogisticHyper {
            lr: 0.5,
            epochs: 2000,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub params: LogisticParams,
    /// Objective before the first step and after every epoch.
    pub loss_history: Vec<f64>,
}

/// Mean binary cross-entropy plus `l2·‖w‖²/2`.
pub fn logistic_objective(
    params: &LogisticParams,
    inputs: &[Vec<f64>],
    labels: &[u8],
    l2: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let z = params.logit(x)?;
        loss += softplus(z) - y as f64 * z;
    }
    let reg: f64 = params.w.iter().map(|w| w * w).sum();
    Ok(loss / inputs.len() as f64 + 0.5 * l2 * reg)
}

fn check_fit_data(inputs: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    if inputs.is_empty() {
        return Err(LemofError::Data("cannot fit on an empty set".into()));
    }
    if inputs.len() != labels.len() {
        return Err(LemofError::Data(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let arity = inputs[0].len();
    if let Some(i) = inputs.iter().position(|x| x.len() != arity) {
        return Err(LemofError::dim(
            "fit_logistic",
            (1, arity),
            (1, inputs[i].len()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(LemofError::Data(format!("non-binary label {y}")));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(LemofError::Data(
            "degenerate labels: only one class present".into(),
        ));
    }
    Ok(arity)
}

/// Full-batch gradient descent from zero initialization.
pub fn fit_logistic(
    role: LogisticRole,
    inputs: &[Vec<f64>],
    labels: &[u8],
    hyper: &LogisticHyper,
) -> Result<LogisticFit> {
    let arity = check_fit_data(inputs, labels)?;
    fit_logistic_from(LogisticParams::zeros(role, arity), inputs, labels, hyper)
}

pub fn fit_logistic_from(
    init: LogisticParams,
    inputs: &[Vec<f64>],
    labels: &[u8],
    hyper: &LogisticHyper,
) -> Result<LogisticFit> {
    let arity = check_fit_data(inputs, labels)?;
    if init.arity() != arity {
        return Err(LemofError::dim(
            "fit_logistic",
            (1, init.arity()),
            (1, arity),
        ));
    }
    if !(hyper.lr > 0.0) || hyper.l2 < 0.0 {
        return Err(LemofError::Config(format!(
            "invalid logistic hyperparameters {hyper:?}"
        )));
    }
    let n = inputs.len() as f64;
    let mut params = init;
    let mut history = Vec::with_capacity(hyper.epochs + 1);
    history.push(logistic_objective(&params, inputs, labels, hyper.l2)?);
    let mut grad_w = vec![0.0; arity];
    for epoch in 0..hyper.epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            let r = sigmoid_scalar(params.logit(x)?) - y as f64;
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += r * xi;
            }
            grad_b += r;
        }
        for (w, g) in params.w.iter_mut().zip(&grad_w) {
            *w -= hyper.lr * (g / n + hyper.l2 * *w);
        }
        params.b -= hyper.lr * grad_b / n;
        let loss = logistic_objective(&params, inputs, labels, hyper.l2)?;
        if !loss.is_finite() {
            return Err(LemofError::Numerical(format!(
                "{} fit diverged at epoch {}",
                params.role.as_str(),
                epoch + 1
            )));
        }
        history.push(loss);
    }
    Ok(LogisticFit {
        params,
        loss_history: history,
    })
}

/// Fills `meta_pred` from the three level predictions.
pub fn meta_predict(pv: &PredictionVector, params: &LogisticParams) -> Result<PredictionVector> {
    let mut out = pv.clone();
    out.meta_pred = Some(logistic_forward(&pv.level_preds, params)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfn::{build_pfn, pfn_forward, BackboneKind};

    fn stack_with(levels: Vec<Matrix2D>) -> LevelStack {
        LevelStack {
            modality: ModalityId::M1Ecg,
            levels,
        }
    }

    #[test]
    fn zero_heads_predict_half() {
        let mut heads =
            LevelHeadParams::new(ModalityId::M1Ecg, [3, 2, 2], &RngState::new(0)).unwrap();
        heads.set_head(1, &[0.0; 3], 0.0).unwrap();
        heads.set_head(2, &[0.0; 2], 0.0).unwrap();
        heads.set_head(3, &[0.0; 2], 0.0).unwrap();
        let stack = stack_with(vec![
            Matrix2D::filled(4, 3, 1.0),
            Matrix2D::filled(2, 2, -3.0),
            Matrix2D::filled(1, 2, 9.0),
        ]);
        let pv = level_predict(&stack, &heads).unwrap();
        assert_eq!(pv.level_preds, [0.5; 3]);
        assert_eq!(pv.meta_pred, None);
    }

    #[test]
    fn single_token_and_duplicated_tokens() {
        let heads = LevelHeadParams::new(ModalityId::M1Ecg, [3, 3, 3], &RngState::new(1)).unwrap();
        let tok = Matrix2D::row_vector(&[0.2, -1.0, 0.7]);
        let pv = level_predict(
            &stack_with(vec![tok.clone(), tok.clone(), tok.clone()]),
            &heads,
        )
        .unwrap();
        let w = heads.tape().get("head1.weight").unwrap();
        let direct = sigmoid_scalar(tok.matmul(w).unwrap().item());
        assert!((pv.level_preds[0] - direct).abs() < 1e-15);

        let twice = Matrix2D::from_rows(&[tok.row(0), tok.row(0)]).unwrap();
        let pv2 = level_predict(
            &stack_with(vec![twice.clone(), twice.clone(), twice]),
            &heads,
        )
        .unwrap();
        assert_eq!(pv.level_preds, pv2.level_preds);
    }

    #[test]
    fn duplicating_every_token_is_invisible() {
        let pfn = build_pfn(
            ModalityId::M1Ecg,
            BackboneKind::SignalConv,
            2,
            &[4, 4, 4],
            &RngState::new(2),
        )
        .unwrap();
        let heads = LevelHeadParams::new(ModalityId::M1Ecg, [4, 4, 4], &RngState::new(3)).unwrap();
        let stack = pfn_forward(&RngState::new(4).normal_matrix(32, 2, 1.0), &pfn).unwrap();
        let doubled = stack_with(
            stack
                .levels
                .iter()
                .map(|l| {
                    let rows: Vec<&[f64]> =
                        (0..l.rows()).flat_map(|r| [l.row(r), l.row(r)]).collect();
                    Matrix2D::from_rows(&rows).unwrap()
                })
                .collect(),
        );
        let a = level_predict(&stack, &heads).unwrap();
        let b = level_predict(&doubled, &heads).unwrap();
        for k in 0..3 {
            assert!((a.level_preds[k] - b.level_preds[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn level_dim_mismatch() {
        let heads = LevelHeadParams::new(ModalityId::M1Ecg, [3, 3, 3], &RngState::new(1)).unwrap();
        let stack = stack_with(vec![
            Matrix2D::zeros(1, 3),
            Matrix2D::zeros(1, 4),
            Matrix2D::zeros(1, 3),
        ]);
        assert!(matches!(
            level_predict(&stack, &heads),
            Err(LemofError::Dimension { .. })
        ));
    }

    #[test]
    fn logistic_forward_cases() {
        let zero = LogisticParams::zeros(LogisticRole::Omega1, 3);
        assert_eq!(logistic_forward(&[4.0, -2.0, 1.0], &zero).unwrap(), 0.5);
        let p = LogisticParams {
            role: LogisticRole::MetaM1,
            w: vec![1.0, 0.0, 0.0],
            b: 0.0,
        };
        let y = logistic_forward(&[3f64.ln(), 9.0, -4.0], &p).unwrap();
        assert!((y - 0.75).abs() < 1e-15);
        assert!(matches!(
            logistic_forward(&[1.0], &p),
            Err(LemofError::Dimension { .. })
        ));

        let q = LogisticParams {
            role: LogisticRole::Final,
            w: vec![0.7, 1.3],
            b: -0.2,
        };
        let mut prev = 0.0;
        for i in 0..20 {
            let y = logistic_forward(&[-2.0 + 0.25 * i as f64, 0.4], &q).unwrap();
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn fit_separable_1d() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..50 {
            xs.push(vec![0.1]);
            ys.push(0);
            xs.push(vec![0.9]);
            ys.push(1);
        }
        let fit = fit_logistic(
            LogisticRole::MetaM1,
            &xs,
            &ys,
            &LogisticHyper {
                lr: 0.5,
                epochs: 3000,
                l2: 0.0,
            },
        )
        .unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| (logistic_forward(x, &fit.params).unwrap() >= 0.5) == (y == 1))
            .count();
        assert_eq!(correct, xs.len());
    }

    #[test]
    fn uninformative_inputs_give_base_rate() {
        let xs = vec![vec![0.5, 0.5]; 40];
        let ys: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let fit = fit_logistic(
            LogisticRole::Final,
            &xs,
            &ys,
            &LogisticHyper {
                lr: 0.5,
                epochs: 2000,
                l2: 0.1,
            },
        )
        .unwrap();
        let p = logistic_forward(&xs[0], &fit.params).unwrap();
        assert!((p - 0.5).abs() < 1e-9, "{p}");
        assert!(fit.params.w.iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn loss_never_increases() {
        let mut rng = RngState::new(12);
        let xs: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let ys: Vec<u8> = xs
            .iter()
            .map(|x| u8::from(x[0] + 0.3 * rng.normal() > 0.5))
            .collect();
        let fit = fit_logistic(
            LogisticRole::Omega1,
            &xs,
            &ys,
            &LogisticHyper {
                lr: 0.1,
                epochs: 500,
                l2: 1e-3,
            },
        )
        .unwrap();
        for w in fit.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn unique_optimum_with_l2() {
        let mut rng = RngState::new(13);
        let xs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let ys: Vec<u8> = xs
            .iter()
            .map(|x| u8::from(x[1] - x[2] + 0.2 * rng.normal() > 0.0))
            .collect();
        let hyper = LogisticHyper {
            lr: 0.5,
            epochs: 20000,
            l2: 0.05,
        };
        let a = fit_logistic(LogisticRole::MetaM2, &xs, &ys, &hyper).unwrap();
        let init = LogisticParams {
            role: LogisticRole::MetaM2,
            w: vec![3.0, -2.0, 5.0],
            b: -4.0,
        };
        let b = fit_logistic_from(init, &xs, &ys, &hyper).unwrap();
        for (x, y) in a.params.w.iter().zip(&b.params.w) {
            assert!((x - y).abs() < 1e-3);
        }
        assert!((a.params.b - b.params.b).abs() < 1e-3);
    }

    #[test]
    fn single_class_is_rejected() {
        let err = fit_logistic(
            LogisticRole::MetaM1,
            &[vec![0.1], vec![0.2]],
            &[1, 1],
            &LogisticHyper::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LemofError::Data(_)));
    }

    #[test]
    fn meta_prediction() {
        let pv = PredictionVector {
            modality: ModalityId::M2Ehr,
            level_preds: [0.2, 0.7, 0.9],
            meta_pred: None,
        };
        let zero = LogisticParams::zeros(LogisticRole::MetaM2, 3);
        assert_eq!(meta_predict(&pv, &zero).unwrap().meta_pred, Some(0.5));

        let p = LogisticParams {
            role: LogisticRole::MetaM2,
            w: vec![0.3, -1.2, 2.0],
            b: 0.1,
        };
        let m = meta_predict(&pv, &p).unwrap().meta_pred.unwrap();
        assert!(m > 0.0 && m < 1.0);
        let permuted_pv = PredictionVector {
            level_preds: [0.9, 0.2, 0.7],
            ..pv.clone()
        };
        let permuted_p = LogisticParams {
            w: vec![2.0, 0.3, -1.2],
            ..p.clone()
        };
        let m2 = meta_predict(&permuted_pv, &permuted_p)
            .unwrap()
            .meta_pred
            .unwrap();
        assert!((m - m2).abs() < 1e-15);
    }
}
