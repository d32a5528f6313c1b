//! Cross-modal attention between the two best-level representations and the
//! fused prediction head.
//!
//! Each modality's best level is first mapped to a common width `d` by an
//! affine adapter (skipped when the level already has width `d`). Each
//! modality then queries the other with single-head scaled dot-product
//! attention, the two outputs are mean-pooled over query tokens and
//! concatenated into `c`, and a logistic head maps `c` to a probability.

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};
use crate::heads::{LogisticParams, LogisticRole};
use crate::modality::ModalityId;
use crate::numeric::{
    BoundParams, Graph, Matrix2D, NodeId, ParamId, ParamTape, RngState, TokenSeq,
};
use crate::pfn::LevelStack;
use crate::shapley::ShapleyReport;

pub const DEFAULT_ATTENTION_DIM: usize = 32;

/// Which modality supplies the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// ECG queries attend over EHR keys and values.
    M1FromM2,
    /// EHR queries attend over ECG keys and values.
    M2FromM1,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::M1FromM2, Direction::M2FromM1];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::M1FromM2 => "m1_from_m2",
            Direction::M2FromM1 => "m2_from_m1",
        }
    }

    pub fn query(self) -> ModalityId {
        match self {
            Direction::M1FromM2 => ModalityId::M1Ecg,
            Direction::M2FromM1 => ModalityId::M2Ehr,
        }
    }

    fn index(self) -> usize {
        self.query().index()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Projections {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

/// Adapters and per-direction projections, all held on one tape.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    d: usize,
    input_dims: [usize; 2],
    adapters: [Option<(ParamId, ParamId)>; 2],
    proj: [Projections; 2],
    tape: ParamTape,
}

fn glorot(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Matrix2D {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_matrix(fan_in, fan_out, -bound, bound)
}

impl AttentionParams {
    /// `input_dims` are the widths of the selected levels, indexed by modality.
    pub fn new(input_dims: [usize; 2], d: usize, rng: &RngState) -> Result<Self> {
        if d == 0 || input_dims.contains(&0) {
            return Err(LemofError::Config(format!(
                "attention dims must be positive, got d={d} inputs={input_dims:?}"
            )));
        }
        let mut tape = ParamTape::new();
        let mut adapters = [None, None];
        for m in ModalityId::ALL {
            let dim = input_dims[m.index()];
            if dim != d {
                let mut r = rng.split(&format!("attention.adapter.{m}"));
                let w = tape.push(format!("adapter.{m}.weight"), glorot(&mut r, dim, d))?;
                let b = tape.push(format!("adapter.{m}.bias"), Matrix2D::zeros(1, d))?;
                adapters[m.index()] = Some((w, b));
            }
        }
        let mut proj = Vec::with_capacity(2);
        for dir in Direction::ALL {
            let mut r = rng.split(&format!("attention.{}", dir.as_str()));
            let mut push =
                |name: &str| tape.push(format!("{}.{name}", dir.as_str()), glorot(&mut r, d, d));
            proj.push(Projections {
                q: push("wq")?,
                k: push("wk")?,
                v: push("wv")?,
            });
        }
        Ok(AttentionParams {
            d,
            input_dims,
            adapters,
            proj: [proj[0], proj[1]],
            tape,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn input_dims(&self) -> [usize; 2] {
        self.input_dims
    }

    /// Width of the fused embedding.
    pub fn fused_dim(&self) -> usize {
        2 * self.d
    }

    pub fn has_adapter(&self, m: ModalityId) -> bool {
        self.adapters[m.index()].is_some()
    }

    pub fn tape(&self) -> &ParamTape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut ParamTape {
        &mut self.tape
    }

    /// Overwrites one direction's `W_Q`, `W_K`, `W_V`.
    pub fn set_projections(
        &mut self,
        dir: Direction,
        wq: Matrix2D,
        wk: Matrix2D,
        wv: Matrix2D,
    ) -> Result<()> {
        let p = self.proj[dir.index()];
        for (id, m) in [(p.q, wq), (p.k, wk), (p.v, wv)] {
            if m.shape() != (self.d, self.d) {
                return Err(LemofError::dim(
                    "set_projections",
                    (self.d, self.d),
                    m.shape(),
                ));
            }
            *self.tape.value_mut(id) = m;
        }
        Ok(())
    }

    pub fn projection(&self, dir: Direction, which: char) -> &Matrix2D {
        let p = self.proj[dir.index()];
        let id = match which {
            'q' => p.q,
            'k' => p.k,
            _ => p.v,
        };
        self.tape.value(id)
    }

    /// Maps a modality's raw best-level tokens to width `d`.
    pub fn adapt_graph(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        m: ModalityId,
        x: NodeId,
    ) -> Result<NodeId> {
        let (n, dim) = graph.value(x).shape();
        if n == 0 {
            return Err(LemofError::Data(format!(
                "{m} representation has no tokens"
            )));
        }
        if dim != self.input_dims[m.index()] {
            return Err(LemofError::dim(
                "adapt",
                (n, self.input_dims[m.index()]),
                (n, dim),
            ));
        }
        match self.adapters[m.index()] {
            None => Ok(x),
            Some((w, b)) => {
                let z = graph.matmul(x, bound.node(w))?;
                graph.add_row(z, bound.node(b))
            }
        }
    }

    /// Returns `(weights, output)` nodes for one direction.
    pub fn attend_graph(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        dir: Direction,
        q_tokens: NodeId,
        kv_tokens: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        for node in [q_tokens, kv_tokens] {
            let (n, dim) = graph.value(node).shape();
            if n == 0 {
                return Err(LemofError::Data(
                    "cross attention over an empty token sequence".into(),
                ));
            }
            if dim != self.d {
                return Err(LemofError::dim("cross_attention", (n, self.d), (n, dim)));
            }
        }
        let p = self.proj[dir.index()];
        let q = graph.matmul(q_tokens, bound.node(p.q))?;
        let k = graph.matmul(kv_tokens, bound.node(p.k))?;
        let v = graph.matmul(kv_tokens, bound.node(p.v))?;
        let scores = graph.matmul_nt(q, k)?;
        let scores = graph.scale(scores, 1.0 / (self.d as f64).sqrt());
        let weights = graph.softmax_rows(scores);
        let out = graph.matmul(weights, v)?;
        Ok((weights, out))
    }

    /// Fused embedding node (1×2d) from adapted representations.
    pub fn fuse_graph(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        h1: NodeId,
        h2: NodeId,
    ) -> Result<NodeId> {
        let (_, a12) = self.attend_graph(graph, bound, Direction::M1FromM2, h1, h2)?;
        let (_, a21) = self.attend_graph(graph, bound, Direction::M2FromM1, h2, h1)?;
        let p12 = graph.mean_rows(a12)?;
        let p21 = graph.mean_rows(a21)?;
        graph.concat_cols(&[p12, p21])
    }
}

/// Result of one attention direction.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// Row-stochastic matrix, query tokens × kv tokens.
    pub weights: Matrix2D,
    /// V projections of the kv tokens.
    pub values: Matrix2D,
    /// `weights · values`, query tokens × d.
    pub output: TokenSeq,
}

/// `softmax(QKᵀ/√d)·V` with queries from `q_tokens` and keys and values from
/// `kv_tokens`. Both inputs must already have width `d`.
pub fn cross_attention(
    q_tokens: &TokenSeq,
    kv_tokens: &TokenSeq,
    params: &AttentionParams,
    dir: Direction,
) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let bound = params.tape.bind(&mut g);
    let q = g.leaf(q_tokens.clone());
    let kv = g.leaf(kv_tokens.clone());
    let (w, out) = params.attend_graph(&mut g, &bound, dir, q, kv)?;
    let values = kv_tokens.matmul(params.projection(dir, 'v'))?;
    Ok(AttentionOutput {
        weights: g.value(w).clone(),
        values,
        output: g.value(out).clone(),
    })
}

/// The chosen levels of both modalities, mapped to width `d`.
pub fn select_best_reps(
    stacks: [&LevelStack; 2],
    reports: [&ShapleyReport; 2],
    params: &AttentionParams,
) -> Result<(TokenSeq, TokenSeq)> {
    let mut g = Graph::new();
    let bound = params.tape.bind(&mut g);
    let mut out = Vec::with_capacity(2);
    for m in ModalityId::ALL {
        let (stack, report) = (stacks[m.index()], reports[m.index()]);
        if stack.modality != m || report.modality != m {
            return Err(LemofError::Config(format!(
                "expected {m} in slot {}, got stack {} and report {}",
                m.index(),
                stack.modality,
                report.modality
            )));
        }
        if !(1..=crate::pfn::LEVELS).contains(&report.best_level) {
            return Err(LemofError::Config(format!(
                "invalid best level {} for {m}",
                report.best_level
            )));
        }
        let x = g.leaf(stack.level(report.best_level).clone());
        let h = params.adapt_graph(&mut g, &bound, m, x)?;
        out.push(g.value(h).clone());
    }
    let h2 = out.pop().expect("two modalities");
    let h1 = out.pop().expect("two modalities");
    Ok((h1, h2))
}

/// Concatenated, query-pooled attention outputs of both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedEmbedding {
    pub c: Vec<f64>,
}

/// Fused embedding and `ŷ_Ω2` from adapted best-level representations.
pub fn fuse_and_predict(
    h1: &TokenSeq,
    h2: &TokenSeq,
    params: &AttentionParams,
    head: &LogisticParams,
) -> Result<(FusedEmbedding, f64)> {
    if head.role != LogisticRole::Omega2 {
        return Err(LemofError::Config(format!(
            "fused head has role {}",
            head.role.as_str()
        )));
    }
    let mut g = Graph::new();
    let bound = params.tape.bind(&mut g);
    let a = g.leaf(h1.clone());
    let b = g.leaf(h2.clone());
    let c = params.fuse_graph(&mut g, &bound, a, b)?;
    let c = g.value(c).data().to_vec();
    if !c.iter().all(|v| v.is_finite()) {
        return Err(LemofError::Numerical(
            "fused embedding is not finite".into(),
        ));
    }
    let p = crate::heads::logistic_forward(&c, head)?;
    Ok((FusedEmbedding { c }, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::logistic_forward;
    use crate::numeric::{grad_check, sigmoid_scalar};
    use crate::shapley::ShapleyScale;

    fn tokens(rng: &mut RngState, n: usize, d: usize) -> Matrix2D {
        rng.normal_matrix(n, d, 1.0)
    }

    /// Softmax-weighted sum spelled out with scalar loops.
    fn loop_oracle(
        q: &Matrix2D,
        kv: &Matrix2D,
        wq: &Matrix2D,
        wk: &Matrix2D,
        wv: &Matrix2D,
    ) -> Vec<Vec<f64>> {
        let project = |x: &Matrix2D, w: &Matrix2D| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|i| {
                    (0..w.cols())
                        .map(|j| (0..x.cols()).map(|t| x.get(i, t) * w.get(t, j)).sum())
                        .collect()
                })
                .collect()
        };
        let (qp, kp, vp) = (project(q, wq), project(kv, wk), project(kv, wv));
        let d = wq.cols() as f64;
        qp.iter()
            .map(|qi| {
                let s: Vec<f64> = kp
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..wv.cols())
                    .map(|c| e.iter().zip(&vp).map(|(w, v)| w / z * v[c]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = RngState::new(5);
        let params = AttentionParams::new([4, 4], 4, &RngState::new(6)).unwrap();
        let (q, kv) = (tokens(&mut rng, 2, 4), tokens(&mut rng, 2, 4));
        let dir = Direction::M2FromM1;
        let out = cross_attention(&q, &kv, &params, dir).unwrap();
        let oracle = loop_oracle(
            &q,
            &kv,
            params.projection(dir, 'q'),
            params.projection(dir, 'k'),
            params.projection(dir, 'v'),
        );
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((out.output.get(i, j) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_and_identical_kv_tokens() {
        let mut rng = RngState::new(7);
        let params = AttentionParams::new([3, 3], 3, &RngState::new(8)).unwrap();
        let q = tokens(&mut rng, 5, 3);
        let one = tokens(&mut rng, 1, 3);
        let out = cross_attention(&q, &one, &params, Direction::M1FromM2).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((out.output.get(i, j) - out.values.get(0, j)).abs() < 1e-12);
            }
        }
        let same = Matrix2D::from_rows(&[one.row(0), one.row(0), one.row(0)]).unwrap();
        let out = cross_attention(&q, &same, &params, Direction::M1FromM2).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((out.weights.get(i, j) - 1.0 / 3.0).abs() < 1e-12);
                assert!((out.output.get(i, j) - out.values.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_and_misshaped_tokens() {
        let params = AttentionParams::new([3, 3], 3, &RngState::new(8)).unwrap();
        let q = Matrix2D::zeros(2, 3);
        let err =
            cross_attention(&q, &Matrix2D::zeros(0, 3), &params, Direction::M1FromM2).unwrap_err();
        assert!(matches!(err, LemofError::Data(_)));
        let err =
            cross_attention(&q, &Matrix2D::zeros(2, 4), &params, Direction::M1FromM2).unwrap_err();
        assert!(matches!(err, LemofError::Dimension { .. }));
        assert!(AttentionParams::new([3, 0], 3, &RngState::new(1)).is_err());
    }

    #[test]
    fn zero_values_annihilate() {
        let mut rng = RngState::new(9);
        let mut params = AttentionParams::new([6, 2], 4, &RngState::new(10)).unwrap();
        for dir in Direction::ALL {
            let (q, k) = (
                params.projection(dir, 'q').clone(),
                params.projection(dir, 'k').clone(),
            );
            params
                .set_projections(dir, q, k, Matrix2D::zeros(4, 4))
                .unwrap();
        }
        let head = LogisticParams {
            role: LogisticRole::Omega2,
            w: vec![0.7; 8],
            b: -0.4,
        };
        let (h1, h2) = (tokens(&mut rng, 8, 4), tokens(&mut rng, 1, 4));
        let (c, p) = fuse_and_predict(&h1, &h2, &params, &head).unwrap();
        assert_eq!(c.c, vec![0.0; 8]);
        assert!((p - sigmoid_scalar(-0.4)).abs() < 1e-15);
    }

    #[test]
    fn swapping_roles_swaps_halves() {
        let mut rng = RngState::new(11);
        let params = AttentionParams::new([4, 4], 4, &RngState::new(12)).unwrap();
        let mut swapped = params.clone();
        for (dst, src) in [
            (Direction::M1FromM2, Direction::M2FromM1),
            (Direction::M2FromM1, Direction::M1FromM2),
        ] {
            swapped
                .set_projections(
                    dst,
                    params.projection(src, 'q').clone(),
                    params.projection(src, 'k').clone(),
                    params.projection(src, 'v').clone(),
                )
                .unwrap();
        }
        let head = LogisticParams::zeros(LogisticRole::Omega2, 8);
        let (h1, h2) = (tokens(&mut rng, 6, 4), tokens(&mut rng, 3, 4));
        let (c, _) = fuse_and_predict(&h1, &h2, &params, &head).unwrap();
        let (s, _) = fuse_and_predict(&h2, &h1, &swapped, &head).unwrap();
        for j in 0..4 {
            assert!((c.c[j] - s.c[j + 4]).abs() < 1e-12);
            assert!((c.c[j + 4] - s.c[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_head_role() {
        let params = AttentionParams::new([2, 2], 2, &RngState::new(1)).unwrap();
        let head = LogisticParams::zeros(LogisticRole::Final, 4);
        let h = Matrix2D::zeros(1, 2);
        assert!(fuse_and_predict(&h, &h, &params, &head).is_err());
    }

    fn report(m: ModalityId, best_level: usize) -> ShapleyReport {
        ShapleyReport {
            modality: m,
            scale: ShapleyScale::Probability,
            per_sample_phi: vec![],
            aggregate_phi: [0.0; 3],
            best_level,
            baseline: [0.5; 3],
            sample_count: 0,
        }
    }

    fn stack(
        m: ModalityId,
        rng: &mut RngState,
        tokens_per_level: [usize; 3],
        dims: [usize; 3],
    ) -> LevelStack {
        LevelStack {
            modality: m,
            levels: [0, 1, 2]
                .map(|k| rng.normal_matrix(tokens_per_level[k], dims[k], 1.0))
                .to_vec(),
        }
    }

    #[test]
    fn selects_reported_levels() {
        let mut rng = RngState::new(13);
        let s1 = stack(ModalityId::M1Ecg, &mut rng, [8, 4, 2], [4, 4, 4]);
        let s2 = stack(ModalityId::M2Ehr, &mut rng, [1, 1, 1], [4, 4, 4]);
        let params = AttentionParams::new([4, 4], 4, &RngState::new(14)).unwrap();
        assert!(!params.has_adapter(ModalityId::M1Ecg));
        let (r1, r2) = (report(ModalityId::M1Ecg, 3), report(ModalityId::M2Ehr, 1));
        let (h1, h2) = select_best_reps([&s1, &s2], [&r1, &r2], &params).unwrap();
        assert_eq!(&h1, s1.level(3));
        assert_eq!(&h2, s2.level(1));

        let mut other = s1.clone();
        other.levels[0] = rng.normal_matrix(8, 4, 1.0);
        let (g1, _) = select_best_reps([&other, &s2], [&r1, &r2], &params).unwrap();
        assert_eq!(g1, h1);

        assert!(select_best_reps([&s2, &s1], [&r1, &r2], &params).is_err());
        assert!(select_best_reps([&s1, &s2], [&r2, &r1], &params).is_err());
    }

    #[test]
    fn adapters_map_to_common_width() {
        let mut rng = RngState::new(15);
        let s1 = stack(ModalityId::M1Ecg, &mut rng, [8, 4, 2], [4, 6, 8]);
        let s2 = stack(ModalityId::M2Ehr, &mut rng, [1, 1, 1], [3, 5, 7]);
        let params = AttentionParams::new([6, 7], 5, &RngState::new(16)).unwrap();
        let (r1, r2) = (report(ModalityId::M1Ecg, 2), report(ModalityId::M2Ehr, 3));
        let (h1, h2) = select_best_reps([&s1, &s2], [&r1, &r2], &params).unwrap();
        assert_eq!(h1.shape(), (4, 5));
        assert_eq!(h2.shape(), (1, 5));
        let r2_bad = report(ModalityId::M2Ehr, 1);
        assert!(select_best_reps([&s1, &s2], [&r1, &r2_bad], &params).is_err());
    }

    #[test]
    fn fused_bce_gradient_check() {
        let mut rng = RngState::new(17);
        let params = AttentionParams::new([6, 3], 4, &RngState::new(18)).unwrap();
        let head = LogisticParams {
            role: LogisticRole::Omega2,
            w: (0..8).map(|i| 0.3 - 0.1 * i as f64).collect(),
            b: 0.2,
        };
        let mut tape = ParamTape::new();
        tape.extend_prefixed("attn.", params.tape()).unwrap();
        tape.extend_prefixed("omega2.", &head.to_tape()).unwrap();
        let (x1, x2) = (tokens(&mut rng, 5, 6), tokens(&mut rng, 1, 3));
        let err = grad_check(
            |t| {
                let mut p = params.clone();
                p.tape_mut().load_prefixed("attn.", t).unwrap();
                let mut h = head.clone();
                let mut ht = h.to_tape();
                ht.load_prefixed("omega2.", t).unwrap();
                h.load_tape(&ht).unwrap();

                let mut g = Graph::new();
                let attn_bound = p.tape().bind(&mut g);
                let mut head_tape = h.to_tape();
                let head_bound = head_tape.bind(&mut g);
                let a = g.leaf(x1.clone());
                let b = g.leaf(x2.clone());
                let a = p.adapt_graph(&mut g, &attn_bound, ModalityId::M1Ecg, a)?;
                let b = p.adapt_graph(&mut g, &attn_bound, ModalityId::M2Ehr, b)?;
                let c = p.fuse_graph(&mut g, &attn_bound, a, b)?;
                let z = LogisticParams::logit_graph(&mut g, &head_bound, &head_tape, c)?;
                let loss = g.bce_with_logits(z, 1.0)?;
                let grads = g.backward(loss);
                p.tape_mut().zero_grads();
                p.tape_mut().accumulate(&attn_bound, &grads);
                head_tape.accumulate(&head_bound, &grads);
                t.accumulate_prefixed("attn.", p.tape())?;
                t.accumulate_prefixed("omega2.", &head_tape)?;
                Ok(g.value(loss).item())
            },
            &tape,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn probability_matches_head_on_embedding() {
        let mut rng = RngState::new(19);
        let params = AttentionParams::new([4, 4], 4, &RngState::new(20)).unwrap();
        let head = LogisticParams {
            role: LogisticRole::Omega2,
            w: vec![0.5; 8],
            b: 0.1,
        };
        let (h1, h2) = (tokens(&mut rng, 3, 4), tokens(&mut rng, 2, 4));
        let (c, p) = fuse_and_predict(&h1, &h2, &params, &head).unwrap();
        assert_eq!(c.c.len(), params.fused_dim());
        assert_eq!(p, logistic_forward(&c.c, &head).unwrap());
        assert!(p > 0.0 && p < 1.0);
    }
}
