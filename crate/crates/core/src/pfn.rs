//! Pyramid feature networks: three stacked blocks whose outputs are all
//! exposed as level representations.
//!
//! Two backbones share the block recurrence `h_k = relu(W_k * h_{k-1} + b_k)`:
//! a tabular MLP that keeps a single token per level, and a strided 1-D
//! convolution (kernel 5, stride 2, zero padding 2) that halves the token
//! count at every level.

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};
use crate::modality::ModalityId;
use crate::numeric::graph::unfold_len;
use crate::numeric::{
    BoundParams, Graph, Matrix2D, NodeId, ParamId, ParamTape, RngState, TokenSeq,
};

pub const LEVELS: usize = 3;
pub const CONV_KERNEL: usize = 5;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    TabularMlp,
    SignalConv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfnParams {
    modality: ModalityId,
    kind: BackboneKind,
    input_dim: usize,
    dims: [usize; LEVELS],
    blocks: [BlockIds; LEVELS],
    tape: ParamTape,
}

/// Level representations of one input, ordered low to high.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStack {
    pub modality: ModalityId,
    pub levels: Vec<TokenSeq>,
}

impl LevelStack {
    /// Level `k` in 1..=3.
    pub fn level(&self, k: usize) -> &TokenSeq {
        &self.levels[k - 1]
    }
}

fn check_dims(dims: &[usize]) -> Result<[usize; LEVELS]> {
    if dims.len() != LEVELS {
        return Err(LemofError::Config(format!(
            "expected {LEVELS} level dims, got {}",
            dims.len()
        )));
    }
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return Err(LemofError::Config(format!(
            "level {} has zero width",
            k + 1
        )));
    }
    Ok([dims[0], dims[1], dims[2]])
}

/// Builds a PFN with Glorot-uniform weights and zero biases.
///
/// `input_dim` is the channel count for `SignalConv` and the feature count for
/// `TabularMlp`.
pub fn build_pfn(
    modality: ModalityId,
    kind: BackboneKind,
    input_dim: usize,
    dims: &[usize],
    rng: &RngState,
) -> Result<PfnParams> {
    let dims = check_dims(dims)?;
    if input_dim == 0 {
        return Err(LemofError::Config(format!(
            "{modality}: input dim must be positive"
        )));
    }
    let mut tape = ParamTape::new();
    let mut prev = input_dim;
    let mut blocks = Vec::with_capacity(LEVELS);
    for (k, &d) in dims.iter().enumerate() {
        let fan_in = match kind {
            BackboneKind::TabularMlp => prev,
            BackboneKind::SignalConv => CONV_KERNEL * prev,
        };
        let bound = (6.0 / (fan_in + d) as f64).sqrt();
        let mut r = rng.split(&format!("{modality}.pfn.block{}", k + 1));
        let weight = tape.push(
            format!("block{}.weight", k + 1),
            r.uniform_matrix(fan_in, d, -bound, bound),
        )?;
        let bias = tape.push(format!("block{}.bias", k + 1), Matrix2D::zeros(1, d))?;
        blocks.push(BlockIds { weight, bias });
        prev = d;
    }
    Ok(PfnParams {
        modality,
        kind,
        input_dim,
        dims,
        blocks: [blocks[0], blocks[1], blocks[2]],
        tape,
    })
}

impl PfnParams {
    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
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

    /// Weight matrix of block `k` in 1..=3.
    pub fn weight(&self, k: usize) -> &Matrix2D {
        self.tape.value(self.blocks[k - 1].weight)
    }

    pub fn bias(&self, k: usize) -> &Matrix2D {
        self.tape.value(self.blocks[k - 1].bias)
    }

    pub fn set_block(&mut self, k: usize, weight: Matrix2D, bias: Matrix2D) -> Result<()> {
        let ids = self.blocks[k - 1];
        let (w, b) = (self.tape.value(ids.weight), self.tape.value(ids.bias));
        if w.shape() != weight.shape() {
            return Err(LemofError::dim("set_block", w.shape(), weight.shape()));
        }
        if b.shape() != bias.shape() {
            return Err(LemofError::dim("set_block", b.shape(), bias.shape()));
        }
        *self.tape.value_mut(ids.weight) = weight;
        *self.tape.value_mut(ids.bias) = bias;
        Ok(())
    }

    /// Token counts of the three levels for an input of `input_tokens` rows.
    pub fn level_token_counts(&self, input_tokens: usize) -> [usize; LEVELS] {
        let mut t = input_tokens;
        let mut out = [0; LEVELS];
        for slot in out.iter_mut() {
            if self.kind == BackboneKind::SignalConv {
                t = unfold_len(t, CONV_KERNEL, CONV_STRIDE, CONV_PAD);
            }
            *slot = t;
        }
        out
    }

    pub fn check_input(&self, x: &TokenSeq) -> Result<()> {
        let ok = match self.kind {
            BackboneKind::TabularMlp => x.rows() == 1 && x.cols() == self.input_dim,
            BackboneKind::SignalConv => x.rows() > 0 && x.cols() == self.input_dim,
        };
        if ok {
            Ok(())
        } else {
            let expected = match self.kind {
                BackboneKind::TabularMlp => (1, self.input_dim),
                BackboneKind::SignalConv => (x.rows().max(1), self.input_dim),
            };
            Err(LemofError::dim("pfn_forward", expected, x.shape()))
        }
    }

    /// Records the three blocks on `graph`, returning the level nodes.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        input: NodeId,
    ) -> Result<[NodeId; LEVELS]> {
        self.forward_graph_with(graph, bound, input, false)
    }

    /// Like [`Self::forward_graph`], but with `detach` each block sees its
    /// input as a constant, so a loss on level `k` trains block `k` only.
    pub fn forward_graph_with(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        input: NodeId,
        detach: bool,
    ) -> Result<[NodeId; LEVELS]> {
        self.check_input(graph.value(input))?;
        let mut h = input;
        let mut out = [input; LEVELS];
        for (k, ids) in self.blocks.iter().enumerate() {
            if detach && k > 0 {
                h = graph.detach(h);
            }
            let x = match self.kind {
                BackboneKind::TabularMlp => h,
                BackboneKind::SignalConv => graph.unfold1d(h, CONV_KERNEL, CONV_STRIDE, CONV_PAD),
            };
            let z = graph.matmul(x, bound.node(ids.weight))?;
            let z = graph.add_row(z, bound.node(ids.bias))?;
            h = graph.relu(z);
            out[k] = h;
        }
        Ok(out)
    }
}

/// Runs the encoder on one input.
pub fn pfn_forward(x: &TokenSeq, params: &PfnParams) -> Result<LevelStack> {
    let mut g = Graph::new();
    let bound = params.tape.bind(&mut g);
    let input = g.leaf(x.clone());
    let nodes = params.forward_graph(&mut g, &bound, input)?;
    Ok(LevelStack {
        modality: params.modality,
        levels: nodes.iter().map(|&n| g.value(n).clone()).collect(),
    })
}
