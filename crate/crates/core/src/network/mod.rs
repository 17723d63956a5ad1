//! Multi-head bidirectional LSTM acoustic model.
//!
//! `N` stacked BLSTM layers read the feature sequence; each layer runs a
//! left-to-right and a right-to-left LSTM from zero state and stacks their
//! outputs column-wise. `S` independent linear + softmax heads then map the
//! top layer to per-stream senone posteriors.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{row_softmax, Graph, Matrix, NodeId};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const INIT_RANGE: f64 = 0.05;
const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Cells per direction per layer.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_streams: usize,
    pub num_senones: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 40,
            hidden_dim: 64,
            num_layers: 2,
            num_streams: 2,
            num_senones: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Four BLSTM layers of 768 cells over 40-dim features, two streams and
    /// roughly 4K tied states.
    pub fn full_scale() -> Self {
        ModelConfig {
            feat_dim: 40,
            hidden_dim: 768,
            num_layers: 4,
            num_streams: 2,
            num_senones: 4000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feat_dim", self.feat_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_streams", self.num_streams),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if self.num_senones < 2 {
            return Err(Error::validation(
                "num_senones must be at least 2 (silence plus one speech state)",
            ));
        }
        Ok(())
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.feat_dim
        } else {
            2 * self.hidden_dim
        }
    }
}

/// One direction of one layer. Gate columns are laid out `[i | f | g | o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_weight: Matrix,
    pub recurrent_weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayerParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub layers: Vec<BlstmLayerParams>,
    pub heads: Vec<HeadParams>,
}

impl LstmParams {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            input_weight: Matrix::zeros(input_dim, 4 * hidden),
            recurrent_weight: Matrix::zeros(hidden, 4 * hidden),
            bias: Matrix::zeros(1, 4 * hidden),
        }
    }
}

impl ModelParams {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let layers = (0..config.num_layers)
            .map(|l| {
                let d = config.layer_input_dim(l);
                BlstmLayerParams {
                    forward: LstmParams::zeros(d, h),
                    backward: LstmParams::zeros(d, h),
                }
            })
            .collect();
        let heads = (0..config.num_streams)
            .map(|_| HeadParams {
                weight: Matrix::zeros(2 * h, config.num_senones),
                bias: Matrix::zeros(1, config.num_senones),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter matrices in declaration order: per layer the forward then
    /// backward direction (input weight, recurrent weight, bias), then per
    /// head (weight, bias).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for dir in [&layer.forward, &layer.backward] {
                out.extend([&dir.input_weight, &dir.recurrent_weight, &dir.bias]);
            }
        }
        for head in &self.heads {
            out.extend([&head.weight, &head.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for dir in [&mut layer.forward, &mut layer.backward] {
                out.push(&mut dir.input_weight);
                out.push(&mut dir.recurrent_weight);
                out.push(&mut dir.bias);
            }
        }
        for head in &mut self.heads {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    /// Names matching [`ModelParams::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            for dir in ["fwd", "bwd"] {
                for t in ["input_weight", "recurrent_weight", "bias"] {
                    out.push(format!("layer{l}.{dir}.{t}"));
                }
            }
        }
        for s in 0..self.heads.len() {
            out.push(format!("head{s}.weight"));
            out.push(format!("head{s}.bias"));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Flattened copy of every parameter in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for m in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::validation(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn swap_heads(&mut self, a: usize, b: usize) {
        self.heads.swap(a, b);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

/// Seeded initialization: weights uniform in ±0.05, biases zero except the
/// LSTM forget-gate block which is set to 1.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_dim;
    for layer in &mut params.layers {
        for dir in [&mut layer.forward, &mut layer.backward] {
            fill_uniform(&mut dir.input_weight, &mut rng);
            fill_uniform(&mut dir.recurrent_weight, &mut rng);
            dir.bias.as_mut_slice()[h..2 * h].fill(FORGET_BIAS);
        }
    }
    for head in &mut params.heads {
        fill_uniform(&mut head.weight, &mut rng);
    }
    Ok(params)
}

fn fill_uniform(m: &mut Matrix, rng: &mut ChaCha8Rng) {
    for x in m.as_mut_slice() {
        *x = rng.random_range(-INIT_RANGE..INIT_RANGE);
    }
}

/// T×F features of one utterance (H₀ of the network).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub utterance_id: String,
}

impl FeatureSequence {
    pub fn new(frames: Matrix, utterance_id: impl Into<String>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::validation("feature sequence has no frames"));
        }
        if !frames.is_finite() {
            return Err(Error::validation("feature sequence has non-finite entries"));
        }
        Ok(FeatureSequence {
            frames,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Per-stream T×K posteriors together with their pre-softmax excitations.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStreams {
    pub logits: Vec<Matrix>,
    pub posteriors: Vec<Matrix>,
}

impl PosteriorStreams {
    pub fn from_logits(logits: Vec<Matrix>) -> Self {
        let posteriors = logits.iter().map(row_softmax).collect();
        PosteriorStreams { logits, posteriors }
    }

    /// Wraps externally supplied posteriors; logits are taken as `ln p`.
    pub fn from_probabilities(posteriors: Vec<Matrix>) -> Result<Self> {
        for (s, p) in posteriors.iter().enumerate() {
            for t in 0..p.rows() {
                let row = p.row(t);
                let total: f64 = row.iter().sum();
                if row.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || (total - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "stream {s} frame {t} is not a distribution"
                    )));
                }
            }
        }
        let logits = posteriors.iter().map(|p| p.map(f64::ln)).collect();
        Ok(PosteriorStreams { logits, posteriors })
    }

    pub fn num_streams(&self) -> usize {
        self.posteriors.len()
    }

    pub fn num_frames(&self) -> usize {
        self.posteriors.first().map_or(0, Matrix::rows)
    }
}

/// Graph handles of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub input_weight: NodeId,
    pub recurrent_weight: NodeId,
    pub bias: NodeId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub forward: BoundLstm,
    pub backward: BoundLstm,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Model parameters inserted into a graph as leaves.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub layers: Vec<BoundLayer>,
    pub heads: Vec<BoundHead>,
    /// Leaf ids in declaration order.
    pub ids: Vec<NodeId>,
}

pub fn bind_params(graph: &mut Graph, params: &ModelParams, trainable: bool) -> BoundModel {
    let h = params.config.hidden_dim;
    let mut ids = Vec::new();
    let mut leaf = |graph: &mut Graph, m: &Matrix| {
        let id = graph.leaf(m.clone(), trainable);
        ids.push(id);
        id
    };
    let mut bind_dir = |graph: &mut Graph, p: &LstmParams| BoundLstm {
        input_weight: leaf(graph, &p.input_weight),
        recurrent_weight: leaf(graph, &p.recurrent_weight),
        bias: leaf(graph, &p.bias),
        hidden: h,
    };
    let layers = params
        .layers
        .iter()
        .map(|l| BoundLayer {
            forward: bind_dir(graph, &l.forward),
            backward: bind_dir(graph, &l.backward),
        })
        .collect();
    let heads = params
        .heads
        .iter()
        .map(|hp| BoundHead {
            weight: leaf(graph, &hp.weight),
            bias: leaf(graph, &hp.bias),
        })
        .collect();
    BoundModel { layers, heads, ids }
}

/// Gate nonlinearities and state update given the full pre-activation
/// `x·W + h·U + b` (1×4H).
fn cell_update(
    graph: &mut Graph,
    preact: NodeId,
    c_prev: Option<NodeId>,
    hidden: usize,
) -> Result<(NodeId, NodeId)> {
    let i_pre = graph.slice_cols(preact, 0, hidden)?;
    let f_pre = graph.slice_cols(preact, hidden, hidden)?;
    let g_pre = graph.slice_cols(preact, 2 * hidden, hidden)?;
    let o_pre = graph.slice_cols(preact, 3 * hidden, hidden)?;
    let i = graph.sigmoid(i_pre);
    let g = graph.tanh(g_pre);
    let o = graph.sigmoid(o_pre);
    let ig = graph.mul(i, g)?;
    let c = match c_prev {
        Some(c_prev) => {
            let f = graph.sigmoid(f_pre);
            let fc = graph.mul(f, c_prev)?;
            graph.add(fc, ig)?
        }
        None => ig,
    };
    let tc = graph.tanh(c);
    let h = graph.mul(o, tc)?;
    Ok((h, c))
}

/// One LSTM step: `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step(
    graph: &mut Graph,
    lstm: &BoundLstm,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let xw = graph.matmul(x_t, lstm.input_weight)?;
    let hu = graph.matmul(h_prev, lstm.recurrent_weight)?;
    let sum = graph.add(xw, hu)?;
    let preact = graph.add_row(sum, lstm.bias)?;
    cell_update(graph, preact, Some(c_prev), lstm.hidden)
}

/// Runs one direction over a precomputed T×4H input projection and returns
/// the T×H hidden sequence in time order.
fn run_direction(
    graph: &mut Graph,
    lstm: &BoundLstm,
    projection: NodeId,
    reverse: bool,
) -> Result<NodeId> {
    let steps = graph.value(projection).rows();
    let mut outputs = Vec::with_capacity(steps);
    let mut state: Option<(NodeId, NodeId)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let x = graph.row(projection, t)?;
        let (preact, c_prev) = match state {
            Some((h, c)) => {
                let hu = graph.matmul(h, lstm.recurrent_weight)?;
                (graph.add(x, hu)?, Some(c))
            }
            // Zero initial state: h·U and f⊙c vanish.
            None => (x, None),
        };
        let next = cell_update(graph, preact, c_prev, lstm.hidden)?;
        outputs.push(next.0);
        state = Some(next);
    }
    if reverse {
        outputs.reverse();
    }
    graph.stack_rows(&outputs)
}

/// Bidirectional layer: T×d in, T×2H out (`[forward | backward]`).
pub fn blstm_layer(graph: &mut Graph, layer: &BoundLayer, input: NodeId) -> Result<NodeId> {
    if graph.value(input).rows() == 0 {
        return Err(Error::validation("empty input sequence"));
    }
    let mut halves = [None, None];
    for (slot, (lstm, reverse)) in halves
        .iter_mut()
        .zip([(&layer.forward, false), (&layer.backward, true)])
    {
        let xw = graph.matmul(input, lstm.input_weight)?;
        let projection = graph.add_row(xw, lstm.bias)?;
        *slot = Some(run_direction(graph, lstm, projection, reverse)?);
    }
    graph.concat_cols(halves[0].unwrap(), halves[1].unwrap())
}

/// Builds the full forward pass in `graph` and returns one T×K logit node per
/// output head.
pub fn forward_graph(
    graph: &mut Graph,
    model: &BoundModel,
    config: &ModelConfig,
    features: &FeatureSequence,
) -> Result<Vec<NodeId>> {
    if features.feat_dim() != config.feat_dim {
        return Err(Error::validation(format!(
            "utterance {} has {}-dim features, model expects {}",
            features.utterance_id,
            features.feat_dim(),
            config.feat_dim
        )));
    }
    let mut hidden = graph.constant(features.frames.clone());
    for layer in &model.layers {
        hidden = blstm_layer(graph, layer, hidden)?;
    }
    model
        .heads
        .iter()
        .map(|head| {
            let xw = graph.matmul(hidden, head.weight)?;
            graph.add_row(xw, head.bias)
        })
        .collect()
}

/// Inference-only forward pass.
pub fn forward(params: &ModelParams, features: &FeatureSequence) -> Result<PosteriorStreams> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, false);
    let heads = forward_graph(&mut graph, &bound, &params.config, features)?;
    let logits = heads.iter().map(|&id| graph.value(id).clone()).collect();
    Ok(PosteriorStreams::from_logits(logits))
}
