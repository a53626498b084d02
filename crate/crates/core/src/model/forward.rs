//! Layer operations and the batched forward pass.
//!
//! A batch stacks the vehicles of several scenes into one node matrix.
//! Graph edges never cross scenes and attention is masked block-diagonally,
//! so the only coupling between scenes is batch normalization statistics in
//! training mode.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{decoder_prefix, AttentionRecord, ModelConfig, ModelParams, PredictionSet, Predictor};
use crate::autograd::{BatchStats, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scene::{ActorInput, Point, PreparedScene, INPUT_DIM};
use crate::tensor::{Array2, ParamMap};

/// Scenes per evaluation-mode forward pass.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are returned for the caller to fold in.
    Train,
    /// Running statistics.
    Eval,
}

/// Parameters placed into a [`Graph`] as leaves.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Binds every parameter accepted by `include`; those accepted by
    /// `trainable` require gradients.
    pub fn bind(
        g: &mut Graph,
        params: &ParamMap,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let ids = params
            .iter()
            .filter(|(n, _)| include(n))
            .map(|(n, a)| (n.clone(), g.leaf(a.clone(), trainable(n))))
            .collect();
        Self { ids }
    }

    pub fn all(g: &mut Graph, params: &ParamMap, trainable: bool) -> Self {
        Self::bind(g, params, |_| true, |_| trainable)
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    /// Gradients of the bound parameters that require one.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> ParamMap {
        self.ids
            .iter()
            .filter(|(_, id)| g.requires_grad(**id))
            .map(|(n, id)| (n.clone(), grads.get_or_zeros(*id)))
            .collect()
    }
}

/// Directed edges `j -> i` for every ordered pair `i != j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edges {
    /// `i`, the node whose update the message feeds.
    pub receivers: Arc<[usize]>,
    /// `j`, the neighbour the message comes from.
    pub senders: Arc<[usize]>,
    /// `E x 2`, row `e` holds `τ_j − τ_i`.
    pub features: Array2,
}

impl Edges {
    pub fn len(&self) -> usize {
        self.receivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receivers.is_empty()
    }

    /// Disjoint union of per-scene complete graphs, node indices offset
    /// by the scene's first row.
    pub fn batched(scenes: &[&[Point]]) -> Self {
        let mut recv = Vec::new();
        let mut send = Vec::new();
        let mut feat = Vec::new();
        let mut offset = 0;
        for positions in scenes {
            let n = positions.len();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        recv.push(offset + i);
                        send.push(offset + j);
                        let e = positions[j] - positions[i];
                        feat.extend([e.x, e.y]);
                    }
                }
            }
            offset += n;
        }
        let features = Array2::from_vec(recv.len(), 2, feat).expect("two per edge");
        Self {
            receivers: recv.into(),
            senders: send.into(),
            features,
        }
    }
}

/// Fully connected interaction graph without self-loops.
pub fn build_graph(positions: &[Point]) -> Edges {
    Edges::batched(&[positions])
}

/// Runs the shared LSTM over every vehicle and returns the final hidden
/// states as an `N x H` matrix. Hidden and cell state start at zero.
pub fn encode_actors(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    inputs: &[&ActorInput],
) -> Result<NodeId> {
    let h = cfg.hidden;
    if let Some(bad) = inputs.iter().find(|a| a.steps.len() != cfg.history_steps) {
        return Err(Error::shape(
            "encode-actors",
            format!(
                "input of {} steps, model expects {}",
                bad.steps.len(),
                cfg.history_steps
            ),
        ));
    }
    let w_ih = p.id("encoder/w_ih")?;
    let w_hh = p.id("encoder/w_hh")?;
    let b_ih = p.id("encoder/b_ih")?;
    let b_hh = p.id("encoder/b_hh")?;
    let bias = g.add(b_ih, b_hh)?;
    let n = inputs.len();
    let mut hidden: Option<NodeId> = None;
    let mut cell: Option<NodeId> = None;
    for t in 0..cfg.history_steps {
        let mut x = Array2::zeros(n, INPUT_DIM);
        for (r, a) in inputs.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&a.steps[t]);
        }
        let x = g.constant(x);
        let xw = g.matmul(x, w_ih)?;
        let mut gates = g.add(xw, bias)?;
        if let Some(hp) = hidden {
            let hw = g.matmul(hp, w_hh)?;
            gates = g.add(gates, hw)?;
        }
        let i = g.slice_cols(gates, 0, h)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, h, h)?;
        let f = g.sigmoid(f);
        let c_in = g.slice_cols(gates, 2 * h, h)?;
        let c_in = g.tanh(c_in);
        let o = g.slice_cols(gates, 3 * h, h)?;
        let o = g.sigmoid(o);
        let ic = g.mul(i, c_in)?;
        let c = match cell {
            Some(cp) => {
                let fc = g.mul(f, cp)?;
                g.add(fc, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(c);
        hidden = Some(g.mul(o, tc)?);
        cell = Some(c);
    }
    hidden.ok_or_else(|| Error::shape("encode-actors", "empty history"))
}

/// One crystal graph convolution, before normalization:
/// `v_i + Σ_j sigmoid(z_ij W_f + b_f) ⊙ softplus(z_ij W_s + b_s)` with
/// `z_ij = (v_i ‖ v_j ‖ e_ij)`.
pub fn cgconv_layer(
    g: &mut Graph,
    p: &BoundParams,
    layer: usize,
    v: NodeId,
    edges: &Edges,
) -> Result<NodeId> {
    let n = g.value(v).rows();
    let vi = g.gather_rows(v, edges.receivers.clone())?;
    let vj = g.gather_rows(v, edges.senders.clone())?;
    let e = g.constant(edges.features.clone());
    let z = g.concat_cols(&[vi, vj, e])?;
    let wf = p.id(&format!("gnn{layer}/w_f"))?;
    let bf = p.id(&format!("gnn{layer}/b_f"))?;
    let ws = p.id(&format!("gnn{layer}/w_s"))?;
    let bs = p.id(&format!("gnn{layer}/b_s"))?;
    let zf = g.matmul(z, wf)?;
    let zf = g.add(zf, bf)?;
    let gate = g.sigmoid(zf);
    let zs = g.matmul(z, ws)?;
    let zs = g.add(zs, bs)?;
    let msg = g.softplus(zs);
    let gated = g.mul(gate, msg)?;
    let agg = g.scatter_add_rows(gated, edges.receivers.clone(), n)?;
    g.add(v, agg)
}

fn gnn_norm(
    g: &mut Graph,
    p: &BoundParams,
    model: &ModelParams,
    layer: usize,
    x: NodeId,
    mode: NormMode,
) -> Result<(NodeId, Option<BatchStats>)> {
    let gamma = p.id(&format!("gnn{layer}/bn_gamma"))?;
    let beta = p.id(&format!("gnn{layer}/bn_beta"))?;
    let eps = model.config.norm_eps;
    match mode {
        NormMode::Train => {
            let (y, stats) = g.batch_norm(x, gamma, beta, eps)?;
            Ok((y, Some(stats)))
        }
        NormMode::Eval => {
            let mean = buffer(model, &format!("gnn{layer}/bn_running_mean"))?;
            let var = buffer(model, &format!("gnn{layer}/bn_running_var"))?;
            Ok((g.fixed_norm(x, gamma, beta, mean, var, eps)?, None))
        }
    }
}

fn buffer<'a>(model: &'a ModelParams, name: &str) -> Result<&'a [f64]> {
    model
        .buffers
        .get(name)
        .map(Array2::data)
        .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
}

/// Multi-head scaled dot-product self-attention followed by the output
/// projection. `mask` (row-major `N x N`) restricts which nodes may attend
/// to which; `None` allows all pairs. Returns `A` and one weight node per head.
pub fn self_attention(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    v: NodeId,
    mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = cfg.head_dim();
    let project = |g: &mut Graph, which: &str| -> Result<NodeId> {
        let w = p.id(&format!("attention/w_{which}"))?;
        let b = p.id(&format!("attention/b_{which}"))?;
        let y = g.matmul(v, w)?;
        g.add(y, b)
    };
    let q = project(g, "q")?;
    let k = project(g, "k")?;
    let val = project(g, "v")?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(val, h * d, d)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = match mask {
            Some(m) => g.masked_row_softmax(scores, m)?,
            None => g.row_softmax(scores),
        };
        weights.push(w);
        heads.push(g.matmul(w, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let wo = p.id("attention/w_o")?;
    let bo = p.id("attention/b_o")?;
    let a = g.matmul(cat, wo)?;
    Ok((g.add(a, bo)?, weights))
}

/// Decoder `mode` on the rows of `a`: `relu(F(a) + a) W_dec + b_dec` with
/// `F = GN(relu(GN(a W_r2 + b_r2)) W_r1 + b_r1)`. Output is `rows x 2T_f`,
/// offsets from each vehicle's `t = 0` position, `(x_1, y_1, x_2, ...)`.
pub fn decode(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    mode: usize,
    a: NodeId,
) -> Result<NodeId> {
    let pre = decoder_prefix(mode);
    let id = |s: &str| p.id(&format!("{pre}{s}"));
    let eps = cfg.norm_eps;
    let groups = cfg.decoder_groups;
    let r = g.matmul(a, id("w_r2")?)?;
    let r = g.add(r, id("b_r2")?)?;
    let r = g.group_norm(r, id("gn2_gamma")?, id("gn2_beta")?, groups, eps)?;
    let r = g.relu(r);
    let r = g.matmul(r, id("w_r1")?)?;
    let r = g.add(r, id("b_r1")?)?;
    let r = g.group_norm(r, id("gn1_gamma")?, id("gn1_beta")?, groups, eps)?;
    let s = g.add(r, a)?;
    let s = g.relu(s);
    let o = g.matmul(s, id("w_dec")?)?;
    g.add(o, id("b_dec")?)
}

pub struct ForwardOutput {
    /// First row of each scene in the stacked node matrix, plus the total.
    pub offsets: Vec<usize>,
    /// `N_total x H` node features after the GNN.
    pub gnn_features: NodeId,
    /// `N_total x H` features fed to the decoders.
    pub node_features: NodeId,
    /// `B x H`, one target row per scene.
    pub target_features: NodeId,
    /// `(decoder index, B x 2T_f offsets)` for each requested decoder.
    pub predictions: Vec<(usize, NodeId)>,
    /// Per-head `N_total x N_total` weights (empty without attention).
    pub attention: Vec<NodeId>,
    /// `(gnn layer, statistics)` for each training-mode batch normalization.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl ForwardOutput {
    /// Per-scene attention blocks.
    pub fn attention_records(&self, g: &Graph) -> Vec<AttentionRecord> {
        if self.attention.is_empty() {
            return Vec::new();
        }
        self.offsets
            .windows(2)
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                let heads = self
                    .attention
                    .iter()
                    .map(|&id| {
                        let full = g.value(id);
                        let mut block = Array2::zeros(hi - lo, hi - lo);
                        for r in lo..hi {
                            block.row_mut(r - lo).copy_from_slice(&full.row(r)[lo..hi]);
                        }
                        block
                    })
                    .collect();
                AttentionRecord::from_heads(heads)
            })
            .collect()
    }
}

/// Full network on a batch of target-local scenes.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    model: &ModelParams,
    scenes: &[&PreparedScene],
    mode: NormMode,
    decoders: &[usize],
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if scenes.is_empty() {
        return Err(Error::Data("forward pass on an empty batch".into()));
    }
    let mut offsets = Vec::with_capacity(scenes.len() + 1);
    let mut total = 0;
    for s in scenes {
        offsets.push(total);
        total += s.num_vehicles();
    }
    offsets.push(total);
    if let Some(bad) = scenes.iter().find(|s| s.num_vehicles() == 0) {
        return Err(Error::Data(format!("scene `{}` has no vehicles", bad.id)));
    }

    let inputs: Vec<&ActorInput> = scenes.iter().flat_map(|s| s.inputs.iter()).collect();
    let mut v = encode_actors(g, p, cfg, &inputs)?;

    let positions: Vec<&[Point]> = scenes.iter().map(|s| s.positions.as_slice()).collect();
    let edges = Edges::batched(&positions);
    let mut batch_stats = Vec::new();
    for layer in 0..cfg.gnn_layers {
        v = cgconv_layer(g, p, layer, v, &edges)?;
        if cfg.gnn_layer_normalized(layer) {
            let (y, stats) = gnn_norm(g, p, model, layer, v, mode)?;
            if let Some(s) = stats {
                batch_stats.push((layer, s));
            }
            v = g.relu(y);
        }
    }
    let gnn_features = v;

    let (node_features, attention) = if cfg.use_attention {
        let mask = (scenes.len() > 1).then(|| block_mask(&offsets));
        self_attention(g, p, cfg, v, mask.as_deref())?
    } else {
        (v, Vec::new())
    };

    let target_rows: Arc<[usize]> = offsets[..scenes.len()].to_vec().into();
    let target_features = g.gather_rows(node_features, target_rows)?;
    let predictions = decoders
        .iter()
        .map(|&m| Ok((m, decode(g, p, cfg, m, target_features)?)))
        .collect::<Result<_>>()?;

    Ok(ForwardOutput {
        offsets,
        gnn_features,
        node_features,
        target_features,
        predictions,
        attention,
        batch_stats,
    })
}

fn block_mask(offsets: &[usize]) -> Vec<bool> {
    let n = *offsets.last().expect("non-empty");
    let mut mask = vec![false; n * n];
    for w in offsets.windows(2) {
        for r in w[0]..w[1] {
            mask[r * n + w[0]..r * n + w[1]].fill(true);
        }
    }
    mask
}

impl ModelParams {
    /// Evaluation-mode predictions of decoders `0..k` (all when `None`)
    /// plus attention records, one per scene.
    pub fn predict_with_attention(
        &self,
        scenes: &[PreparedScene],
        k: Option<usize>,
    ) -> Result<Vec<(PredictionSet, Option<AttentionRecord>)>> {
        let k = k.unwrap_or(self.config.modes).min(self.config.modes);
        let decoders: Vec<usize> = (0..k).collect();
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let p = BoundParams::bind(
                &mut g,
                &self.params,
                |n| {
                    !super::is_decoder_param(n)
                        || decoders.iter().any(|&m| n.starts_with(&decoder_prefix(m)))
                },
                |_| false,
            );
            let refs: Vec<&PreparedScene> = chunk.iter().collect();
            let fo = forward(&mut g, &p, self, &refs, NormMode::Eval, &decoders)?;
            let mut records = fo.attention_records(&g).into_iter();
            for (b, scene) in chunk.iter().enumerate() {
                let modes = fo
                    .predictions
                    .iter()
                    .map(|&(_, id)| offsets_to_trajectory(g.value(id).row(b), scene.positions[0]))
                    .collect::<Result<Vec<_>>>()?;
                out.push((
                    PredictionSet {
                        modes,
                        transform: scene.transform,
                    },
                    records.next(),
                ));
            }
        }
        Ok(out)
    }

    /// Head-resolved attention of one scene (evaluation mode).
    pub fn attention_record(&self, scene: &PreparedScene) -> Result<AttentionRecord> {
        if !self.config.use_attention {
            return Err(Error::Config("model has no attention module".into()));
        }
        let (_, rec) = self
            .predict_with_attention(std::slice::from_ref(scene), Some(1))?
            .pop()
            .expect("one scene in, one out");
        Ok(rec.expect("attention enabled"))
    }

    /// Folds training-mode batch statistics into the running estimates.
    /// With `bn_unbiased_running_var` the variance is rescaled by `n / (n - 1)`.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (layer, s) in stats {
            let n = s.count as f64;
            let correction = if self.config.bn_unbiased_running_var && s.count > 1 {
                n / (n - 1.0)
            } else {
                1.0
            };
            if let Some(rm) = self.buffers.get_mut(&format!("gnn{layer}/bn_running_mean")) {
                for (r, v) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("gnn{layer}/bn_running_var")) {
                for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - m) * *r + m * v * correction;
                }
            }
        }
    }
}

/// `1 x 2T_f` offsets row to a `T_f x 2` trajectory starting from `origin`.
pub(crate) fn offsets_to_trajectory(row: &[f64], origin: Point) -> Result<Array2> {
    let mut a = Array2::from_vec(row.len() / 2, 2, row.to_vec())?;
    for r in 0..a.rows() {
        let p = a.row_mut(r);
        p[0] += origin.x;
        p[1] += origin.y;
    }
    Ok(a)
}

impl Predictor for ModelParams {
    fn num_modes(&self) -> usize {
        self.config.modes
    }

    fn predict(&self, scenes: &[PreparedScene]) -> Result<Vec<PredictionSet>> {
        Ok(self
            .predict_with_attention(scenes, None)?
            .into_iter()
            .map(|(p, _)| p)
            .collect())
    }
}
