//! Edge-aware graph encoders.
//!
//! Every variant except RGCN shares one layer shape:
//!
//! ```text
//! m_ij  = (Θ x_j) ‖ e_ij                       message, width d + r
//! a_i   = AGG_{j ∈ N(i)} α_ij m_ij             aggregate
//! x_i'  = relu(U a_i + W x_i + b)              update, back to width d
//! ```
//!
//! and the variants differ only in `α_ij`. RGCN replaces the concatenation
//! with one `Θ_r` per relation. The readout is
//! `W [mean_i x_i ‖ x_head ‖ x_tail] + b`.

mod graph;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use relchain_tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use graph::GraphBatch;

use crate::batch::{Batch, NUM_CLASSES, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::kb::NUM_RELATIONS;

const LEAKY_SLOPE: f64 = 0.2;
const COS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EgnnVariant {
    Gcn,
    Gat,
    Sgcn,
    Agnn,
    Rgcn,
}

impl EgnnVariant {
    pub const ALL: [EgnnVariant; 5] = [
        EgnnVariant::Gcn,
        EgnnVariant::Gat,
        EgnnVariant::Sgcn,
        EgnnVariant::Agnn,
        EgnnVariant::Rgcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EgnnVariant::Gcn => "gcn",
            EgnnVariant::Gat => "gat",
            EgnnVariant::Sgcn => "sgcn",
            EgnnVariant::Agnn => "agnn",
            EgnnVariant::Rgcn => "rgcn",
        }
    }
}

impl fmt::Display for EgnnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EgnnVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EgnnVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown graph variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgnnConfig {
    pub variant: EgnnVariant,
    pub emb_dim: usize,
    pub layers: usize,
    /// Attention heads (GAT only); head weights are averaged.
    pub heads: usize,
    /// Overrides the variant's default aggregation (ignored by RGCN).
    pub aggregation: Option<Aggregation>,
}

impl Default for EgnnConfig {
    fn default() -> Self {
        EgnnConfig {
            variant: EgnnVariant::Gcn,
            emb_dim: 100,
            layers: 3,
            heads: 1,
            aggregation: None,
        }
    }
}

impl EgnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config(
                "emb_dim, layers and heads must be positive".into(),
            ));
        }
        Ok(())
    }

    fn aggregation(&self) -> Aggregation {
        self.aggregation.unwrap_or(Aggregation::Sum)
    }
}

/// `(Θ x_j) ‖ e_ij` for every row of `x_j` and `e_ij`.
pub fn message(tape: &mut Tape, x_j: Var, e_ij: Var, theta: Var) -> Result<Var> {
    let p = tape.matmul(x_j, theta)?;
    Ok(tape.concat(&[p, e_ij], 1)?)
}

/// Combines message rows into their destination rows. Rows with no
/// incoming message get zeros.
pub fn aggregate(
    tape: &mut Tape,
    messages: Var,
    dst: &[usize],
    num_nodes: usize,
    mode: Aggregation,
) -> Result<Var> {
    match mode {
        Aggregation::Sum => Ok(tape.scatter_add_rows(messages, dst, num_nodes)?),
        Aggregation::Mean => {
            let sum = tape.scatter_add_rows(messages, dst, num_nodes)?;
            let mut deg = vec![0.0; num_nodes];
            for &d in dst {
                deg[d] += 1.0;
            }
            let inv = deg.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
            let inv = tape.constant(Tensor::new(&[num_nodes], inv)?);
            Ok(tape.mul_col(sum, inv)?)
        }
        Aggregation::Max => Ok(tape.segment_max(messages, dst, num_nodes)?),
    }
}

/// `act(agg U + x W + b)`; `relu` selects the activation.
pub fn update(
    tape: &mut Tape,
    x_i: Var,
    agg: Var,
    u: Var,
    w_self: Var,
    bias: Var,
    relu: bool,
) -> Result<Var> {
    let a = tape.matmul(agg, u)?;
    let s = tape.matmul(x_i, w_self)?;
    let z = tape.add(a, s)?;
    let z = tape.add_bias(z, bias)?;
    Ok(if relu { tape.relu(z) } else { z })
}

#[derive(Clone, Debug)]
struct Layer {
    theta: ParamId,
    update: Option<ParamId>,
    self_w: Option<ParamId>,
    bias: ParamId,
    attn: Option<ParamId>,
    beta: Option<ParamId>,
    rel: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct EgnnModel {
    config: EgnnConfig,
    params: ParamStore,
    node_emb: ParamId,
    layers: Vec<Layer>,
    readout_w: ParamId,
    readout_b: ParamId,
}

impl EgnnModel {
    pub fn new(config: EgnnConfig, rng: &mut impl Rng) -> Result<EgnnModel> {
        config.validate()?;
        let d = config.emb_dim;
        let r = NUM_RELATIONS;
        let mut p = ParamStore::new();
        let node_emb = p.add("node_emb", &[NUM_SLOTS, d], Init::Uniform(1.0), rng)?;
        let w = |fan_in| Init::ScaledUniform { fan_in };
        // SGCN reuses one propagation matrix set for every step
        let distinct = match config.variant {
            EgnnVariant::Sgcn => 1,
            _ => config.layers,
        };
        let mut layers = Vec::with_capacity(distinct);
        for l in 0..distinct {
            let name = |s: &str| format!("layer{l}.{s}");
            let layer = if config.variant == EgnnVariant::Rgcn {
                let rel = (0..r)
                    .map(|k| p.add(name(&format!("rel{k}")), &[d, d], w(d), rng))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Layer {
                    theta: p.add(name("root"), &[d, d], w(d), rng)?,
                    update: None,
                    self_w: None,
                    bias: p.add(name("bias"), &[d], Init::Zeros, rng)?,
                    attn: None,
                    beta: None,
                    rel,
                }
            } else {
                let theta = p.add(name("theta"), &[d, d], w(d), rng)?;
                let update = p.add(name("update"), &[d + r, d], w(d + r), rng)?;
                let self_w = p.add(name("self"), &[d, d], w(d), rng)?;
                let bias = p.add(name("bias"), &[d], Init::Zeros, rng)?;
                let attn = match config.variant {
                    EgnnVariant::Gat => Some(p.add(
                        name("attn"),
                        &[2 * d + r, config.heads],
                        w(2 * d + r),
                        rng,
                    )?),
                    _ => None,
                };
                let beta = match config.variant {
                    EgnnVariant::Agnn => Some(p.add(name("beta"), &[1], Init::Constant(1.0), rng)?),
                    _ => None,
                };
                Layer {
                    theta,
                    update: Some(update),
                    self_w: Some(self_w),
                    bias,
                    attn,
                    beta,
                    rel: Vec::new(),
                }
            };
            layers.push(layer);
        }
        let readout_w = p.add("readout.w", &[3 * d, NUM_CLASSES], w(3 * d), rng)?;
        let readout_b = p.add("readout.b", &[NUM_CLASSES], Init::Zeros, rng)?;
        Ok(EgnnModel {
            config,
            params: p,
            node_emb,
            layers,
            readout_w,
            readout_b,
        })
    }

    pub fn config(&self) -> &EgnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Node states after all layers, `[B * N, emb_dim]`; padding rows are zero.
    pub fn encode_graph(&self, tape: &mut Tape, g: &GraphBatch) -> Result<Var> {
        self.encode_with(tape, &self.params, g)
    }

    fn encode_with(&self, tape: &mut Tape, p: &ParamStore, g: &GraphBatch) -> Result<Var> {
        let rows = g.num_rows();
        let mask = tape.constant(Tensor::new(&[rows], g.node_mask.clone())?);
        let table = tape.param(p, self.node_emb);
        let h0 = tape.gather_rows(table, &g.node_slots)?;
        let mut h = tape.mul_col(h0, mask)?;
        let attr = tape.constant(g.edge_attr());
        let gcn_norm = match self.config.variant {
            EgnnVariant::Gcn | EgnnVariant::Sgcn => {
                let deg = g.in_degree();
                let w: Vec<f64> = g
                    .edge_src
                    .iter()
                    .zip(&g.edge_dst)
                    .map(|(&s, &d)| 1.0 / (((deg[s] + 1) * (deg[d] + 1)) as f64).sqrt())
                    .collect();
                Some(tape.constant(Tensor::new(&[w.len()], w)?))
            }
            _ => None,
        };
        for step in 0..self.config.layers {
            let layer = &self.layers[step.min(self.layers.len() - 1)];
            h = match self.config.variant {
                EgnnVariant::Rgcn => self.rgcn_layer(tape, p, layer, h, g)?,
                v => {
                    let relu = v != EgnnVariant::Sgcn;
                    self.generic_layer(tape, p, layer, h, g, attr, gcn_norm, relu)?
                }
            };
            h = tape.mul_col(h, mask)?;
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn generic_layer(
        &self,
        tape: &mut Tape,
        p: &ParamStore,
        layer: &Layer,
        h: Var,
        g: &GraphBatch,
        attr: Var,
        gcn_norm: Option<Var>,
        relu: bool,
    ) -> Result<Var> {
        let rows = g.num_rows();
        let theta = tape.param(p, layer.theta);
        let u = tape.param(p, layer.update.expect("update matrix"));
        let w_self = tape.param(p, layer.self_w.expect("self matrix"));
        let bias = tape.param(p, layer.bias);
        let agg = if g.num_edges() == 0 {
            tape.constant(Tensor::zeros(&[rows, self.config.emb_dim + NUM_RELATIONS]))
        } else {
            let projected = tape.matmul(h, theta)?;
            let sent = tape.gather_rows(projected, &g.edge_src)?;
            let msg = tape.concat(&[sent, attr], 1)?;
            let mode = self.config.aggregation();
            match self.config.variant {
                EgnnVariant::Gcn | EgnnVariant::Sgcn => {
                    let weighted = tape.mul_col(msg, gcn_norm.expect("gcn weights"))?;
                    aggregate(tape, weighted, &g.edge_dst, rows, mode)?
                }
                EgnnVariant::Gat => {
                    let a = tape.param(p, layer.attn.expect("gat attention"));
                    let recv = tape.gather_rows(projected, &g.edge_dst)?;
                    let feats = tape.concat(&[recv, sent, attr], 1)?;
                    let scores = tape.matmul(feats, a)?;
                    let scores = tape.leaky_relu(scores, LEAKY_SLOPE);
                    let alpha = tape.segment_softmax(scores, &g.edge_dst, rows)?;
                    self.attend(tape, msg, alpha, g, mode)?
                }
                EgnnVariant::Agnn => {
                    let beta = tape.param(p, layer.beta.expect("agnn beta"));
                    let unit = tape.l2_normalize_rows(h, COS_EPS)?;
                    let ui = tape.gather_rows(unit, &g.edge_dst)?;
                    let uj = tape.gather_rows(unit, &g.edge_src)?;
                    let prod = tape.mul(ui, uj)?;
                    let cos = tape.reduce_sum(prod, 1)?;
                    let scaled = tape.mul_scalar(cos, beta)?;
                    let scores = tape.reshape(scaled, &[g.num_edges(), 1])?;
                    let alpha = tape.segment_softmax(scores, &g.edge_dst, rows)?;
                    self.attend(tape, msg, alpha, g, mode)?
                }
                EgnnVariant::Rgcn => unreachable!("rgcn has its own layer"),
            }
        };
        update(tape, h, agg, u, w_self, bias, relu)
    }

    /// Aggregates `msg` under per-head weights `alpha` (`[E, H]`), averaging heads.
    fn attend(
        &self,
        tape: &mut Tape,
        msg: Var,
        alpha: Var,
        g: &GraphBatch,
        mode: Aggregation,
    ) -> Result<Var> {
        let heads = tape.shape(alpha)[1];
        let mut total: Option<Var> = None;
        for hd in 0..heads {
            let a = tape.slice(alpha, 1, hd, 1)?;
            let weighted = tape.mul_col(msg, a)?;
            let agg = aggregate(tape, weighted, &g.edge_dst, g.num_rows(), mode)?;
            total = Some(match total {
                None => agg,
                Some(t) => tape.add(t, agg)?,
            });
        }
        let total = total.expect("at least one head");
        Ok(if heads > 1 {
            tape.affine(total, 1.0 / heads as f64, 0.0)
        } else {
            total
        })
    }

    fn rgcn_layer(
        &self,
        tape: &mut Tape,
        p: &ParamStore,
        layer: &Layer,
        h: Var,
        g: &GraphBatch,
    ) -> Result<Var> {
        let root = tape.param(p, layer.theta);
        let bias = tape.param(p, layer.bias);
        let mut z = tape.matmul(h, root)?;
        for (r, &wid) in layer.rel.iter().enumerate() {
            let edges: Vec<usize> = (0..g.num_edges()).filter(|&e| g.edge_rel[e] == r).collect();
            if edges.is_empty() {
                // bind anyway so every parameter receives a (zero) gradient
                tape.param(p, wid);
                continue;
            }
            let src: Vec<usize> = edges.iter().map(|&e| g.edge_src[e]).collect();
            let dst: Vec<usize> = edges.iter().map(|&e| g.edge_dst[e]).collect();
            let w = tape.param(p, wid);
            let xs = tape.gather_rows(h, &src)?;
            let m = tape.matmul(xs, w)?;
            let agg = tape.scatter_add_rows(m, &dst, g.num_rows())?;
            z = tape.add(z, agg)?;
        }
        let z = tape.add_bias(z, bias)?;
        Ok(tape.relu(z))
    }

    /// `[B, NUM_CLASSES]` logits from node states.
    pub fn readout(&self, tape: &mut Tape, h: Var, g: &GraphBatch) -> Result<Var> {
        self.readout_with(tape, &self.params, h, g)
    }

    fn readout_with(&self, tape: &mut Tape, p: &ParamStore, h: Var, g: &GraphBatch) -> Result<Var> {
        for (b, &(hd, tl)) in g.query_index.iter().enumerate() {
            if g.node_mask[hd] == 0.0 || g.node_mask[tl] == 0.0 {
                return Err(Error::Batch(format!("query of graph {b} points at padding")));
            }
        }
        let summed = tape.scatter_add_rows(h, &g.node_graph(), g.batch_size)?;
        let inv: Vec<f64> = g.node_counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let inv = tape.constant(Tensor::new(&[g.batch_size], inv)?);
        let mean = tape.mul_col(summed, inv)?;
        let heads: Vec<usize> = g.query_index.iter().map(|q| q.0).collect();
        let tails: Vec<usize> = g.query_index.iter().map(|q| q.1).collect();
        let eh = tape.gather_rows(h, &heads)?;
        let et = tape.gather_rows(h, &tails)?;
        let feats = tape.concat(&[mean, eh, et], 1)?;
        let w = tape.param(p, self.readout_w);
        let b = tape.param(p, self.readout_b);
        let z = tape.matmul(feats, w)?;
        Ok(tape.add_bias(z, b)?)
    }

    pub fn forward_graph(&self, tape: &mut Tape, g: &GraphBatch) -> Result<Var> {
        self.forward_with(tape, &self.params, g)
    }

    /// Forward pass with an explicit parameter store of the same layout;
    /// used by finite-difference checks.
    pub fn forward_with(&self, tape: &mut Tape, p: &ParamStore, g: &GraphBatch) -> Result<Var> {
        let h = self.encode_with(tape, p, g)?;
        self.readout_with(tape, p, h, g)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        self.forward_graph(tape, &GraphBatch::from_batch(batch)?)
    }
}
