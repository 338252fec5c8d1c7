//! The hybrid graph: counting and localization nodes at N scales, cross-scale
//! edges within a domain, cross-domain edges between same-scale nodes, one-shot
//! adapters predicting dynamic kernels across the domain gap, K iterations of
//! two-stage GRU updates, and the per-domain readout heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dfl::{
    back_end, front_end, init_back_end_params, init_front_end_params, init_node_states, DflConfig,
    Domain,
};
use crate::error::{Error, Result};
use crate::init::{add_conv, add_gru, add_linear};
use crate::ops::{ConvGruParams, ConvParams, LinearParams};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Tape, TensorId};

/// Graph topology and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridGraphConfig {
    /// Scale count: N nodes per domain.
    pub n: usize,
    /// Message passing iterations.
    pub k: usize,
    /// Node state channels.
    pub c: usize,
    /// When false the two domains never exchange messages (single-task graph).
    pub enable_cross_domain: bool,
    /// When false cross-domain relations fuse features directly, without the
    /// one-shot adapters.
    pub enable_adapter: bool,
    /// Weight of the localization loss term.
    pub lambda: f64,
}

impl HybridGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("scale count must be >= 1".into()));
        }
        if self.c == 0 {
            return Err(Error::InvalidArgument("node channels must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument(
                "loss weight lambda must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Full model configuration: feature extractor plus graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dfl: DflConfig,
    pub graph: HybridGraphConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dfl.validate()?;
        self.graph.validate()?;
        if self.dfl.scales.len() != self.graph.n {
            return Err(Error::InvalidArgument(format!(
                "scale list {:?} does not match N = {}",
                self.dfl.scales, self.graph.n
            )));
        }
        if self.dfl.node_channels != self.graph.c {
            return Err(Error::InvalidArgument(format!(
                "node_channels {} does not match C = {}",
                self.dfl.node_channels, self.graph.c
            )));
        }
        Ok(())
    }

    fn has_cross_scale(&self) -> bool {
        self.graph.k >= 1 && self.graph.n >= 2
    }

    fn has_cross_domain(&self) -> bool {
        self.graph.k >= 1 && self.graph.enable_cross_domain
    }

    fn has_adapter(&self) -> bool {
        self.has_cross_domain() && self.graph.enable_adapter
    }
}

/// One graph node: a domain, a 0-based scale index, and its feature map.
#[derive(Debug, Clone, Copy)]
pub struct NodeState {
    pub domain: Domain,
    pub scale: usize,
    pub h: TensorId,
}

impl NodeState {
    fn key(&self) -> (Domain, usize) {
        (self.domain, self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    CrossScale,
    CrossDomain,
}

/// A directed edge's embedding tensor plus its endpoints.
#[derive(Debug, Clone, Copy)]
pub struct EdgeEmbedding {
    pub kind: EdgeKind,
    pub source: (Domain, usize),
    pub target: (Domain, usize),
    pub e: TensorId,
}

/// One one-shot learner: global average pool over space, then a two-layer
/// perceptron emitting C² values reshaped to a `[C,C,1,1]` dynamic kernel.
#[derive(Debug, Clone, Copy)]
pub struct PerceptronParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// Adapters for one edge direction: the φ-network predicts the edge-embedding
/// kernel, the η-network predicts the message kernel.
#[derive(Debug, Clone, Copy)]
pub struct AdapterParams {
    pub phi: PerceptronParams,
    pub eta: PerceptronParams,
}

/// Tape-bound graph weights. Components absent under the configuration's
/// ablation switches are `None`.
pub struct GraphWeights {
    /// Cross-scale edge convolution, by domain; shared across scale pairs
    /// and iterations.
    pub cs_edge: [Option<ConvParams>; 2],
    /// 1×1 projection to the single-channel link-weight map, by domain.
    pub cs_gate: [Option<ConvParams>; 2],
    /// Cross-domain edge convolution, by source domain.
    pub cd_edge: [Option<ConvParams>; 2],
    /// 1×1 gate projection for cross-domain messages, by source domain.
    pub cd_gate: [Option<ConvParams>; 2],
    /// One-shot adapters, by source domain.
    pub adapters: [Option<AdapterParams>; 2],
    /// Stage-1 update GRU (cross-domain message), by updated domain.
    pub gru_stage1: [Option<ConvGruParams>; 2],
    /// Stage-2 update GRU (aggregated cross-scale message), by updated domain.
    pub gru_stage2: [Option<ConvGruParams>; 2],
    /// Readout heads, by domain.
    pub readout: [ConvParams; 2],
}

fn direction_name(source: Domain) -> &'static str {
    match source {
        Domain::Density => "from_density",
        Domain::Localization => "from_localization",
    }
}

impl GraphWeights {
    pub fn bind(bound: &BoundParams, cfg: &ModelConfig) -> Result<Self> {
        let mut w = GraphWeights {
            cs_edge: [None, None],
            cs_gate: [None, None],
            cd_edge: [None, None],
            cd_gate: [None, None],
            adapters: [None, None],
            gru_stage1: [None, None],
            gru_stage2: [None, None],
            readout: [
                bound.conv_same("readout.density", 1)?,
                bound.conv_same("readout.localization", 1)?,
            ],
        };
        for domain in Domain::BOTH {
            let i = domain.index();
            if cfg.has_cross_scale() {
                w.cs_edge[i] =
                    Some(bound.conv_same(&format!("graph.cs_edge.{}", domain.name()), 1)?);
                w.cs_gate[i] =
                    Some(bound.conv_same(&format!("graph.cs_gate.{}", domain.name()), 1)?);
                w.gru_stage2[i] = Some(bound.gru(&format!("graph.gru2.{}", domain.name()))?);
            }
            if cfg.has_cross_domain() {
                let dir = direction_name(domain);
                w.cd_edge[i] = Some(bound.conv_same(&format!("graph.cd_edge.{dir}"), 1)?);
                w.cd_gate[i] = Some(bound.conv_same(&format!("graph.cd_gate.{dir}"), 1)?);
                w.gru_stage1[i] = Some(bound.gru(&format!("graph.gru1.{}", domain.name()))?);
                if cfg.has_adapter() {
                    w.adapters[i] = Some(AdapterParams {
                        phi: PerceptronParams {
                            fc1: bound.linear(&format!("graph.adapter.{dir}.phi.fc1"))?,
                            fc2: bound.linear(&format!("graph.adapter.{dir}.phi.fc2"))?,
                        },
                        eta: PerceptronParams {
                            fc1: bound.linear(&format!("graph.adapter.{dir}.eta.fc1"))?,
                            fc2: bound.linear(&format!("graph.adapter.{dir}.eta.fc2"))?,
                        },
                    });
                }
            }
        }
        Ok(w)
    }
}

/// Build all model parameters for a configuration, seeded.
pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut set = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.graph.c;
    let hidden = 2 * c;

    init_front_end_params(&mut set, &mut rng, cfg.dfl.width_multiplier)?;
    for domain in Domain::BOTH {
        init_back_end_params(
            &mut set,
            &mut rng,
            domain,
            cfg.dfl.width_multiplier,
            cfg.dfl.node_channels,
        )?;
    }
    for domain in Domain::BOTH {
        if cfg.has_cross_scale() {
            add_conv(
                &mut set,
                &mut rng,
                &format!("graph.cs_edge.{}", domain.name()),
                c,
                c,
                3,
            )?;
            add_conv(
                &mut set,
                &mut rng,
                &format!("graph.cs_gate.{}", domain.name()),
                1,
                c,
                1,
            )?;
            add_gru(
                &mut set,
                &mut rng,
                &format!("graph.gru2.{}", domain.name()),
                c,
            )?;
        }
        if cfg.has_cross_domain() {
            let dir = direction_name(domain);
            add_conv(&mut set, &mut rng, &format!("graph.cd_edge.{dir}"), c, c, 3)?;
            add_conv(&mut set, &mut rng, &format!("graph.cd_gate.{dir}"), 1, c, 1)?;
            add_gru(
                &mut set,
                &mut rng,
                &format!("graph.gru1.{}", domain.name()),
                c,
            )?;
            if cfg.has_adapter() {
                for net in ["phi", "eta"] {
                    add_linear(
                        &mut set,
                        &mut rng,
                        &format!("graph.adapter.{dir}.{net}.fc1"),
                        hidden,
                        c,
                    )?;
                    add_linear(
                        &mut set,
                        &mut rng,
                        &format!("graph.adapter.{dir}.{net}.fc2"),
                        c * c,
                        hidden,
                    )?;
                }
            }
        }
    }
    for domain in Domain::BOTH {
        add_conv(
            &mut set,
            &mut rng,
            &format!("readout.{}", domain.name()),
            1,
            cfg.graph.n * c,
            1,
        )?;
    }
    Ok(set)
}

/// Predict a per-sample `[B,C,C,1,1]` dynamic kernel from a node state.
pub fn adapter_predict(
    tape: &mut Tape,
    h_source: TensorId,
    net: &PerceptronParams,
) -> Result<TensorId> {
    let shape = tape.shape(h_source)?.to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "adapter_predict expects [B,C,H,W], got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let pooled = tape.spatial_mean(h_source)?;
    let hidden = tape.linear(pooled, &net.fc1)?;
    let hidden = tape.relu(hidden)?;
    let flat = tape.linear(hidden, &net.fc2)?;
    let out_f = tape.shape(flat)?[1];
    if out_f != c * c {
        return Err(Error::ShapeMismatch(format!(
            "adapter must emit C² = {} values, emits {out_f}",
            c * c
        )));
    }
    tape.reshape(flat, &[b, c, c, 1, 1])
}

/// Cross-scale edge embedding `e = Conv(h_i − h_j)` from scale i to scale j
/// within one domain.
pub fn cross_scale_edge_embed(
    tape: &mut Tape,
    h_i: &NodeState,
    h_j: &NodeState,
    conv: &ConvParams,
) -> Result<EdgeEmbedding> {
    if h_i.domain != h_j.domain {
        return Err(Error::InvalidArgument(
            "cross-scale edges connect nodes of one domain".into(),
        ));
    }
    if h_i.scale == h_j.scale {
        return Err(Error::InvalidArgument(
            "cross-scale edges connect different scales".into(),
        ));
    }
    let diff = tape.sub(h_i.h, h_j.h)?;
    let e = tape.conv2d(diff, conv)?;
    Ok(EdgeEmbedding {
        kind: EdgeKind::CrossScale,
        source: h_i.key(),
        target: h_j.key(),
        e,
    })
}

/// Cross-domain edge embedding between same-scale nodes of the two domains.
/// With adapters the source state is first translated into the target domain
/// by a predicted dynamic kernel: `ĕ = Conv(θ*∗h_tgt − h_tgt)`,
/// `θ* = E_φ(h_src)`. Without adapters the source state fuses directly.
pub fn cross_domain_edge_embed(
    tape: &mut Tape,
    h_src: &NodeState,
    h_tgt: &NodeState,
    adapters: Option<&AdapterParams>,
    conv: &ConvParams,
) -> Result<EdgeEmbedding> {
    if h_src.domain == h_tgt.domain {
        return Err(Error::InvalidArgument(
            "cross-domain edges connect the two domains".into(),
        ));
    }
    if h_src.scale != h_tgt.scale {
        return Err(Error::InvalidArgument(
            "cross-domain edges connect nodes of one scale".into(),
        ));
    }
    let adapted = match adapters {
        Some(a) => {
            let kernel = adapter_predict(tape, h_src.h, &a.phi)?;
            tape.dynamic_conv(h_tgt.h, kernel)?
        }
        None => h_src.h,
    };
    let diff = tape.sub(adapted, h_tgt.h)?;
    let e = tape.conv2d(diff, conv)?;
    Ok(EdgeEmbedding {
        kind: EdgeKind::CrossDomain,
        source: h_src.key(),
        target: h_tgt.key(),
        e,
    })
}

/// Single-channel link weight in (0,1) from an edge embedding.
fn link_weight(tape: &mut Tape, e: TensorId, gate: &ConvParams) -> Result<TensorId> {
    let projected = tape.conv2d(e, gate)?;
    tape.sigmoid(projected)
}

/// Cross-scale message: the source state gated pixelwise by the link weight.
pub fn cross_scale_message(
    tape: &mut Tape,
    h_i: &NodeState,
    e: &EdgeEmbedding,
    gate: &ConvParams,
) -> Result<TensorId> {
    if e.kind != EdgeKind::CrossScale {
        return Err(Error::InvalidArgument(
            "cross_scale_message needs a cross-scale edge".into(),
        ));
    }
    if e.source != h_i.key() {
        return Err(Error::InvalidArgument(format!(
            "edge source {:?} does not match node {:?}",
            e.source,
            h_i.key()
        )));
    }
    let w = link_weight(tape, e.e, gate)?;
    tape.mul_broadcast_map(w, h_i.h)
}

/// Cross-domain message. With adapters, the gated source state drives the
/// η-network to predict a dynamic kernel applied to the target:
/// `ψ* = E_η(Sig(proj(ĕ)) ⊙ h_src)`, message `= ψ* ∗ h_tgt`. Without
/// adapters the gated source state itself is the message.
pub fn cross_domain_message(
    tape: &mut Tape,
    h_src: &NodeState,
    h_tgt: &NodeState,
    edge: &EdgeEmbedding,
    gate: &ConvParams,
    adapters: Option<&AdapterParams>,
) -> Result<TensorId> {
    if edge.kind != EdgeKind::CrossDomain {
        return Err(Error::InvalidArgument(
            "cross_domain_message needs a cross-domain edge".into(),
        ));
    }
    if edge.source != h_src.key() || edge.target != h_tgt.key() {
        return Err(Error::InvalidArgument(format!(
            "edge {:?}→{:?} does not match nodes {:?}→{:?}",
            edge.source,
            edge.target,
            h_src.key(),
            h_tgt.key()
        )));
    }
    let w = link_weight(tape, edge.e, gate)?;
    let gated = tape.mul_broadcast_map(w, h_src.h)?;
    match adapters {
        Some(a) => {
            let kernel = adapter_predict(tape, gated, &a.eta)?;
            tape.dynamic_conv(h_tgt.h, kernel)
        }
        None => Ok(gated),
    }
}

/// Two cascaded GRU updates: the cross-domain message first, then the
/// aggregated cross-scale message.
pub fn node_update_two_stage(
    tape: &mut Tape,
    node: &NodeState,
    cross_domain_msg: TensorId,
    cross_scale_msg: TensorId,
    gru1: &ConvGruParams,
    gru2: &ConvGruParams,
) -> Result<NodeState> {
    let intermediate = tape.conv_gru_step(node.h, cross_domain_msg, gru1)?;
    let updated = tape.conv_gru_step(intermediate, cross_scale_msg, gru2)?;
    Ok(NodeState {
        h: updated,
        ..*node
    })
}

fn check_state_roster(states: &[NodeState], n: usize) -> Result<()> {
    if states.len() != 2 * n {
        return Err(Error::InvalidArgument(format!(
            "propagate expects exactly {} node states, got {}",
            2 * n,
            states.len()
        )));
    }
    let mut seen = vec![false; 2 * n];
    for s in states {
        if s.scale >= n {
            return Err(Error::InvalidArgument(format!(
                "scale index {} out of range for N = {n}",
                s.scale
            )));
        }
        let slot = s.domain.index() * n + s.scale;
        if seen[slot] {
            return Err(Error::InvalidArgument(format!(
                "duplicate node ({}, scale {})",
                s.domain.name(),
                s.scale
            )));
        }
        seen[slot] = true;
    }
    Ok(())
}

/// K message-passing iterations over all 2N nodes. Each iteration updates
/// synchronously: stage 1 aggregates cross-domain messages computed from the
/// previous iteration's states, stage 2 aggregates cross-scale messages
/// computed from the intermediate states (mean over the N−1 sources).
pub fn propagate(
    tape: &mut Tape,
    states: Vec<NodeState>,
    cfg: &ModelConfig,
    weights: &GraphWeights,
) -> Result<Vec<NodeState>> {
    cfg.validate()?;
    let n = cfg.graph.n;
    check_state_roster(&states, n)?;
    let mut current = states;

    for _ in 0..cfg.graph.k {
        // Stage 1: cross-domain exchange between same-scale nodes.
        let intermediate = if cfg.graph.enable_cross_domain {
            let mut mid = Vec::with_capacity(current.len());
            for node in &current {
                let src_domain = node.domain.other();
                let src = current
                    .iter()
                    .find(|s| s.domain == src_domain && s.scale == node.scale)
                    .expect("roster checked");
                let d = src_domain.index();
                let edge = cross_domain_edge_embed(
                    tape,
                    src,
                    node,
                    weights.adapters[d].as_ref(),
                    weights.cd_edge[d].as_ref().expect("cross-domain weights"),
                )?;
                let msg = cross_domain_message(
                    tape,
                    src,
                    node,
                    &edge,
                    weights.cd_gate[d].as_ref().expect("cross-domain weights"),
                    weights.adapters[d].as_ref(),
                )?;
                let gru1 = weights.gru_stage1[node.domain.index()]
                    .as_ref()
                    .expect("stage-1 GRU");
                let h = tape.conv_gru_step(node.h, msg, gru1)?;
                mid.push(NodeState { h, ..*node });
            }
            mid
        } else {
            current.clone()
        };

        // Stage 2: cross-scale exchange within each domain.
        if n >= 2 {
            let mut next = Vec::with_capacity(intermediate.len());
            for node in &intermediate {
                let d = node.domain.index();
                let cs_edge = weights.cs_edge[d].as_ref().expect("cross-scale weights");
                let cs_gate = weights.cs_gate[d].as_ref().expect("cross-scale weights");
                let mut agg: Option<TensorId> = None;
                for src in &intermediate {
                    if src.domain != node.domain || src.scale == node.scale {
                        continue;
                    }
                    let edge = cross_scale_edge_embed(tape, src, node, cs_edge)?;
                    let msg = cross_scale_message(tape, src, &edge, cs_gate)?;
                    agg = Some(match agg {
                        Some(acc) => tape.add(acc, msg)?,
                        None => msg,
                    });
                }
                let mean_msg =
                    tape.scale(agg.expect("N >= 2 has sources"), 1.0 / (n - 1) as f64)?;
                let gru2 = weights.gru_stage2[d].as_ref().expect("stage-2 GRU");
                let h = tape.conv_gru_step(node.h, mean_msg, gru2)?;
                next.push(NodeState { h, ..*node });
            }
            current = next;
        } else {
            current = intermediate;
        }
    }
    Ok(current)
}

/// Concatenate one domain's states in scale order and project to the
/// single-channel output map.
pub fn readout(tape: &mut Tape, states: &[NodeState], head: &ConvParams) -> Result<TensorId> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("readout needs node states".into()));
    }
    let domain = states[0].domain;
    if states.iter().any(|s| s.domain != domain) {
        return Err(Error::InvalidArgument(
            "readout states must share one domain".into(),
        ));
    }
    let mut ordered: Vec<&NodeState> = states.iter().collect();
    ordered.sort_by_key(|s| s.scale);
    for (expect, s) in ordered.iter().enumerate() {
        if s.scale != expect {
            return Err(Error::InvalidArgument(format!(
                "readout needs scales 0..{}, got {:?}",
                states.len(),
                ordered.iter().map(|s| s.scale).collect::<Vec<_>>()
            )));
        }
    }
    let ids: Vec<TensorId> = ordered.iter().map(|s| s.h).collect();
    let merged = tape.concat_channels(&ids)?;
    tape.conv2d(merged, head)
}

/// Full forward pass: image to the density map D and localization map L,
/// both `[B,1,H/8,W/8]`. The predicted count is the sum over D.
pub fn model_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    image: TensorId,
    cfg: &ModelConfig,
) -> Result<(TensorId, TensorId)> {
    cfg.validate()?;
    let weights = GraphWeights::bind(bound, cfg)?;
    let f_share = front_end(tape, bound, image, cfg.dfl.width_multiplier)?;

    let mut states = Vec::with_capacity(2 * cfg.graph.n);
    for domain in Domain::BOTH {
        let feats = back_end(tape, bound, f_share, domain, cfg.dfl.back_end_dilation)?;
        let pyramid = init_node_states(tape, feats, domain, &cfg.dfl)?;
        for (scale, h) in pyramid.states.into_iter().enumerate() {
            states.push(NodeState { domain, scale, h });
        }
    }

    let states = propagate(tape, states, cfg, &weights)?;

    let mut maps = [None, None];
    for domain in Domain::BOTH {
        let domain_states: Vec<NodeState> = states
            .iter()
            .filter(|s| s.domain == domain)
            .copied()
            .collect();
        let map = readout(tape, &domain_states, &weights.readout[domain.index()])?;
        maps[domain.index()] = Some(map);
    }
    Ok((maps[0].unwrap(), maps[1].unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_cfg(n: usize, k: usize) -> ModelConfig {
        ModelConfig {
            dfl: DflConfig {
                width_multiplier: 1.0 / 32.0,
                scales: crate::dfl::default_scales(n),
                node_channels: 2,
                back_end_dilation: 2,
            },
            graph: HybridGraphConfig {
                n,
                k,
                c: 2,
                enable_cross_domain: true,
                enable_adapter: true,
                lambda: 0.001,
            },
        }
    }

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| crate::init::uniform(&mut rng, -1.0, 1.0))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn node(tape: &mut Tape, domain: Domain, scale: usize, t: &Tensor) -> NodeState {
        NodeState {
            domain,
            scale,
            h: tape.input(t),
        }
    }

    fn conv_from(tape: &mut Tape, kernel: Tensor, bias: Tensor, dilation: usize) -> ConvParams {
        let k = kernel.shape()[2];
        ConvParams::same(tape.input(&kernel), tape.input(&bias), k, dilation)
    }

    /// Perceptron with zero weights whose second bias encodes a C×C matrix.
    fn bias_only_perceptron(tape: &mut Tape, c: usize, matrix: &[f64]) -> PerceptronParams {
        assert_eq!(matrix.len(), c * c);
        PerceptronParams {
            fc1: LinearParams {
                weight: tape.input(&Tensor::zeros(&[2 * c, c])),
                bias: tape.input(&Tensor::zeros(&[2 * c])),
            },
            fc2: LinearParams {
                weight: tape.input(&Tensor::zeros(&[c * c, 2 * c])),
                bias: tape.input(&Tensor::new(&[c * c], matrix.to_vec()).unwrap()),
            },
        }
    }

    fn identity_matrix(c: usize) -> Vec<f64> {
        let mut m = vec![0.0; c * c];
        for i in 0..c {
            m[i * c + i] = 1.0;
        }
        m
    }

    #[test]
    fn cross_scale_edge_of_equal_states_is_bias_map() {
        let mut tape = Tape::new();
        let t = rand_tensor(1, &[1, 2, 4, 4]);
        let a = node(&mut tape, Domain::Density, 0, &t);
        let b = node(&mut tape, Domain::Density, 1, &t);
        let conv = conv_from(
            &mut tape,
            rand_tensor(2, &[2, 2, 3, 3]),
            Tensor::new(&[2], vec![0.7, -0.3]).unwrap(),
            1,
        );
        let e = cross_scale_edge_embed(&mut tape, &a, &b, &conv).unwrap();
        let out = tape.value(e.e).unwrap();
        for c in 0..2 {
            let expect = if c == 0 { 0.7 } else { -0.3 };
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(out.at(&[0, c, h, w]), expect);
                }
            }
        }
    }

    #[test]
    fn cross_scale_edges_are_antisymmetric_before_the_conv() {
        // Conv is affine, so e(i,j) + e(j,i) must equal twice the bias map.
        let mut tape = Tape::new();
        let a = node(
            &mut tape,
            Domain::Density,
            0,
            &rand_tensor(3, &[1, 2, 4, 4]),
        );
        let b = node(
            &mut tape,
            Domain::Density,
            1,
            &rand_tensor(4, &[1, 2, 4, 4]),
        );
        let conv = conv_from(
            &mut tape,
            rand_tensor(5, &[2, 2, 3, 3]),
            Tensor::new(&[2], vec![0.2, -0.9]).unwrap(),
            1,
        );
        let e_ab = cross_scale_edge_embed(&mut tape, &a, &b, &conv).unwrap();
        let e_ba = cross_scale_edge_embed(&mut tape, &b, &a, &conv).unwrap();
        let sum = tape.add(e_ab.e, e_ba.e).unwrap();
        let out = tape.value(sum).unwrap();
        for c in 0..2 {
            let expect = 2.0 * if c == 0 { 0.2 } else { -0.9 };
            for h in 0..4 {
                for w in 0..4 {
                    assert!((out.at(&[0, c, h, w]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_scale_edge_rejects_bad_pairs() {
        let mut tape = Tape::new();
        let t = rand_tensor(6, &[1, 2, 4, 4]);
        let a = node(&mut tape, Domain::Density, 0, &t);
        let same_scale = node(&mut tape, Domain::Density, 0, &t);
        let other_domain = node(&mut tape, Domain::Localization, 1, &t);
        let conv = conv_from(
            &mut tape,
            rand_tensor(7, &[2, 2, 3, 3]),
            Tensor::zeros(&[2]),
            1,
        );
        assert!(cross_scale_edge_embed(&mut tape, &a, &same_scale, &conv).is_err());
        assert!(cross_scale_edge_embed(&mut tape, &a, &other_domain, &conv).is_err());
    }

    #[test]
    fn adapter_bias_only_identity_kernel_ignores_input() {
        let mut tape = Tape::new();
        let net = bias_only_perceptron(&mut tape, 2, &identity_matrix(2));
        for seed in [10, 11] {
            let h = tape.input(&rand_tensor(seed, &[1, 2, 4, 4]));
            let k = adapter_predict(&mut tape, h, &net).unwrap();
            let out = tape.value(k).unwrap();
            assert_eq!(out.shape(), &[1, 2, 2, 1, 1]);
            assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn adapter_with_random_weights_depends_on_input() {
        let mut tape = Tape::new();
        let net = PerceptronParams {
            fc1: LinearParams {
                weight: tape.input(&rand_tensor(20, &[4, 2])),
                bias: tape.input(&rand_tensor(21, &[4])),
            },
            fc2: LinearParams {
                weight: tape.input(&rand_tensor(22, &[4, 4])),
                bias: tape.input(&rand_tensor(23, &[4])),
            },
        };
        let h1 = tape.input(&rand_tensor(24, &[1, 2, 4, 4]));
        let h2 = tape.input(&rand_tensor(25, &[1, 2, 4, 4]));
        let k1 = adapter_predict(&mut tape, h1, &net).unwrap();
        let k2 = adapter_predict(&mut tape, h2, &net).unwrap();
        assert_ne!(
            tape.value(k1).unwrap().data(),
            tape.value(k2).unwrap().data()
        );
    }

    #[test]
    fn cross_domain_edge_with_identity_adapter_is_bias_map() {
        let mut tape = Tape::new();
        let src = node(
            &mut tape,
            Domain::Density,
            0,
            &rand_tensor(30, &[1, 2, 4, 4]),
        );
        let tgt = node(
            &mut tape,
            Domain::Localization,
            0,
            &rand_tensor(31, &[1, 2, 4, 4]),
        );
        let adapters = AdapterParams {
            phi: bias_only_perceptron(&mut tape, 2, &identity_matrix(2)),
            eta: bias_only_perceptron(&mut tape, 2, &identity_matrix(2)),
        };
        let conv = conv_from(
            &mut tape,
            rand_tensor(32, &[2, 2, 3, 3]),
            Tensor::new(&[2], vec![1.5, -2.5]).unwrap(),
            1,
        );
        let e = cross_domain_edge_embed(&mut tape, &src, &tgt, Some(&adapters), &conv).unwrap();
        let out = tape.value(e.e).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4, 4]);
        for c in 0..2 {
            let expect = if c == 0 { 1.5 } else { -2.5 };
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(out.at(&[0, c, h, w]), expect);
                }
            }
        }
    }

    #[test]
    fn cross_domain_edge_without_adapter_matches_cross_scale_arithmetic() {
        let kernel = rand_tensor(33, &[2, 2, 3, 3]);
        let bias = rand_tensor(34, &[2]);
        let hs = rand_tensor(35, &[1, 2, 4, 4]);
        let ht = rand_tensor(36, &[1, 2, 4, 4]);

        let mut tape = Tape::new();
        let src = node(&mut tape, Domain::Density, 0, &hs);
        let tgt = node(&mut tape, Domain::Localization, 0, &ht);
        let conv = conv_from(&mut tape, kernel.clone(), bias.clone(), 1);
        let e = cross_domain_edge_embed(&mut tape, &src, &tgt, None, &conv).unwrap();

        // Same arithmetic as a cross-scale edge over the same pair of states.
        let a = node(&mut tape, Domain::Density, 0, &hs);
        let b = node(&mut tape, Domain::Density, 1, &ht);
        let conv2 = conv_from(&mut tape, kernel, bias, 1);
        let reference = cross_scale_edge_embed(&mut tape, &a, &b, &conv2).unwrap();
        assert_eq!(
            tape.value(e.e).unwrap().data(),
            tape.value(reference.e).unwrap().data()
        );
    }

    #[test]
    fn cross_domain_edge_rejects_bad_pairs() {
        let mut tape = Tape::new();
        let t = rand_tensor(37, &[1, 2, 4, 4]);
        let a = node(&mut tape, Domain::Density, 0, &t);
        let same_domain = node(&mut tape, Domain::Density, 1, &t);
        let other_scale = node(&mut tape, Domain::Localization, 1, &t);
        let conv = conv_from(
            &mut tape,
            rand_tensor(38, &[2, 2, 3, 3]),
            Tensor::zeros(&[2]),
            1,
        );
        assert!(cross_domain_edge_embed(&mut tape, &a, &same_domain, None, &conv).is_err());
        assert!(cross_domain_edge_embed(&mut tape, &a, &other_scale, None, &conv).is_err());
    }

    fn gate_with_bias(tape: &mut Tape, c: usize, bias: f64) -> ConvParams {
        conv_from(
            tape,
            Tensor::zeros(&[1, c, 1, 1]),
            Tensor::new(&[1], vec![bias]).unwrap(),
            1,
        )
    }

    #[test]
    fn cross_scale_message_gating_levels() {
        let h = rand_tensor(40, &[1, 2, 4, 4]);
        let mut tape = Tape::new();
        let src = node(&mut tape, Domain::Density, 0, &h);
        let tgt = node(
            &mut tape,
            Domain::Density,
            1,
            &rand_tensor(41, &[1, 2, 4, 4]),
        );
        let conv = conv_from(
            &mut tape,
            rand_tensor(42, &[2, 2, 3, 3]),
            Tensor::zeros(&[2]),
            1,
        );
        let e = cross_scale_edge_embed(&mut tape, &src, &tgt, &conv).unwrap();

        // Zero projection: every link weight is sigmoid(0) = 0.5.
        let gate = gate_with_bias(&mut tape, 2, 0.0);
        let msg = cross_scale_message(&mut tape, &src, &e, &gate).unwrap();
        for (m, s) in tape.value(msg).unwrap().data().iter().zip(h.data()) {
            assert!((m - 0.5 * s).abs() < 1e-15);
        }

        // Saturated gate: message converges to the source state.
        let gate = gate_with_bias(&mut tape, 2, 40.0);
        let msg = cross_scale_message(&mut tape, &src, &e, &gate).unwrap();
        for (m, s) in tape.value(msg).unwrap().data().iter().zip(h.data()) {
            assert!((m - s).abs() < 1e-9);
        }

        // Negative saturation: message vanishes.
        let gate = gate_with_bias(&mut tape, 2, -40.0);
        let msg = cross_scale_message(&mut tape, &src, &e, &gate).unwrap();
        for m in tape.value(msg).unwrap().data() {
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn cross_scale_message_never_exceeds_source_magnitude() {
        let h = rand_tensor(43, &[1, 3, 4, 4]);
        let mut tape = Tape::new();
        let src = node(&mut tape, Domain::Density, 0, &h);
        let tgt = node(
            &mut tape,
            Domain::Density,
            1,
            &rand_tensor(44, &[1, 3, 4, 4]),
        );
        let conv = conv_from(
            &mut tape,
            rand_tensor(45, &[3, 3, 3, 3]),
            rand_tensor(46, &[3]),
            1,
        );
        let e = cross_scale_edge_embed(&mut tape, &src, &tgt, &conv).unwrap();
        let gate = conv_from(
            &mut tape,
            rand_tensor(47, &[1, 3, 1, 1]),
            rand_tensor(48, &[1]),
            1,
        );
        let msg = cross_scale_message(&mut tape, &src, &e, &gate).unwrap();
        for (m, s) in tape.value(msg).unwrap().data().iter().zip(h.data()) {
            assert!(m.abs() <= s.abs());
        }
    }

    #[test]
    fn cross_scale_message_rejects_wrong_edge() {
        let mut tape = Tape::new();
        let src = node(
            &mut tape,
            Domain::Density,
            0,
            &rand_tensor(49, &[1, 2, 4, 4]),
        );
        let tgt = node(
            &mut tape,
            Domain::Localization,
            0,
            &rand_tensor(50, &[1, 2, 4, 4]),
        );
        let conv = conv_from(
            &mut tape,
            rand_tensor(51, &[2, 2, 3, 3]),
            Tensor::zeros(&[2]),
            1,
        );
        let e = cross_domain_edge_embed(&mut tape, &src, &tgt, None, &conv).unwrap();
        let gate = gate_with_bias(&mut tape, 2, 0.0);
        assert!(cross_scale_message(&mut tape, &src, &e, &gate).is_err());
    }

    #[test]
    fn cross_domain_message_identity_and_zero_adapters() {
        let ht = rand_tensor(52, &[1, 2, 4, 4]);
        let mut tape = Tape::new();
        let src = node(
            &mut tape,
            Domain::Density,
            0,
            &rand_tensor(53, &[1, 2, 4, 4]),
        );
        let tgt = node(&mut tape, Domain::Localization, 0, &ht);
        let conv = conv_from(
            &mut tape,
            rand_tensor(54, &[2, 2, 3, 3]),
            Tensor::zeros(&[2]),
            1,
        );
        let gate = gate_with_bias(&mut tape, 2, 0.3);

        // η zeroed with identity bias: ψ* is the identity, message == h_tgt.
        let adapters = AdapterParams {
            phi: bias_only_perceptron(&mut tape, 2, &identity_matrix(2)),
            eta: bias_only_perceptron(&mut tape, 2, &identity_matrix(2)),
        };
        let e = cross_domain_edge_embed(&mut tape, &src, &tgt, Some(&adapters), &conv).unwrap();
        let msg = cross_domain_message(&mut tape, &src, &tgt, &e, &gate, Some(&adapters)).unwrap();
        assert_eq!(tape.value(msg).unwrap().data(), ht.data());

        // η fully zero: ψ* = 0, message == 0.
        let zero = AdapterParams {
            phi: bias_only_perceptron(&mut tape, 2, &identity_matrix(2)),
            eta: bias_only_perceptron(&mut tape, 2, &[0.0; 4]),
        };
        let msg = cross_domain_message(&mut tape, &src, &tgt, &e, &gate, Some(&zero)).unwrap();
        assert!(tape.value(msg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_stage_update_with_zero_grus_quarters_the_state() {
        let s = rand_tensor(60, &[1, 2, 4, 4]);
        let mut tape = Tape::new();
        let n = node(&mut tape, Domain::Density, 0, &s);
        let msg1 = tape.input(&rand_tensor(61, &[1, 2, 4, 4]));
        let msg2 = tape.input(&rand_tensor(62, &[1, 2, 4, 4]));
        let zero_gru = |tape: &mut Tape| ConvGruParams {
            reset: conv_from(tape, Tensor::zeros(&[2, 4, 3, 3]), Tensor::zeros(&[2]), 1),
            update: conv_from(tape, Tensor::zeros(&[2, 4, 3, 3]), Tensor::zeros(&[2]), 1),
            candidate: conv_from(tape, Tensor::zeros(&[2, 4, 3, 3]), Tensor::zeros(&[2]), 1),
        };
        let g1 = zero_gru(&mut tape);
        let g2 = zero_gru(&mut tape);
        let updated = node_update_two_stage(&mut tape, &n, msg1, msg2, &g1, &g2).unwrap();
        assert_eq!(updated.domain, Domain::Density);
        assert_eq!(updated.scale, 0);
        let out = tape.value(updated.h).unwrap();
        assert_eq!(out.shape(), s.shape());
        for (o, v) in out.data().iter().zip(s.data()) {
            assert!((o - 0.25 * v).abs() < 1e-15);
        }
    }

    fn make_states(tape: &mut Tape, n: usize, c: usize, seed: u64) -> Vec<NodeState> {
        let mut states = Vec::new();
        for domain in Domain::BOTH {
            for scale in 0..n {
                let t = rand_tensor(seed + (domain.index() * n + scale) as u64, &[1, c, 4, 4]);
                states.push(node(tape, domain, scale, &t));
            }
        }
        states
    }

    #[test]
    fn propagate_zero_iterations_is_identity() {
        let cfg = tiny_cfg(3, 0);
        let params = init_model_params(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let weights = GraphWeights::bind(&bound, &cfg).unwrap();
        let states = make_states(&mut tape, 3, 2, 100);
        let before: Vec<Vec<f64>> = states
            .iter()
            .map(|s| tape.value(s.h).unwrap().data().to_vec())
            .collect();
        let after = propagate(&mut tape, states, &cfg, &weights).unwrap();
        for (s, b) in after.iter().zip(&before) {
            assert_eq!(tape.value(s.h).unwrap().data(), &b[..]);
        }
    }

    #[test]
    fn propagate_single_scale_single_task_is_identity_for_any_k() {
        let mut cfg = tiny_cfg(1, 4);
        cfg.graph.enable_cross_domain = false;
        cfg.graph.enable_adapter = false;
        let params = init_model_params(&cfg, 6).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let weights = GraphWeights::bind(&bound, &cfg).unwrap();
        let states = make_states(&mut tape, 1, 2, 200);
        let before: Vec<Vec<f64>> = states
            .iter()
            .map(|s| tape.value(s.h).unwrap().data().to_vec())
            .collect();
        let after = propagate(&mut tape, states, &cfg, &weights).unwrap();
        for (s, b) in after.iter().zip(&before) {
            assert_eq!(tape.value(s.h).unwrap().data(), &b[..]);
        }
    }

    #[test]
    fn propagate_rejects_wrong_state_count() {
        let cfg = tiny_cfg(2, 1);
        let params = init_model_params(&cfg, 7).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let weights = GraphWeights::bind(&bound, &cfg).unwrap();
        let mut states = make_states(&mut tape, 2, 2, 300);
        states.pop();
        assert!(propagate(&mut tape, states, &cfg, &weights).is_err());
    }

    #[test]
    fn propagate_is_pure_given_states_and_weights() {
        let cfg = tiny_cfg(2, 2);
        let params = init_model_params(&cfg, 8).unwrap();
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let weights = GraphWeights::bind(&bound, &cfg).unwrap();
            let states = make_states(&mut tape, 2, 2, 400);
            let after = propagate(&mut tape, states, &cfg, &weights).unwrap();
            outs.push(
                after
                    .iter()
                    .map(|s| tape.value(s.h).unwrap().data().to_vec())
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn propagate_k1_matches_manual_two_stage_composition() {
        let cfg = tiny_cfg(2, 1);
        let params = init_model_params(&cfg, 9).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let weights = GraphWeights::bind(&bound, &cfg).unwrap();
        let states = make_states(&mut tape, 2, 2, 500);
        let got = propagate(&mut tape, states.clone(), &cfg, &weights).unwrap();

        // Manual composition of one stage-1 + stage-2 pass.
        let mut mid = Vec::new();
        for node_state in &states {
            let src = states
                .iter()
                .find(|s| s.domain == node_state.domain.other() && s.scale == node_state.scale)
                .unwrap();
            let d = src.domain.index();
            let edge = cross_domain_edge_embed(
                &mut tape,
                src,
                node_state,
                weights.adapters[d].as_ref(),
                weights.cd_edge[d].as_ref().unwrap(),
            )
            .unwrap();
            let msg = cross_domain_message(
                &mut tape,
                src,
                node_state,
                &edge,
                weights.cd_gate[d].as_ref().unwrap(),
                weights.adapters[d].as_ref(),
            )
            .unwrap();
            let h = tape
                .conv_gru_step(
                    node_state.h,
                    msg,
                    weights.gru_stage1[node_state.domain.index()]
                        .as_ref()
                        .unwrap(),
                )
                .unwrap();
            mid.push(NodeState { h, ..*node_state });
        }
        let mut expect = Vec::new();
        for node_state in &mid {
            let d = node_state.domain.index();
            let src = mid
                .iter()
                .find(|s| s.domain == node_state.domain && s.scale != node_state.scale)
                .unwrap();
            let edge = cross_scale_edge_embed(
                &mut tape,
                src,
                node_state,
                weights.cs_edge[d].as_ref().unwrap(),
            )
            .unwrap();
            let msg =
                cross_scale_message(&mut tape, src, &edge, weights.cs_gate[d].as_ref().unwrap())
                    .unwrap();
            let mean = tape.scale(msg, 1.0).unwrap();
            let h = tape
                .conv_gru_step(node_state.h, mean, weights.gru_stage2[d].as_ref().unwrap())
                .unwrap();
            expect.push(NodeState { h, ..*node_state });
        }
        for (g, e) in got.iter().zip(&expect) {
            assert_eq!(
                tape.value(g.h).unwrap().data(),
                tape.value(e.h).unwrap().data()
            );
        }
    }

    #[test]
    fn ablation_switches_drop_the_expected_parameters() {
        let full = init_model_params(&tiny_cfg(2, 2), 11).unwrap();
        assert!(full.names().any(|n| n.contains(".phi.")));
        assert!(full.names().any(|n| n.contains(".eta.")));
        assert!(full.names().any(|n| n.contains("graph.cd_edge")));
        assert!(full.names().any(|n| n.contains("graph.gru1")));

        let mut cfg = tiny_cfg(2, 2);
        cfg.graph.enable_adapter = false;
        let no_adapter = init_model_params(&cfg, 11).unwrap();
        assert!(!no_adapter
            .names()
            .any(|n| n.contains(".phi.") || n.contains(".eta.")));
        assert!(no_adapter.names().any(|n| n.contains("graph.cd_edge")));

        let mut cfg = tiny_cfg(2, 2);
        cfg.graph.enable_cross_domain = false;
        cfg.graph.enable_adapter = false;
        let single_task = init_model_params(&cfg, 11).unwrap();
        assert!(!single_task.names().any(|n| n.contains(".phi.")
            || n.contains(".eta.")
            || n.contains("graph.cd_")
            || n.contains("graph.gru1")));
        assert!(single_task.names().any(|n| n.contains("graph.cs_edge")));
    }

    #[test]
    fn readout_concat_order_and_head() {
        let cfg = tiny_cfg(3, 0);
        let params = init_model_params(&cfg, 12).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let weights = GraphWeights::bind(&bound, &cfg).unwrap();

        // Shuffled scale order must still concatenate as scales 0..N.
        let t0 = rand_tensor(70, &[1, 2, 4, 4]);
        let t1 = rand_tensor(71, &[1, 2, 4, 4]);
        let t2 = rand_tensor(72, &[1, 2, 4, 4]);
        let states = vec![
            node(&mut tape, Domain::Density, 2, &t2),
            node(&mut tape, Domain::Density, 0, &t0),
            node(&mut tape, Domain::Density, 1, &t1),
        ];
        let ordered = [tape.input(&t0), tape.input(&t1), tape.input(&t2)];
        let merged = tape.concat_channels(&ordered).unwrap();
        let head = weights.readout[0];
        let expect = tape.conv2d(merged, &head).unwrap();
        let got = readout(&mut tape, &states, &head).unwrap();
        assert_eq!(
            tape.value(got).unwrap().data(),
            tape.value(expect).unwrap().data()
        );

        // Zero head: output equals the bias everywhere.
        let zero_head = conv_from(
            &mut tape,
            Tensor::zeros(&[1, 6, 1, 1]),
            Tensor::new(&[1], vec![0.4]).unwrap(),
            1,
        );
        let flat = readout(&mut tape, &states, &zero_head).unwrap();
        assert!(tape.value(flat).unwrap().data().iter().all(|&v| v == 0.4));

        // Mixed domains are rejected.
        let mixed = vec![
            node(&mut tape, Domain::Density, 0, &t0),
            node(&mut tape, Domain::Localization, 1, &t1),
            node(&mut tape, Domain::Density, 2, &t2),
        ];
        assert!(readout(&mut tape, &mixed, &head).is_err());
    }

    #[test]
    fn model_forward_shapes_and_determinism() {
        let cfg = tiny_cfg(2, 1);
        let params = init_model_params(&cfg, 13).unwrap();
        let image = rand_tensor(80, &[1, 3, 16, 16]);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let img = tape.input(&image);
            let (d, l) = model_forward(&mut tape, &bound, img, &cfg).unwrap();
            assert_eq!(tape.shape(d).unwrap(), &[1, 1, 2, 2]);
            assert_eq!(tape.shape(l).unwrap(), &[1, 1, 2, 2]);
            // Finite inputs stay finite through every recorded operation.
            for i in 0..tape.len() {
                assert!(tape.value(crate::tensor::TensorId(i)).unwrap().is_finite());
            }
            outs.push((
                tape.value(d).unwrap().data().to_vec(),
                tape.value(l).unwrap().data().to_vec(),
            ));
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn every_parameter_receives_gradient_from_the_loss() {
        let cfg = ModelConfig {
            dfl: DflConfig {
                width_multiplier: 0.125,
                scales: vec![1, 2],
                node_channels: 8,
                back_end_dilation: 2,
            },
            graph: HybridGraphConfig {
                n: 2,
                k: 1,
                c: 8,
                enable_cross_domain: true,
                enable_adapter: true,
                lambda: 0.001,
            },
        };
        let params = init_model_params(&cfg, 40).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let img = tape.input(&rand_tensor(90, &[1, 3, 16, 16]));
        let (d, l) = model_forward(&mut tape, &bound, img, &cfg).unwrap();
        let gt = tape.input(&Tensor::zeros(&[1, 1, 2, 2]));
        let l1 = tape.mse_loss(d, gt).unwrap();
        let l2 = tape.mse_loss(l, gt).unwrap();
        let weighted = tape.scale(l2, cfg.graph.lambda).unwrap();
        let loss = tape.add(l1, weighted).unwrap();
        let gmap = tape.backward(loss).unwrap();
        for (name, _) in params.iter() {
            let g = gmap.get(bound.id(name).unwrap()).unwrap();
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "parameter {name} received an all-zero gradient"
            );
        }
    }

    #[test]
    fn model_forward_rejects_indivisible_image() {
        let cfg = tiny_cfg(2, 1);
        let params = init_model_params(&cfg, 14).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let img = tape.input(&rand_tensor(81, &[1, 3, 12, 16]));
        assert!(model_forward(&mut tape, &bound, img, &cfg).is_err());
    }
}
