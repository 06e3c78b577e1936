//! Equivariant layers and the composed model.
//!
//! The attention layer computes, per node `i` and output degree `l`,
//!
//! `f_out_i^l = SelfInt(f_in_i)^l + Σ_k Σ_{j ∈ N_i \ i} α_ij W_V^{lk}(x_j - x_i) f_in_j^k`
//!
//! with invariant attention weights `α_ij = softmax_j(q_i · k_ij)` built from
//! node-local queries (per-degree channel mixing; the only kernel component
//! that survives at zero relative position) and edge keys of kernel type.
//! Removing the attention weights yields the plain tensor-field convolution
//! layer. Self-interaction is per-degree channel mixing, either with shared
//! learned weights or with weights emitted per node from the invariant Gram
//! matrix of channels. All softmax logits and attention weights are invariant
//! under rotations; equivariance of the value messages comes from the kernel
//! constraint of [`crate::basis`].
//!
//! Multi-head attention partitions the channels of every degree into `H`
//! contiguous blocks; logits, softmax, and value weighting act per head, and
//! the head outputs are concatenated back.

use crate::autodiff::{Adam, NodeId, ParamStore, Tape};
use crate::basis::{BasisCache, RadialProfile, RADIAL_HIDDEN};
use crate::error::{Error, Result};
use crate::fiber::{Fiber, FiberFeature};
use crate::graph::NeighborGraph;
use crate::so3::So3Tables;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

/// ε-guard under every norm: `‖f‖ := √(Σ f² + ε)`.
pub const NORM_EPS: f64 = 1e-12;

/// Layer-norm epsilon in the norm nonlinearity.
pub const LN_EPS: f64 = 1e-5;

/// Feature values living on a tape, one array node per fiber degree.
#[derive(Clone)]
pub struct TapedFiber {
    pub fiber: Fiber,
    nodes: Vec<NodeId>,
}

impl TapedFiber {
    pub fn from_feature(tape: &mut Tape, f: &FiberFeature) -> Self {
        let fiber = f.fiber();
        let nodes = f
            .entries()
            .iter()
            .map(|(_, arr)| tape.constant(arr.clone().into_dyn()))
            .collect();
        TapedFiber { fiber, nodes }
    }

    pub fn node(&self, degree: u32) -> Option<NodeId> {
        self.fiber
            .entries()
            .iter()
            .position(|&(l, _)| l == degree)
            .map(|i| self.nodes[i])
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn to_feature(&self, tape: &Tape) -> FiberFeature {
        let parts = self
            .fiber
            .entries()
            .iter()
            .zip(&self.nodes)
            .map(|(&(l, _), &id)| {
                let v = tape.value(id);
                let arr = v
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("fiber values are [n, c, m]");
                (l, arr)
            })
            .collect();
        FiberFeature::from_parts(parts).expect("taped fiber is well-formed")
    }
}

/// Neighborhood index arrays shared by every layer of one forward pass.
pub struct GraphIndices {
    pub n_nodes: usize,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub offsets: Arc<Vec<usize>>,
}

impl GraphIndices {
    pub fn from_graph(graph: &NeighborGraph) -> Self {
        GraphIndices {
            n_nodes: graph.n_nodes(),
            src: Arc::new(graph.src().to_vec()),
            dst: Arc::new(graph.dst().to_vec()),
            offsets: Arc::new(graph.offsets().to_vec()),
        }
    }

    /// `1/|N_i|` per edge, for the attention-free diagnostic mode.
    fn uniform_weights(&self, heads: usize) -> ArrayD<f64> {
        let e = self.src.len();
        let mut w = ArrayD::zeros(IxDyn(&[e, heads]));
        for seg in self.offsets.windows(2) {
            let inv = 1.0 / (seg[1] - seg[0]) as f64;
            for r in seg[0]..seg[1] {
                for h in 0..heads {
                    w[[r, h]] = inv;
                }
            }
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfInteractionKind {
    Linear,
    Attentive,
}

/// Model architecture and initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub input: Fiber,
    pub hidden: Fiber,
    pub output: Fiber,
    pub heads: usize,
    pub self_interaction: SelfInteractionKind,
    /// Apply the norm nonlinearity after every layer except the last.
    pub norm_nonlinearity: bool,
    /// `false` turns every layer into a plain tensor-field convolution.
    pub attention: bool,
    /// Scale attention logits by `1/√dim` (off by default; the dot-product
    /// form has no scaling).
    pub scale_logits: bool,
    /// Diagnostic: replace softmax weights by `1/|N_i|`.
    pub uniform_attention: bool,
    pub radial_hidden: usize,
    pub edge_scalar_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Four attention layers over degrees {0,1,2}, three channels per degree:
    /// the particle-regression architecture.
    pub fn nbody_default(seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            input: Fiber::new(vec![(0, 1), (1, 2)]).expect("static fiber"),
            hidden: Fiber::new(vec![(0, 3), (1, 3), (2, 3)]).expect("static fiber"),
            output: Fiber::new(vec![(1, 2)]).expect("static fiber"),
            heads: 1,
            self_interaction: SelfInteractionKind::Attentive,
            norm_nonlinearity: false,
            attention: true,
            scale_logits: false,
            uniform_attention: false,
            radial_hidden: RADIAL_HIDDEN,
            edge_scalar_width: 0,
            seed,
        }
    }

    fn fiber_in(&self, layer: usize) -> &Fiber {
        if layer == 0 {
            &self.input
        } else {
            &self.hidden
        }
    }

    fn fiber_out(&self, layer: usize) -> &Fiber {
        if layer + 1 == self.n_layers {
            &self.output
        } else {
            &self.hidden
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be at least 1"));
        }
        if self.radial_hidden == 0 {
            return Err(Error::config("radial_hidden", "must be at least 1"));
        }
        if self.attention {
            for layer in 0..self.n_layers {
                for &(l, c) in self
                    .fiber_in(layer)
                    .entries()
                    .iter()
                    .chain(self.fiber_out(layer).entries())
                {
                    if c % self.heads != 0 {
                        return Err(Error::config(
                            "heads",
                            format!(
                                "head count {} does not divide {} channels of degree {l}",
                                self.heads, c
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every `(l_out, k_in)` degree pair any layer needs a basis for.
    pub fn needed_pairs(&self) -> Vec<(u32, u32)> {
        let mut pairs = Vec::new();
        for layer in 0..self.n_layers {
            let fin = self.fiber_in(layer);
            let fout = self.fiber_out(layer);
            for lo in fout.degrees() {
                for ki in fin.degrees() {
                    if !pairs.contains(&(lo, ki)) {
                        pairs.push((lo, ki));
                    }
                }
            }
            if self.attention {
                for lk in fin.degrees() {
                    for ki in fin.degrees() {
                        if !pairs.contains(&(lk, ki)) {
                            pairs.push((lk, ki));
                        }
                    }
                }
            }
        }
        pairs
    }

    pub fn max_pair_degree(&self) -> u32 {
        self.needed_pairs()
            .iter()
            .map(|&(l, k)| l + k)
            .max()
            .unwrap_or(0)
    }
}

struct AttentiveMlp {
    c_in: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

enum SelfInt {
    Linear(Vec<(u32, usize)>),
    Attentive(Vec<(u32, AttentiveMlp)>),
}

struct Layer {
    fiber_in: Fiber,
    fiber_out: Fiber,
    value: Vec<((u32, u32), RadialProfile)>,
    key: Vec<((u32, u32), RadialProfile)>,
    query: Vec<(u32, usize)>,
    self_int: SelfInt,
    norm: Vec<(u32, (usize, usize))>,
}

/// Output of one layer's forward pass.
pub struct LayerOutput {
    pub fiber: TapedFiber,
    /// Attention weights `[edges, heads]`, when the layer uses attention.
    pub alpha: Option<NodeId>,
}

/// The composed equivariant model: parameters, layer structure, and the
/// representation tables it was built against.
pub struct Model {
    pub config: ModelConfig,
    pub tables: Arc<So3Tables>,
    pub store: ParamStore,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        let mut tables = So3Tables::new(config.max_pair_degree().max(config.hidden.max_degree()));
        for (l, k) in config.needed_pairs() {
            tables.warm_pair(l, k)?;
        }
        Model::with_tables(config, Arc::new(tables))
    }

    /// Builds against pre-warmed tables (every needed pair must be warm).
    pub fn with_tables(config: ModelConfig, tables: Arc<So3Tables>) -> Result<Model> {
        config.validate()?;
        for (l, k) in config.needed_pairs() {
            if !tables.is_warm(l, k) {
                return Err(Error::Capability(format!(
                    "tables missing clebsch-gordan pair ({l}, {k})"
                )));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        for i in 0..config.n_layers {
            let fin = config.fiber_in(i).clone();
            let fout = config.fiber_out(i).clone();
            let radial_in = 1 + config.edge_scalar_width;

            let mut value = Vec::new();
            for &(lo, co) in fout.entries() {
                for &(ki, ci) in fin.entries() {
                    let j_count = (lo + ki - lo.abs_diff(ki)) as usize + 1;
                    let rp = RadialProfile::register(
                        &mut store,
                        &format!("layers.{i}.value.{lo}.{ki}"),
                        radial_in,
                        config.radial_hidden,
                        j_count,
                        ci,
                        co,
                        &mut rng,
                    )?;
                    value.push(((lo, ki), rp));
                }
            }

            let mut key = Vec::new();
            let mut query = Vec::new();
            if config.attention {
                for &(lk, ck) in fin.entries() {
                    for &(ki, ci) in fin.entries() {
                        let j_count = (lk + ki - lk.abs_diff(ki)) as usize + 1;
                        let rp = RadialProfile::register(
                            &mut store,
                            &format!("layers.{i}.key.{lk}.{ki}"),
                            radial_in,
                            config.radial_hidden,
                            j_count,
                            ci,
                            ck,
                            &mut rng,
                        )?;
                        key.push(((lk, ki), rp));
                    }
                }
                for &(lk, ck) in fin.entries() {
                    let bound = 1.0 / (ck as f64).sqrt();
                    let arr = ArrayD::from_shape_fn(IxDyn(&[ck, ck]), |_| {
                        rng.gen_range(-bound..bound)
                    });
                    let idx = store.register(format!("layers.{i}.query.{lk}"), arr)?;
                    query.push((lk, idx));
                }
            }

            let shared: Vec<(u32, usize, usize)> = fout
                .entries()
                .iter()
                .filter_map(|&(l, co)| fin.channels(l).map(|ci| (l, ci, co)))
                .collect();
            let self_int = match config.self_interaction {
                SelfInteractionKind::Linear => {
                    let mut weights = Vec::new();
                    for &(l, ci, co) in &shared {
                        let bound = 1.0 / (ci as f64).sqrt();
                        let arr = ArrayD::from_shape_fn(IxDyn(&[co, ci]), |_| {
                            rng.gen_range(-bound..bound)
                        });
                        let idx = store.register(format!("layers.{i}.self.{l}.w"), arr)?;
                        weights.push((l, idx));
                    }
                    SelfInt::Linear(weights)
                }
                SelfInteractionKind::Attentive => {
                    let mut mlps = Vec::new();
                    for &(l, ci, co) in &shared {
                        let hidden = ci * ci;
                        let b1 = 1.0 / (hidden as f64).sqrt();
                        let w1 = store.register(
                            format!("layers.{i}.self.{l}.mlp.w1"),
                            ArrayD::from_shape_fn(IxDyn(&[hidden, hidden]), |_| {
                                rng.gen_range(-b1..b1)
                            }),
                        )?;
                        let b1i = store.register(
                            format!("layers.{i}.self.{l}.mlp.b1"),
                            ArrayD::zeros(IxDyn(&[hidden])),
                        )?;
                        let w2 = store.register(
                            format!("layers.{i}.self.{l}.mlp.w2"),
                            ArrayD::from_shape_fn(IxDyn(&[co * ci, hidden]), |_| {
                                rng.gen_range(-b1..b1)
                            }),
                        )?;
                        // bias starts at the identity mixing so the layer
                        // begins near a skip connection
                        let mut ident = ArrayD::zeros(IxDyn(&[co * ci]));
                        for c in 0..co.min(ci) {
                            ident[[c * ci + c]] = 1.0;
                        }
                        let b2 =
                            store.register(format!("layers.{i}.self.{l}.mlp.b2"), ident)?;
                        mlps.push((
                            l,
                            AttentiveMlp {
                                c_in: ci,
                                w1,
                                b1: b1i,
                                w2,
                                b2,
                            },
                        ));
                    }
                    SelfInt::Attentive(mlps)
                }
            };

            let mut norm = Vec::new();
            if config.norm_nonlinearity && i + 1 < config.n_layers {
                for &(l, c) in fout.entries() {
                    let g = store.register(
                        format!("layers.{i}.norm.{l}.gamma"),
                        ArrayD::ones(IxDyn(&[c])),
                    )?;
                    let b = store.register(
                        format!("layers.{i}.norm.{l}.beta"),
                        ArrayD::zeros(IxDyn(&[c])),
                    )?;
                    norm.push((l, (g, b)));
                }
            }

            layers.push(Layer {
                fiber_in: fin,
                fiber_out: fout,
                value,
                key,
                query,
                self_int,
                norm,
            });
        }
        Ok(Model {
            config,
            tables,
            store,
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total scalar parameter count.
    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }

    /// Basis cache for one graph, covering every pair the model needs.
    pub fn build_basis(&self, graph: &NeighborGraph) -> Result<BasisCache> {
        BasisCache::build(&self.tables, graph, &self.config.needed_pairs())
    }

    /// Records the full forward pass on `tape`. Returns the output fiber and
    /// the per-layer attention weights.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        basis: &BasisCache,
        idx: &GraphIndices,
        input: &TapedFiber,
    ) -> Result<(TapedFiber, Vec<NodeId>)> {
        let mut alphas = Vec::new();
        let mut feats = input.clone();
        for layer in &self.layers {
            let out = self.layer_forward(tape, store, layer, basis, idx, &feats)?;
            if let Some(a) = out.alpha {
                alphas.push(a);
            }
            feats = out.fiber;
            if !layer.norm.is_empty() {
                feats = norm_nonlinearity(tape, store, &layer.norm, &feats)?;
            }
        }
        Ok((feats, alphas))
    }

    fn layer_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &Layer,
        basis: &BasisCache,
        idx: &GraphIndices,
        feats: &TapedFiber,
    ) -> Result<LayerOutput> {
        if feats.fiber != layer.fiber_in {
            return Err(Error::invalid(format!(
                "layer expects input fiber {:?}, got {:?}",
                layer.fiber_in.entries(),
                feats.fiber.entries()
            )));
        }
        let heads = if self.config.attention {
            self.config.heads
        } else {
            1
        };
        let e = basis.n_edges;

        // gathered source features per input degree
        let mut gathered: Vec<(u32, NodeId)> = Vec::new();
        for &(ki, _) in layer.fiber_in.entries() {
            let f = feats.node(ki).expect("fiber checked");
            gathered.push((ki, tape.gather_rows(f, idx.src.clone())?));
        }
        let find_gathered = |ki: u32| -> NodeId {
            gathered
                .iter()
                .find(|&&(d, _)| d == ki)
                .map(|&(_, n)| n)
                .expect("gathered per input degree")
        };

        // value messages per output degree, summed over input degrees
        let mut messages: Vec<(u32, NodeId)> = Vec::new();
        for &(lo, _) in layer.fiber_out.entries() {
            let mut acc: Option<NodeId> = None;
            for ((plo, ki), rp) in &layer.value {
                if *plo != lo {
                    continue;
                }
                let coeffs = rp.forward(tape, store, &basis.radial_input)?;
                let block = basis.pair(lo, *ki)?;
                let msg = tape.kernel_message(coeffs, block.blocks.clone(), find_gathered(*ki))?;
                acc = Some(match acc {
                    None => msg,
                    Some(a) => tape.add(a, msg)?,
                });
            }
            messages.push((lo, acc.expect("at least one input degree")));
        }

        // attention weights
        let alpha = if self.config.attention {
            if self.config.uniform_attention {
                Some(tape.constant(idx.uniform_weights(heads)))
            } else {
                let mut logits: Option<NodeId> = None;
                for &(lk, ck) in layer.fiber_in.entries() {
                    // query: node-local per-degree channel mixing, gathered to edges
                    let wq = layer
                        .query
                        .iter()
                        .find(|&&(d, _)| d == lk)
                        .map(|&(_, i)| i)
                        .expect("query per input degree");
                    let wq = tape.param(store, wq);
                    let q = tape.channel_mix(wq, feats.node(lk).expect("fiber checked"))?;
                    let q_e = tape.gather_rows(q, idx.dst.clone())?;
                    // key: kernel-type edge embedding
                    let mut k_acc: Option<NodeId> = None;
                    for ((plk, ki), rp) in &layer.key {
                        if *plk != lk {
                            continue;
                        }
                        let coeffs = rp.forward(tape, store, &basis.radial_input)?;
                        let block = basis.pair(lk, *ki)?;
                        let k =
                            tape.kernel_message(coeffs, block.blocks.clone(), find_gathered(*ki))?;
                        k_acc = Some(match k_acc {
                            None => k,
                            Some(a) => tape.add(a, k)?,
                        });
                    }
                    let k_e = k_acc.expect("at least one key pair");
                    // per-head dot products
                    let prod = tape.mul(q_e, k_e)?;
                    let m = 2 * lk as usize + 1;
                    let per_head = (ck / heads) * m;
                    let shaped = tape.reshape(prod, &[e, heads, per_head])?;
                    let summed = tape.sum_last(shaped)?;
                    logits = Some(match logits {
                        None => summed,
                        Some(a) => tape.add(a, summed)?,
                    });
                }
                let mut logits = logits.expect("nonempty fiber");
                if self.config.scale_logits {
                    let dim: usize = layer
                        .fiber_in
                        .entries()
                        .iter()
                        .map(|&(l, c)| (c / heads) * (2 * l as usize + 1))
                        .sum();
                    logits = tape.scale(logits, 1.0 / (dim as f64).sqrt());
                }
                Some(tape.segment_softmax(logits, idx.offsets.clone())?)
            }
        } else {
            None
        };

        // weight, aggregate, and add self-interaction
        let mut out_nodes = Vec::new();
        for &(lo, co) in layer.fiber_out.entries() {
            let msg = messages
                .iter()
                .find(|&&(d, _)| d == lo)
                .map(|&(_, n)| n)
                .expect("message per output degree");
            let m = 2 * lo as usize + 1;
            let weighted = match alpha {
                Some(a) => {
                    let shaped = tape.reshape(msg, &[e, heads, co / heads, m])?;
                    let scaled = tape.bcast_mul_prefix(shaped, a)?;
                    tape.reshape(scaled, &[e, co, m])?
                }
                None => msg,
            };
            let mut node = tape.scatter_add_rows(weighted, idx.dst.clone(), idx.n_nodes)?;
            if let Some(si) = self_interaction(tape, store, &layer.self_int, lo, feats)? {
                node = tape.add(node, si)?;
            }
            out_nodes.push(node);
        }
        Ok(LayerOutput {
            fiber: TapedFiber {
                fiber: layer.fiber_out.clone(),
                nodes: out_nodes,
            },
            alpha,
        })
    }

    /// Convenience forward: plain feature in, plain feature out.
    pub fn forward(&self, graph: &NeighborGraph, input: &FiberFeature) -> Result<FiberFeature> {
        let basis = self.build_basis(graph)?;
        let idx = GraphIndices::from_graph(graph);
        let mut tape = Tape::new();
        let taped = TapedFiber::from_feature(&mut tape, input);
        let (out, _) = self.forward_taped(&mut tape, &self.store, &basis, &idx, &taped)?;
        Ok(out.to_feature(&tape))
    }

    /// Forward pass returning every layer's output (after its nonlinearity)
    /// and the per-layer attention weights.
    pub fn forward_intermediates(
        &self,
        graph: &NeighborGraph,
        input: &FiberFeature,
    ) -> Result<(Vec<FiberFeature>, Vec<ArrayD<f64>>)> {
        let basis = self.build_basis(graph)?;
        let idx = GraphIndices::from_graph(graph);
        let mut tape = Tape::new();
        let mut feats = TapedFiber::from_feature(&mut tape, input);
        let mut outs = Vec::new();
        let mut alphas = Vec::new();
        for layer in &self.layers {
            let out = self.layer_forward(&mut tape, &self.store, layer, &basis, &idx, &feats)?;
            if let Some(a) = out.alpha {
                alphas.push(tape.value(a).clone());
            }
            feats = out.fiber;
            if !layer.norm.is_empty() {
                feats = norm_nonlinearity(&mut tape, &self.store, &layer.norm, &feats)?;
            }
            outs.push(feats.to_feature(&tape));
        }
        Ok((outs, alphas))
    }

    // -----------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------

    /// Binary checkpoint: magic, version, JSON header (config echo + step),
    /// then named little-endian f64 arrays; plus a JSON sidecar with shapes.
    pub fn save_checkpoint(&self, path: &std::path::Path, opt: Option<&Adam>) -> Result<()> {
        let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, name) in self.store.names().iter().enumerate() {
            arrays.insert(
                format!("param/{name}"),
                self.store.value(i).iter().copied().collect(),
            );
        }
        let step = if let Some(adam) = opt {
            let (m, v) = adam.state();
            for (i, name) in self.store.names().iter().enumerate() {
                arrays.insert(format!("adam_m/{name}"), m[i].iter().copied().collect());
                arrays.insert(format!("adam_v/{name}"), v[i].iter().copied().collect());
            }
            adam.step_count()
        } else {
            0
        };
        let header = serde_json::json!({
            "format_version": 1u32,
            "config": self.config,
            "step": step,
            "has_optimizer": opt.is_some(),
        });
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");

        let io_err = |e| Error::io(path.display().to_string(), e);
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(b"SE3TCKPT").map_err(io_err)?;
        f.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        f.write_all(&header_bytes).map_err(io_err)?;
        f.write_all(&(arrays.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        for (name, vals) in &arrays {
            f.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
            f.write_all(name.as_bytes()).map_err(io_err)?;
            f.write_all(&(vals.len() as u64).to_le_bytes()).map_err(io_err)?;
            for v in vals {
                f.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }

        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, name) in self.store.names().iter().enumerate() {
            let shape = self.store.value(i).shape().to_vec();
            shapes.insert(format!("param/{name}"), shape.clone());
            if opt.is_some() {
                shapes.insert(format!("adam_m/{name}"), shape.clone());
                shapes.insert(format!("adam_v/{name}"), shape);
            }
        }
        let sidecar = serde_json::json!({"format_version": 1u32, "arrays": shapes});
        let side_path = sidecar_path(path);
        std::fs::write(&side_path, serde_json::to_vec_pretty(&sidecar).expect("sidecar"))
            .map_err(|e| Error::io(side_path.display().to_string(), e))?;
        Ok(())
    }

    /// Loads a checkpoint, rebuilding the model from the embedded config.
    /// Returns the model, the optimizer state if present, and the step count.
    pub fn load_checkpoint(path: &std::path::Path) -> Result<(Model, Option<AdamState>, u64)> {
        let io_err = |e| Error::io(path.display().to_string(), e);
        let bad = |d: &str| Error::malformed(path.display().to_string(), d.to_string());
        let mut f = std::fs::File::open(path).map_err(io_err)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"SE3TCKPT" {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        f.read_exact(&mut u32b).map_err(io_err)?;
        if u32::from_le_bytes(u32b) != 1 {
            return Err(bad("unsupported format version"));
        }
        let mut u64b = [0u8; 8];
        f.read_exact(&mut u64b).map_err(io_err)?;
        let hlen = u64::from_le_bytes(u64b) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes).map_err(io_err)?;
        let header: serde_json::Value =
            serde_json::from_slice(&hbytes).map_err(|e| bad(&e.to_string()))?;
        let config: ModelConfig = serde_json::from_value(
            header
                .get("config")
                .cloned()
                .ok_or_else(|| bad("missing config"))?,
        )
        .map_err(|e| bad(&format!("bad config: {e}")))?;
        let step = header.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let has_opt = header
            .get("has_optimizer")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);

        f.read_exact(&mut u64b).map_err(io_err)?;
        let n_arrays = u64::from_le_bytes(u64b) as usize;
        let mut arrays: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..n_arrays {
            f.read_exact(&mut u64b).map_err(io_err)?;
            let nlen = u64::from_le_bytes(u64b) as usize;
            let mut nbytes = vec![0u8; nlen];
            f.read_exact(&mut nbytes).map_err(io_err)?;
            let name = String::from_utf8(nbytes).map_err(|_| bad("non-utf8 name"))?;
            f.read_exact(&mut u64b).map_err(io_err)?;
            let count = u64::from_le_bytes(u64b) as usize;
            let mut vals = vec![0.0f64; count];
            let mut fb = [0u8; 8];
            for v in vals.iter_mut() {
                f.read_exact(&mut fb).map_err(io_err)?;
                *v = f64::from_le_bytes(fb);
            }
            arrays.insert(name, vals);
        }

        let mut model = Model::new(config)?;
        for (i, name) in model.store.names().to_vec().iter().enumerate() {
            let key = format!("param/{name}");
            let vals = arrays
                .get(&key)
                .ok_or_else(|| bad(&format!("missing array {key}")))?;
            let shape = model.store.value(i).shape().to_vec();
            if vals.len() != shape.iter().product::<usize>() {
                return Err(bad(&format!("array {key} has wrong length")));
            }
            model.store.set_value(
                i,
                ArrayD::from_shape_vec(IxDyn(&shape), vals.clone()).expect("checked length"),
            );
        }
        let adam = if has_opt {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (i, name) in model.store.names().to_vec().iter().enumerate() {
                let shape = model.store.value(i).shape().to_vec();
                for (dst, pre) in [(&mut m, "adam_m"), (&mut v, "adam_v")] {
                    let key = format!("{pre}/{name}");
                    let vals = arrays
                        .get(&key)
                        .ok_or_else(|| bad(&format!("missing array {key}")))?;
                    dst.push(
                        ArrayD::from_shape_vec(IxDyn(&shape), vals.clone())
                            .map_err(|_| bad(&format!("array {key} has wrong length")))?,
                    );
                }
            }
            Some(AdamState { step, m, v })
        } else {
            None
        };
        Ok((model, adam, step))
    }
}

/// Optimizer state recovered from a checkpoint.
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

pub fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".shapes.json");
    std::path::PathBuf::from(os)
}

fn self_interaction(
    tape: &mut Tape,
    store: &ParamStore,
    si: &SelfInt,
    degree: u32,
    feats: &TapedFiber,
) -> Result<Option<NodeId>> {
    match si {
        SelfInt::Linear(weights) => {
            let Some(&(_, widx)) = weights.iter().find(|&&(l, _)| l == degree) else {
                return Ok(None);
            };
            let w = tape.param(store, widx);
            let f = feats.node(degree).expect("degree present");
            Ok(Some(tape.channel_mix(w, f)?))
        }
        SelfInt::Attentive(mlps) => {
            let Some((_, mlp)) = mlps.iter().find(|(l, _)| *l == degree) else {
                return Ok(None);
            };
            let f = feats.node(degree).expect("degree present");
            let n = tape.value(f).shape()[0];
            let gram = tape.gram(f)?;
            let flat = tape.reshape(gram, &[n, mlp.c_in * mlp.c_in])?;
            let w1 = tape.param(store, mlp.w1);
            let b1 = tape.param(store, mlp.b1);
            let h = tape.linear(flat, w1, b1)?;
            let r = tape.relu(h);
            let w2 = tape.param(store, mlp.w2);
            let b2 = tape.param(store, mlp.b2);
            let wout = tape.linear(r, w2, b2)?;
            let co = tape.value(wout).shape()[1] / mlp.c_in;
            let shaped = tape.reshape(wout, &[n, co, mlp.c_in])?;
            Ok(Some(tape.node_matmul(shaped, f)?))
        }
    }
}

/// Standalone linear self-interaction: per-degree channel mixing, no
/// cross-degree flow. `weights` maps degree to a `[c_out, c_in]` parameter.
pub fn linear_self_interaction(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &[(u32, usize)],
    feats: &TapedFiber,
) -> Result<TapedFiber> {
    let si = SelfInt::Linear(weights.to_vec());
    let mut entries = Vec::new();
    let mut nodes = Vec::new();
    for &(l, _) in feats.fiber.entries() {
        if let Some(node) = self_interaction(tape, store, &si, l, feats)? {
            let co = tape.value(node).shape()[1];
            entries.push((l, co));
            nodes.push(node);
        }
    }
    Ok(TapedFiber {
        fiber: Fiber::new(entries)?,
        nodes,
    })
}

/// Norm nonlinearity: per node and degree, layer-normalize the channel norms,
/// rectify, and rescale the unit directions. Norms are ε-guarded.
pub fn norm_nonlinearity(
    tape: &mut Tape,
    store: &ParamStore,
    params: &[(u32, (usize, usize))],
    feats: &TapedFiber,
) -> Result<TapedFiber> {
    let mut nodes = Vec::new();
    for (&(l, c), &fnode) in feats.fiber.entries().iter().zip(feats.nodes()) {
        let (gamma, beta) = params
            .iter()
            .find(|&&(d, _)| d == l)
            .map(|&(_, p)| p)
            .ok_or_else(|| Error::invalid(format!("no norm params for degree {l}")))?;
        let n = tape.value(fnode).shape()[0];
        let sq = tape.mul(fnode, fnode)?;
        let sums = tape.sum_last(sq)?; // [n, c]
        let norms = tape.sqrt_eps(sums, NORM_EPS);
        let norms2 = tape.reshape(norms, &[n, c])?;
        let g = tape.param(store, gamma);
        let b = tape.param(store, beta);
        let ln = tape.layer_norm(norms2, g, b, LN_EPS)?;
        let r = tape.relu(ln);
        let scale = tape.div(r, norms2)?;
        nodes.push(tape.bcast_mul_prefix(fnode, scale)?);
    }
    Ok(TapedFiber {
        fiber: feats.fiber.clone(),
        nodes,
    })
}

/// Rotation- and permutation-invariant pooling: max over nodes of every
/// degree-0 channel.
pub fn invariant_pool(tape: &mut Tape, feats: &TapedFiber) -> Result<NodeId> {
    let Some(f0) = feats.node(0) else {
        return Err(Error::config(
            "fiber",
            "invariant pooling needs degree-0 channels",
        ));
    };
    let shape = tape.value(f0).shape().to_vec();
    let flat = tape.reshape(f0, &[shape[0], shape[1]])?;
    tape.max_axis0(flat)
}

/// Per-layer and end-to-end relative equivariance residuals of a model over
/// random clouds, features, and rotations, plus the worst attention-weight
/// movement. Rotating the input means rotating both the cloud positions and
/// the input features.
pub struct EquivarianceResiduals {
    pub per_layer: Vec<f64>,
    pub end_to_end: f64,
    pub attention: f64,
}

pub fn model_equivariance_residuals(
    model: &Model,
    n_nodes: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<EquivarianceResiduals> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_layer = vec![0.0f64; model.n_layers()];
    let mut attention = 0.0f64;
    for _ in 0..trials {
        let positions =
            ndarray::Array2::from_shape_fn((n_nodes, 3), |_| rng.gen_range(-2.0..2.0));
        let graph = crate::graph::knn_neighborhoods(&positions, k)?;
        let input = FiberFeature::random(&model.config.input, n_nodes, &mut rng);
        let (outs, alphas) = model.forward_intermediates(&graph, &input)?;
        let g = crate::so3::Rotation::sample(&mut rng);
        let rot_graph = crate::graph::knn_neighborhoods(&rotate_positions(&positions, &g), k)?;
        let rot_input = input.rotate(&model.tables, &g)?;
        let (rot_outs, rot_alphas) = model.forward_intermediates(&rot_graph, &rot_input)?;
        for (i, (o, ro)) in outs.iter().zip(rot_outs.iter()).enumerate() {
            let want = o.rotate(&model.tables, &g)?;
            per_layer[i] = per_layer[i].max(want.relative_diff(ro));
        }
        for (a, b) in alphas.iter().zip(rot_alphas.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                attention = attention.max((x - y).abs());
            }
        }
    }
    let end_to_end = per_layer.last().copied().unwrap_or(0.0);
    Ok(EquivarianceResiduals {
        per_layer,
        end_to_end,
        attention,
    })
}

/// Rotates a point cloud's positions about the origin.
pub fn rotate_positions(positions: &ndarray::Array2<f64>, g: &crate::so3::Rotation) -> ndarray::Array2<f64> {
    let r = g.to_matrix();
    positions.dot(&r.t())
}

/// Packs per-node 3-vectors (Cartesian) into a degree-1 channel in m-order.
pub fn cartesian_to_m_order(v: &ndarray::Array2<f64>) -> Array3<f64> {
    let n = v.nrows();
    let mut out = Array3::zeros((n, 1, 3));
    for i in 0..n {
        out[[i, 0, 0]] = v[[i, 1]]; // y
        out[[i, 0, 1]] = v[[i, 2]]; // z
        out[[i, 0, 2]] = v[[i, 0]]; // x
    }
    out
}

/// Extracts a degree-1 channel back to Cartesian per-node 3-vectors.
pub fn m_order_to_cartesian(f: &Array3<f64>, channel: usize) -> ndarray::Array2<f64> {
    let n = f.dim().0;
    let mut out = ndarray::Array2::zeros((n, 3));
    for i in 0..n {
        out[[i, 0]] = f[[i, channel, 2]]; // x
        out[[i, 1]] = f[[i, channel, 0]]; // y
        out[[i, 2]] = f[[i, channel, 1]]; // z
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::knn_neighborhoods;
    use crate::so3::Rotation;
    use ndarray::Array2;

    fn random_cloud(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, 3), |_| rng.gen_range(-2.0..2.0))
    }

    fn small_config(attention: bool, si: SelfInteractionKind) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            input: Fiber::new(vec![(0, 1), (1, 2)]).unwrap(),
            hidden: Fiber::new(vec![(0, 2), (1, 2), (2, 2)]).unwrap(),
            output: Fiber::new(vec![(1, 2)]).unwrap(),
            heads: 1,
            self_interaction: si,
            norm_nonlinearity: false,
            attention,
            scale_logits: false,
            uniform_attention: false,
            radial_hidden: 8,
            edge_scalar_width: 0,
            seed: 7,
        }
    }

    fn model_equivariance_residual(model: &Model, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = random_cloud(6, &mut rng);
        let graph = knn_neighborhoods(&positions, 3).unwrap();
        let input = FiberFeature::random(&model.config.input, 6, &mut rng);
        let out = model.forward(&graph, &input).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let g = Rotation::sample(&mut rng);
            let rot_positions = rotate_positions(&positions, &g);
            let rot_graph = knn_neighborhoods(&rot_positions, 3).unwrap();
            let rot_input = input.rotate(&model.tables, &g).unwrap();
            let out_of_rot = model.forward(&rot_graph, &rot_input).unwrap();
            let rot_out = out.rotate(&model.tables, &g).unwrap();
            worst = worst.max(rot_out.relative_diff(&out_of_rot));
        }
        worst
    }

    #[test]
    fn tfn_layer_zero_radial_reduces_to_self_interaction() {
        let mut config = small_config(false, SelfInteractionKind::Linear);
        config.n_layers = 1;
        config.output = Fiber::new(vec![(0, 1), (1, 2)]).unwrap();
        let mut model = Model::new(config).unwrap();
        // zero every radial final layer
        for layer in &model.layers {
            for (_, rp) in &layer.value {
                rp.zero_final(&mut model.store);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let positions = random_cloud(5, &mut rng);
        let graph = knn_neighborhoods(&positions, 2).unwrap();
        let input = FiberFeature::random(&model.config.input, 5, &mut rng);
        let out = model.forward(&graph, &input).unwrap();

        // expected: per-degree channel mixing only
        for &(l, _) in out.fiber().entries() {
            let widx = model
                .store
                .index_of(&format!("layers.0.self.{l}.w"))
                .unwrap();
            let w = model.store.value(widx);
            let fin = input.degree(l).unwrap();
            let fout = out.degree(l).unwrap();
            let (n, co, m) = fout.dim();
            let ci = fin.dim().1;
            for i in 0..n {
                for o in 0..co {
                    for mm in 0..m {
                        let mut want = 0.0;
                        for c in 0..ci {
                            want += w[[o, c]] * fin[[i, c, mm]];
                        }
                        assert!((fout[[i, o, mm]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn tfn_layer_is_equivariant() {
        let mut config = small_config(false, SelfInteractionKind::Linear);
        config.n_layers = 1;
        let model = Model::new(config).unwrap();
        let res = model_equivariance_residual(&model, 72);
        assert!(res < 1e-10, "TFN layer equivariance residual {res}");
    }

    #[test]
    fn attention_layer_is_equivariant() {
        let model = Model::new(small_config(true, SelfInteractionKind::Attentive)).unwrap();
        let res = model_equivariance_residual(&model, 73);
        assert!(res < 1e-10, "attention equivariance residual {res}");
    }

    #[test]
    fn attention_weights_invariant_and_normalized() {
        let model = Model::new(small_config(true, SelfInteractionKind::Linear)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let positions = random_cloud(6, &mut rng);
        let graph = knn_neighborhoods(&positions, 3).unwrap();
        let input = FiberFeature::random(&model.config.input, 6, &mut rng);
        let (_, alphas) = model.forward_intermediates(&graph, &input).unwrap();
        assert_eq!(alphas.len(), 2);
        for a in &alphas {
            for seg in graph.offsets().windows(2) {
                let s: f64 = (seg[0]..seg[1]).map(|e| a[[e, 0]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let g = Rotation::sample(&mut rng);
        let rot_graph = knn_neighborhoods(&rotate_positions(&positions, &g), 3).unwrap();
        let rot_input = input.rotate(&model.tables, &g).unwrap();
        let (_, rot_alphas) = model.forward_intermediates(&rot_graph, &rot_input).unwrap();
        for (a, b) in alphas.iter().zip(rot_alphas.iter()) {
            let worst = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "attention weights moved by {worst}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let model = Model::new(small_config(true, SelfInteractionKind::Attentive)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        for _ in 0..10 {
            let n = 6;
            let positions = random_cloud(n, &mut rng);
            let graph = knn_neighborhoods(&positions, 3).unwrap();
            let input = FiberFeature::random(&model.config.input, n, &mut rng);
            let out = model.forward(&graph, &input).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let mut p_positions = Array2::zeros((n, 3));
            for (i, &p) in perm.iter().enumerate() {
                for c in 0..3 {
                    p_positions[[i, c]] = positions[[p, c]];
                }
            }
            let p_graph = knn_neighborhoods(&p_positions, 3).unwrap();
            let p_input = input.permute(&perm);
            let p_out = model.forward(&p_graph, &p_input).unwrap();
            let want = out.permute(&perm);
            assert!(want.max_abs_diff(&p_out) < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_matches_rescaled_tfn() {
        // with α ≡ 1/|N_i| the attention layer equals a TFN layer whose
        // messages are scaled by 1/k (constant-k graph)
        let mut cfg_att = small_config(true, SelfInteractionKind::Linear);
        cfg_att.uniform_attention = true;
        cfg_att.n_layers = 1;
        let cfg_tfn = ModelConfig {
            attention: false,
            uniform_attention: false,
            ..cfg_att.clone()
        };
        let m_att = Model::new(cfg_att).unwrap();
        let mut m_tfn = Model::new(cfg_tfn).unwrap();
        // align shared parameters by name
        for (i, name) in m_tfn.store.names().to_vec().iter().enumerate() {
            let src = m_att.store.index_of(name).expect("shared parameter");
            m_tfn.store.set_value(i, m_att.store.value(src).clone());
        }
        // self-interaction-only output via zeroed radials
        let mut m_self = Model::new(ModelConfig {
            attention: false,
            uniform_attention: false,
            ..m_att.config.clone()
        })
        .unwrap();
        for (i, name) in m_self.store.names().to_vec().iter().enumerate() {
            let src = m_att.store.index_of(name).expect("shared parameter");
            m_self.store.set_value(i, m_att.store.value(src).clone());
        }
        for layer in &m_self.layers {
            for (_, rp) in &layer.value {
                rp.zero_final(&mut m_self.store);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let k = 3;
        let positions = random_cloud(7, &mut rng);
        let graph = knn_neighborhoods(&positions, k).unwrap();
        let input = FiberFeature::random(&m_att.config.input, 7, &mut rng);
        let out_att = m_att.forward(&graph, &input).unwrap();
        let out_tfn = m_tfn.forward(&graph, &input).unwrap();
        let out_self = m_self.forward(&graph, &input).unwrap();

        for (((_, a), (_, t)), (_, s)) in out_att
            .entries()
            .iter()
            .zip(out_tfn.entries())
            .zip(out_self.entries())
        {
            for ((av, tv), sv) in a.iter().zip(t.iter()).zip(s.iter()) {
                let want = sv + (tv - sv) / k as f64;
                assert!((av - want).abs() < 1e-12, "{av} vs {want}");
            }
        }
    }

    #[test]
    fn linear_self_interaction_identity_and_zero() {
        let mut store = ParamStore::new();
        let w_id = store
            .register("w0", {
                let mut a = ArrayD::zeros(IxDyn(&[2, 2]));
                a[[0, 0]] = 1.0;
                a[[1, 1]] = 1.0;
                a
            })
            .unwrap();
        let w_zero = store.register("w1", ArrayD::zeros(IxDyn(&[1, 1]))).unwrap();
        let fiber = Fiber::new(vec![(0, 2), (1, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let f = FiberFeature::random(&fiber, 4, &mut rng);
        let mut tape = Tape::new();
        let taped = TapedFiber::from_feature(&mut tape, &f);
        let out = linear_self_interaction(
            &mut tape,
            &store,
            &[(0, w_id), (1, w_zero)],
            &taped,
        )
        .unwrap();
        let out_f = out.to_feature(&tape);
        assert_eq!(out_f.degree(0).unwrap(), f.degree(0).unwrap());
        assert!(out_f.degree(1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_interaction_commutes_with_rotation() {
        let tables = So3Tables::new(2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let w = store
            .register(
                "w",
                ArrayD::from_shape_fn(IxDyn(&[3, 2]), |_| rng.gen_range(-1.0..1.0)),
            )
            .unwrap();
        let fiber = Fiber::new(vec![(2, 2)]).unwrap();
        let f = FiberFeature::random(&fiber, 3, &mut rng);
        let g = Rotation::sample(&mut rng);
        let apply = |feat: &FiberFeature| {
            let mut tape = Tape::new();
            let taped = TapedFiber::from_feature(&mut tape, feat);
            let out = linear_self_interaction(&mut tape, &store, &[(2, w)], &taped).unwrap();
            out.to_feature(&tape)
        };
        let a = apply(&f.rotate(&tables, &g).unwrap());
        let b = apply(&f).rotate(&tables, &g).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attentive_weights_rotation_invariant_and_zero_input() {
        let config = small_config(true, SelfInteractionKind::Attentive);
        let model = Model::new(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let fiber = model.config.hidden.clone();
        let f = FiberFeature::random(&fiber, 4, &mut rng);
        let g = Rotation::sample(&mut rng);
        // weights = MLP(gram): compute via the layer-1 self-interaction params
        let si = &model.layers[1].self_int;
        let weights_of = |feat: &FiberFeature| -> Vec<ArrayD<f64>> {
            let mut tape = Tape::new();
            let taped = TapedFiber::from_feature(&mut tape, feat);
            let mut out = Vec::new();
            if let SelfInt::Attentive(mlps) = si {
                for (_, mlp) in mlps {
                    let fnode = taped.node(*mlps.iter().map(|(l, _)| l).next().unwrap()).unwrap();
                    let _ = fnode;
                    let l = mlps.iter().map(|(l, _)| *l).next().unwrap();
                    let fnode = taped.node(l).unwrap();
                    let n = tape.value(fnode).shape()[0];
                    let gram = tape.gram(fnode).unwrap();
                    let flat = tape.reshape(gram, &[n, mlp.c_in * mlp.c_in]).unwrap();
                    let w1 = tape.param(&model.store, mlp.w1);
                    let b1 = tape.param(&model.store, mlp.b1);
                    let h = tape.linear(flat, w1, b1).unwrap();
                    let r = tape.relu(h);
                    let w2 = tape.param(&model.store, mlp.w2);
                    let b2 = tape.param(&model.store, mlp.b2);
                    let wout = tape.linear(r, w2, b2).unwrap();
                    out.push(tape.value(wout).clone());
                    break;
                }
            }
            out
        };
        let w_plain = weights_of(&f);
        let w_rot = weights_of(&f.rotate(&model.tables, &g).unwrap());
        for (a, b) in w_plain.iter().zip(w_rot.iter()) {
            let worst = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "attentive weights moved by {worst}");
        }
        // zero features -> output of the full self-interaction is zero
        let zero = FiberFeature::zeros(&fiber, 4);
        let mut tape = Tape::new();
        let taped = TapedFiber::from_feature(&mut tape, &zero);
        for l in fiber.degrees() {
            if let Some(node) = self_interaction(&mut tape, &model.store, si, l, &taped).unwrap() {
                assert!(tape.value(node).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn norm_nonlinearity_properties() {
        let tables = So3Tables::new(2);
        let mut store = ParamStore::new();
        let g0 = store.register("g0", ArrayD::ones(IxDyn(&[3]))).unwrap();
        let b0 = store.register("b0", ArrayD::zeros(IxDyn(&[3]))).unwrap();
        let g1 = store.register("g1", ArrayD::ones(IxDyn(&[3]))).unwrap();
        let b1 = store.register("b1", ArrayD::zeros(IxDyn(&[3]))).unwrap();
        let params = vec![(0u32, (g0, b0)), (1u32, (g1, b1))];
        let fiber = Fiber::new(vec![(0, 3), (1, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let f = FiberFeature::random(&fiber, 5, &mut rng);
        let apply = |feat: &FiberFeature| {
            let mut tape = Tape::new();
            let taped = TapedFiber::from_feature(&mut tape, feat);
            let out = norm_nonlinearity(&mut tape, &store, &params, &taped).unwrap();
            out.to_feature(&tape)
        };
        // zero input stays zero and finite (ε-guard)
        let zero = FiberFeature::zeros(&fiber, 5);
        let z = apply(&zero);
        assert!(z.degree(1).unwrap().iter().all(|&v| v == 0.0));
        assert!(z.degree(0).unwrap().iter().all(|v| v.is_finite()));
        // commutes with rotation
        let g = Rotation::sample(&mut rng);
        let a = apply(&f.rotate(&tables, &g).unwrap());
        let b = apply(&f).rotate(&tables, &g).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn invariant_pool_properties() {
        let fiber = Fiber::new(vec![(0, 2), (1, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let f = FiberFeature::random(&fiber, 6, &mut rng);
        let pool = |feat: &FiberFeature| {
            let mut tape = Tape::new();
            let taped = TapedFiber::from_feature(&mut tape, feat);
            let p = invariant_pool(&mut tape, &taped).unwrap();
            tape.value(p).clone()
        };
        let base = pool(&f);
        // permutation leaves the pooled vector exactly unchanged
        let perm = [4usize, 0, 5, 2, 1, 3];
        assert_eq!(base, pool(&f.permute(&perm)));
        // rotation leaves it unchanged too (degree-0 untouched by rotation)
        let tables = So3Tables::new(1);
        let g = Rotation::sample(&mut rng);
        assert_eq!(base, pool(&f.rotate(&tables, &g).unwrap()));
        // single node pools to that node's channels
        let single = FiberFeature::random(&fiber, 1, &mut rng);
        let p = pool(&single);
        for c in 0..2 {
            assert_eq!(p[[c]], single.degree(0).unwrap()[[0, c, 0]]);
        }
        // missing degree 0 is a configuration error
        let f1 = FiberFeature::random(&Fiber::new(vec![(1, 2)]).unwrap(), 3, &mut rng);
        let mut tape = Tape::new();
        let taped = TapedFiber::from_feature(&mut tape, &f1);
        assert!(matches!(
            invariant_pool(&mut tape, &taped),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn translation_invariance_of_model() {
        let model = Model::new(small_config(true, SelfInteractionKind::Attentive)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let positions = random_cloud(6, &mut rng);
        let graph = knn_neighborhoods(&positions, 3).unwrap();
        let input = FiberFeature::random(&model.config.input, 6, &mut rng);
        let out = model.forward(&graph, &input).unwrap();
        let mut shifted = positions.clone();
        for i in 0..6 {
            shifted[[i, 0]] += 17.0;
            shifted[[i, 1] ] -= 4.0;
            shifted[[i, 2]] += 0.5;
        }
        let graph2 = knn_neighborhoods(&shifted, 3).unwrap();
        let out2 = model.forward(&graph2, &input).unwrap();
        assert!(out.max_abs_diff(&out2) < 1e-10);
    }

    #[test]
    fn parameter_count_matches_declared_shapes() {
        let model = Model::new(small_config(true, SelfInteractionKind::Attentive)).unwrap();
        let total: usize = (0..model.store.len())
            .map(|i| model.store.value(i).len())
            .sum();
        assert_eq!(model.n_parameters(), total);
        assert!(total > 0);
    }

    #[test]
    fn invalid_configs_name_offending_field() {
        let mut c = small_config(true, SelfInteractionKind::Linear);
        c.heads = 0;
        match Model::new(c) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
        let mut c2 = small_config(true, SelfInteractionKind::Linear);
        c2.heads = 3; // does not divide 2 channels
        match Model::new(c2) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn multihead_duplication_equivalence() {
        // an H=2 model whose parameters duplicate an H=1 model per head block
        // produces the H=1 outputs in both halves
        let mut c1 = small_config(true, SelfInteractionKind::Linear);
        c1.n_layers = 1;
        c1.input = Fiber::new(vec![(0, 1), (1, 1)]).unwrap();
        c1.output = Fiber::new(vec![(0, 1), (1, 1)]).unwrap();
        let m1 = Model::new(c1.clone()).unwrap();

        let mut c2 = c1.clone();
        c2.heads = 2;
        c2.input = Fiber::new(vec![(0, 2), (1, 2)]).unwrap();
        c2.output = Fiber::new(vec![(0, 2), (1, 2)]).unwrap();
        let mut m2 = Model::new(c2).unwrap();

        // surgery: duplicate every m1 parameter into block-diagonal m2 slots
        let names2 = m2.store.names().to_vec();
        for (i2, name) in names2.iter().enumerate() {
            let i1 = m1.store.index_of(name).expect("same parameter tree");
            let src = m1.store.value(i1).clone();
            let dst_shape = m2.store.value(i2).shape().to_vec();
            let mut dst = ArrayD::zeros(IxDyn(&dst_shape));
            if name.contains(".w3") || name.contains(".b3") {
                // radial finals: rows indexed by (J, c_in, c_out)
                let rp = find_radial(&m2, name);
                let (jn, ci2, co2) = rp;
                let (ci1, co1) = (ci2 / 2, co2 / 2);
                let dup = |row2: usize| -> Option<usize> {
                    let j = row2 / (ci2 * co2);
                    let rem = row2 % (ci2 * co2);
                    let i = rem / co2;
                    let o = rem % co2;
                    let (hi, io) = (i / ci1, i % ci1);
                    let (ho, oo) = (o / co1, o % co1);
                    if hi == ho {
                        Some((j * ci1 + io) * co1 + oo)
                    } else {
                        None
                    }
                };
                let _ = jn;
                if name.contains(".w3") {
                    for r2 in 0..dst_shape[0] {
                        if let Some(r1) = dup(r2) {
                            for c in 0..dst_shape[1] {
                                dst[[r2, c]] = src[[r1, c]];
                            }
                        }
                    }
                } else {
                    for r2 in 0..dst_shape[0] {
                        if let Some(r1) = dup(r2) {
                            dst[[r2]] = src[[r1]];
                        }
                    }
                }
            } else if name.contains(".query.") || name.contains(".self.") {
                // block-diagonal duplication of [c_out, c_in] matrices
                let (co2, ci2) = (dst_shape[0], dst_shape[1]);
                let (co1, ci1) = (co2 / 2, ci2 / 2);
                for h in 0..2 {
                    for o in 0..co1 {
                        for i in 0..ci1 {
                            dst[[h * co1 + o, h * ci1 + i]] = src[[o, i]];
                        }
                    }
                }
            } else {
                // hidden radial layers are shared verbatim
                dst.assign(&src);
            }
            m2.store.set_value(i2, dst);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let positions = random_cloud(5, &mut rng);
        let graph = knn_neighborhoods(&positions, 2).unwrap();
        let f1 = FiberFeature::random(&m1.config.input, 5, &mut rng);
        // duplicate channels for m2's input
        let mut parts = Vec::new();
        for (l, arr) in f1.entries() {
            let (n, c, m) = arr.dim();
            let mut dup = Array3::zeros((n, 2 * c, m));
            for i in 0..n {
                for ch in 0..c {
                    for mm in 0..m {
                        dup[[i, ch, mm]] = arr[[i, ch, mm]];
                        dup[[i, c + ch, mm]] = arr[[i, ch, mm]];
                    }
                }
            }
            parts.push((*l, dup));
        }
        let f2 = FiberFeature::from_parts(parts).unwrap();

        let o1 = m1.forward(&graph, &f1).unwrap();
        let o2 = m2.forward(&graph, &f2).unwrap();
        for ((_, a1), (_, a2)) in o1.entries().iter().zip(o2.entries()) {
            let (n, c1, m) = a1.dim();
            for i in 0..n {
                for ch in 0..c1 {
                    for mm in 0..m {
                        let want = a1[[i, ch, mm]];
                        assert!((a2[[i, ch, mm]] - want).abs() < 1e-10);
                        assert!((a2[[i, c1 + ch, mm]] - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    fn find_radial(m: &Model, w3_name: &str) -> (usize, usize, usize) {
        // recover (j_count, c_in, c_out) of the radial profile owning this name
        for layer in &m.layers {
            for ((_, _), rp) in layer.value.iter().chain(layer.key.iter()) {
                let indices = rp.param_indices();
                let w3_idx = indices[8];
                let b3_idx = indices[9];
                let names = m.store.names();
                if names[w3_idx] == w3_name || names[b3_idx] == w3_name {
                    return (rp.j_count, rp.c_in, rp.c_out);
                }
            }
        }
        panic!("radial profile for {w3_name} not found");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let model = Model::new(small_config(true, SelfInteractionKind::Attentive)).unwrap();
        let dir = std::env::temp_dir().join("se3t_layers_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        model.save_checkpoint(&path, None).unwrap();
        let (loaded, adam, step) = Model::load_checkpoint(&path).unwrap();
        assert!(adam.is_none());
        assert_eq!(step, 0);
        assert_eq!(loaded.config, model.config);
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let positions = random_cloud(5, &mut rng);
        let graph = knn_neighborhoods(&positions, 2).unwrap();
        let input = FiberFeature::random(&model.config.input, 5, &mut rng);
        let a = model.forward(&graph, &input).unwrap();
        let b = loaded.forward(&graph, &input).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        // sidecar exists and lists every parameter
        let sidecar: serde_json::Value = serde_json::from_slice(
            &std::fs::read(sidecar_path(&path)).unwrap(),
        )
        .unwrap();
        let arrays = sidecar["arrays"].as_object().unwrap();
        assert_eq!(arrays.len(), model.store.len());
    }
}
