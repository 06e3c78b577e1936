//! Equivariant kernel bases and learnable radial profiles.
//!
//! A kernel mapping degree-`k` features to degree-`l` features along an edge
//! with direction `u = x/‖x‖` lies in the span of the angular basis blocks
//!
//! `Ŵ_J(u) = unvec(Q_J^{lk} Y_J(u))`, `J = |l-k| .. l+k`,
//!
//! each of shape `(2l+1) × (2k+1)` (column-major unvec). The learnable kernel
//! is `W(x) = Σ_J φ_J(‖x‖) Ŵ_J(x/‖x‖)` with scalar radial profiles `φ_J`
//! emitted per channel pair by a small dense network. With the conventions of
//! [`crate::so3`], the assembled kernel satisfies
//! `W(R_g x) = D_l(g) W(x) D_k(g)^T`.
//!
//! Basis blocks depend only on edge geometry: they are computed once per
//! forward pass per `(l, k)` pair and shared across layers and channels.

use crate::autodiff::{NodeId, ParamStore, Tape, Value};
use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::sh::{sph_harm_batch, Direction};
use crate::so3::So3Tables;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Default hidden width of the radial networks.
pub const RADIAL_HIDDEN: usize = 32;

/// Layer-norm epsilon inside the radial networks.
pub const RADIAL_LN_EPS: f64 = 1e-5;

/// Angular basis blocks of one degree pair over an edge set:
/// `blocks[e, J, m, n] = Ŵ_J^{lk}(u_e)[m, n]`.
#[derive(Clone, Debug)]
pub struct BasisBlock {
    pub l: u32,
    pub k: u32,
    /// `[edges, j_count, 2l+1, 2k+1]`, shared so tapes can reference it.
    pub blocks: Value,
}

impl BasisBlock {
    pub fn j_min(&self) -> u32 {
        self.l.abs_diff(self.k)
    }

    pub fn j_count(&self) -> usize {
        (self.l + self.k - self.l.abs_diff(self.k)) as usize + 1
    }

    pub fn n_edges(&self) -> usize {
        self.blocks.shape()[0]
    }
}

/// Builds the angular basis for one degree pair from raw edge vectors.
/// Zero-length edges are rejected: self-edges are excluded upstream and
/// coincident points must be deduplicated or dropped by the caller.
pub fn basis_blocks(
    tables: &So3Tables,
    l: u32,
    k: u32,
    edge_vectors: &Array2<f64>,
) -> Result<BasisBlock> {
    let dirs = edge_dirs(edge_vectors)?;
    let ys = sph_harm_batch(l + k, &dirs)?;
    build_pair(tables, l, k, &ys)
}

fn edge_dirs(edge_vectors: &Array2<f64>) -> Result<Vec<Direction>> {
    (0..edge_vectors.nrows())
        .map(|e| {
            Direction::new([
                edge_vectors[[e, 0]],
                edge_vectors[[e, 1]],
                edge_vectors[[e, 2]],
            ])
            .map_err(|_| Error::DegenerateEdge { edge: e })
        })
        .collect()
}

fn build_pair(tables: &So3Tables, l: u32, k: u32, ys: &[Array2<f64>]) -> Result<BasisBlock> {
    let e = ys[0].nrows();
    let (ml, mk) = (2 * l as usize + 1, 2 * k as usize + 1);
    let j_min = l.abs_diff(k);
    let j_count = (l + k - j_min) as usize + 1;
    let mut blocks = ArrayD::zeros(IxDyn(&[e, j_count, ml, mk]));
    for (ji, j) in (j_min..=l + k).enumerate() {
        let q = tables.clebsch_gordan(l, k, j)?;
        // vec(W) = Q_J y, column-major: W[m, n] = (Q_J y)[n*ml + m]
        let y = &ys[j as usize];
        let w = y.dot(&q.t()); // [e, ml*mk]
        for ee in 0..e {
            for n in 0..mk {
                for m in 0..ml {
                    blocks[[ee, ji, m, n]] = w[[ee, n * ml + m]];
                }
            }
        }
    }
    Ok(BasisBlock {
        l,
        k,
        blocks: Arc::new(blocks),
    })
}

/// Per-forward-pass cache: one basis per degree pair over one edge set, plus
/// the shared radial-network input. Built once and reused by every layer.
pub struct BasisCache {
    pub pairs: HashMap<(u32, u32), BasisBlock>,
    /// `[edges, 1 + scalar width]`: radius, then optional edge scalars.
    pub radial_input: Value,
    pub n_edges: usize,
}

impl BasisCache {
    pub fn build(
        tables: &So3Tables,
        graph: &NeighborGraph,
        pairs: &[(u32, u32)],
    ) -> Result<BasisCache> {
        let dirs = edge_dirs(graph.edge_vectors())?;
        let max_j = pairs.iter().map(|&(l, k)| l + k).max().unwrap_or(0);
        let ys = sph_harm_batch(max_j, &dirs)?;
        let mut map = HashMap::new();
        for &(l, k) in pairs {
            if let std::collections::hash_map::Entry::Vacant(slot) = map.entry((l, k)) {
                slot.insert(build_pair(tables, l, k, &ys)?);
            }
        }
        let e = graph.n_edges();
        let s = graph.edge_scalars().map(|a| a.ncols()).unwrap_or(0);
        let mut radial = ArrayD::zeros(IxDyn(&[e, 1 + s]));
        for ee in 0..e {
            radial[[ee, 0]] = graph.edge_lengths()[ee];
            if let Some(scal) = graph.edge_scalars() {
                for c in 0..s {
                    radial[[ee, 1 + c]] = scal[[ee, c]];
                }
            }
        }
        Ok(BasisCache {
            pairs: map,
            radial_input: Arc::new(radial),
            n_edges: e,
        })
    }

    pub fn pair(&self, l: u32, k: u32) -> Result<&BasisBlock> {
        self.pairs
            .get(&(l, k))
            .ok_or_else(|| Error::invalid(format!("basis pair ({l}, {k}) not built")))
    }
}

/// A small dense network `radius (+ edge scalars) -> φ_J per channel pair`:
/// two hidden layers with layer norm and a rectifier, then a linear map whose
/// output reshapes exactly to `(j_count, c_in, c_out)`.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    pub input_width: usize,
    pub hidden: usize,
    pub j_count: usize,
    pub c_in: usize,
    pub c_out: usize,
    w1: usize,
    b1: usize,
    g1: usize,
    e1: usize,
    w2: usize,
    b2: usize,
    g2: usize,
    e2: usize,
    w3: usize,
    b3: usize,
}

impl RadialProfile {
    /// Registers the parameters under `prefix.*`. Hidden layers use
    /// fan-in-scaled uniform init; the final layer is additionally scaled by
    /// `1/√(j_count · c_in)` so assembled messages start at unit order.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_width: usize,
        hidden: usize,
        j_count: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out_width = j_count * c_in * c_out;
        fn mat(
            store: &mut ParamStore,
            name: String,
            rows: usize,
            cols: usize,
            scale: f64,
            rng: &mut impl Rng,
        ) -> Result<usize> {
            let bound = 1.0 / (cols as f64).sqrt();
            let arr = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
                rng.gen_range(-bound..bound) * scale
            });
            store.register(name, arr)
        }
        let w1 = mat(store, format!("{prefix}.w1"), hidden, input_width, 1.0, rng)?;
        let b1 = store.register(format!("{prefix}.b1"), ArrayD::zeros(IxDyn(&[hidden])))?;
        let g1 = store.register(format!("{prefix}.ln1.gamma"), ArrayD::ones(IxDyn(&[hidden])))?;
        let e1 = store.register(format!("{prefix}.ln1.beta"), ArrayD::zeros(IxDyn(&[hidden])))?;
        let w2 = mat(store, format!("{prefix}.w2"), hidden, hidden, 1.0, rng)?;
        let b2 = store.register(format!("{prefix}.b2"), ArrayD::zeros(IxDyn(&[hidden])))?;
        let g2 = store.register(format!("{prefix}.ln2.gamma"), ArrayD::ones(IxDyn(&[hidden])))?;
        let e2 = store.register(format!("{prefix}.ln2.beta"), ArrayD::zeros(IxDyn(&[hidden])))?;
        let scale = 1.0 / ((j_count * c_in) as f64).sqrt();
        let w3 = mat(store, format!("{prefix}.w3"), out_width, hidden, scale, rng)?;
        let b3 = store.register(format!("{prefix}.b3"), ArrayD::zeros(IxDyn(&[out_width])))?;
        Ok(RadialProfile {
            input_width,
            hidden,
            j_count,
            c_in,
            c_out,
            w1,
            b1,
            g1,
            e1,
            w2,
            b2,
            g2,
            e2,
            w3,
            b3,
        })
    }

    /// Taped forward pass: `[edges, input_width] -> [edges, j_count, c_in, c_out]`.
    /// Negative radii are rejected.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        radial_input: &Value,
    ) -> Result<NodeId> {
        if radial_input.ndim() != 2 || radial_input.shape()[1] != self.input_width {
            return Err(Error::invalid(format!(
                "radial input shape {:?}, want [_, {}]",
                radial_input.shape(),
                self.input_width
            )));
        }
        let e = radial_input.shape()[0];
        if (0..e).any(|i| radial_input[[i, 0]] < 0.0) {
            return Err(Error::invalid("negative radius in radial input"));
        }
        let x = tape.constant_shared(radial_input.clone());
        let out = self.forward_from(tape, store, x)?;
        tape.reshape(out, &[e, self.j_count, self.c_in, self.c_out])
    }

    /// Forward from an existing tape node (input already recorded).
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: NodeId,
    ) -> Result<NodeId> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let g1 = tape.param(store, self.g1);
        let e1 = tape.param(store, self.e1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let g2 = tape.param(store, self.g2);
        let e2 = tape.param(store, self.e2);
        let w3 = tape.param(store, self.w3);
        let b3 = tape.param(store, self.b3);
        let h1 = tape.linear(input, w1, b1)?;
        let n1 = tape.layer_norm(h1, g1, e1, RADIAL_LN_EPS)?;
        let r1 = tape.relu(n1);
        let h2 = tape.linear(r1, w2, b2)?;
        let n2 = tape.layer_norm(h2, g2, e2, RADIAL_LN_EPS)?;
        let r2 = tape.relu(n2);
        tape.linear(r2, w3, b3)
    }

    /// Zeroes the final linear layer (all radial coefficients become 0).
    pub fn zero_final(&self, store: &mut ParamStore) {
        store.value_mut(self.w3).fill(0.0);
        store.value_mut(self.b3).fill(0.0);
    }

    pub fn param_indices(&self) -> [usize; 10] {
        [
            self.w1, self.b1, self.g1, self.e1, self.w2, self.b2, self.g2, self.e2, self.w3,
            self.b3,
        ]
    }
}

/// Assembles full per-edge kernels from basis blocks and radial coefficients:
/// output `[edges, c_out, c_in, 2l+1, 2k+1]` with
/// `W[e,o,i] = Σ_J coeffs[e,J,i,o] · blocks[e,J]`.
pub fn assemble_kernel(blocks: &BasisBlock, coeffs: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let e = blocks.n_edges();
    let jn = blocks.j_count();
    if coeffs.ndim() != 4 || coeffs.shape()[0] != e || coeffs.shape()[1] != jn {
        return Err(Error::invalid(format!(
            "radial coefficients {:?} do not match basis [{e}, {jn}, ..]",
            coeffs.shape()
        )));
    }
    let (ci, co) = (coeffs.shape()[2], coeffs.shape()[3]);
    let (ml, mk) = (blocks.blocks.shape()[2], blocks.blocks.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[e, co, ci, ml, mk]));
    for ee in 0..e {
        for o in 0..co {
            for i in 0..ci {
                for j in 0..jn {
                    let c = coeffs[[ee, j, i, o]];
                    if c != 0.0 {
                        for m in 0..ml {
                            for n in 0..mk {
                                out[[ee, o, i, m, n]] += c * blocks.blocks[[ee, j, m, n]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Max kernel-constraint residual `‖W(R_g x) − D_l(g) W(x) D_k(g)^T‖_max`
/// over random kernels, directions and rotations, for all degree pairs with
/// `l, k <= pair_degree`.
pub fn kernel_constraint_residual(
    tables: &So3Tables,
    pair_degree: u32,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    use crate::so3::Rotation;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for l in 0..=pair_degree {
        for k in 0..=pair_degree {
            for _ in 0..trials {
                let x = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-2.0..2.0f64));
                if x.iter().all(|v: &f64| v.abs() < 1e-6) {
                    continue;
                }
                let g = Rotation::sample(&mut rng);
                let r = g.to_matrix();
                let xr = x.dot(&r.t());
                let b = basis_blocks(tables, l, k, &x)?;
                let br = basis_blocks(tables, l, k, &xr)?;
                let jn = b.j_count();
                let coeffs =
                    ArrayD::from_shape_fn(IxDyn(&[1, jn, 1, 1]), |_| rng.gen_range(-1.0..1.0));
                let w = assemble_kernel(&b, &coeffs)?;
                let wr = assemble_kernel(&br, &coeffs)?;
                let dl = tables.wigner_d(l, &g)?;
                let dk = tables.wigner_d(k, &g)?;
                let (ml, mk) = (2 * l as usize + 1, 2 * k as usize + 1);
                let w2 = Array2::from_shape_fn((ml, mk), |(m, n)| w[[0, 0, 0, m, n]]);
                let want = dl.dot(&w2).dot(&dk.t());
                for m in 0..ml {
                    for n in 0..mk {
                        worst = worst.max((wr[[0, 0, 0, m, n]] - want[[m, n]]).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::Y00;
    use crate::so3::Rotation;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn warm_tables(max: u32) -> So3Tables {
        let mut t = So3Tables::new(max);
        t.warm_all_pairs().unwrap();
        t
    }

    fn random_edges(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, 3), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn pair_00_is_constant_y00() {
        let tables = warm_tables(2);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let edges = random_edges(5, &mut rng);
        let b = basis_blocks(&tables, 0, 0, &edges).unwrap();
        assert_eq!(b.j_count(), 1);
        for e in 0..5 {
            assert!((b.blocks[[e, 0, 0, 0]] - Y00).abs() < 1e-14);
        }
    }

    #[test]
    fn pair_11_j0_block_proportional_to_identity() {
        let tables = warm_tables(2);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let edges = random_edges(4, &mut rng);
        let b = basis_blocks(&tables, 1, 1, &edges).unwrap();
        assert_eq!(b.j_count(), 3);
        // Q_0^{11} = vec(I)/sqrt(3), so the J = 0 block is (Y00/sqrt(3)) I
        let c = Y00 / 3f64.sqrt();
        for e in 0..4 {
            for m in 0..3 {
                for n in 0..3 {
                    let want = if m == n { c } else { 0.0 };
                    assert!((b.blocks[[e, 0, m, n]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_edge_rejected() {
        let tables = warm_tables(1);
        let edges = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        match basis_blocks(&tables, 0, 0, &edges) {
            Err(Error::DegenerateEdge { edge }) => assert_eq!(edge, 1),
            other => panic!("expected degenerate edge error, got {other:?}"),
        }
    }

    #[test]
    fn blocks_pairwise_orthogonal_frobenius() {
        let tables = warm_tables(6);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let edges = random_edges(3, &mut rng);
        for l in 0..=3u32 {
            for k in 0..=3u32 {
                let b = basis_blocks(&tables, l, k, &edges).unwrap();
                let jn = b.j_count();
                for e in 0..3 {
                    for j1 in 0..jn {
                        for j2 in 0..jn {
                            if j1 == j2 {
                                continue;
                            }
                            let (mut ip, mut n1, mut n2) = (0.0, 0.0, 0.0);
                            for m in 0..b.blocks.shape()[2] {
                                for n in 0..b.blocks.shape()[3] {
                                    let a = b.blocks[[e, j1, m, n]];
                                    let c = b.blocks[[e, j2, m, n]];
                                    ip += a * c;
                                    n1 += a * a;
                                    n2 += c * c;
                                }
                            }
                            let denom = (n1.sqrt() * n2.sqrt()).max(1e-300);
                            assert!(
                                (ip / denom).abs() < 1e-9,
                                "({l},{k}) edge {e}: J blocks {j1},{j2} not orthogonal"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_constraint_holds_for_assembled_kernels() {
        // W(R_g x) = D_l(g) W(x) D_k(g)^T within 1e-9 over random (x, g)
        let tables = warm_tables(6);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut worst = 0.0f64;
        for l in 0..=3u32 {
            for k in 0..=3u32 {
                for _ in 0..6 {
                    let x = random_edges(1, &mut rng);
                    let g = Rotation::sample(&mut rng);
                    let r = g.to_matrix();
                    let xr = x.dot(&r.t()); // rows are R x
                    let b = basis_blocks(&tables, l, k, &x).unwrap();
                    let br = basis_blocks(&tables, l, k, &xr).unwrap();
                    let jn = b.j_count();
                    let coeffs =
                        ArrayD::from_shape_fn(IxDyn(&[1, jn, 1, 1]), |_| rng.gen_range(-1.0..1.0));
                    let w = assemble_kernel(&b, &coeffs).unwrap();
                    let wr = assemble_kernel(&br, &coeffs).unwrap();
                    let dl = tables.wigner_d(l, &g).unwrap();
                    let dk = tables.wigner_d(k, &g).unwrap();
                    let (ml, mk) = (2 * l as usize + 1, 2 * k as usize + 1);
                    let w2 = Array2::from_shape_fn((ml, mk), |(m, n)| w[[0, 0, 0, m, n]]);
                    let want = dl.dot(&w2).dot(&dk.t());
                    for m in 0..ml {
                        for n in 0..mk {
                            worst = worst.max((wr[[0, 0, 0, m, n]] - want[[m, n]]).abs());
                        }
                    }
                }
            }
        }
        assert!(worst < 1e-9, "kernel constraint residual {worst}");
    }

    #[test]
    fn one_hot_j0_coefficient_gives_identity_kernel() {
        let tables = warm_tables(4);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let edges = random_edges(2, &mut rng);
        for l in 1..=2u32 {
            let b = basis_blocks(&tables, l, l, &edges).unwrap();
            let jn = b.j_count();
            let mut coeffs = ArrayD::zeros(IxDyn(&[2, jn, 1, 1]));
            for e in 0..2 {
                coeffs[[e, 0, 0, 0]] = 1.0; // J = 0 only
            }
            let w = assemble_kernel(&b, &coeffs).unwrap();
            let d = 2 * l as usize + 1;
            for e in 0..2 {
                let diag = w[[e, 0, 0, 0, 0]];
                assert!(diag.abs() > 1e-3);
                for m in 0..d {
                    for n in 0..d {
                        let want = if m == n { diag } else { 0.0 };
                        assert!((w[[e, 0, 0, m, n]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_kernel() {
        let tables = warm_tables(2);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let edges = random_edges(3, &mut rng);
        let b = basis_blocks(&tables, 1, 1, &edges).unwrap();
        let coeffs = ArrayD::zeros(IxDyn(&[3, 3, 2, 2]));
        let w = assemble_kernel(&b, &coeffs).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assembly_from_cached_blocks_is_bitwise_stable() {
        let tables = warm_tables(2);
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let edges = random_edges(4, &mut rng);
        let b = basis_blocks(&tables, 1, 1, &edges).unwrap();
        let coeffs = ArrayD::from_shape_fn(IxDyn(&[4, 3, 2, 2]), |_| rng.gen_range(-1.0..1.0));
        let w1 = assemble_kernel(&b, &coeffs).unwrap();
        let w2 = assemble_kernel(&b, &coeffs).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn radial_zero_final_layer_gives_zero_coefficients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let rp = RadialProfile::register(&mut store, "r", 1, 8, 3, 2, 2, &mut rng).unwrap();
        rp.zero_final(&mut store);
        let input: Value = Arc::new(ArrayD::from_shape_fn(IxDyn(&[5, 1]), |_| {
            rng.gen_range(0.0..3.0)
        }));
        let mut tape = Tape::new();
        let out = rp.forward(&mut tape, &store, &input).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).shape(), &[5, 3, 2, 2]);
    }

    #[test]
    fn radial_deterministic_across_runs() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(59);
            let rp = RadialProfile::register(&mut store, "r", 2, 8, 2, 1, 3, &mut rng).unwrap();
            let input: Value = Arc::new(ArrayD::from_shape_fn(IxDyn(&[7, 2]), |d| {
                (d[0] as f64) * 0.37 + (d[1] as f64) * 0.11
            }));
            let mut tape = Tape::new();
            let out = rp.forward(&mut tape, &store, &input).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn radial_rejects_negative_radius() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let rp = RadialProfile::register(&mut store, "r", 1, 8, 1, 1, 1, &mut rng).unwrap();
        let input: Value = Arc::new(ArrayD::from_elem(IxDyn(&[1, 1]), -0.5));
        let mut tape = Tape::new();
        assert!(rp.forward(&mut tape, &store, &input).is_err());
    }

    #[test]
    fn radial_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let rp = RadialProfile::register(&mut store, "r", 1, 6, 2, 2, 1, &mut rng).unwrap();
        let input: Value = Arc::new(ArrayD::from_shape_fn(IxDyn(&[4, 1]), |_| {
            rng.gen_range(0.1..2.0)
        }));
        let loss_of = |s: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let out = rp.forward(&mut t, s, &input).unwrap();
            let sq = t.mul(out, out).unwrap();
            let l = t.sum_all(sq);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let out = rp.forward(&mut tape, &store, &input).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.grad(loss, &store).unwrap();
        let mut checked = 0;
        for p in 0..store.len() {
            let n = store.value(p).len();
            for e in (0..n).step_by(5) {
                let fd =
                    crate::autodiff::finite_diff(&mut store, p, e, 1e-5, |s| Ok(loss_of(s)))
                        .unwrap();
                let an = grads[p].as_slice().unwrap()[e];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {p} elem {e}: {an} vs {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn basis_cache_builds_requested_pairs_and_radius() {
        let tables = warm_tables(4);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let positions = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let graph = crate::graph::knn_neighborhoods(&positions, 2).unwrap();
        let cache = BasisCache::build(&tables, &graph, &[(0, 0), (1, 1), (2, 1)]).unwrap();
        assert_eq!(cache.n_edges, 10);
        assert_eq!(cache.radial_input.shape(), &[10, 1]);
        for e in 0..10 {
            assert!((cache.radial_input[[e, 0]] - graph.edge_lengths()[e]).abs() < 1e-15);
        }
        assert!(cache.pair(1, 1).is_ok());
        assert!(cache.pair(3, 3).is_err());
    }

    #[test]
    fn radial_output_reshapes_exactly() {
        // laid out (J, c_in, c_out) with no remainder
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let rp = RadialProfile::register(&mut store, "r", 1, 4, 3, 2, 5, &mut rng).unwrap();
        let input: Value = Arc::new(ArrayD::from_elem(IxDyn(&[2, 1]), 1.0));
        let mut tape = Tape::new();
        let out = rp.forward(&mut tape, &store, &input).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 3, 2, 5]);
        let x = tape.constant_shared(input.clone());
        let raw = rp.forward_from(&mut tape, &store, x).unwrap();
        let flat = tape.value(raw).clone();
        let shaped = tape.value(out);
        for j in 0..3 {
            for i in 0..2 {
                for o in 0..5 {
                    assert_eq!(shaped[[0, j, i, o]], flat[[0, (j * 2 + i) * 5 + o]]);
                }
            }
        }
    }

    #[test]
    fn assembled_kernel_equals_explicit_sum() {
        let tables = warm_tables(4);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let edges = random_edges(2, &mut rng);
        let b = basis_blocks(&tables, 2, 1, &edges).unwrap();
        let jn = b.j_count();
        let coeffs = ArrayD::from_shape_fn(IxDyn(&[2, jn, 1, 1]), |_| rng.gen_range(-1.0..1.0));
        let w = assemble_kernel(&b, &coeffs).unwrap();
        for e in 0..2 {
            for m in 0..5 {
                for n in 0..3 {
                    let mut want = 0.0;
                    for j in 0..jn {
                        want += coeffs[[e, j, 0, 0]] * b.blocks[[e, j, m, n]];
                    }
                    assert!((w[[e, 0, 0, m, n]] - want).abs() < 1e-14);
                }
            }
        }
    }
}
