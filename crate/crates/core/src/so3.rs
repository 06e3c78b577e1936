//! Rotations, real Wigner-D matrices, and Clebsch-Gordan blocks.
//!
//! Real irreducible representations of SO(3) are built numerically and
//! self-consistently with the spherical-harmonic basis of [`crate::sh`]:
//!
//! - `D_0 = [1]`, and `D_1(g)` is the rotation matrix conjugated by the fixed
//!   Cartesian-to-m-order permutation `(x, y, z) -> (y, z, x)`.
//! - For `l >= 2`, `D_l(g) = Q_l^T (D_1(g) ⊗ D_{l-1}(g)) Q_l`, where the
//!   isometry `Q_l` onto the top coupling block is pinned to the harmonic
//!   basis by regressing the pointwise products `Y_1(x) ⊗ Y_{l-1}(x)` on
//!   `[Y_{l-2}(x); Y_l(x)]` over fixed sample directions. This guarantees
//!   `Y_l(R_g x) = D_l(g) Y_l(x)` by construction.
//! - General Clebsch-Gordan blocks `Q_J^{lk}` are computed as the null space
//!   of the intertwiner constraint `(D_k ⊗ D_l)(g) X = X D_J(g)` stacked over
//!   fixed generator rotations, orthonormalized, with the overall sign fixed
//!   by making the first nonvanishing entry (column-major scan) positive.
//!
//! With the active convention `Y(R_g x) = D(g) Y(x)`, the kernel constraint
//! solved by these blocks reads `W(R_g x) = D_l(g) W(x) D_k(g)^T`.
//!
//! Caches are populated under `&mut self` during explicit warm-up
//! ([`So3Tables::new`] plus [`So3Tables::warm_pair`]); afterwards every
//! operation takes `&self` and the tables can be shared across threads.

use crate::error::{Error, Result};
use crate::sh::{sph_harm_batch, Direction};
use ndarray::{s, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::HashMap;

/// An element of SO(3), stored as a unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizing constructor. Rejects quaternions too close to zero.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid("quaternion norm too small to normalize"));
        }
        Ok(Rotation {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Haar-uniform rotation: four standard normals, normalized.
    pub fn sample(rng: &mut impl Rng) -> Self {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            if let Ok(r) = Rotation::from_quaternion(w, x, y, z) {
                return r;
            }
        }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("rotation axis must be nonzero"));
        }
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        Rotation::from_quaternion(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn about_z(angle: f64) -> Self {
        Rotation::from_axis_angle([0.0, 0.0, 1.0], angle).expect("fixed axis")
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Quaternion product; `to_matrix(a.compose(b)) = to_matrix(a) · to_matrix(b)`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (other.w, other.x, other.y, other.z);
        Rotation::from_quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )
        .expect("product of unit quaternions is unit")
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Standard rotation matrix of the unit quaternion.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let m = self.matrix();
        Array2::from_shape_fn((3, 3), |(i, j)| m[i][j])
    }

    pub fn rotate_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Kronecker product.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            let v = a[[i, j]];
            if v != 0.0 {
                let mut block = out.slice_mut(s![i * rb..(i + 1) * rb, j * cb..(j + 1) * cb]);
                block.assign(b);
                block.mapv_inplace(|e| e * v);
            }
        }
    }
    out
}

fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Nearest matrix with orthonormal columns (polar factor via SVD).
fn orthonormalize(m: &Array2<f64>) -> Array2<f64> {
    let svd = to_na(m).svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    from_na(&(u * vt))
}

/// Cartesian -> m-order permutation for degree 1: rows pick `(y, z, x)`.
fn perm_cart_to_m() -> Array2<f64> {
    let mut p = Array2::zeros((3, 3));
    p[[0, 1]] = 1.0;
    p[[1, 2]] = 1.0;
    p[[2, 0]] = 1.0;
    p
}

/// Precomputed representation tables up to a maximum degree (default 6).
///
/// The chain isometries needed by [`So3Tables::wigner_d`] are built eagerly;
/// Clebsch-Gordan blocks for a degree pair are built by [`So3Tables::warm_pair`].
pub struct So3Tables {
    max_degree: u32,
    /// `chain[l]` for `l >= 2`: isometry from the top coupling block of
    /// `D_1 ⊗ D_{l-1}` onto the degree-`l` harmonic basis.
    chain: Vec<Array2<f64>>,
    cg: HashMap<(u32, u32), Vec<Array2<f64>>>,
}

pub const DEFAULT_MAX_DEGREE: u32 = 6;

impl Default for So3Tables {
    fn default() -> Self {
        So3Tables::new(DEFAULT_MAX_DEGREE)
    }
}

impl So3Tables {
    /// Builds the Wigner-D chain up to `max_degree`.
    pub fn new(max_degree: u32) -> Self {
        let mut t = So3Tables {
            max_degree,
            chain: vec![Array2::zeros((0, 0)); (max_degree as usize + 1).max(2)],
            cg: HashMap::new(),
        };
        if max_degree >= 2 {
            t.build_chain();
        }
        t
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    fn build_chain(&mut self) {
        // Fixed deterministic sample directions; enough rows to make every
        // regression strongly overdetermined.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5e3a_17ab);
        let dirs: Vec<Direction> = (0..400)
            .map(|_| loop {
                let v = [
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ];
                if let Ok(d) = Direction::new(v) {
                    break d;
                }
            })
            .collect();
        let ys = sph_harm_batch(self.max_degree, &dirs).expect("sample directions are valid");
        let n = dirs.len();
        for l in 2..=self.max_degree as usize {
            let dim_t = 3 * (2 * l - 1);
            let dim_lo = 2 * l - 3;
            let dim_hi = 2 * l + 1;
            // targets: pointwise tensor products Y_1 ⊗ Y_{l-1}
            let mut t = nalgebra::DMatrix::zeros(n, dim_t);
            for i in 0..n {
                for a in 0..3 {
                    for b in 0..(2 * l - 1) {
                        t[(i, a * (2 * l - 1) + b)] = ys[1][[i, a]] * ys[l - 1][[i, b]];
                    }
                }
            }
            // regressors: [Y_{l-2} | Y_l]
            let mut x = nalgebra::DMatrix::zeros(n, dim_lo + dim_hi);
            for i in 0..n {
                for a in 0..dim_lo {
                    x[(i, a)] = ys[l - 2][[i, a]];
                }
                for a in 0..dim_hi {
                    x[(i, dim_lo + a)] = ys[l][[i, a]];
                }
            }
            let svd = x.svd(true, true);
            let m = svd.solve(&t, 1e-12).expect("regression solve");
            // top-block coefficients, transposed: columns follow the m-order of Y_l
            let mut top = Array2::zeros((dim_t, dim_hi));
            for r in 0..dim_hi {
                for c in 0..dim_t {
                    top[[c, r]] = m[(dim_lo + r, c)];
                }
            }
            self.chain[l] = orthonormalize(&top);
        }
    }

    /// Real Wigner-D matrix of degree `l`, in the m-order of [`crate::sh`],
    /// satisfying `Y_l(R_g x) = D_l(g) Y_l(x)`.
    pub fn wigner_d(&self, l: u32, g: &Rotation) -> Result<Array2<f64>> {
        Ok(self.wigner_d_all(l, g)?.pop().expect("nonempty"))
    }

    /// `D_0(g) .. D_l(g)` in one pass (the recursion produces them anyway).
    pub fn wigner_d_all(&self, l: u32, g: &Rotation) -> Result<Vec<Array2<f64>>> {
        if l > self.max_degree {
            return Err(Error::Capability(format!(
                "wigner_d degree {l} exceeds configured maximum {}",
                self.max_degree
            )));
        }
        let mut ds: Vec<Array2<f64>> = Vec::with_capacity(l as usize + 1);
        ds.push(Array2::eye(1));
        if l >= 1 {
            let p = perm_cart_to_m();
            ds.push(p.dot(&g.to_matrix()).dot(&p.t()));
        }
        for deg in 2..=l as usize {
            let q = &self.chain[deg];
            let big = kron(&ds[1], &ds[deg - 1]);
            ds.push(q.t().dot(&big).dot(q));
        }
        Ok(ds)
    }

    /// Clebsch-Gordan block `Q_J^{lk}` of shape `(2l+1)(2k+1) × (2J+1)`,
    /// an isometry satisfying `(D_k ⊗ D_l)(g) Q = Q D_J(g)`. The pair must
    /// have been warmed.
    pub fn clebsch_gordan(&self, l: u32, k: u32, j: u32) -> Result<&Array2<f64>> {
        if j < l.abs_diff(k) || j > l + k {
            return Err(Error::invalid(format!(
                "clebsch_gordan: J = {j} outside triangle range [{}, {}] for (l, k) = ({l}, {k})",
                l.abs_diff(k),
                l + k
            )));
        }
        let blocks = self.cg.get(&(l, k)).ok_or_else(|| {
            Error::Capability(format!(
                "clebsch_gordan pair ({l}, {k}) not warmed; call warm_pair first"
            ))
        })?;
        Ok(&blocks[(j - l.abs_diff(k)) as usize])
    }

    /// All blocks of a pair, in ascending `J` order.
    pub fn cg_blocks(&self, l: u32, k: u32) -> Result<&[Array2<f64>]> {
        self.cg
            .get(&(l, k))
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::Capability(format!(
                    "clebsch_gordan pair ({l}, {k}) not warmed; call warm_pair first"
                ))
            })
    }

    pub fn is_warm(&self, l: u32, k: u32) -> bool {
        self.cg.contains_key(&(l, k))
    }

    /// Computes and caches every `Q_J^{lk}` block of one degree pair.
    pub fn warm_pair(&mut self, l: u32, k: u32) -> Result<()> {
        if self.cg.contains_key(&(l, k)) {
            return Ok(());
        }
        if l + k > self.max_degree {
            return Err(Error::Capability(format!(
                "clebsch_gordan pair ({l}, {k}) needs degree {} > configured maximum {}",
                l + k,
                self.max_degree
            )));
        }
        // fixed generator rotations; two generic rotations determine the
        // intertwiner space, a third adds margin
        let mut rng = ChaCha8Rng::seed_from_u64(0xc61e_b5c4);
        let gens: Vec<Rotation> = (0..3).map(|_| Rotation::sample(&mut rng)).collect();
        let gen_ds: Vec<Vec<Array2<f64>>> = gens
            .iter()
            .map(|g| self.wigner_d_all(l + k, g))
            .collect::<Result<_>>()?;

        let mut blocks = Vec::new();
        for j in l.abs_diff(k)..=l + k {
            blocks.push(solve_cg_block(l, k, j, &gen_ds)?);
        }
        self.cg.insert((l, k), blocks);
        Ok(())
    }

    /// Warms every pair `(l, k)` with `l + k <= max_degree`.
    pub fn warm_all_pairs(&mut self) -> Result<()> {
        for l in 0..=self.max_degree {
            for k in 0..=self.max_degree - l {
                self.warm_pair(l, k)?;
            }
        }
        Ok(())
    }

    /// Negative-control hook: reverses the rows of one cached block so the
    /// decomposition and kernel constraints visibly fail. Only meaningful for
    /// fault-injection checks.
    pub fn corrupt_cg_block_for_negative_control(&mut self, l: u32, k: u32, j: u32) -> Result<()> {
        let jmin = l.abs_diff(k);
        let blocks = self
            .cg
            .get_mut(&(l, k))
            .ok_or_else(|| Error::Capability(format!("pair ({l}, {k}) not warmed")))?;
        let idx = (j - jmin) as usize;
        let b = &blocks[idx];
        let flipped = Array2::from_shape_fn(b.dim(), |(r, c)| b[[b.nrows() - 1 - r, c]]);
        blocks[idx] = flipped;
        Ok(())
    }

    /// Residuals of the representation-algebra invariants over random trials.
    pub fn verify(&mut self, l_max: u32, trials: usize, seed: u64) -> Result<So3Report> {
        let l_max = l_max.min(self.max_degree);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rep = So3Report::default();
        for _ in 0..trials {
            let g1 = Rotation::sample(&mut rng);
            let g2 = Rotation::sample(&mut rng);
            let d1_all = self.wigner_d_all(l_max, &g1)?;
            let d2_all = self.wigner_d_all(l_max, &g2)?;
            let d12_all = self.wigner_d_all(l_max, &g1.compose(&g2))?;
            for l in 0..=l_max as usize {
                let homo = (&d1_all[l].dot(&d2_all[l]) - &d12_all[l])
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                let orth = (&d1_all[l].dot(&d1_all[l].t()) - &Array2::<f64>::eye(2 * l + 1))
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                rep.wigner_homomorphism = rep.wigner_homomorphism.max(homo);
                rep.wigner_orthogonality = rep.wigner_orthogonality.max(orth);
            }
            // D_1 conjugated by the m-order permutation is the rotation matrix
            if l_max >= 1 {
                let p = perm_cart_to_m();
                let back = p.t().dot(&d1_all[1]).dot(&p);
                let d1res = (&back - &g1.to_matrix())
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                rep.d1_vs_rotation_matrix = rep.d1_vs_rotation_matrix.max(d1res);
            }
        }
        // CG completeness and decomposition for warmable pairs within l_max
        let pair_max = l_max.min(3).min(self.max_degree / 2);
        for l in 0..=pair_max {
            for k in 0..=pair_max {
                if l + k > self.max_degree {
                    continue;
                }
                self.warm_pair(l, k)?;
                let blocks: Vec<Array2<f64>> = self.cg_blocks(l, k)?.to_vec();
                let dlk = ((2 * l + 1) * (2 * k + 1)) as usize;
                let mut qfull = Array2::<f64>::zeros((dlk, dlk));
                let mut col = 0;
                for b in &blocks {
                    qfull
                        .slice_mut(s![.., col..col + b.ncols()])
                        .assign(b);
                    col += b.ncols();
                }
                let comp = (&qfull.dot(&qfull.t()) - &Array2::<f64>::eye(dlk))
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                rep.cg_completeness = rep.cg_completeness.max(comp);
                for _ in 0..trials.min(20) {
                    let g = Rotation::sample(&mut rng);
                    let ds = self.wigner_d_all(l + k, &g)?;
                    let lhs = kron(&ds[k as usize], &ds[l as usize]);
                    let mut rhs = Array2::<f64>::zeros((dlk, dlk));
                    for (bi, b) in blocks.iter().enumerate() {
                        let j = (l.abs_diff(k) + bi as u32) as usize;
                        rhs = rhs + b.dot(&ds[j]).dot(&b.t());
                    }
                    let dec = (&lhs - &rhs).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    rep.cg_decomposition = rep.cg_decomposition.max(dec);
                }
            }
        }
        Ok(rep)
    }
}

/// Solves the single-block intertwiner constraint by a stacked null space.
fn solve_cg_block(l: u32, k: u32, j: u32, gen_ds: &[Vec<Array2<f64>>]) -> Result<Array2<f64>> {
    let dlk = ((2 * l + 1) * (2 * k + 1)) as usize;
    let dj = (2 * j + 1) as usize;
    let n = dlk * dj;
    let mut stacked = nalgebra::DMatrix::zeros(gen_ds.len() * n, n);
    for (gi, ds) in gen_ds.iter().enumerate() {
        let a = kron(&ds[k as usize], &ds[l as usize]);
        let dj_m = &ds[j as usize];
        // rows of (I_dj ⊗ A - D_J^T ⊗ I_dlk), column-major vec convention:
        // vec(X)[col*dlk + row]
        for jc in 0..dj {
            for ir in 0..dlk {
                let r = gi * n + jc * dlk + ir;
                for ic in 0..dlk {
                    stacked[(r, jc * dlk + ic)] += a[[ir, ic]];
                }
                for jc2 in 0..dj {
                    stacked[(r, jc2 * dlk + ir)] -= dj_m[[jc2, jc]];
                }
            }
        }
    }
    let svd = stacked.svd(true, true);
    let sv = &svd.singular_values;
    let vt = svd.v_t.as_ref().expect("svd v_t");
    // nalgebra sorts singular values descending: the null vector is the last row of V^T
    let min_idx = sv.len() - 1;
    if sv[min_idx] > 1e-8 {
        return Err(Error::invalid(format!(
            "cg({l},{k},{j}): no intertwiner found (smallest singular value {:.3e})",
            sv[min_idx]
        )));
    }
    if sv.len() >= 2 && sv[min_idx - 1] < 1e-6 {
        return Err(Error::invalid(format!(
            "cg({l},{k},{j}): intertwiner space not one-dimensional (gap {:.3e})",
            sv[min_idx - 1]
        )));
    }
    let mut x = Array2::zeros((dlk, dj));
    for c in 0..dj {
        for r in 0..dlk {
            x[[r, c]] = vt[(min_idx, c * dlk + r)];
        }
    }
    let mut q = orthonormalize(&x);
    // global sign: first non-negligible entry in column-major order positive
    'outer: for c in 0..dj {
        for r in 0..dlk {
            if q[[r, c]].abs() > 1e-8 {
                if q[[r, c]] < 0.0 {
                    q.mapv_inplace(|v| -v);
                }
                break 'outer;
            }
        }
    }
    Ok(q)
}

/// Max residual of the rotation property `Y_J(R_g x) = D_J(g) Y_J(x)` over
/// random rotations and directions, degrees `0..=j_max`.
pub fn sh_rotation_residual(
    tables: &So3Tables,
    j_max: u32,
    n_dirs: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    use crate::sh::sph_harm_batch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let g = Rotation::sample(&mut rng);
        let ds = tables.wigner_d_all(j_max, &g)?;
        let dirs = crate::sh::random_directions(n_dirs, &mut rng);
        let rotated: Vec<Direction> = dirs
            .iter()
            .map(|d| Direction::new(g.rotate_vec(d.as_array())).expect("unit"))
            .collect();
        let ys = sph_harm_batch(j_max, &dirs)?;
        let ys_rot = sph_harm_batch(j_max, &rotated)?;
        for j in 0..=j_max as usize {
            let want = ys[j].dot(&ds[j].t());
            for (a, b) in want.iter().zip(ys_rot[j].iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Max residuals over the verification trials.
#[derive(Debug, Default, Clone, Serialize)]
pub struct So3Report {
    pub wigner_orthogonality: f64,
    pub wigner_homomorphism: f64,
    pub d1_vs_rotation_matrix: f64,
    pub cg_completeness: f64,
    pub cg_decomposition: f64,
}

impl So3Report {
    pub fn max_residual(&self) -> f64 {
        self.wigner_orthogonality
            .max(self.wigner_homomorphism)
            .max(self.d1_vs_rotation_matrix)
            .max(self.cg_completeness)
            .max(self.cg_decomposition)
    }
}
