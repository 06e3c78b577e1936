//! Associated Legendre polynomials and real tesseral spherical harmonics.
//!
//! This is the angular engine of the equivariant kernels. Evaluation is
//! dominated by the associated Legendre polynomials (ALPs) `P_J^m(cos θ)`,
//! which satisfy a two-term recursion in the degree. The fast path memoizes
//! every intermediate `(J, m)` array in an [`AlpTable`] so no subproblem is
//! solved twice; the naive path re-recurses from scratch and exists as the
//! benchmark baseline and as a bitwise cross-check.
//!
//! # Conventions
//!
//! Fixed once here and used by every other module:
//!
//! - m-ordering is `m = -J..=J`. For `J = 1` the components are proportional
//!   to `(y, z, x)` of the unit direction.
//! - The Condon-Shortley phase lives inside the ALP boundary,
//!   `P_J^J(x) = (-1)^J (1-x²)^{J/2} (2J-1)!!`.
//! - The harmonics are the orthonormal real (tesseral) basis:
//!   `Y_{Jm} = (-1)^{|m|} √2 N_J^{|m|} P_J^{|m|}(cos θ) · {sin,cos}(|m|φ)` for
//!   `m ≠ 0` and `N_J^0 P_J^0(cos θ)` for `m = 0`, with
//!   `N_J^m = √((2J+1)/(4π) · (J-m)!/(J+m)!)`. The `(-1)^{|m|}` factor undoes
//!   the Condon-Shortley phase so that `Y_1 ∝ (y, z, x)` with positive signs;
//!   the √2 makes the basis orthonormal (Monte-Carlo tested).
//! - At the poles `sin θ = 0` the azimuth is undefined; we take `φ = 0`. All
//!   `m ≠ 0` terms vanish there through the ALP factor, so the choice is
//!   unobservable.

use crate::error::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::Arc;

/// Chunk size for parallel batch evaluation. Per-element arithmetic is
/// independent of chunk boundaries, so results are bitwise identical for any
/// worker count.
const BATCH_CHUNK: usize = 8192;

/// `1/(2√π)`, the constant `Y_00`.
pub const Y00: f64 = 0.28209479177387814;

/// A unit direction on the sphere.
///
/// Canonical form is the unit 3-vector; `(θ, φ)` are derived on demand with
/// `cos θ = z` and `φ = atan2(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction([f64; 3]);

impl Direction {
    /// Builds a direction from a (not necessarily unit) vector, normalizing.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid("direction must be a nonzero finite vector"));
        }
        Ok(Direction([v[0] / n, v[1] / n, v[2] / n]))
    }

    /// Direction from polar angle `theta in [0, π]` and azimuth `phi`.
    pub fn from_polar(theta: f64, phi: f64) -> Self {
        let (st, ct) = (theta.sin(), theta.cos());
        Direction([st * phi.cos(), st * phi.sin(), ct])
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn cos_theta(&self) -> f64 {
        self.0[2]
    }

    /// `(cos φ, sin φ)` with `φ = 0` at the poles.
    pub fn cos_sin_phi(&self) -> (f64, f64) {
        let s = self.0[0].hypot(self.0[1]);
        if s > 0.0 {
            (self.0[0] / s, self.0[1] / s)
        } else {
            (1.0, 0.0)
        }
    }

    pub fn phi(&self) -> f64 {
        if self.0[0] == 0.0 && self.0[1] == 0.0 {
            0.0
        } else {
            self.0[1].atan2(self.0[0])
        }
    }

    pub fn theta(&self) -> f64 {
        self.0[2].clamp(-1.0, 1.0).acos()
    }
}

/// `(2m-1)!!` with the empty product `(-1)!! = 1`. Exact in f64 for the
/// supported range.
fn double_factorial_odd(m: u32) -> f64 {
    let mut acc = 1.0;
    let mut i = 1;
    while i + 1 <= 2 * m {
        acc *= i as f64;
        i += 2;
    }
    acc
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |a, i| a * i as f64)
}

/// Boundary `P_m^m(x) = (-1)^m (1-x²)^{m/2} (2m-1)!!`, with the constant
/// factor hoisted out of the per-element loop.
#[inline]
fn alp_boundary_factor(m: u32) -> f64 {
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    sign * double_factorial_odd(m)
}

#[inline]
fn alp_boundary_value(m: u32, factor: f64, x: f64) -> f64 {
    (1.0 - x * x).powf(m as f64 * 0.5) * factor
}

/// Two-term degree recursion
/// `P_J^m = ((2J-1) x P_{J-1}^m - [J-m > 1] (J+m-1) P_{J-2}^m) / (J-m)`.
#[inline]
fn alp_recurse(j: u32, m: u32, x: f64, p_jm1: f64, p_jm2: f64) -> f64 {
    let (jf, mf) = (j as f64, m as f64);
    if j - m > 1 {
        ((2.0 * jf - 1.0) * x * p_jm1 - (jf + mf - 1.0) * p_jm2) / (jf - mf)
    } else {
        (2.0 * jf - 1.0) * x * p_jm1 / (jf - mf)
    }
}

/// Memo of ALP evaluations over one shared array of `cos θ` values.
///
/// Entries are immutable after insertion: repeated lookups return the same
/// array bit-for-bit (they share storage).
pub struct AlpTable {
    x: Arc<[f64]>,
    memo: HashMap<(u32, i32), Arc<[f64]>>,
}

impl AlpTable {
    /// Builds an empty table over `cos θ` values, each required in [-1, 1].
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if let Some(bad) = x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "AlpTable input {bad} outside [-1, 1]"
            )));
        }
        Ok(AlpTable {
            x: x.into(),
            memo: HashMap::new(),
        })
    }

    /// Table over the `cos θ` of a direction batch.
    pub fn for_directions(dirs: &[Direction]) -> Self {
        AlpTable {
            x: dirs.iter().map(|d| d.cos_theta()).collect::<Vec<_>>().into(),
            memo: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.x
    }

    /// Number of memoized `(J, m)` entries (for inspection in tests).
    pub fn entries(&self) -> usize {
        self.memo.len()
    }
}

/// Memoized `P_J^m` over the table's input array.
///
/// Negative `m` uses the relation `P_J^{-m} = (-1)^J (J-m)!/(J+m)! P_J^m`
/// exactly as stated in the recursion set; the main spherical-harmonic path
/// only ever requests `m = |m|`, so the relation is exercised in isolation.
pub fn alp(j: u32, m: i32, table: &mut AlpTable) -> Result<Arc<[f64]>> {
    if m.unsigned_abs() > j {
        return Err(Error::invalid(format!("alp: |m| = {} > J = {j}", m.abs())));
    }
    if let Some(v) = table.memo.get(&(j, m)) {
        return Ok(v.clone());
    }
    let vals: Arc<[f64]> = if m < 0 {
        let pos = alp(j, -m, table)?;
        let mu = (-m) as u32;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let ratio = factorial(j - mu) / factorial(j + mu);
        pos.iter().map(|&p| sign * ratio * p).collect()
    } else {
        let mu = m as u32;
        if j == mu {
            let factor = alp_boundary_factor(mu);
            table
                .x
                .iter()
                .map(|&x| alp_boundary_value(mu, factor, x))
                .collect()
        } else {
            let p1 = alp(j - 1, m, table)?;
            if j - mu > 1 {
                let p2 = alp(j - 2, m, table)?;
                table
                    .x
                    .iter()
                    .zip(p1.iter().zip(p2.iter()))
                    .map(|(&x, (&a, &b))| alp_recurse(j, mu, x, a, b))
                    .collect()
            } else {
                table
                    .x
                    .iter()
                    .zip(p1.iter())
                    .map(|(&x, &a)| alp_recurse(j, mu, x, a, 0.0))
                    .collect()
            }
        }
    };
    table.memo.insert((j, m), vals.clone());
    Ok(vals)
}

/// `P_J^m` by plain top-down recursion with no memo. Every subproblem is
/// recomputed, which is exponential in `J - m`; the arithmetic per element is
/// identical to [`alp`], so values agree bitwise.
pub fn alp_naive(j: u32, m: u32, x: &[f64]) -> Vec<f64> {
    if j == m {
        let factor = alp_boundary_factor(m);
        return x.iter().map(|&x| alp_boundary_value(m, factor, x)).collect();
    }
    let p1 = alp_naive(j - 1, m, x);
    if j - m > 1 {
        let p2 = alp_naive(j - 2, m, x);
        x.iter()
            .zip(p1.iter().zip(p2.iter()))
            .map(|(&x, (&a, &b))| alp_recurse(j, m, x, a, b))
            .collect()
    } else {
        x.iter()
            .zip(p1.iter())
            .map(|(&x, &a)| alp_recurse(j, m, x, a, 0.0))
            .collect()
    }
}

/// Normalization `N_J^{|m|}` with the √2 and phase factors folded in, so
/// `Y_{Jm} = coeff(J,m) · P_J^{|m|}(cos θ) · {sin,cos}(|m| φ)`.
fn sh_coeff(j: u32, m_abs: u32) -> f64 {
    let n = ((2 * j + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(j - m_abs)
        / factorial(j + m_abs))
    .sqrt();
    if m_abs == 0 {
        n
    } else {
        let cs = if m_abs % 2 == 0 { 1.0 } else { -1.0 };
        cs * std::f64::consts::SQRT_2 * n
    }
}

/// `cos(mφ)`, `sin(mφ)` for `m = 0..=j_max`, per point, by the angle-addition
/// recurrence from `(cos φ, sin φ)`.
fn trig_tables(dirs: &[Direction], j_max: u32) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = dirs.len();
    let mm = j_max as usize + 1;
    let mut cos_m = vec![vec![0.0; n]; mm];
    let mut sin_m = vec![vec![0.0; n]; mm];
    cos_m[0].fill(1.0);
    if mm > 1 {
        for (i, d) in dirs.iter().enumerate() {
            let (c1, s1) = d.cos_sin_phi();
            cos_m[1][i] = c1;
            sin_m[1][i] = s1;
        }
        for m in 2..mm {
            let (lo, hi) = cos_m.split_at_mut(m);
            let (slo, shi) = sin_m.split_at_mut(m);
            let (cp, sp) = (&lo[m - 1], &slo[m - 1]);
            let (c1, s1) = (&lo[1], &slo[1]);
            for i in 0..n {
                hi[0][i] = cp[i] * c1[i] - sp[i] * s1[i];
                shi[0][i] = sp[i] * c1[i] + cp[i] * s1[i];
            }
        }
    }
    (cos_m, sin_m)
}

fn sph_harm_into(
    j: u32,
    dirs: &[Direction],
    table: &mut AlpTable,
    cos_m: &[Vec<f64>],
    sin_m: &[Vec<f64>],
    naive: bool,
) -> Result<Array2<f64>> {
    let n = dirs.len();
    let width = 2 * j as usize + 1;
    let mut out = Array2::zeros((n, width));
    let flat = out.as_slice_mut().expect("fresh array is contiguous");
    for m in -(j as i32)..=(j as i32) {
        let ma = m.unsigned_abs();
        let p: Arc<[f64]> = if naive {
            alp_naive(j, ma, table.inputs()).into()
        } else {
            alp(j, ma as i32, table)?
        };
        let coeff = sh_coeff(j, ma);
        let col = (m + j as i32) as usize;
        let trig: Option<&[f64]> = match m.cmp(&0) {
            std::cmp::Ordering::Less => Some(&sin_m[ma as usize]),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(&cos_m[ma as usize]),
        };
        match trig {
            None => {
                for (i, &pv) in p.iter().enumerate() {
                    flat[i * width + col] = coeff * pv;
                }
            }
            Some(t) => {
                for (i, (&pv, &tv)) in p.iter().zip(t.iter()).enumerate() {
                    flat[i * width + col] = coeff * pv * tv;
                }
            }
        }
    }
    Ok(out)
}

/// Real tesseral spherical harmonics `Y_J` over a direction batch, one row
/// per direction, columns in m-order. The table must have been built over the
/// same directions (same length, same `cos θ`).
pub fn sph_harm(j: u32, dirs: &[Direction], table: &mut AlpTable) -> Result<Array2<f64>> {
    if table.len() != dirs.len() {
        return Err(Error::invalid(format!(
            "sph_harm: table over {} points but {} directions",
            table.len(),
            dirs.len()
        )));
    }
    let (cos_m, sin_m) = trig_tables(dirs, j);
    sph_harm_into(j, dirs, table, &cos_m, &sin_m, false)
}

/// All degrees `J = 0..=j_max` over one shared [`AlpTable`], parallel over the
/// point axis. Values are identical to per-degree [`sph_harm`] calls.
pub fn sph_harm_batch(j_max: u32, dirs: &[Direction]) -> Result<Vec<Array2<f64>>> {
    sph_harm_batch_impl(j_max, dirs, false)
}

/// Benchmark baseline: identical output, but every ALP is recomputed by
/// naive recursion with no memo table.
pub fn sph_harm_batch_naive(j_max: u32, dirs: &[Direction]) -> Result<Vec<Array2<f64>>> {
    sph_harm_batch_impl(j_max, dirs, true)
}

fn sph_harm_batch_impl(j_max: u32, dirs: &[Direction], naive: bool) -> Result<Vec<Array2<f64>>> {
    let n = dirs.len();
    let chunks: Vec<&[Direction]> = dirs.chunks(BATCH_CHUNK).collect();
    let parts: Vec<Result<Vec<Array2<f64>>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut table = AlpTable::for_directions(chunk);
            let (cos_m, sin_m) = trig_tables(chunk, j_max);
            (0..=j_max)
                .map(|j| sph_harm_into(j, chunk, &mut table, &cos_m, &sin_m, naive))
                .collect()
        })
        .collect();
    let mut out: Vec<Array2<f64>> = (0..=j_max)
        .map(|j| Array2::zeros((n, 2 * j as usize + 1)))
        .collect();
    let mut row = 0;
    for part in parts {
        let part = part?;
        let len = part[0].nrows();
        for (j, arr) in part.into_iter().enumerate() {
            out[j]
                .slice_mut(ndarray::s![row..row + len, ..])
                .assign(&arr);
        }
        row += len;
    }
    Ok(out)
}

/// Convenience single-direction evaluation of `Y_J`.
pub fn sph_harm_dir(j: u32, dir: &Direction) -> Vec<f64> {
    let mut table = AlpTable::for_directions(std::slice::from_ref(dir));
    let arr = sph_harm(j, std::slice::from_ref(dir), &mut table).expect("table matches dirs");
    arr.row(0).to_vec()
}

// ---------------------------------------------------------------------------
// Independent oracle
// ---------------------------------------------------------------------------

/// `Y_{Jm}` by a structurally independent route: hard-coded Cartesian closed
/// forms for `J ≤ 2`, and a term-by-term Rodrigues expansion of the ALP for
/// `3 ≤ J ≤ 6`. No recursion, no memoization, no code shared with [`alp`].
pub fn sph_harm_oracle(j: u32, m: i32, dir: &Direction) -> Result<f64> {
    if m.unsigned_abs() > j {
        return Err(Error::invalid(format!(
            "sph_harm_oracle: |m| = {} > J = {j}",
            m.abs()
        )));
    }
    if j > 6 {
        return Err(Error::Capability(format!(
            "sph_harm_oracle covers J <= 6, requested J = {j}"
        )));
    }
    let [x, y, z] = dir.as_array();
    if j <= 2 {
        // Orthonormal real harmonics as polynomials in the unit vector.
        const C1: f64 = 0.4886025119029199; // sqrt(3/(4 pi))
        const C2A: f64 = 1.0925484305920792; // sqrt(15/(4 pi))
        const C2B: f64 = 0.31539156525252005; // (1/4) sqrt(5/pi)
        const C2C: f64 = 0.5462742152960396; // (1/4) sqrt(15/pi)
        return Ok(match (j, m) {
            (0, 0) => Y00,
            (1, -1) => C1 * y,
            (1, 0) => C1 * z,
            (1, 1) => C1 * x,
            (2, -2) => C2A * x * y,
            (2, -1) => C2A * y * z,
            (2, 0) => C2B * (3.0 * z * z - 1.0),
            (2, 1) => C2A * z * x,
            (2, 2) => C2C * (x * x - y * y),
            _ => unreachable!(),
        });
    }

    let ma = m.unsigned_abs();
    let ct = z;
    let p = rodrigues_alp(j, ma, ct);
    let norm = (((2 * j + 1) as f64) / (4.0 * std::f64::consts::PI) * oracle_factorial(j - ma)
        / oracle_factorial(j + ma))
    .sqrt();
    if m == 0 {
        return Ok(norm * p);
    }
    let phi = dir.phi();
    let cs = if ma % 2 == 0 { 1.0 } else { -1.0 };
    let ang = if m < 0 {
        (ma as f64 * phi).sin()
    } else {
        (ma as f64 * phi).cos()
    };
    Ok(cs * std::f64::consts::SQRT_2 * norm * p * ang)
}

fn oracle_factorial(n: u32) -> f64 {
    let mut acc = 1.0;
    for i in 2..=n {
        acc *= i as f64;
    }
    acc
}

fn binomial(n: u32, k: u32) -> f64 {
    oracle_factorial(n) / (oracle_factorial(k) * oracle_factorial(n - k))
}

/// `P_l^m(x)` from the Rodrigues form: differentiate `(x²-1)^l` term by term,
/// `P_l^m = (-1)^m (1-x²)^{m/2} / (2^l l!) Σ_k C(l,k) (-1)^{l-k} (2k)!/(2k-l-m)! x^{2k-l-m}`.
fn rodrigues_alp(l: u32, m: u32, x: f64) -> f64 {
    let lm = l + m;
    let mut sum = 0.0;
    for k in lm.div_ceil(2)..=l {
        let pow = 2 * k - lm;
        let deriv = oracle_factorial(2 * k) / oracle_factorial(pow);
        let sign = if (l - k) % 2 == 0 { 1.0 } else { -1.0 };
        sum += binomial(l, k) * sign * deriv * x.powi(pow as i32);
    }
    let cs = if m % 2 == 0 { 1.0 } else { -1.0 };
    let scale = 2f64.powi(l as i32) * oracle_factorial(l);
    cs * (1.0 - x * x).powf(m as f64 * 0.5) * sum / scale
}

/// Uniformly distributed unit directions from a seeded stream.
pub fn random_directions(n: usize, rng: &mut impl rand::Rng) -> Vec<Direction> {
    (0..n)
        .map(|_| loop {
            let v = [
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            ];
            if let Ok(d) = Direction::new(v) {
                break d;
            }
        })
        .collect()
}

/// Max absolute deviation between the engine and the independent oracle over
/// random directions, all degrees `0..=j_max` (capability-limited to 6).
pub fn oracle_residual(j_max: u32, n_dirs: usize, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dirs = random_directions(n_dirs, &mut rng);
    let ys = sph_harm_batch(j_max, &dirs)?;
    let mut worst = 0.0f64;
    for (i, d) in dirs.iter().enumerate() {
        for j in 0..=j_max {
            for m in -(j as i32)..=(j as i32) {
                let o = sph_harm_oracle(j, m, d)?;
                let e = ys[j as usize][[i, (m + j as i32) as usize]];
                worst = worst.max((o - e).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut impl Rng) -> Direction {
        loop {
            let v = [
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            ];
            if let Ok(d) = Direction::new(v) {
                return d;
            }
        }
    }

    #[test]
    fn alp_j0_is_one() {
        let mut t = AlpTable::new(vec![-1.0, -0.3, 0.0, 0.7, 1.0]).unwrap();
        let v = alp(0, 0, &mut t).unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn alp_boundary_frozen_value() {
        // P_1^1(0.5) = -sqrt(1 - 0.25)
        let mut t = AlpTable::new(vec![0.5]).unwrap();
        let v = alp(1, 1, &mut t).unwrap();
        assert!((v[0] - (-0.8660254037844386)).abs() < 1e-15);
    }

    #[test]
    fn alp_closed_form_degree_two() {
        // P_2^0(x) = (3x^2 - 1)/2
        let xs = vec![1.0, -1.0, 0.25, 0.9];
        let mut t = AlpTable::new(xs.clone()).unwrap();
        let v = alp(2, 0, &mut t).unwrap();
        for (x, got) in xs.iter().zip(v.iter()) {
            assert!((got - (3.0 * x * x - 1.0) / 2.0).abs() < 1e-15);
        }
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn alp_rejects_m_above_j() {
        let mut t = AlpTable::new(vec![0.0]).unwrap();
        assert!(matches!(
            alp(1, 2, &mut t),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn alp_table_rejects_out_of_range() {
        assert!(AlpTable::new(vec![0.0, 1.5]).is_err());
    }

    #[test]
    fn alp_negate_m_relation_as_stated() {
        // P_J^{-m} = (-1)^J (J-m)!/(J+m)! P_J^m, applied as written. For
        // (J, m) = (2, 1) the stated (-1)^J phase differs from the classical
        // (-1)^m one; this pins the implemented convention.
        let xs = vec![-0.8, 0.1, 0.6];
        let mut t = AlpTable::new(xs).unwrap();
        let pos = alp(2, 1, &mut t).unwrap();
        let neg = alp(2, -1, &mut t).unwrap();
        for (p, n) in pos.iter().zip(neg.iter()) {
            assert!((n - p / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn memo_lookups_share_storage() {
        let mut t = AlpTable::new(vec![0.2, 0.4]).unwrap();
        let a = alp(3, 1, &mut t).unwrap();
        let b = alp(3, 1, &mut t).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        // intermediates were stored too
        assert!(t.entries() >= 3);
    }

    #[test]
    fn memo_and_naive_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = AlpTable::new(xs.clone()).unwrap();
        for j in 0..=8u32 {
            for m in 0..=j {
                let fast = alp(j, m as i32, &mut t).unwrap();
                let slow = alp_naive(j, m, &xs);
                assert!(fast.iter().zip(slow.iter()).all(|(a, b)| a == b));
            }
        }
    }

    #[test]
    fn sph_harm_degree_zero_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs: Vec<Direction> = (0..32).map(|_| random_dir(&mut rng)).collect();
        let out = sph_harm_batch(0, &dirs).unwrap();
        for v in out[0].iter() {
            assert!((v - Y00).abs() < 1e-16);
        }
    }

    #[test]
    fn sph_harm_degree_one_at_pole() {
        let dir = Direction::new([0.0, 0.0, 1.0]).unwrap();
        let y = sph_harm_dir(1, &dir);
        assert!((y[0]).abs() < 1e-300);
        assert!((y[1] - 0.4886025119029199).abs() < 1e-15);
        assert!((y[2]).abs() < 1e-300);
    }

    #[test]
    fn sph_harm_addition_theorem_degree_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let d = random_dir(&mut rng);
            let y = sph_harm_dir(1, &d);
            let s: f64 = y.iter().map(|v| v * v).sum();
            assert!((s - 0.238732414637843).abs() < 1e-12, "sum = {s}");
        }
    }

    #[test]
    fn batch_matches_per_degree_calls_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dirs: Vec<Direction> = (0..100).map(|_| random_dir(&mut rng)).collect();
        let batch = sph_harm_batch(2, &dirs).unwrap();
        for j in 0..=2u32 {
            let mut t = AlpTable::for_directions(&dirs);
            let single = sph_harm(j, &dirs, &mut t).unwrap();
            assert_eq!(batch[j as usize], single);
        }
    }

    #[test]
    fn batch_naive_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs: Vec<Direction> = (0..200).map(|_| random_dir(&mut rng)).collect();
        let a = sph_harm_batch(6, &dirs).unwrap();
        let b = sph_harm_batch_naive(6, &dirs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_agrees_with_engine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dirs: Vec<Direction> = (0..500).map(|_| random_dir(&mut rng)).collect();
        let ys = sph_harm_batch(6, &dirs).unwrap();
        let mut worst = 0.0f64;
        for (i, d) in dirs.iter().enumerate() {
            for j in 0..=6u32 {
                for m in -(j as i32)..=(j as i32) {
                    let o = sph_harm_oracle(j, m, d).unwrap();
                    let e = ys[j as usize][[i, (m + j as i32) as usize]];
                    worst = worst.max((o - e).abs());
                }
            }
        }
        assert!(worst < 1e-10, "worst oracle deviation {worst}");
    }

    #[test]
    fn oracle_frozen_values() {
        let zp = Direction::new([0.0, 0.0, 1.0]).unwrap();
        assert!((sph_harm_oracle(1, 0, &zp).unwrap() - 0.4886025119029199).abs() < 1e-15);
        let xp = Direction::new([1.0, 0.0, 0.0]).unwrap();
        assert!((sph_harm_oracle(2, 2, &xp).unwrap() - 0.5462742152960396).abs() < 1e-15);
        assert!((sph_harm_oracle(0, 0, &xp).unwrap() - Y00).abs() < 1e-16);
    }

    #[test]
    fn oracle_rejects_j_above_six() {
        let d = Direction::new([1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            sph_harm_oracle(7, 0, &d),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn orthonormal_monte_carlo() {
        // <Y_Jm, Y_J'm'> = delta delta over uniform sphere samples.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        let dirs: Vec<Direction> = (0..n).map(|_| random_dir(&mut rng)).collect();
        let ys = sph_harm_batch(3, &dirs).unwrap();
        let w = 4.0 * std::f64::consts::PI / n as f64;
        // spot-check a representative set of pairs
        let pairs = [
            ((1u32, 0i32), (1u32, 0i32), 1.0),
            ((2, 1), (2, 1), 1.0),
            ((3, -2), (3, -2), 1.0),
            ((1, 0), (1, 1), 0.0),
            ((2, 0), (3, 0), 0.0),
            ((2, -1), (2, 1), 0.0),
        ];
        for ((j1, m1), (j2, m2), want) in pairs {
            let a = &ys[j1 as usize];
            let b = &ys[j2 as usize];
            let mut acc = 0.0;
            for i in 0..n {
                acc += a[[i, (m1 + j1 as i32) as usize]] * b[[i, (m2 + j2 as i32) as usize]];
            }
            let ip = acc * w;
            assert!(
                (ip - want).abs() < 5e-3,
                "<Y_{j1}{m1}, Y_{j2}{m2}> = {ip}, want {want}"
            );
        }
    }

    #[test]
    fn parallel_chunking_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dirs: Vec<Direction> = (0..(BATCH_CHUNK + 117)).map(|_| random_dir(&mut rng)).collect();
        let batch = sph_harm_batch(4, &dirs).unwrap();
        // sequential single-table reference
        for j in 0..=4u32 {
            let mut t = AlpTable::for_directions(&dirs);
            let single = sph_harm(j, &dirs, &mut t).unwrap();
            assert_eq!(batch[j as usize], single);
        }
    }
}
