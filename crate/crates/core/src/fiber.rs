//! Degree-indexed, multi-channel point features.
//!
//! A fiber lists `(degree, channels)` pairs; a feature attaches, per node and
//! per degree `l`, an array of shape `[nodes, channels, 2l+1]` whose last axis
//! is in the m-order of [`crate::sh`].

use crate::error::{Error, Result};
use crate::so3::{Rotation, So3Tables};
use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Type signature of a feature: `(degree, channel count)` pairs with strictly
/// increasing degrees.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, usize)>", into = "Vec<(u32, usize)>")]
pub struct Fiber {
    entries: Vec<(u32, usize)>,
}

impl TryFrom<Vec<(u32, usize)>> for Fiber {
    type Error = crate::error::Error;
    fn try_from(entries: Vec<(u32, usize)>) -> Result<Self> {
        Fiber::new(entries)
    }
}

impl From<Fiber> for Vec<(u32, usize)> {
    fn from(f: Fiber) -> Self {
        f.entries
    }
}

impl Fiber {
    pub fn new(entries: Vec<(u32, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("fiber must have at least one degree"));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid("fiber degrees must be strictly increasing"));
            }
        }
        if entries.iter().any(|&(_, c)| c == 0) {
            return Err(Error::invalid("fiber channel counts must be positive"));
        }
        Ok(Fiber { entries })
    }

    /// Degrees `0..n_degrees` with a uniform channel count.
    pub fn uniform(n_degrees: u32, channels: usize) -> Result<Self> {
        Fiber::new((0..n_degrees).map(|l| (l, channels)).collect())
    }

    pub fn entries(&self) -> &[(u32, usize)] {
        &self.entries
    }

    pub fn degrees(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(l, _)| l)
    }

    pub fn channels(&self, degree: u32) -> Option<usize> {
        self.entries
            .iter()
            .find(|&&(l, _)| l == degree)
            .map(|&(_, c)| c)
    }

    pub fn max_degree(&self) -> u32 {
        self.entries.last().map(|&(l, _)| l).unwrap_or(0)
    }

    /// Total dimension `Σ C_l (2l+1)`.
    pub fn dim(&self) -> usize {
        self.entries
            .iter()
            .map(|&(l, c)| c * (2 * l as usize + 1))
            .sum()
    }
}

/// Feature values conforming to a [`Fiber`], one entry per degree.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberFeature {
    entries: Vec<(u32, Array3<f64>)>,
}

impl FiberFeature {
    pub fn zeros(fiber: &Fiber, n_nodes: usize) -> Self {
        FiberFeature {
            entries: fiber
                .entries()
                .iter()
                .map(|&(l, c)| (l, Array3::zeros((n_nodes, c, 2 * l as usize + 1))))
                .collect(),
        }
    }

    pub fn from_parts(parts: Vec<(u32, Array3<f64>)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("feature must have at least one degree"));
        }
        let n = parts[0].1.dim().0;
        for w in parts.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid("feature degrees must be strictly increasing"));
            }
        }
        for (l, arr) in &parts {
            let (nn, _, m) = arr.dim();
            if nn != n {
                return Err(Error::invalid("feature degree blocks disagree on node count"));
            }
            if m != 2 * *l as usize + 1 {
                return Err(Error::invalid(format!(
                    "degree {l} block has m-dimension {m}, want {}",
                    2 * l + 1
                )));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature degree {l}")));
            }
        }
        Ok(FiberFeature { entries: parts })
    }

    pub fn random(fiber: &Fiber, n_nodes: usize, rng: &mut impl Rng) -> Self {
        FiberFeature {
            entries: fiber
                .entries()
                .iter()
                .map(|&(l, c)| {
                    let arr = Array3::from_shape_fn((n_nodes, c, 2 * l as usize + 1), |_| {
                        rng.sample(StandardNormal)
                    });
                    (l, arr)
                })
                .collect(),
        }
    }

    pub fn fiber(&self) -> Fiber {
        Fiber {
            entries: self
                .entries
                .iter()
                .map(|(l, a)| (*l, a.dim().1))
                .collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.entries[0].1.dim().0
    }

    pub fn entries(&self) -> &[(u32, Array3<f64>)] {
        &self.entries
    }

    pub fn degree(&self, l: u32) -> Option<&Array3<f64>> {
        self.entries
            .iter()
            .find(|&&(d, _)| d == l)
            .map(|(_, a)| a)
    }

    /// Appends channels to a degree block, creating the block if absent.
    pub fn append_channels(&mut self, degree: u32, extra: Array3<f64>) -> Result<()> {
        let (n, _, m) = extra.dim();
        if m != 2 * degree as usize + 1 {
            return Err(Error::invalid("appended channels have wrong m-dimension"));
        }
        if n != self.n_nodes() {
            return Err(Error::invalid("appended channels have wrong node count"));
        }
        if let Some(pos) = self.entries.iter().position(|&(d, _)| d == degree) {
            let old = &self.entries[pos].1;
            let merged = ndarray::concatenate(ndarray::Axis(1), &[old.view(), extra.view()])
                .expect("channel concat");
            self.entries[pos].1 = merged;
        } else {
            let at = self
                .entries
                .iter()
                .position(|&(d, _)| d > degree)
                .unwrap_or(self.entries.len());
            self.entries.insert(at, (degree, extra));
        }
        Ok(())
    }

    /// Applies the block-diagonal rotation action: each degree-`l` subvector
    /// is multiplied by `D_l(g)`.
    pub fn rotate(&self, tables: &So3Tables, g: &Rotation) -> Result<FiberFeature> {
        let ds = tables.wigner_d_all(self.fiber().max_degree(), g)?;
        let entries = self
            .entries
            .iter()
            .map(|(l, arr)| {
                let d = &ds[*l as usize];
                let (n, c, m) = arr.dim();
                let mut out = Array3::zeros((n, c, m));
                for i in 0..n {
                    for ch in 0..c {
                        let v = arr.slice(ndarray::s![i, ch, ..]);
                        let rv = d.dot(&v);
                        out.slice_mut(ndarray::s![i, ch, ..]).assign(&rv);
                    }
                }
                (*l, out)
            })
            .collect();
        Ok(FiberFeature { entries })
    }

    /// Relabels nodes: output node `i` carries input node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> FiberFeature {
        FiberFeature {
            entries: self
                .entries
                .iter()
                .map(|(l, arr)| {
                    let (_, c, m) = arr.dim();
                    let mut out = Array3::zeros((perm.len(), c, m));
                    for (i, &p) in perm.iter().enumerate() {
                        out.slice_mut(ndarray::s![i, .., ..])
                            .assign(&arr.slice(ndarray::s![p, .., ..]));
                    }
                    (*l, out)
                })
                .collect(),
        }
    }

    /// Flattens one node to a vector (degree-major, then channel, then m).
    pub fn flatten_node(&self, node: usize) -> Array1<f64> {
        let mut out = Vec::new();
        for (_, arr) in &self.entries {
            out.extend(arr.slice(ndarray::s![node, .., ..]).iter().copied());
        }
        Array1::from(out)
    }

    pub fn max_abs_diff(&self, other: &FiberFeature) -> f64 {
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(other.entries.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, a)| a.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖ / ‖self‖`.
    pub fn relative_diff(&self, other: &FiberFeature) -> f64 {
        let mut num = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(other.entries.iter()) {
            num += a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        num.sqrt() / self.norm().max(f64::MIN_POSITIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fiber_validation() {
        assert!(Fiber::new(vec![(0, 1), (1, 2)]).is_ok());
        assert!(Fiber::new(vec![(1, 2), (0, 1)]).is_err());
        assert!(Fiber::new(vec![(0, 1), (0, 2)]).is_err());
        assert!(Fiber::new(vec![(0, 0)]).is_err());
        assert_eq!(Fiber::new(vec![(0, 2), (2, 3)]).unwrap().dim(), 2 + 15);
    }

    #[test]
    fn rotation_action_is_orthogonal_per_degree() {
        let tables = So3Tables::new(3);
        let fiber = Fiber::new(vec![(0, 2), (1, 1), (2, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = FiberFeature::random(&fiber, 4, &mut rng);
        let g = Rotation::sample(&mut rng);
        let rf = f.rotate(&tables, &g).unwrap();
        for ((_, a), (_, b)) in f.entries().iter().zip(rf.entries().iter()) {
            let (n, c, _) = a.dim();
            for i in 0..n {
                for ch in 0..c {
                    let na: f64 = a.slice(ndarray::s![i, ch, ..]).iter().map(|v| v * v).sum();
                    let nb: f64 = b.slice(ndarray::s![i, ch, ..]).iter().map(|v| v * v).sum();
                    assert!((na - nb).abs() < 1e-12);
                }
            }
        }
        // degree 0 untouched
        assert_eq!(f.degree(0), rf.degree(0));
    }

    #[test]
    fn permute_then_inverse_roundtrips() {
        let fiber = Fiber::new(vec![(0, 1), (1, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f = FiberFeature::random(&fiber, 5, &mut rng);
        let perm = [3usize, 1, 4, 0, 2];
        let mut inv = [0usize; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = f.permute(&perm).permute(&inv);
        assert_eq!(f, back);
    }

    #[test]
    fn append_channels_merges_and_inserts() {
        let fiber = Fiber::new(vec![(1, 1)]).unwrap();
        let mut f = FiberFeature::zeros(&fiber, 3);
        f.append_channels(0, Array3::ones((3, 2, 1))).unwrap();
        f.append_channels(1, Array3::ones((3, 1, 3))).unwrap();
        let fb = f.fiber();
        assert_eq!(fb.entries(), &[(0, 2), (1, 2)]);
    }
}
