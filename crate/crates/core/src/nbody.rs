//! Charged-particle regression task: simulation, dataset generation, the
//! linear baseline, and the equivariance-error metric.
//!
//! Five unit-mass particles carry charges ±1 and interact through a softened
//! inverse-square force
//!
//! `F_ij = κ q_i q_j (x_i - x_j) / (‖x_i - x_j‖² + σ²)^{3/2}`
//!
//! integrated with explicit Euler at step `dt` and recorded every
//! `record_interval` steps; there are no boundaries. A sample pairs the state
//! at a random recorded step with the state `horizon` recorded steps later.
//! The dynamics commute with rotations, so rotating a sample's input and
//! target yields another valid trajectory pair (up to integration roundoff).
//!
//! Force constants are fixed here (κ = 1, σ = 0.1, dt = 1e-3, record every
//! 100 steps); absolute error magnitudes are therefore specific to this
//! simulator and only orderings are comparable across implementations.

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::fiber::{Fiber, FiberFeature};
use crate::graph::{knn_neighborhoods, NeighborGraph};
use crate::layers::{cartesian_to_m_order, m_order_to_cartesian, GraphIndices, Model, TapedFiber};
use crate::so3::Rotation;
use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};

/// Simulation and sampling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    /// Bernoulli probability of a +1 charge.
    pub charge_prob: f64,
    /// Initial positions are uniform in `[-box_half, box_half]³`.
    pub box_half: f64,
    /// Initial velocity components are normal with this standard deviation.
    pub velocity_sigma: f64,
    pub dt: f64,
    /// Interaction strength κ.
    pub kappa: f64,
    /// Softening length σ.
    pub softening: f64,
    /// Euler steps per recorded state.
    pub record_interval: usize,
    /// Prediction horizon in recorded steps.
    pub horizon: usize,
    /// Input timestep is drawn uniformly from `0..=input_window` recorded
    /// steps; the trajectory is long enough to leave `horizon` steps after it.
    pub input_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_particles: 5,
            charge_prob: 0.5,
            box_half: 5.0,
            velocity_sigma: 0.5,
            dt: 1e-3,
            kappa: 1.0,
            softening: 0.1,
            record_interval: 100,
            horizon: 500,
            input_window: 100,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::config("n_particles", "need at least 2 particles"));
        }
        if self.dt <= 0.0 {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.record_interval < 1 {
            return Err(Error::config("record_interval", "must be at least 1"));
        }
        Ok(())
    }

    /// Prediction time span in simulation time units.
    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.dt * self.record_interval as f64
    }

    /// Stable hex digest of the configuration (canonical JSON).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Recorded trajectory: one state per recorded step.
pub struct Trajectory {
    pub charges: Vec<f64>,
    pub positions: Vec<Array2<f64>>,
    pub velocities: Vec<Array2<f64>>,
}

/// Pairwise softened accelerations (unit masses). Each pair is evaluated once
/// and applied antisymmetrically, so total momentum is conserved to roundoff.
fn accelerations(cfg: &SimConfig, charges: &[f64], pos: &Array2<f64>, acc: &mut Array2<f64>) {
    acc.fill(0.0);
    let n = charges.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pos[[i, 0]] - pos[[j, 0]];
            let dy = pos[[i, 1]] - pos[[j, 1]];
            let dz = pos[[i, 2]] - pos[[j, 2]];
            let r2 = dx * dx + dy * dy + dz * dz + cfg.softening * cfg.softening;
            let inv = cfg.kappa * charges[i] * charges[j] / (r2 * r2.sqrt());
            let (fx, fy, fz) = (dx * inv, dy * inv, dz * inv);
            acc[[i, 0]] += fx;
            acc[[i, 1]] += fy;
            acc[[i, 2]] += fz;
            acc[[j, 0]] -= fx;
            acc[[j, 1]] -= fy;
            acc[[j, 2]] -= fz;
        }
    }
}

/// Integrates one trajectory from sampled initial conditions, recording
/// `input_window + horizon + 1` states.
pub fn simulate(cfg: &SimConfig, rng: &mut impl Rng) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.n_particles;
    let charges: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < cfg.charge_prob {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let mut pos = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-cfg.box_half..cfg.box_half));
    let mut vel = Array2::from_shape_fn((n, 3), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal) * cfg.velocity_sigma
    });
    simulate_from(cfg, charges, &mut pos, &mut vel)
}

/// Integrates from explicit initial conditions (used by covariance checks).
pub fn simulate_from(
    cfg: &SimConfig,
    charges: Vec<f64>,
    pos: &mut Array2<f64>,
    vel: &mut Array2<f64>,
) -> Result<Trajectory> {
    cfg.validate()?;
    let records = cfg.input_window + cfg.horizon + 1;
    let mut traj = Trajectory {
        charges: charges.clone(),
        positions: Vec::with_capacity(records),
        velocities: Vec::with_capacity(records),
    };
    let mut acc = Array2::zeros(pos.raw_dim());
    traj.positions.push(pos.clone());
    traj.velocities.push(vel.clone());
    for _ in 1..records {
        for _ in 0..cfg.record_interval {
            accelerations(cfg, &charges, pos, &mut acc);
            // explicit Euler: advance positions with the current velocities,
            // then velocities with the accelerations at the old positions
            pos.zip_mut_with(vel, |p, &v| *p += cfg.dt * v);
            vel.zip_mut_with(&acc, |v, &a| *v += cfg.dt * a);
        }
        traj.positions.push(pos.clone());
        traj.velocities.push(vel.clone());
    }
    Ok(traj)
}

/// One regression sample: state at the input step, state `horizon` recorded
/// steps later.
#[derive(Clone, Debug)]
pub struct Sample {
    pub charges: Vec<f64>,
    pub input_positions: Array2<f64>,
    pub input_velocities: Array2<f64>,
    pub target_positions: Array2<f64>,
    pub target_velocities: Array2<f64>,
}

impl Sample {
    /// Rotates inputs and targets by the same rotation; charges are fixed.
    pub fn rotate(&self, g: &Rotation) -> Sample {
        let r = g.to_matrix();
        Sample {
            charges: self.charges.clone(),
            input_positions: self.input_positions.dot(&r.t()),
            input_velocities: self.input_velocities.dot(&r.t()),
            target_positions: self.target_positions.dot(&r.t()),
            target_velocities: self.target_velocities.dot(&r.t()),
        }
    }

    pub fn n_particles(&self) -> usize {
        self.charges.len()
    }
}

fn sample_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    // splitmix-style mixing so every (seed, split, index) gets its own stream
    let mut z = seed ^ split.wrapping_mul(0x9e3779b97f4a7c15) ^ index.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_from_trajectory(cfg: &SimConfig, traj: &Trajectory, rng: &mut impl Rng) -> Sample {
    let t_in = rng.gen_range(0..=cfg.input_window);
    Sample {
        charges: traj.charges.clone(),
        input_positions: traj.positions[t_in].clone(),
        input_velocities: traj.velocities[t_in].clone(),
        target_positions: traj.positions[t_in + cfg.horizon].clone(),
        target_velocities: traj.velocities[t_in + cfg.horizon].clone(),
    }
}

/// Generates train and test sample sets: one trajectory per sample, one
/// uniformly chosen input step with `horizon` recorded steps remaining.
/// Deterministic per `(seed, split, index)` and independent of worker count.
pub fn make_dataset(
    cfg: &SimConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let gen_split = |split: u64, count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = sample_rng(seed, split, i as u64);
                let traj = simulate(cfg, &mut rng)?;
                Ok(sample_from_trajectory(cfg, &traj, &mut rng))
            })
            .collect()
    };
    Ok((gen_split(0, n_train)?, gen_split(1, n_test)?))
}

/// Ballistic prediction: `x + v · horizon_time`, velocity unchanged.
pub fn linear_baseline(cfg: &SimConfig, sample: &Sample) -> (Array2<f64>, Array2<f64>) {
    let t = cfg.horizon_time();
    let pred_x = &sample.input_positions + &(&sample.input_velocities * t);
    (pred_x, sample.input_velocities.clone())
}

/// Mean squared error averaged over particles and coordinates.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "mse shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Aggregate position/velocity MSE of a predictor over a sample set.
pub fn evaluate_mse<F>(samples: &[Sample], mut predict: F) -> Result<(f64, f64)>
where
    F: FnMut(&Sample) -> Result<(Array2<f64>, Array2<f64>)>,
{
    let mut mx = 0.0;
    let mut mv = 0.0;
    for s in samples {
        let (px, pv) = predict(s)?;
        mx += mse(&px, &s.target_positions)?;
        mv += mse(&pv, &s.target_velocities)?;
    }
    Ok((mx / samples.len() as f64, mv / samples.len() as f64))
}

/// Relative equivariance error `‖L_g Φ(f) − Φ(L_g f)‖₂ / ‖L_g Φ(f)‖₂`
/// averaged over Haar rotations and samples. `L_g` rotates positions and
/// velocities (degree-1 quantities) and fixes charges. The predictor returns
/// displacement-style outputs `(Δx, Δv)` which transform as type-1 fields.
pub fn equivariance_error<F>(
    predict: F,
    samples: &[Sample],
    n_rotations: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Sample) -> Result<(Array2<f64>, Array2<f64>)>,
{
    if n_rotations == 0 || samples.is_empty() {
        return Err(Error::invalid("need at least one rotation and one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in samples {
        let (dx, dv) = predict(s)?;
        for _ in 0..n_rotations {
            let g = Rotation::sample(&mut rng);
            let r = g.to_matrix();
            let (dx_rot_in, dv_rot_in) = predict(&s.rotate(&g))?;
            let rot_dx = dx.dot(&r.t());
            let rot_dv = dv.dot(&r.t());
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in rot_dx.iter().zip(dx_rot_in.iter()) {
                num += (a - b) * (a - b);
            }
            for (a, b) in rot_dv.iter().zip(dv_rot_in.iter()) {
                num += (a - b) * (a - b);
            }
            for v in rot_dx.iter().chain(rot_dv.iter()) {
                den += v * v;
            }
            acc += num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// Model wiring
// ---------------------------------------------------------------------------

/// Wraps an equivariant [`Model`] as a particle predictor. Inputs enter as
/// one degree-0 channel (charge) and two degree-1 channels (centroid-centered
/// position and velocity); outputs are two degree-1 channels read as
/// displacement and velocity-change predictions. Centering makes the
/// predictor translation invariant; all other geometry enters through
/// relative positions. With `plus_z` the gravity-axis symmetry-breaking
/// channels of [`crate::graph::plus_z_features`] are appended (the model is
/// then deliberately not SO(3)-equivariant).
pub struct ParticlePredictor {
    pub model: Model,
    pub plus_z: bool,
}

/// Expected input/output fibers for the particle task.
pub fn particle_fibers(plus_z: bool) -> (Fiber, Fiber) {
    let input = if plus_z {
        Fiber::new(vec![(0, 3), (1, 3)]).expect("static")
    } else {
        Fiber::new(vec![(0, 1), (1, 2)]).expect("static")
    };
    (input, Fiber::new(vec![(1, 2)]).expect("static"))
}

impl ParticlePredictor {
    pub fn new(model: Model, plus_z: bool) -> Result<Self> {
        let (fin, fout) = particle_fibers(plus_z);
        if model.config.input != fin || model.config.output != fout {
            return Err(Error::config(
                "model.fibers",
                format!(
                    "particle task needs input {:?} and output {:?}, got {:?} and {:?}",
                    fin.entries(),
                    fout.entries(),
                    model.config.input.entries(),
                    model.config.output.entries()
                ),
            ));
        }
        Ok(ParticlePredictor { model, plus_z })
    }

    pub fn input_features(sample: &Sample, plus_z: bool) -> Result<FiberFeature> {
        let n = sample.n_particles();
        let mut charges = Array3::zeros((n, 1, 1));
        for i in 0..n {
            charges[[i, 0, 0]] = sample.charges[i];
        }
        let centroid = sample
            .input_positions
            .mean_axis(ndarray::Axis(0))
            .expect("nonempty");
        let centered = &sample.input_positions - &centroid.insert_axis(ndarray::Axis(0));
        let pos_ch = cartesian_to_m_order(&centered);
        let vel_ch = cartesian_to_m_order(&sample.input_velocities);
        let deg1 = ndarray::concatenate(ndarray::Axis(1), &[pos_ch.view(), vel_ch.view()])
            .expect("channel concat");
        let base = FiberFeature::from_parts(vec![(0, charges), (1, deg1)])?;
        if plus_z {
            crate::graph::plus_z_features(&sample.input_positions, &base)
        } else {
            Ok(base)
        }
    }

    pub fn graph(sample: &Sample) -> Result<NeighborGraph> {
        let n = sample.n_particles();
        knn_neighborhoods(&sample.input_positions, n - 1)
    }

    /// Displacement-style predictions `(Δx, Δv)` in Cartesian coordinates.
    pub fn predict_displacement(&self, sample: &Sample) -> Result<(Array2<f64>, Array2<f64>)> {
        let graph = Self::graph(sample)?;
        let input = Self::input_features(sample, self.plus_z)?;
        let out = self.model.forward(&graph, &input)?;
        let deg1 = out
            .degree(1)
            .ok_or_else(|| Error::invalid("model output lacks degree-1 channels"))?;
        Ok((m_order_to_cartesian(deg1, 0), m_order_to_cartesian(deg1, 1)))
    }

    /// Absolute predictions: input state plus predicted changes.
    pub fn predict(&self, sample: &Sample) -> Result<(Array2<f64>, Array2<f64>)> {
        let (dx, dv) = self.predict_displacement(sample)?;
        Ok((
            &sample.input_positions + &dx,
            &sample.input_velocities + &dv,
        ))
    }

    /// Records the training loss for one sample on a fresh tape:
    /// `mean((Δx̂ − Δx)²) + mean((Δv̂ − Δv)²)`.
    pub fn loss_tape(
        &self,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<(Tape, crate::autodiff::NodeId)> {
        let graph = Self::graph(sample)?;
        let basis = self.model.build_basis(&graph)?;
        let idx = GraphIndices::from_graph(&graph);
        let input = Self::input_features(sample, self.plus_z)?;
        let mut tape = Tape::new();
        let taped = TapedFiber::from_feature(&mut tape, &input);
        let (out, _) = self
            .model
            .forward_taped(&mut tape, store, &basis, &idx, &taped)?;
        let pred = out
            .node(1)
            .ok_or_else(|| Error::invalid("model output lacks degree-1 channels"))?;

        let n = sample.n_particles();
        let dx_true = &sample.target_positions - &sample.input_positions;
        let dv_true = &sample.target_velocities - &sample.input_velocities;
        let mut target = Array3::zeros((n, 2, 3));
        let dxm = cartesian_to_m_order(&dx_true);
        let dvm = cartesian_to_m_order(&dv_true);
        for i in 0..n {
            for m in 0..3 {
                target[[i, 0, m]] = dxm[[i, 0, m]];
                target[[i, 1, m]] = dvm[[i, 0, m]];
            }
        }
        let t = tape.constant(target.into_dyn());
        let diff = tape.sub(pred, t)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum_all(sq);
        let loss = tape.scale(total, 1.0 / (n as f64 * 3.0) / 2.0);
        Ok((tape, loss))
    }

    /// Mean loss and summed gradients over a batch, evaluated in parallel
    /// with a fixed (sample-order) reduction.
    pub fn batch_gradients(
        &self,
        store: &ParamStore,
        samples: &[&Sample],
    ) -> Result<(f64, Vec<ArrayD<f64>>)> {
        let results: Vec<Result<(f64, Vec<ArrayD<f64>>)>> = samples
            .par_iter()
            .map(|s| {
                let (tape, loss) = self.loss_tape(store, s)?;
                let grads = tape.grad(loss, store)?;
                Ok((tape.scalar(loss), grads))
            })
            .collect();
        let scale = 1.0 / samples.len() as f64;
        let mut total_loss = 0.0;
        let mut total: Option<Vec<ArrayD<f64>>> = None;
        for r in results {
            let (l, g) = r?;
            total_loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += &b;
                    }
                }
            }
        }
        let mut grads = total.ok_or_else(|| Error::invalid("empty batch"))?;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        Ok((total_loss * scale, grads))
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_interval: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 5000,
            batch: 32,
            lr: 3e-3,
            seed: 0,
            log_interval: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub train_loss: f64,
    pub val_mse_x: f64,
    pub val_mse_v: f64,
}

/// Deterministic batch index selection: a fresh stream per `(seed, step)`,
/// so resuming from any step reproduces the original trajectory bitwise.
fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = sample_rng(seed, 2, step);
    let take = batch.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Adam training loop over the displacement loss. Runs from the optimizer's
/// current step count up to `opts.steps`, calling `on_log` every
/// `log_interval` steps (and at the final step). Returns the optimizer for
/// checkpointing. A non-finite loss or gradient aborts with an error; the
/// caller decides what checkpoint to keep.
pub fn train<F>(
    predictor: &mut ParticlePredictor,
    opt: &mut crate::autodiff::Adam,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: &TrainOptions,
    mut on_log: F,
) -> Result<()>
where
    F: FnMut(&TrainLogEntry, &ParticlePredictor, &crate::autodiff::Adam) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(Error::config("data.n_train", "empty training set"));
    }
    if opts.batch == 0 {
        return Err(Error::config("training.batch", "batch must be positive"));
    }
    let start = opt.step_count();
    for step in start..opts.steps {
        let idx = batch_indices(opts.seed, step, train_set.len(), opts.batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
        let (loss, grads) = predictor.batch_gradients(&predictor.model.store, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        opt.step(&mut predictor.model.store, &grads)?;
        let done = step + 1;
        if done % opts.log_interval == 0 || done == opts.steps {
            let (vx, vv) = if val_set.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                evaluate_mse(val_set, |s| predictor.predict(s))?
            };
            on_log(
                &TrainLogEntry {
                    step: done,
                    train_loss: loss,
                    val_mse_x: vx,
                    val_mse_v: vv,
                },
                predictor,
                opt,
            )?;
        }
    }
    Ok(())
}

/// Non-equivariant control model: an ordinary dense network on the flattened
/// coordinate vector `[positions ‖ velocities ‖ charges]`, emitting flattened
/// `(Δx, Δv)`. Exists to show the equivariance metric detects its absence.
pub struct CoordinateMlp {
    n: usize,
    w1: Array2<f64>,
    b1: Vec<f64>,
    w2: Array2<f64>,
    b2: Vec<f64>,
    w3: Array2<f64>,
    b3: Vec<f64>,
}

impl CoordinateMlp {
    pub fn new(n_particles: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let din = n_particles * 7;
        let dout = n_particles * 6;
        let mut mk = |rows: usize, cols: usize| {
            let b = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-b..b))
        };
        CoordinateMlp {
            n: n_particles,
            w1: mk(hidden, din),
            b1: vec![0.0; hidden],
            w2: mk(hidden, hidden),
            b2: vec![0.0; hidden],
            w3: mk(dout, hidden),
            b3: vec![0.0; dout],
        }
    }

    pub fn predict_displacement(&self, sample: &Sample) -> Result<(Array2<f64>, Array2<f64>)> {
        if sample.n_particles() != self.n {
            return Err(Error::invalid("particle count mismatch"));
        }
        let mut x = Vec::with_capacity(self.n * 7);
        for i in 0..self.n {
            for c in 0..3 {
                x.push(sample.input_positions[[i, c]]);
            }
        }
        for i in 0..self.n {
            for c in 0..3 {
                x.push(sample.input_velocities[[i, c]]);
            }
        }
        x.extend_from_slice(&sample.charges);
        let dense = |w: &Array2<f64>, b: &[f64], x: &[f64], relu: bool| -> Vec<f64> {
            (0..w.nrows())
                .map(|o| {
                    let mut acc = b[o];
                    for (i, xv) in x.iter().enumerate() {
                        acc += w[[o, i]] * xv;
                    }
                    if relu {
                        acc.max(0.0)
                    } else {
                        acc
                    }
                })
                .collect()
        };
        let h1 = dense(&self.w1, &self.b1, &x, true);
        let h2 = dense(&self.w2, &self.b2, &h1, true);
        let y = dense(&self.w3, &self.b3, &h2, false);
        let mut dx = Array2::zeros((self.n, 3));
        let mut dv = Array2::zeros((self.n, 3));
        for i in 0..self.n {
            for c in 0..3 {
                dx[[i, c]] = y[i * 3 + c];
                dv[[i, c]] = y[self.n * 3 + i * 3 + c];
            }
        }
        Ok((dx, dv))
    }
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// JSON-lines record: one sample per line.
#[derive(Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub charges: Vec<f64>,
    pub input_positions: Vec<[f64; 3]>,
    pub input_velocities: Vec<[f64; 3]>,
    pub target_positions: Vec<[f64; 3]>,
    pub target_velocities: Vec<[f64; 3]>,
    pub meta: SampleMeta,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub config_hash: String,
}

fn rows(a: &Array2<f64>) -> Vec<[f64; 3]> {
    (0..a.nrows()).map(|i| [a[[i, 0]], a[[i, 1]], a[[i, 2]]]).collect()
}

fn from_rows(rows: &[[f64; 3]]) -> Array2<f64> {
    let mut a = Array2::zeros((rows.len(), 3));
    for (i, r) in rows.iter().enumerate() {
        for c in 0..3 {
            a[[i, c]] = r[c];
        }
    }
    a
}

pub fn write_samples(
    path: &std::path::Path,
    samples: &[Sample],
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for s in samples {
        let rec = SampleRecord {
            charges: s.charges.clone(),
            input_positions: rows(&s.input_positions),
            input_velocities: rows(&s.input_velocities),
            target_positions: rows(&s.target_positions),
            target_velocities: rows(&s.target_velocities),
            meta: SampleMeta {
                seed,
                config_hash: config_hash.to_string(),
            },
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn read_samples(path: &std::path::Path) -> Result<Vec<Sample>> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let f = std::fs::File::open(path).map_err(io_err)?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::malformed(format!("{}:{}", path.display(), ln + 1), e.to_string())
        })?;
        out.push(Sample {
            charges: rec.charges,
            input_positions: from_rows(&rec.input_positions),
            input_velocities: from_rows(&rec.input_velocities),
            target_positions: from_rows(&rec.target_positions),
            target_velocities: from_rows(&rec.target_velocities),
        });
    }
    Ok(out)
}
