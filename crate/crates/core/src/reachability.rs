//! Ellipsoidal forward reachable sets of the closed-loop tracking error.
//!
//! The error `e = x − x̄` evolves as `ė = Φe + Dw` with `Φ = A + BK`. Each
//! disturbance channel contributes a Gramian-like shape; channels and the
//! initial error ellipsoid are merged with the boxplus approximation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{linearize, AgentModel, FeedbackGain, Linearization};
use crate::ellipsoid::boxplus_psd;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, expm, floor_eigenvalues, is_spd, min_eigenvalue, symmetrize, LyapunovSolver};
use crate::lqr::solve_care;

pub use crate::linalg::LyapunovSolver as Lyapunov;

/// Order in which channel shapes, the initial ellipsoid and the state transition are composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    /// Transport every component to time t first, then merge. Each component is
    /// bounded, so this stays well conditioned over long horizons.
    #[default]
    PropagateFirst,
    /// Merge in the initial-time frame, then transport with `exp(tΦ)`.
    MergeFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrsConfig {
    pub initial_shape: DMatrix<f64>,
    pub disturbance_bound: f64,
    pub eta: f64,
    pub lqr_q: DMatrix<f64>,
    pub lqr_r: DMatrix<f64>,
    pub order: ChannelOrder,
}

impl FrsConfig {
    /// `Q⁰ = 1e-4·I`, `η = 1e-3`, identity LQR weights.
    pub fn for_model(model: &AgentModel, disturbance_bound: f64) -> Self {
        let (nx, nu) = (model.state_dim, model.control_dim);
        Self {
            initial_shape: DMatrix::identity(nx, nx) * 1e-4,
            disturbance_bound,
            eta: 1e-3,
            lqr_q: DMatrix::identity(nx, nx),
            lqr_r: DMatrix::identity(nu, nu),
            order: ChannelOrder::default(),
        }
    }

    pub fn validate(&self, model: &AgentModel) -> Result<()> {
        let (nx, nu) = (model.state_dim, model.control_dim);
        if self.initial_shape.shape() != (nx, nx) || !is_spd(&self.initial_shape, 1e-10) {
            return Err(Error::input("initial error shape must be an SPD n_x×n_x matrix"));
        }
        if !(self.disturbance_bound >= 0.0 && self.disturbance_bound.is_finite()) {
            return Err(Error::input("disturbance bound must be non-negative"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::input("eta must be non-negative"));
        }
        if self.lqr_q.shape() != (nx, nx) || self.lqr_r.shape() != (nu, nu) {
            return Err(Error::input("LQR weight dimensions do not match the model"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrsSequence {
    pub shapes: Vec<DMatrix<f64>>,
    pub position_shapes: Vec<DMatrix<f64>>,
    pub gain: FeedbackGain,
    pub closed_loop: DMatrix<f64>,
    pub disturbance_matrix: DMatrix<f64>,
    pub linearization: Linearization,
    pub dt: f64,
    pub eta: f64,
    pub disturbance_bound: f64,
}

impl FrsSequence {
    pub fn steps(&self) -> usize {
        self.shapes.len() - 1
    }

    /// Position shape at step `t`, clamped to the last computed step.
    pub fn position_shape(&self, t: usize) -> &DMatrix<f64> {
        &self.position_shapes[t.min(self.position_shapes.len() - 1)]
    }
}

/// Solve `A X + X Aᵀ = C`.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    LyapunovSolver::new(a)?.solve(c)
}

fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 0.0)
}

/// Channel shape in the initial-time frame: solves
/// `−Φ(Q̃ − ηt²I) − (Q̃ − ηt²I)Φᵀ = exp(−tΦ) N exp(−tΦᵀ) − N` for `Q̃`.
pub fn channel_shape(phi: &DMatrix<f64>, n_mw: &DMatrix<f64>, t: f64, eta: f64) -> Result<DMatrix<f64>> {
    let solver = LyapunovSolver::new(phi)?;
    channel_shape_with(&solver, phi, n_mw, t, eta)
}

pub fn channel_shape_with(
    solver: &LyapunovSolver,
    phi: &DMatrix<f64>,
    n_mw: &DMatrix<f64>,
    t: f64,
    eta: f64,
) -> Result<DMatrix<f64>> {
    if t < 0.0 {
        return Err(Error::input("channel time must be non-negative"));
    }
    let n = phi.nrows();
    let back = expm(&(phi * (-t)))?;
    let rhs = &back * n_mw * back.transpose() - n_mw;
    // Φ X + X Φᵀ = −rhs
    let x = solver.solve(&(-rhs))?;
    let q = symmetrize(&(x + DMatrix::identity(n, n) * (eta * t * t)));
    if is_zero(&q) || q.amax() == 0.0 {
        return Ok(q);
    }
    if min_eigenvalue(&q) < 1e-12 {
        return Ok(floor_eigenvalues(&q, 1e-12));
    }
    Ok(q)
}

/// Boxplus over channel shapes, skipping zero matrices.
pub fn combine_channels(channel_shapes: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = channel_shapes.first().ok_or_else(|| Error::input("no channel shapes"))?;
    let n = first.nrows();
    if channel_shapes.iter().any(|m| m.shape() != (n, n)) {
        return Err(Error::input("channel shapes differ in dimension"));
    }
    let live: Vec<&DMatrix<f64>> = channel_shapes.iter().filter(|m| !is_zero(m)).collect();
    if live.is_empty() {
        return Ok(DMatrix::zeros(n, n));
    }
    Ok(boxplus_psd(&live))
}

/// `exp(tΦ)(Q⁰ ⊞ Q̃)exp(tΦᵀ)` with `Q⁰ ⊞ 0 = Q⁰`.
pub fn propagate(q0: &DMatrix<f64>, q_tilde: &DMatrix<f64>, phi: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if t < 0.0 {
        return Err(Error::input("propagation time must be non-negative"));
    }
    let e = expm(&(phi * t))?;
    let inner = if is_zero(q_tilde) { q0.clone() } else { boxplus_psd(&[q0, q_tilde]) };
    let q = symmetrize(&(&e * inner * e.transpose()));
    if !all_finite(&q) {
        return Err(Error::numerical("propagated shape overflowed"));
    }
    Ok(q)
}

/// Nominal control used as the linearization point: trim plus the least-squares
/// control that makes the position rate match `v_ref`.
pub fn linearization_control(model: &AgentModel, x0: &DVector<f64>, v_ref: &DVector<f64>) -> Result<DVector<f64>> {
    let trim = model.trim_control();
    let (_, b) = model.jacobians(x0, &trim);
    let rows: Vec<usize> = model.position_indices.clone();
    let b_pos = DMatrix::from_fn(rows.len(), model.control_dim, |i, j| b[(rows[i], j)]);
    if b_pos.amax() == 0.0 {
        return Ok(trim);
    }
    let mut f0 = vec![0.0; model.state_dim];
    model.deriv_into(x0.as_slice(), trim.as_slice(), &[], &mut f0);
    let resid = DVector::from_fn(rows.len(), |i, _| v_ref[i] - f0[rows[i]]);
    let du = b_pos
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::numerical(format!("pseudo-inverse failed: {e}")))?
        * resid;
    Ok(trim + du)
}

/// Linearize once at `(x̄, ū)`, synthesize the LQR gain and build shapes for steps `0..=steps`.
pub fn compute_frs_sequence(
    model: &AgentModel,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    steps: usize,
    config: &FrsConfig,
    dt: f64,
) -> Result<FrsSequence> {
    config.validate(model)?;
    if !(dt > 0.0) {
        return Err(Error::input("dt must be positive"));
    }
    let lin = linearize(model, xbar, ubar)?;
    let care = solve_care(&lin.a, &lin.b, &config.lqr_q, &config.lqr_r)?;
    let phi = &lin.a + &lin.b * &care.gain.k;
    let d = lin.d.clone();
    let wbar = config.disturbance_bound;
    let channels: Vec<DMatrix<f64>> = (0..d.ncols())
        .map(|m| {
            let col = d.column(m);
            &col * col.transpose() * (wbar * wbar)
        })
        .filter(|n| !is_zero(n))
        .collect();

    let solver = LyapunovSolver::new(&phi)?;
    let q0 = &config.initial_shape;
    let nx = model.state_dim;
    let step_exp = expm(&(&phi * dt))?;
    let mut e = DMatrix::<f64>::identity(nx, nx);
    let mut shapes = Vec::with_capacity(steps + 1);
    shapes.push(q0.clone());
    for k in 1..=steps {
        let t = k as f64 * dt;
        e = &step_exp * &e;
        let q = match config.order {
            ChannelOrder::PropagateFirst => {
                let p0 = symmetrize(&(&e * q0 * e.transpose()));
                if channels.is_empty() {
                    p0
                } else {
                    let reg = &e * e.transpose() * (config.eta * t * t);
                    let props: Vec<DMatrix<f64>> = channels
                        .iter()
                        .map(|n| {
                            let w = solver.solve(&(&e * n * e.transpose() - n))?;
                            Ok(symmetrize(&(w + &reg)))
                        })
                        .collect::<Result<_>>()?;
                    let refs: Vec<&DMatrix<f64>> = props.iter().collect();
                    let merged = boxplus_psd(&refs);
                    boxplus_psd(&[&p0, &merged])
                }
            }
            ChannelOrder::MergeFirst => {
                let tilde = if channels.is_empty() {
                    DMatrix::zeros(nx, nx)
                } else {
                    let parts: Vec<DMatrix<f64>> = channels
                        .iter()
                        .map(|n| channel_shape_with(&solver, &phi, n, t, config.eta))
                        .collect::<Result<_>>()?;
                    combine_channels(&parts)?
                };
                let inner = if is_zero(&tilde) { q0.clone() } else { boxplus_psd(&[q0, &tilde]) };
                symmetrize(&(&e * inner * e.transpose()))
            }
        };
        if !all_finite(&q) {
            return Err(Error::numerical(format!("reachable-set shape at step {k} is not finite")));
        }
        shapes.push(q);
    }
    let idx = &model.position_indices;
    let position_shapes = shapes
        .iter()
        .map(|q| DMatrix::from_fn(idx.len(), idx.len(), |i, j| q[(idx[i], idx[j])]))
        .collect();
    Ok(FrsSequence {
        shapes,
        position_shapes,
        gain: care.gain,
        closed_loop: phi,
        disturbance_matrix: d,
        linearization: lin,
        dt,
        eta: config.eta,
        disturbance_bound: wbar,
    })
}

/// How disturbances are drawn in [`containment_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisturbanceLaw {
    /// Euclidean ball of radius w̄: half the rollouts draw uniformly inside,
    /// half on the sphere.
    #[default]
    Ball,
    /// Per-channel interval: half uniform in the box, half on its vertices.
    Box,
}

/// Error-state discretization used in [`containment_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorStep {
    /// Sampled-data update with the disturbance held over the interval.
    #[default]
    Exact,
    /// `e⁺ = e + dt(Φe + Dw)`.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialError {
    Zero,
    /// Uniform inside the initial ellipsoid.
    #[default]
    Interior,
    /// Uniform on its boundary.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContainmentOptions {
    pub law: DisturbanceLaw,
    pub step: ErrorStep,
    pub initial: InitialError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentReport {
    pub ratio: f64,
    /// Largest `eᵀQ⁻¹e` seen at each step.
    pub max_quad_form: Vec<f64>,
    pub samples: usize,
}

fn unit_sphere(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = z.norm();
        if norm > 1e-12 {
            return z / norm;
        }
    }
}

fn draw_disturbance(rng: &mut ChaCha8Rng, law: DisturbanceLaw, extremal: bool, n: usize, wbar: f64) -> DVector<f64> {
    match law {
        DisturbanceLaw::Ball => {
            let dir = unit_sphere(rng, n);
            let r = if extremal { 1.0 } else { rng.random::<f64>().powf(1.0 / n as f64) };
            dir * (wbar * r)
        }
        DisturbanceLaw::Box => DVector::from_fn(n, |_, _| {
            if extremal {
                if rng.random::<bool>() {
                    wbar
                } else {
                    -wbar
                }
            } else {
                rng.random_range(-1.0..=1.0) * wbar
            }
        }),
    }
}

/// Fraction of simulated `(rollout, step)` pairs whose error lies in the predicted ellipsoid.
pub fn containment_check(
    frs: &FrsSequence,
    initial_shape: &DMatrix<f64>,
    samples: usize,
    seed: u64,
    options: ContainmentOptions,
) -> Result<ContainmentReport> {
    if samples < 100 {
        return Err(Error::input("containment check needs at least 100 samples"));
    }
    let n = frs.closed_loop.nrows();
    let m = frs.disturbance_matrix.ncols();
    let dt = frs.dt;
    let (f, g) = match options.step {
        ErrorStep::Euler => (
            DMatrix::identity(n, n) + &frs.closed_loop * dt,
            &frs.disturbance_matrix * dt,
        ),
        ErrorStep::Exact => {
            let mut aug = DMatrix::zeros(n + m, n + m);
            aug.view_mut((0, 0), (n, n)).copy_from(&(&frs.closed_loop * dt));
            aug.view_mut((0, n), (n, m)).copy_from(&(&frs.disturbance_matrix * dt));
            let ex = expm(&aug)?;
            (ex.view((0, 0), (n, n)).into_owned(), ex.view((0, n), (n, m)).into_owned())
        }
    };
    let inverses: Vec<DMatrix<f64>> = frs
        .shapes
        .iter()
        .map(|q| {
            q.clone()
                .cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| Error::numerical("reachable-set shape is not positive definite"))
        })
        .collect::<Result<_>>()?;
    let l0 = initial_shape
        .clone()
        .cholesky()
        .ok_or_else(|| Error::input("initial shape is not positive definite"))?
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_q = vec![0.0f64; frs.shapes.len()];
    let mut inside = 0usize;
    let mut total = 0usize;
    for s in 0..samples {
        let extremal = s % 2 == 1;
        let mut e = match options.initial {
            InitialError::Zero => DVector::zeros(n),
            InitialError::Interior => {
                let r = rng.random::<f64>().powf(1.0 / n as f64);
                &l0 * unit_sphere(&mut rng, n) * r
            }
            InitialError::Boundary => &l0 * unit_sphere(&mut rng, n),
        };
        for (k, inv) in inverses.iter().enumerate() {
            if k > 0 {
                let w = draw_disturbance(&mut rng, options.law, extremal, m, frs.disturbance_bound);
                e = &f * &e + &g * w;
            }
            let qf = e.dot(&(inv * &e));
            max_q[k] = max_q[k].max(qf);
            total += 1;
            if qf <= 1.0 + 1e-9 {
                inside += 1;
            }
        }
    }
    Ok(ContainmentReport {
        ratio: inside as f64 / total as f64,
        max_quad_form: max_q,
        samples,
    })
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub frs: FrsSequence,
    pub eta: f64,
    pub report: ContainmentReport,
    pub doublings: usize,
}

/// Build the sequence and double η (at most five times) until containment reaches `target`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_eta(
    model: &AgentModel,
    xbar: &DVector<f64>,
    ubar: &DVector<f64>,
    steps: usize,
    config: &FrsConfig,
    dt: f64,
    samples: usize,
    seed: u64,
    target: f64,
) -> Result<Calibration> {
    let mut cfg = config.clone();
    let mut doublings = 0;
    loop {
        let frs = compute_frs_sequence(model, xbar, ubar, steps, &cfg, dt)?;
        let report = containment_check(&frs, &cfg.initial_shape, samples, seed, ContainmentOptions::default())?;
        if report.ratio >= target || doublings == 5 {
            return Ok(Calibration {
                frs,
                eta: cfg.eta,
                report,
                doublings,
            });
        }
        cfg.eta *= 2.0;
        doublings += 1;
    }
}
