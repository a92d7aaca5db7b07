//! Agent dynamics: model definitions, RK4 stepping, finite-difference linearization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::lqr::{lqr_gain, FeedbackGain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub gravity: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [0.5, 0.5, 1.0],
            gravity: 9.81,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// 12 states `[ω, θ, v, p]`, controls `[F, τx, τy, τz]`, force disturbances on `v`.
    Quadrotor(QuadrotorParams),
    /// Differential drive: states `[px, py, θ]`, controls `[vL, vR]`, additive wheel-speed noise.
    FourWd { wheelbase: f64 },
    /// States `[p, v]`, control is acceleration, disturbance adds to acceleration.
    DoubleIntegrator { dim: usize },
    /// `ẋ = M x + N u + D w`; mostly useful for tests.
    Linear {
        m: DMatrix<f64>,
        n: DMatrix<f64>,
        d: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub kind: ModelKind,
    pub state_dim: usize,
    pub control_dim: usize,
    pub disturbance_dim: usize,
    pub position_indices: Vec<usize>,
    pub velocity_indices: Vec<usize>,
    pub control_bounds: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub reference_state: DVector<f64>,
    pub reference_control: DVector<f64>,
}

pub fn quadrotor_model() -> AgentModel {
    quadrotor_with(QuadrotorParams::default())
}

pub fn quadrotor_with(params: QuadrotorParams) -> AgentModel {
    AgentModel {
        kind: ModelKind::Quadrotor(params),
        state_dim: 12,
        control_dim: 4,
        disturbance_dim: 3,
        position_indices: vec![9, 10, 11],
        velocity_indices: vec![6, 7, 8],
        control_bounds: None,
    }
}

pub fn fourwd_model(wheelbase: f64) -> Result<AgentModel> {
    if !(wheelbase > 0.0 && wheelbase.is_finite()) {
        return Err(Error::input(format!("wheelbase must be positive, got {wheelbase}")));
    }
    Ok(AgentModel {
        kind: ModelKind::FourWd { wheelbase },
        state_dim: 3,
        control_dim: 2,
        disturbance_dim: 2,
        position_indices: vec![0, 1],
        velocity_indices: vec![],
        control_bounds: None,
    })
}

pub fn double_integrator_model(dim: usize) -> Result<AgentModel> {
    if !(dim == 2 || dim == 3) {
        return Err(Error::input(format!("double integrator dimension must be 2 or 3, got {dim}")));
    }
    Ok(AgentModel {
        kind: ModelKind::DoubleIntegrator { dim },
        state_dim: 2 * dim,
        control_dim: dim,
        disturbance_dim: dim,
        position_indices: (0..dim).collect(),
        velocity_indices: (dim..2 * dim).collect(),
        control_bounds: None,
    })
}

/// Linear model with the first `n_p` states as positions and no velocity map.
pub fn linear_model(m: DMatrix<f64>, n: DMatrix<f64>, d: DMatrix<f64>, n_p: usize) -> Result<AgentModel> {
    let nx = m.nrows();
    if !m.is_square() || n.nrows() != nx || d.nrows() != nx || n_p > nx {
        return Err(Error::input("inconsistent linear model dimensions"));
    }
    Ok(AgentModel {
        state_dim: nx,
        control_dim: n.ncols(),
        disturbance_dim: d.ncols(),
        kind: ModelKind::Linear { m, n, d },
        position_indices: (0..n_p).collect(),
        velocity_indices: vec![],
        control_bounds: None,
    })
}

/// Parse a model tag as used in scenario files.
pub fn model_from_tag(tag: &str, wheelbase: Option<f64>) -> Result<AgentModel> {
    match tag {
        "quadrotor" => Ok(quadrotor_model()),
        "fourwd" => fourwd_model(wheelbase.unwrap_or(0.16)),
        "double_integrator_2d" => double_integrator_model(2),
        "double_integrator_3d" => double_integrator_model(3),
        other => Err(Error::input(format!("unknown model tag '{other}'"))),
    }
}

/// Angle folded into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = a.rem_euclid(t);
    if r > std::f64::consts::PI {
        r - t
    } else {
        r
    }
}

fn thrust_direction(phi: f64, theta: f64, psi: f64) -> [f64; 3] {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    [cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct]
}

impl AgentModel {
    pub fn tag(&self) -> &'static str {
        match &self.kind {
            ModelKind::Quadrotor(_) => "quadrotor",
            ModelKind::FourWd { .. } => "fourwd",
            ModelKind::DoubleIntegrator { dim: 2 } => "double_integrator_2d",
            ModelKind::DoubleIntegrator { .. } => "double_integrator_3d",
            ModelKind::Linear { .. } => "linear",
        }
    }

    pub fn position_dim(&self) -> usize {
        self.position_indices.len()
    }

    /// Control that holds the model at rest: hover thrust for the quadrotor, zero otherwise.
    pub fn trim_control(&self) -> DVector<f64> {
        let mut u = DVector::zeros(self.control_dim);
        if let ModelKind::Quadrotor(p) = &self.kind {
            u[0] = p.mass * p.gravity;
        }
        u
    }

    pub fn check_dims(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.control_dim || w.len() != self.disturbance_dim {
            return Err(Error::input(format!(
                "dimension mismatch: got x{} u{} w{}, model wants x{} u{} w{}",
                x.len(),
                u.len(),
                w.len(),
                self.state_dim,
                self.control_dim,
                self.disturbance_dim
            )));
        }
        Ok(())
    }

    /// Continuous-time derivative. An empty `w` means zero disturbance.
    pub fn deriv_into(&self, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        let wk = |k: usize| if w.is_empty() { 0.0 } else { w[k] };
        match &self.kind {
            ModelKind::Quadrotor(p) => {
                let [jx, jy, jz] = p.inertia;
                let (wx, wy, wz) = (x[0], x[1], x[2]);
                out[0] = (u[1] - (jz - jy) * wy * wz) / jx;
                out[1] = (u[2] - (jx - jz) * wz * wx) / jy;
                out[2] = (u[3] - (jy - jx) * wx * wy) / jz;
                out[3] = wx;
                out[4] = wy;
                out[5] = wz;
                let z = thrust_direction(x[3], x[4], x[5]);
                let a = u[0] / p.mass;
                out[6] = a * z[0] + wk(0) / p.mass;
                out[7] = a * z[1] + wk(1) / p.mass;
                out[8] = a * z[2] - p.gravity + wk(2) / p.mass;
                out[9] = x[6];
                out[10] = x[7];
                out[11] = x[8];
            }
            ModelKind::FourWd { wheelbase } => {
                let vl = u[0] + wk(0);
                let vr = u[1] + wk(1);
                let v = 0.5 * (vl + vr);
                let (s, c) = x[2].sin_cos();
                out[0] = v * c;
                out[1] = v * s;
                out[2] = (vr - vl) / wheelbase;
            }
            ModelKind::DoubleIntegrator { dim } => {
                for k in 0..*dim {
                    out[k] = x[dim + k];
                    out[dim + k] = u[k] + wk(k);
                }
            }
            ModelKind::Linear { m, n, d } => {
                for i in 0..self.state_dim {
                    let mut s = 0.0;
                    for j in 0..self.state_dim {
                        s += m[(i, j)] * x[j];
                    }
                    for j in 0..self.control_dim {
                        s += n[(i, j)] * u[j];
                    }
                    for j in 0..self.disturbance_dim {
                        s += d[(i, j)] * wk(j);
                    }
                    out[i] = s;
                }
            }
        }
    }

    pub fn deriv(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x.as_slice(), u.as_slice(), w.as_slice())?;
        let mut out = DVector::zeros(self.state_dim);
        self.deriv_into(x.as_slice(), u.as_slice(), w.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Analytic Jacobians of the disturbance-free derivative, written row-major
    /// into `a` (n_x × n_x) and `b` (n_x × n_u). Both buffers must be zeroed by the caller.
    pub fn jacobians_into(&self, x: &[f64], u: &[f64], a: &mut [f64], b: &mut [f64]) {
        let nx = self.state_dim;
        let nu = self.control_dim;
        match &self.kind {
            ModelKind::Quadrotor(p) => {
                let [jx, jy, jz] = p.inertia;
                let (wx, wy, wz) = (x[0], x[1], x[2]);
                a[1] = -(jz - jy) * wz / jx;
                a[2] = -(jz - jy) * wy / jx;
                a[nx] = -(jx - jz) * wz / jy;
                a[nx + 2] = -(jx - jz) * wx / jy;
                a[2 * nx] = -(jy - jx) * wy / jz;
                a[2 * nx + 1] = -(jy - jx) * wx / jz;
                a[3 * nx] = 1.0;
                a[4 * nx + 1] = 1.0;
                a[5 * nx + 2] = 1.0;
                let (sf, cf) = x[3].sin_cos();
                let (st, ct) = x[4].sin_cos();
                let (sp, cp) = x[5].sin_cos();
                let f = u[0] / p.mass;
                let dphi = [-sf * st * cp + cf * sp, -sf * st * sp - cf * cp, -sf * ct];
                let dtheta = [cf * ct * cp, cf * ct * sp, -cf * st];
                let dpsi = [-cf * st * sp + sf * cp, cf * st * cp + sf * sp, 0.0];
                let z = thrust_direction(x[3], x[4], x[5]);
                for r in 0..3 {
                    let row = 6 + r;
                    a[row * nx + 3] = f * dphi[r];
                    a[row * nx + 4] = f * dtheta[r];
                    a[row * nx + 5] = f * dpsi[r];
                    b[row * nu] = z[r] / p.mass;
                }
                a[9 * nx + 6] = 1.0;
                a[10 * nx + 7] = 1.0;
                a[11 * nx + 8] = 1.0;
                b[1] = 1.0 / jx;
                b[nu + 2] = 1.0 / jy;
                b[2 * nu + 3] = 1.0 / jz;
            }
            ModelKind::FourWd { wheelbase } => {
                let v = 0.5 * (u[0] + u[1]);
                let (s, c) = x[2].sin_cos();
                a[2] = -v * s;
                a[nx + 2] = v * c;
                b[0] = 0.5 * c;
                b[1] = 0.5 * c;
                b[nu] = 0.5 * s;
                b[nu + 1] = 0.5 * s;
                b[2 * nu] = -1.0 / wheelbase;
                b[2 * nu + 1] = 1.0 / wheelbase;
            }
            ModelKind::DoubleIntegrator { dim } => {
                for k in 0..*dim {
                    a[k * nx + dim + k] = 1.0;
                    b[(dim + k) * nu + k] = 1.0;
                }
            }
            ModelKind::Linear { m, n, .. } => {
                for i in 0..nx {
                    for j in 0..nx {
                        a[i * nx + j] = m[(i, j)];
                    }
                    for j in 0..nu {
                        b[i * nu + j] = n[(i, j)];
                    }
                }
            }
        }
    }

    /// Analytic Jacobians as matrices.
    pub fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (nx, nu) = (self.state_dim, self.control_dim);
        let mut a = vec![0.0; nx * nx];
        let mut b = vec![0.0; nx * nu];
        self.jacobians_into(x.as_slice(), u.as_slice(), &mut a, &mut b);
        (DMatrix::from_row_slice(nx, nx, &a), DMatrix::from_row_slice(nx, nu, &b))
    }

    /// Speed vector used by the velocity barrier: the velocity states when the model
    /// has them, otherwise the position rate implied by `(x, u)`.
    pub fn speed_vector(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        if !self.velocity_indices.is_empty() {
            for (k, &i) in self.velocity_indices.iter().enumerate() {
                out[k] = x[i];
            }
            return;
        }
        let mut d = vec![0.0; self.state_dim];
        self.deriv_into(x, u, &[], &mut d);
        for (k, &i) in self.position_indices.iter().enumerate() {
            out[k] = d[i];
        }
    }

    pub fn speed_dim(&self) -> usize {
        if self.velocity_indices.is_empty() {
            self.position_dim()
        } else {
            self.velocity_indices.len()
        }
    }

    pub fn project_controls(&self, u: &mut [f64]) {
        if let Some(bounds) = &self.control_bounds {
            for (k, v) in u.iter_mut().enumerate() {
                let (lo, hi) = bounds[k % self.control_dim];
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Index of the yaw (heading) state for models that are invariant to rotations about the vertical axis.
    pub fn heading_index(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Quadrotor(_) => Some(5),
            ModelKind::FourWd { .. } => Some(2),
            _ => None,
        }
    }

    /// `x − x_nom` expressed in a frame where the nominal heading equals `heading_ref`.
    ///
    /// Both rotation-invariant models keep their dynamics under a yaw rotation of the world
    /// frame, so a gain designed at heading `heading_ref` applies to this error at any
    /// nominal heading. Other models return the plain difference.
    pub fn tracking_error(&self, x: &DVector<f64>, x_nom: &DVector<f64>, heading_ref: f64) -> DVector<f64> {
        let mut e = x - x_nom;
        let Some(h) = self.heading_index() else {
            return e;
        };
        e[h] = wrap_angle(e[h]);
        let (s, c) = (heading_ref - x_nom[h]).sin_cos();
        let mut rotate = |i: usize, j: usize| {
            let (a, b) = (e[i], e[j]);
            e[i] = c * a - s * b;
            e[j] = s * a + c * b;
        };
        rotate(self.position_indices[0], self.position_indices[1]);
        if self.velocity_indices.len() >= 2 {
            rotate(self.velocity_indices[0], self.velocity_indices[1]);
        }
        e
    }

    pub fn positions(&self, x: &[f64]) -> Vec<f64> {
        self.position_indices.iter().map(|&i| x[i]).collect()
    }
}

fn rk4_into(model: &AgentModel, x: &[f64], u: &[f64], w: &[f64], dt: f64, out: &mut [f64]) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    model.deriv_into(x, u, w, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    model.deriv_into(&tmp, u, w, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    model.deriv_into(&tmp, u, w, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    model.deriv_into(&tmp, u, w, &mut k4);
    for i in 0..n {
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// One RK4 step with the disturbance held constant over the interval.
pub fn step(model: &AgentModel, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    model.check_dims(x.as_slice(), u.as_slice(), w.as_slice())?;
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::input(format!("dt must be non-negative, got {dt}")));
    }
    let mut out = DVector::zeros(model.state_dim);
    rk4_into(model, x.as_slice(), u.as_slice(), w.as_slice(), dt, out.as_mut_slice());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("integration produced non-finite state"));
    }
    Ok(out)
}

/// Central-difference Jacobians of `deriv` at `(x̄, ū, 0)`.
pub fn linearize(model: &AgentModel, xbar: &DVector<f64>, ubar: &DVector<f64>) -> Result<Linearization> {
    let (nx, nu, nw) = (model.state_dim, model.control_dim, model.disturbance_dim);
    model.check_dims(xbar.as_slice(), ubar.as_slice(), &vec![0.0; nw])?;
    if xbar.iter().chain(ubar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::input("linearization point is not finite"));
    }
    let w0 = vec![0.0; nw];
    let mut fp = vec![0.0; nx];
    let mut fm = vec![0.0; nx];

    let mut a = DMatrix::zeros(nx, nx);
    let mut xp = xbar.as_slice().to_vec();
    for j in 0..nx {
        let h = 1e-6 * (1.0 + xbar[j].abs());
        xp[j] = xbar[j] + h;
        model.deriv_into(&xp, ubar.as_slice(), &w0, &mut fp);
        xp[j] = xbar[j] - h;
        model.deriv_into(&xp, ubar.as_slice(), &w0, &mut fm);
        xp[j] = xbar[j];
        for i in 0..nx {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }

    let mut b = DMatrix::zeros(nx, nu);
    let mut up = ubar.as_slice().to_vec();
    for j in 0..nu {
        let h = 1e-6 * (1.0 + ubar[j].abs());
        up[j] = ubar[j] + h;
        model.deriv_into(xbar.as_slice(), &up, &w0, &mut fp);
        up[j] = ubar[j] - h;
        model.deriv_into(xbar.as_slice(), &up, &w0, &mut fm);
        up[j] = ubar[j];
        for i in 0..nx {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }

    let mut d = DMatrix::zeros(nx, nw);
    let mut wp = w0.clone();
    for j in 0..nw {
        let h = 1e-6;
        wp[j] = h;
        model.deriv_into(xbar.as_slice(), ubar.as_slice(), &wp, &mut fp);
        wp[j] = -h;
        model.deriv_into(xbar.as_slice(), ubar.as_slice(), &wp, &mut fm);
        wp[j] = 0.0;
        for i in 0..nx {
            d[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }

    if a.iter().chain(b.iter()).chain(d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite Jacobian entry"));
    }
    Ok(Linearization {
        a,
        b,
        d,
        reference_state: xbar.clone(),
        reference_control: ubar.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hover() -> (AgentModel, DVector<f64>, DVector<f64>) {
        let m = quadrotor_model();
        let mut x = DVector::zeros(12);
        x[9] = 1.0;
        x[10] = -2.0;
        x[11] = 3.0;
        let u = m.trim_control();
        (m, x, u)
    }

    #[test]
    fn one_dimensional_double_integrator_via_linear_model() {
        let m = linear_model(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            1,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let next = step(&m, &x, &DVector::zeros(1), &DVector::zeros(1), 0.2).unwrap();
        assert!((next[0] - 0.2).abs() < 1e-15 && (next[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let (m, mut x, u) = hover();
        x[0] = 0.3;
        x[4] = 0.1;
        let next = step(&m, &x, &u, &DVector::zeros(3), 0.0).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn hover_is_fixed_point() {
        let (m, x, u) = hover();
        let d = m.deriv(&x, &u, &DVector::zeros(3)).unwrap();
        assert!(d.amax() < 1e-10);
        let next = step(&m, &x, &u, &DVector::zeros(3), 0.2).unwrap();
        assert!((next - x).amax() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let (m, x, _) = hover();
        let err = step(&m, &x, &DVector::zeros(3), &DVector::zeros(3), 0.1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn model_dimensions() {
        let q = quadrotor_model();
        assert_eq!((q.state_dim, q.control_dim, q.disturbance_dim), (12, 4, 3));
        assert_eq!(q.position_indices, vec![9, 10, 11]);
        assert_eq!(q.velocity_indices, vec![6, 7, 8]);
        assert_eq!(double_integrator_model(2).unwrap().state_dim, 4);
        assert_eq!(double_integrator_model(2).unwrap().control_dim, 2);
        assert_eq!(double_integrator_model(3).unwrap().state_dim, 6);
        assert!(double_integrator_model(4).is_err());
        assert!(fourwd_model(0.0).is_err());
    }

    #[test]
    fn double_integrator_constant_push() {
        let m = double_integrator_model(2).unwrap();
        let x = DVector::zeros(4);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let next = step(&m, &x, &u, &DVector::zeros(2), 0.2).unwrap();
        assert!((next[0] - 0.02).abs() < 1e-15);
        assert!(next[1].abs() < 1e-15);
        assert!((next[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn fourwd_kinematics() {
        let l = 0.5;
        let m = fourwd_model(l).unwrap();
        let x = DVector::zeros(3);
        let d = m.deriv(&x, &DVector::from_vec(vec![1.0, 1.0]), &DVector::zeros(2)).unwrap();
        assert_eq!(d.as_slice(), &[1.0, 0.0, 0.0]);
        let d = m.deriv(&x, &DVector::from_vec(vec![-0.7, 0.7]), &DVector::zeros(2)).unwrap();
        assert!(d[0].abs() < 1e-15 && d[1].abs() < 1e-15);
        assert!((d[2] - 2.0 * 0.7 / l).abs() < 1e-15);
    }

    #[test]
    fn fourwd_linearization_matches_kinematic_matrices() {
        let l = 0.4;
        let m = fourwd_model(l).unwrap();
        let lin = linearize(&m, &DVector::zeros(3), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if (i, j) == (1, 2) { 1.0 } else { 0.0 };
                assert!((lin.a[(i, j)] - want).abs() < 1e-8, "A[{i},{j}]");
            }
        }
        let want_b = [[0.5, 0.5], [0.0, 0.0], [-1.0 / l, 1.0 / l]];
        for i in 0..3 {
            for j in 0..2 {
                assert!((lin.b[(i, j)] - want_b[i][j]).abs() < 1e-8);
            }
        }
        assert!((&lin.d - &lin.b).amax() < 1e-8);
    }

    #[test]
    fn fourwd_straight_rollout_keeps_heading() {
        let m = fourwd_model(0.3).unwrap();
        let mut x = DVector::from_vec(vec![0.0, 0.0, 0.37]);
        let u = DVector::from_vec(vec![0.8, 0.8]);
        for _ in 0..100 {
            x = step(&m, &x, &u, &DVector::zeros(2), 0.2).unwrap();
        }
        assert_eq!(x[2], 0.37);
    }

    #[test]
    fn quadrotor_hover_linearization_matches_small_angle_jacobian() {
        let (m, x, u) = hover();
        let lin = linearize(&m, &x, &u).unwrap();
        let g = 9.81;
        let mut a = DMatrix::<f64>::zeros(12, 12);
        a[(3, 0)] = 1.0;
        a[(4, 1)] = 1.0;
        a[(5, 2)] = 1.0;
        a[(6, 4)] = g;
        a[(7, 3)] = -g;
        a[(9, 6)] = 1.0;
        a[(10, 7)] = 1.0;
        a[(11, 8)] = 1.0;
        assert!((&lin.a - &a).amax() < 1e-5);
        let mut b = DMatrix::<f64>::zeros(12, 4);
        b[(8, 0)] = 1.0;
        b[(0, 1)] = 2.0;
        b[(1, 2)] = 2.0;
        b[(2, 3)] = 1.0;
        assert!((&lin.b - &b).amax() < 1e-5);
    }

    #[test]
    fn hover_step_agrees_with_fine_euler() {
        let (m, x, u) = hover();
        let rk = step(&m, &x, &u, &DVector::zeros(3), 0.2).unwrap();
        let mut e = x.clone();
        let w = DVector::zeros(3);
        for _ in 0..20000 {
            let d = m.deriv(&e, &u, &w).unwrap();
            e += d * 1e-5;
        }
        assert!((rk.rows(9, 3) - e.rows(9, 3)).amax() < 1e-9);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let models = [quadrotor_model(), fourwd_model(0.3).unwrap(), double_integrator_model(3).unwrap()];
        for m in &models {
            let x = DVector::from_fn(m.state_dim, |i, _| 0.1 * (i as f64 + 1.0).sin());
            let u = DVector::from_fn(m.control_dim, |i, _| 0.5 + 0.3 * (i as f64).cos()) + m.trim_control();
            let lin = linearize(m, &x, &u).unwrap();
            let (a, b) = m.jacobians(&x, &u);
            assert!((&lin.a - &a).amax() < 1e-6, "{}", m.tag());
            assert!((&lin.b - &b).amax() < 1e-6, "{}", m.tag());
        }
    }

    fn yaw_rotate(m: &AgentModel, x: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let mut y = x.clone();
        let (s, c) = alpha.sin_cos();
        let mut pairs = vec![(m.position_indices[0], m.position_indices[1])];
        if m.velocity_indices.len() >= 2 {
            pairs.push((m.velocity_indices[0], m.velocity_indices[1]));
        }
        for (i, j) in pairs {
            y[i] = c * x[i] - s * x[j];
            y[j] = s * x[i] + c * x[j];
        }
        y[m.heading_index().unwrap()] += alpha;
        y
    }

    #[test]
    fn yaw_rotation_equivariance() {
        for m in [quadrotor_model(), fourwd_model(0.2).unwrap()] {
            let x = DVector::from_fn(m.state_dim, |i, _| 0.3 * (1.7 * i as f64 + 0.4).sin());
            let u = m.trim_control() + DVector::from_fn(m.control_dim, |i, _| 0.2 + 0.1 * i as f64);
            let w = DVector::zeros(m.disturbance_dim);
            let alpha = 1.1;
            let f = m.deriv(&x, &u, &w).unwrap();
            let fr = m.deriv(&yaw_rotate(&m, &x, alpha), &u, &w).unwrap();
            let mut expect = yaw_rotate(&m, &f, alpha);
            expect[m.heading_index().unwrap()] -= alpha;
            assert!((fr - expect).amax() < 1e-12, "{}", m.tag());

            let delta = DVector::from_fn(m.state_dim, |i, _| 0.01 * (i as f64 + 1.0));
            let x_lin = DVector::from_fn(m.state_dim, |i, _| 0.2 * (i as f64).cos());
            let psi = x_lin[m.heading_index().unwrap()];
            let nominal = yaw_rotate(&m, &x_lin, alpha);
            let actual = yaw_rotate(&m, &(&x_lin + &delta), alpha);
            let e = m.tracking_error(&actual, &nominal, psi);
            assert!((e - &delta).amax() < 1e-12, "{}", m.tag());
        }
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}
