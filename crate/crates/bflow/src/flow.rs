//! Scalar parabolic Monge-Ampere flow d/dt phi = e^{-f} det(chi_hat +
//! i ddbar phi)/det chi_hat on the torus, with positivity guards,
//! maximum-principle monitors, and an independent Newton-Krylov solver for
//! the stationary limit.

use crate::error::{Error, Result};
use crate::linalg::{self, C64, ZERO};
use crate::torus::{MetricField, Spectral};

/// Choice of the conformal weight f in the flow speed e^{-f} F.
#[derive(Clone)]
pub enum FSpec {
    /// f = 0, plain Monge-Ampere speed.
    Zero,
    /// e^{-f} = det(chi_hat)/(n-1): the weight that makes the flow the
    /// scalar reduction of the metric flow (requires n >= 2).
    Derived,
    /// Explicit field f sampled on the grid.
    Field(Vec<f64>),
}

#[derive(Clone, Copy, Debug)]
pub struct FlowParams {
    /// Fraction of the RK4 stability bound used for dt.
    pub safety: f64,
    /// Relative speed-uniformity tolerance for convergence (std/mean).
    pub tol_speed: f64,
    /// Normalized-potential drift tolerance per unit time.
    pub tol_phi_rate: f64,
    /// Maximum dt halvings before a step is declared a breakdown.
    pub max_halvings: u32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { safety: 0.6, tol_speed: 1e-8, tol_phi_rate: 1e-9, max_halvings: 20 }
    }
}

/// One point on the flow trajectory with its cached derived fields.
#[derive(Clone)]
pub struct FlowState {
    pub phi: Vec<C64>,
    pub t: f64,
    pub dt: f64,
    pub chi: MetricField,
    /// F = det chi / det chi_hat, pointwise.
    pub f_ratio: Vec<f64>,
    /// Flow speed e^{-f} F, pointwise.
    pub speed: Vec<f64>,
}

impl FlowState {
    pub fn inf_speed(&self) -> f64 {
        self.speed.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_speed(&self) -> f64 {
        self.speed.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// std(speed)/mean(speed): zero exactly at stationary points.
    pub fn speed_uniformity(&self) -> f64 {
        let npts = self.speed.len() as f64;
        let mean = self.speed.iter().sum::<f64>() / npts;
        let var = self.speed.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / npts;
        var.sqrt() / mean
    }

    /// sup phi - inf phi over the grid.
    pub fn osc_phi(&self) -> f64 {
        let sup = self.phi.iter().map(|v| v.re).fold(f64::NEG_INFINITY, f64::max);
        let inf = self.phi.iter().map(|v| v.re).fold(f64::INFINITY, f64::min);
        sup - inf
    }
}

pub struct Flow<'a> {
    pub sp: &'a Spectral,
    pub chi_hat: MetricField,
    pub params: FlowParams,
    det_hat: Vec<f64>,
    exp_neg_f: Vec<f64>,
}

impl<'a> Flow<'a> {
    pub fn new(sp: &'a Spectral, chi_hat: MetricField, f: FSpec, params: FlowParams) -> Result<Self> {
        let grid = sp.grid;
        if chi_hat.grid != grid {
            return Err(Error::ShapeMismatch("chi_hat grid".into()));
        }
        let n = grid.n;
        let mut det_hat = vec![0.0; grid.total];
        for (idx, d) in det_hat.iter_mut().enumerate() {
            let m = chi_hat.matrix_at(idx);
            *d = linalg::hermitian_pd_det(&m, n).ok_or_else(|| Error::NotPositive {
                min_eig: linalg::hermitian_eigenvalues(&m, n)[0],
            })?;
        }
        let exp_neg_f = match f {
            FSpec::Zero => vec![1.0; grid.total],
            FSpec::Derived => {
                if n < 2 {
                    return Err(Error::UnsupportedDimension { n, required: 2 });
                }
                det_hat.iter().map(|d| d / (n - 1) as f64).collect()
            }
            FSpec::Field(f) => {
                if f.len() != grid.total {
                    return Err(Error::ShapeMismatch("f field length".into()));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("f field"));
                }
                f.iter().map(|v| (-v).exp()).collect()
            }
        };
        Ok(Self { sp, chi_hat, params, det_hat, exp_neg_f })
    }

    pub fn exp_neg_f(&self) -> &[f64] {
        &self.exp_neg_f
    }

    pub fn det_hat(&self) -> &[f64] {
        &self.det_hat
    }

    /// f as a field (well-defined because e^{-f} > 0 by construction).
    pub fn f_field(&self) -> Vec<f64> {
        self.exp_neg_f.iter().map(|v| -v.ln()).collect()
    }

    /// chi = chi_hat + i ddbar phi.
    pub fn chi_of(&self, phi: &[C64]) -> Result<MetricField> {
        // the flow keeps phi real; the Hermitian fast path skips the
        // redundant inverse transforms in that case
        let h = if phi.iter().all(|v| v.im == 0.0) {
            self.sp.i_ddbar_real(phi)
        } else {
            self.sp.i_ddbar(phi)
        };
        let mut comps = self.chi_hat.comps.clone();
        for (c, d) in comps.iter_mut().zip(&h) {
            for (v, w) in c.iter_mut().zip(d) {
                *v += *w;
            }
        }
        MetricField::from_components(self.sp.grid, comps)
    }

    /// Pointwise determinant of a metric field with a positivity guard.
    fn pd_det_field(&self, chi: &MetricField) -> Result<Vec<f64>> {
        let n = self.sp.grid.n;
        let mut det = vec![0.0; self.sp.grid.total];
        let mut buf = vec![linalg::ZERO; n * n];
        for (idx, d) in det.iter_mut().enumerate() {
            chi.write_matrix_at(idx, &mut buf);
            match linalg::hermitian_pd_det_in_place(&mut buf, n) {
                Some(v) => *d = v,
                None => {
                    let margin = linalg::hermitian_eigenvalues(&chi.matrix_at(idx), n)[0];
                    return Err(Error::PositivityLoss { point: idx, margin });
                }
            }
        }
        Ok(det)
    }

    /// Flow speed e^{-f} det(chi_hat + i ddbar phi)/det chi_hat.
    pub fn ma_rhs(&self, phi: &[C64]) -> Result<Vec<f64>> {
        let chi = self.chi_of(phi)?;
        let det = self.pd_det_field(&chi)?;
        Ok(det
            .iter()
            .zip(&self.det_hat)
            .zip(&self.exp_neg_f)
            .map(|((d, dh), enf)| enf * d / dh)
            .collect())
    }

    /// Assemble a full state (validates positivity).
    pub fn state_from_phi(&self, phi: Vec<C64>, t: f64, dt: f64) -> Result<FlowState> {
        let chi = self.chi_of(&phi)?;
        let det = self.pd_det_field(&chi)?;
        let f_ratio: Vec<f64> = det.iter().zip(&self.det_hat).map(|(d, dh)| d / dh).collect();
        let speed: Vec<f64> =
            f_ratio.iter().zip(&self.exp_neg_f).map(|(f, enf)| enf * f).collect();
        if speed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow speed"));
        }
        Ok(FlowState { phi, t, dt, chi, f_ratio, speed })
    }

    pub fn initial_state(&self, phi: Vec<C64>) -> Result<FlowState> {
        let mut st = self.state_from_phi(phi, 0.0, 0.0)?;
        st.dt = self.cfl_dt(&st);
        Ok(st)
    }

    /// Parabolic stability bound for explicit RK4: the linearized operator
    /// speed * chi^{j kbar} d_j d_kbar has spectrum in [-lambda, 0] with
    /// lambda <= max_pt(speed * tr chi^{-1}) * n * max|s|^2, and RK4 is
    /// stable on the negative real axis up to |lambda dt| <= 2.785.
    pub fn cfl_dt(&self, st: &FlowState) -> f64 {
        let n = self.sp.grid.n;
        let mut lam: f64 = 0.0;
        // tr(chi^{-1}) = (sum of principal (n-1)-minors) / det, computed with
        // reusable buffers: this runs every step over the whole grid
        let mut mat = vec![linalg::ZERO; n * n];
        let mut minor = vec![linalg::ZERO; (n - 1) * (n - 1)];
        for idx in 0..self.sp.grid.total {
            st.chi.write_matrix_at(idx, &mut mat);
            let d = linalg::det(&mat, n).re;
            let mut trcof = 0.0;
            for skip in 0..n {
                let mut w = 0;
                for r in 0..n {
                    if r == skip {
                        continue;
                    }
                    for c in 0..n {
                        if c == skip {
                            continue;
                        }
                        minor[w] = mat[r * n + c];
                        w += 1;
                    }
                }
                trcof += linalg::det(&minor, n - 1).re;
            }
            lam = lam.max(st.speed[idx] * trcof / d);
        }
        let bound = lam * n as f64 * self.sp.max_symbol_sq();
        if bound <= 0.0 {
            return 1e-2;
        }
        self.params.safety * 2.785 / bound
    }

    fn rk4(&self, phi: &[C64], dt: f64) -> Result<Vec<C64>> {
        let add = |base: &[C64], k: &[f64], s: f64| -> Vec<C64> {
            base.iter().zip(k).map(|(p, v)| p + C64::new(s * v, 0.0)).collect()
        };
        let k1 = self.ma_rhs(phi)?;
        let k2 = self.ma_rhs(&add(phi, &k1, 0.5 * dt))?;
        let k3 = self.ma_rhs(&add(phi, &k2, 0.5 * dt))?;
        let k4 = self.ma_rhs(&add(phi, &k3, dt))?;
        Ok(phi
            .iter()
            .enumerate()
            .map(|(i, p)| p + C64::new(dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]), 0.0))
            .collect())
    }

    /// One RK4 step of the given size; positivity failures are errors.
    pub fn step_fixed(&self, st: &FlowState, dt: f64) -> Result<FlowState> {
        let phi = self.rk4(&st.phi, dt)?;
        self.state_from_phi(phi, st.t + dt, dt)
    }

    /// One adaptive step: dt from the stability bound, halved on positivity
    /// loss up to the configured limit.
    pub fn step(&self, st: &FlowState) -> Result<FlowState> {
        let mut dt = self.cfl_dt(st);
        let mut last_err = None;
        for _ in 0..=self.params.max_halvings {
            match self.step_fixed(st, dt) {
                Ok(next) => return Ok(next),
                Err(e) => {
                    last_err = Some(e);
                    dt *= 0.5;
                }
            }
        }
        Err(Error::FlowBreakdown {
            t: st.t,
            detail: format!(
                "positivity lost after {} dt halvings (last: {})",
                self.params.max_halvings,
                last_err.map(|e| e.to_string()).unwrap_or_default()
            ),
        })
    }

    /// phi - (integral of phi against det chi_hat dV)/(integral of det
    /// chi_hat dV): the representative with zero chi_hat-volume average.
    pub fn normalize(&self, phi: &[C64]) -> Vec<C64> {
        let num: f64 = phi.iter().zip(&self.det_hat).map(|(p, w)| p.re * w).sum();
        let den: f64 = self.det_hat.iter().sum();
        let avg = num / den;
        phi.iter().map(|p| p - C64::new(avg, 0.0)).collect()
    }

    /// Linearized flow operator L u = e^{-f} F chi^{j kbar} d_j d_kbar u.
    pub fn linearized_apply(&self, st: &FlowState, u: &[C64]) -> Vec<C64> {
        let n = self.sp.grid.n;
        let h = self.sp.i_ddbar(u);
        let mut out = vec![ZERO; self.sp.grid.total];
        for (idx, o) in out.iter_mut().enumerate() {
            let inv = linalg::inverse(&st.chi.matrix_at(idx), n).expect("positive chi");
            let mut acc = ZERO;
            for j in 0..n {
                for k in 0..n {
                    acc += inv[j * n + k] * h[k * n + j][idx];
                }
            }
            *o = acc * st.speed[idx];
        }
        out
    }

    /// max over the grid of tr(chi_hat^{-1} chi) and tr(chi^{-1} chi_hat):
    /// upper bounds for the extreme eigenvalues of h = chi_hat^{-1} chi.
    pub fn h_trace_bounds(&self, st: &FlowState) -> (f64, f64) {
        let n = self.sp.grid.n;
        let mut trh: f64 = 0.0;
        let mut trhinv: f64 = 0.0;
        for idx in 0..self.sp.grid.total {
            let hat = self.chi_hat.matrix_at(idx);
            let chi = st.chi.matrix_at(idx);
            let hat_inv = linalg::inverse(&hat, n).expect("positive chi_hat");
            let chi_inv = linalg::inverse(&chi, n).expect("positive chi");
            let a = linalg::matmul(&hat_inv, &chi, n);
            let b = linalg::matmul(&chi_inv, &hat, n);
            trh = trh.max((0..n).map(|d| a[d * n + d].re).sum());
            trhinv = trhinv.max((0..n).map(|d| b[d * n + d].re).sum());
        }
        (trh, trhinv)
    }
}

/// Outcome of one convergence check.
#[derive(Clone, Debug)]
pub enum FlowStatus {
    Converged { speed_uniformity: f64, phi_rate: f64 },
    Running { speed_uniformity: f64, phi_rate: Option<f64> },
}

/// Stateful convergence detector: converged when the speed field is uniform
/// to tol_speed (relative) and the normalized potential drifts slower than
/// tol_phi_rate per unit time.
pub struct ConvergenceMonitor {
    last: Option<(f64, Vec<C64>)>,
}

impl ConvergenceMonitor {
    pub fn new() -> Self {
        Self { last: None }
    }

    pub fn observe(&mut self, flow: &Flow, st: &FlowState) -> FlowStatus {
        let uni = st.speed_uniformity();
        let tilde = flow.normalize(&st.phi);
        let rate = self.last.as_ref().and_then(|(t0, prev)| {
            let dt = st.t - t0;
            if dt <= 0.0 {
                return None;
            }
            let sup = tilde
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            Some(sup / dt)
        });
        self.last = Some((st.t, tilde));
        match rate {
            Some(r) if uni <= flow.params.tol_speed && r <= flow.params.tol_phi_rate => {
                FlowStatus::Converged { speed_uniformity: uni, phi_rate: r }
            }
            _ => FlowStatus::Running { speed_uniformity: uni, phi_rate: rate },
        }
    }
}

impl Default for ConvergenceMonitor {
    fn default() -> Self {
        Self::new()
    }
}

const GMRES_RESTART: usize = 40;

/// Restarted GMRES for `apply(x) = b` with a (left) preconditioner; all
/// vectors are grid fields. Returns the approximate solution.
fn gmres(
    apply: &dyn Fn(&[C64]) -> Vec<C64>,
    precond: &dyn Fn(&[C64]) -> Vec<C64>,
    b: &[C64],
    rel_tol: f64,
    max_iters: usize,
) -> Vec<C64> {
    let dot = |a: &[C64], c: &[C64]| -> C64 { a.iter().zip(c).map(|(x, y)| x.conj() * y).sum() };
    let nrm = |a: &[C64]| -> f64 { dot(a, a).re.sqrt() };

    let mut x = vec![ZERO; b.len()];
    let pb = precond(b);
    let b_norm = nrm(&pb).max(f64::MIN_POSITIVE);
    let mut iters = 0;
    loop {
        // residual of the preconditioned system
        let ax = apply(&x);
        let mut r = precond(&ax);
        for (rv, bv) in r.iter_mut().zip(&pb) {
            *rv = bv - *rv;
        }
        let beta = nrm(&r);
        if beta <= rel_tol * b_norm || iters >= max_iters {
            return x;
        }
        let mut basis: Vec<Vec<C64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![ZERO; GMRES_RESTART]; GMRES_RESTART + 1];
        let mut cs = vec![ZERO; GMRES_RESTART];
        let mut sn = vec![ZERO; GMRES_RESTART];
        let mut g = vec![ZERO; GMRES_RESTART + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..GMRES_RESTART {
            iters += 1;
            let mut w = precond(&apply(&basis[k]));
            for (i, v) in basis.iter().enumerate() {
                let hik = dot(v, &w);
                h[i][k] = hik;
                for (wv, vv) in w.iter_mut().zip(v) {
                    *wv -= hik * vv;
                }
            }
            let hk1 = nrm(&w);
            h[k + 1][k] = C64::new(hk1, 0.0);
            // apply accumulated Givens rotations to the new column
            for i in 0..k {
                let t = cs[i].conj() * h[i][k] + sn[i].conj() * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k].norm_sqr() + hk1 * hk1).sqrt();
            if denom > 0.0 {
                cs[k] = h[k][k] / denom;
                sn[k] = h[k + 1][k] / denom;
                h[k][k] = C64::new(denom, 0.0);
                h[k + 1][k] = ZERO;
                g[k + 1] = -sn[k] * g[k];
                g[k] = cs[k].conj() * g[k];
            }
            k_used = k + 1;
            let res = g[k + 1].norm();
            if res <= rel_tol * b_norm || hk1 < 1e-300 || iters >= max_iters {
                break;
            }
            basis.push(w.iter().map(|v| v / hk1).collect());
        }
        // back substitution
        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in (i + 1)..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (i, yi) in y.iter().enumerate() {
            for (xv, bv) in x.iter_mut().zip(&basis[i]) {
                *xv += yi * bv;
            }
        }
    }
}

/// Result of the Newton-Krylov stationary solve.
pub struct OracleSolution {
    pub phi: Vec<C64>,
    pub c: f64,
    /// sup-norm residual before each Newton iteration, ending below tol.
    pub residual_history: Vec<f64>,
}

/// Stationary-limit solver, independent of the time stepper: Newton-Krylov
/// on G(phi) = log det(chi_hat + i ddbar phi) - log(c e^f det chi_hat), with
/// c fixed by the volume constraint and phi projected to grid mean zero.
/// Returns phi and c with sup|G| <= tol.
pub fn cy_oracle(flow: &Flow, tol: f64) -> Result<OracleSolution> {
    let sp = flow.sp;
    let grid = sp.grid;
    let n = grid.n;
    // target field rho = e^{f - fbar} det chi_hat with fbar the grid mean
    // of f, so constant data reports c = 1; c itself comes from
    // integral(det chi) = integral(det chi_hat), which holds for every phi
    // in the class.
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fbar = mean(&flow.f_field());
    let rho: Vec<f64> = flow
        .det_hat()
        .iter()
        .zip(flow.exp_neg_f())
        .map(|(d, enf)| d * (-fbar).exp() / enf)
        .collect();
    let c = mean(flow.det_hat()) / mean(&rho);
    let target: Vec<f64> = rho.iter().map(|r| (c * r).ln()).collect();

    // constant-coefficient preconditioner: invert tr(cbar i ddbar u) in
    // Fourier space, where cbar is the grid mean of chi^{-1}
    let preconditioner = |inv_mean: &[C64]| {
        let inv_mean = inv_mean.to_vec();
        move |v: &[C64]| -> Vec<C64> {
            let hat = sp.forward(v);
            let out = sp.apply_symbol(&hat, |a| {
                let mut sym = ZERO;
                for j in 0..n {
                    let sj = C64::new(a[2 * j + 1], a[2 * j]) * 0.5;
                    for k in 0..n {
                        let sk = C64::new(-a[2 * k + 1], a[2 * k]) * 0.5;
                        sym += inv_mean[j * n + k] * sj * sk;
                    }
                }
                if sym.norm() < 1e-14 {
                    ZERO
                } else {
                    1.0 / sym
                }
            });
            sp.backward(&out)
        }
    };

    let mut phi = vec![ZERO; grid.total];
    let mut history: Vec<f64> = Vec::new();
    for _newton in 0..50 {
        let chi = flow.chi_of(&phi)?;
        let mut residual = vec![ZERO; grid.total];
        let mut invs: Vec<Vec<C64>> = Vec::with_capacity(grid.total);
        let mut inv_mean = vec![ZERO; n * n];
        for idx in 0..grid.total {
            let m = chi.matrix_at(idx);
            let d = linalg::hermitian_pd_det(&m, n).ok_or(Error::PositivityLoss {
                point: idx,
                margin: linalg::hermitian_eigenvalues(&m, n)[0],
            })?;
            residual[idx] = C64::new(d.ln() - target[idx], 0.0);
            let inv = linalg::inverse(&m, n).expect("positive chi");
            for (a, b) in inv_mean.iter_mut().zip(&inv) {
                *a += b;
            }
            invs.push(inv);
        }
        for v in &mut inv_mean {
            *v /= grid.total as f64;
        }
        let sup_r = residual.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        history.push(sup_r);
        if sup_r <= tol {
            return Ok(OracleSolution { phi, c, residual_history: history });
        }
        if history.len() >= 4 {
            let k = history.len();
            if history[k - 1] > 0.9 * history[k - 4] {
                return Err(Error::OracleStagnation { history });
            }
        }
        // Newton direction: tr(chi^{-1} i ddbar u) = -residual
        let apply = |u: &[C64]| -> Vec<C64> {
            let h = sp.i_ddbar(u);
            let mut out = vec![ZERO; grid.total];
            for (idx, o) in out.iter_mut().enumerate() {
                let inv = &invs[idx];
                let mut acc = ZERO;
                for j in 0..n {
                    for k in 0..n {
                        acc += inv[j * n + k] * h[k * n + j][idx];
                    }
                }
                *o = acc;
            }
            out
        };
        let precond = preconditioner(&inv_mean);
        let rhs: Vec<C64> = residual.iter().map(|v| -v).collect();
        let forcing = (sup_r * 0.1).clamp(1e-12, 1e-4);
        let mut du = gmres(&apply, &precond, &rhs, forcing, 400);
        // project the update to grid mean zero
        let m0 = grid.mean(&du);
        for v in &mut du {
            *v -= m0;
        }
        // damped update with a positivity guard
        let mut scale = 1.0;
        loop {
            let cand: Vec<C64> =
                phi.iter().zip(&du).map(|(p, d)| p + d * scale).collect();
            if flow.chi_of(&cand).and_then(|chi| flow.ma_rhs_chi_ok(&chi)).is_ok() {
                phi = cand;
                break;
            }
            scale *= 0.5;
            if scale < 1e-6 {
                return Err(Error::OracleStagnation { history });
            }
        }
    }
    Err(Error::OracleStagnation { history })
}

impl Flow<'_> {
    /// Positivity check helper shared with the oracle's damping loop.
    fn ma_rhs_chi_ok(&self, chi: &MetricField) -> Result<()> {
        self.pd_det_field(chi).map(|_| ())
    }
}
