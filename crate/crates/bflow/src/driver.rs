//! Experiment driver: configuration parsing, the randomized identity
//! verification suite, flow runs with CSV/snapshot/summary emission, and the
//! independent stationary-solver command.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly;
use crate::bruteforce::{
    conformally_balanced_lift, contraction_via_top_form_fast, jet_div_torsion,
    jet_iddbar_omega, jet_riccis, jet_torsion, random_form, random_metric, random_real_pp_form,
    random_torsion, real_coordinate_star_sparse, top_coefficient_full, wedge_value_at,
    AnalyticMetric,
};
use crate::error::{Error, Result};
use crate::flow::{cy_oracle, ConvergenceMonitor, FSpec, Flow, FlowParams, FlowState, FlowStatus};
use crate::forms::{self, omega_pow};
use crate::linalg::{self, C64, ZERO};
use crate::torus::{read_snapshot, write_snapshot, MetricField, Spectral, TorusGrid};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One Kahler potential mode: chi_hat gains i ddbar(amplitude sin(2 pi <w,u>)),
/// u = (x^1, y^1, .., x^n, y^n) in grid coordinates, w integer frequencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialMode {
    pub amplitude: f64,
    pub frequency: Vec<i64>,
}

fn default_one() -> f64 {
    1.0
}
fn default_f() -> String {
    "derived".into()
}
fn default_safety() -> f64 {
    0.6
}
fn default_tol_speed() -> f64 {
    1e-8
}
fn default_tol_phi_rate() -> f64 {
    1e-9
}
fn default_output_every() -> usize {
    10
}

/// Discretization, background metric, conformal weight, and stopping rules
/// for one flow run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Complex dimension.
    pub n: usize,
    /// Grid points per real axis (2n axes).
    pub m: usize,
    #[serde(default = "default_one")]
    pub period: f64,
    /// Background metric chi_hat_scale * I unless a diagonal is given.
    #[serde(default = "default_one")]
    pub chi_hat_scale: f64,
    #[serde(default)]
    pub chi_hat_diag: Option<Vec<f64>>,
    #[serde(default)]
    pub perturbation: Vec<PotentialMode>,
    /// Conformal weight: "zero" (f = 0) or "derived"
    /// (e^{-f} = det chi_hat/(n-1)).
    #[serde(default = "default_f")]
    pub f: String,
    /// Fraction of the RK4 stability bound used for dt.
    #[serde(default = "default_safety")]
    pub safety: f64,
    /// Convergence: std/mean of the speed field.
    #[serde(default = "default_tol_speed")]
    pub tol_speed: f64,
    /// Convergence: sup drift of the normalized potential per unit time.
    #[serde(default = "default_tol_phi_rate")]
    pub tol_phi_rate: f64,
    /// Stop the run at this flow time if not converged earlier.
    pub max_t: f64,
    /// Steps between CSV rows.
    #[serde(default = "default_output_every")]
    pub output_every: usize,
}

/// A full experiment: one flow configuration plus reporting options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Default output directory (the CLI --out flag overrides it).
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Evolve the scalar flow but report the lifted conformally balanced
    /// metric quantities (requires n >= 3).
    #[serde(default)]
    pub lift: bool,
    /// Compare the flow limit against the independent Newton-Krylov solution.
    #[serde(default)]
    pub oracle_compare: bool,
    /// Identity selection for `verify-identities --config` (empty = all).
    #[serde(default)]
    pub identities: Vec<String>,
    pub flow: FlowConfig,
}

impl ExperimentSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.flow;
        if cfg.n == 0 || cfg.n > 6 {
            return Err(Error::Config(format!("n = {} out of range 1..=6", cfg.n)));
        }
        if cfg.m < 2 || cfg.m % 2 != 0 {
            return Err(Error::Config(format!("m = {} must be even and >= 2", cfg.m)));
        }
        if !(cfg.period > 0.0) {
            return Err(Error::Config("period must be positive".into()));
        }
        if !(cfg.safety > 0.0 && cfg.safety <= 1.0) {
            return Err(Error::Config("safety must be in (0, 1]".into()));
        }
        if !(cfg.max_t > 0.0) {
            return Err(Error::Config("max_t must be positive".into()));
        }
        if cfg.output_every == 0 {
            return Err(Error::Config("output_every must be >= 1".into()));
        }
        match cfg.f.as_str() {
            "zero" | "derived" => {}
            other => {
                return Err(Error::Config(format!(
                    "f = {other:?}, expected \"zero\" or \"derived\""
                )))
            }
        }
        if let Some(d) = &cfg.chi_hat_diag {
            if d.len() != cfg.n {
                return Err(Error::Config("chi_hat_diag length must equal n".into()));
            }
            if d.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("chi_hat_diag entries must be positive".into()));
            }
        }
        for mode in &cfg.perturbation {
            if mode.frequency.len() != 2 * cfg.n {
                return Err(Error::Config(format!(
                    "perturbation frequency needs {} entries, got {}",
                    2 * cfg.n,
                    mode.frequency.len()
                )));
            }
            if mode.frequency.iter().any(|w| 2 * w.unsigned_abs() as usize >= cfg.m) {
                return Err(Error::Config(
                    "perturbation frequency too high for the grid (need 2|w| < m)".into(),
                ));
            }
        }
        if self.lift && cfg.n < 3 {
            return Err(Error::Config("lift requires n >= 3".into()));
        }
        Ok(())
    }

    pub fn fspec(&self) -> FSpec {
        match self.flow.f.as_str() {
            "zero" => FSpec::Zero,
            _ => FSpec::Derived,
        }
    }

    pub fn flow_params(&self) -> FlowParams {
        FlowParams {
            safety: self.flow.safety,
            tol_speed: self.flow.tol_speed,
            tol_phi_rate: self.flow.tol_phi_rate,
            max_halvings: 20,
        }
    }

    /// chi_hat = diag + sum of i ddbar potential modes, sampled on the grid.
    pub fn build_chi_hat(&self, sp: &Spectral) -> Result<MetricField> {
        let grid = sp.grid;
        let n = grid.n;
        let diag: Vec<f64> = match &self.flow.chi_hat_diag {
            Some(d) => d.clone(),
            None => vec![self.flow.chi_hat_scale; n],
        };
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for k in 0..n {
            for v in &mut comps[k * n + k] {
                *v = C64::new(diag[k], 0.0);
            }
        }
        for mode in &self.flow.perturbation {
            let psi = grid.sample(|c| {
                let t: f64 = mode
                    .frequency
                    .iter()
                    .zip(c)
                    .map(|(&w, &u)| w as f64 * u)
                    .sum();
                C64::new(mode.amplitude * (2.0 * PI * t / grid.period).sin(), 0.0)
            });
            let h = sp.i_ddbar(&psi);
            for (c, d) in comps.iter_mut().zip(&h) {
                for (v, w) in c.iter_mut().zip(d) {
                    *v += *w;
                }
            }
        }
        MetricField::from_components(grid, comps)
    }
}

/// Commented configuration template for `init`.
pub const CONFIG_TEMPLATE: &str = r#"# Experiment configuration for the bflw driver.

name = "example"
seed = 7
# Evolve the scalar flow and report the lifted conformally balanced metric
# quantities (requires n >= 3).
lift = true
# Compare the flow limit against the independent Newton-Krylov stationary
# solution.
oracle_compare = false
# Identity selection for `bflw verify-identities --config` (empty = all).
identities = []

[flow]
n = 3              # complex dimension
m = 8              # grid points per real axis (2n axes)
period = 1.0
# Background metric: chi_hat_scale * I, or an explicit positive diagonal.
chi_hat_scale = 1.0
# chi_hat_diag = [1.0, 1.0, 1.0]
# Conformal weight: "zero" (f = 0) or "derived"
# (e^{-f} = det chi_hat / (n - 1)).
f = "derived"
safety = 0.6        # fraction of the RK4 stability bound used for dt
tol_speed = 1e-8    # convergence: std/mean of the speed field
tol_phi_rate = 1e-9 # convergence: sup drift of the normalized potential
max_t = 50.0        # stop here if not converged earlier
output_every = 10   # steps between CSV rows

# Kahler potential perturbations of the background:
# chi_hat += i ddbar( amplitude * sin(2 pi <frequency, u> / period) ),
# u = (x^1, y^1, ..., x^n, y^n); frequency has 2n integer entries.
[[flow.perturbation]]
amplitude = 0.01
frequency = [1, 1, 0, 0, 0, 0]
"#;

/// Write the commented template config. Refuses to overwrite.
pub fn cmd_init(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::Config(format!("{} already exists", path.display())));
    }
    // the template must parse
    ExperimentSpec::from_str(CONFIG_TEMPLATE)?;
    fs::write(path, CONFIG_TEMPLATE)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Identity verification suite
// ---------------------------------------------------------------------------

pub const IDENTITY_TOLERANCE: f64 = 1e-10;

/// All identity names, in report order.
pub const IDENTITY_NAMES: [&str; 12] = [
    "star-wedge-n-2",
    "star-wedge-n-3",
    "star-wedge-n-4",
    "star-dense-n1n1",
    "contract-1-1",
    "contract-2-2",
    "contract-3-3",
    "torsion-wedge-double-trace",
    "torsion-wedge-triple-trace",
    "torsion-wedge-top-form",
    "iddbar-omega-trace",
    "balanced-ricci-relations",
];

#[derive(Debug, Clone, PartialEq)]
pub enum IdentityStatus {
    Pass,
    Fail,
    Skipped(&'static str),
}

#[derive(Debug, Clone)]
pub struct IdentityLine {
    pub name: &'static str,
    pub n: usize,
    pub trials: usize,
    pub max_rel_err: f64,
    pub status: IdentityStatus,
}

#[derive(Debug, Clone, Default)]
pub struct IdentityReport {
    pub lines: Vec<IdentityLine>,
}

impl IdentityReport {
    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.status != IdentityStatus::Fail)
    }

    /// One line per identity/dimension pair, for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let line = match &l.status {
                IdentityStatus::Pass => format!(
                    "PASS  {:<28} n={}  max_rel_err={:.3e}  ({} trials)\n",
                    l.name, l.n, l.max_rel_err, l.trials
                ),
                IdentityStatus::Fail => format!(
                    "FAIL  {:<28} n={}  max_rel_err={:.3e}  ({} trials)\n",
                    l.name, l.n, l.max_rel_err, l.trials
                ),
                IdentityStatus::Skipped(reason) => {
                    format!("SKIP  {:<28} n={}  ({reason})\n", l.name, l.n)
                }
            };
            out.push_str(&line);
        }
        out
    }
}

/// Reason an identity does not run at this dimension, if any.
fn identity_skip(name: &str, n: usize) -> Option<&'static str> {
    match name {
        "star-wedge-n-4" if n < 4 => Some("requires n >= 4"),
        "star-dense-n1n1" if n > 5 => Some("dense (n-1,n-1) storage too large at n = 6"),
        "contract-1-1" | "contract-2-2" | "contract-3-3" if n > 5 => {
            Some("oracle omega power too large at n = 6")
        }
        _ => None,
    }
}

fn rel_err_c(a: C64, b: C64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-30)
}

fn rel_err_slices(a: &[C64], b: &[C64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.norm())
        .fold(1e-30f64, f64::max);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0f64, f64::max)
        / scale
}

/// One random trial of the named identity; returns the relative error.
fn identity_trial(name: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    match name {
        "star-wedge-n-2" | "star-wedge-n-3" | "star-wedge-n-4" => {
            let g = random_metric(n, rng);
            let (p, closed, w) = match name {
                "star-wedge-n-2" => {
                    let alpha = random_real_pp_form(n, 1, rng);
                    let closed = forms::star_alpha_wedge(&alpha, &g)?;
                    (alpha, closed, omega_pow(&g, n - 2)?)
                }
                "star-wedge-n-3" => {
                    let phi = random_real_pp_form(n, 2, rng);
                    let closed = forms::star_phi_wedge(&phi, &g)?;
                    (phi, closed, omega_pow(&g, n - 3)?)
                }
                _ => {
                    let psi = random_real_pp_form(n, 3, rng);
                    let closed = forms::star_psi_wedge(&psi, &g)?;
                    (psi, closed, omega_pow(&g, n - 4)?)
                }
            };
            let oracle = real_coordinate_star_sparse(
                &mut |k: &[usize], j: &[usize]| wedge_value_at(&p, &w, k, j),
                &g,
            )?;
            Ok(rel_err_slices(&closed.coeffs, &oracle.coeffs))
        }
        "star-dense-n1n1" => {
            // dense closed-form star on a generic (n-1,n-1)-form against the
            // brute-force real-coordinate star; alpha ^ omega^{n-2} with random
            // alpha spans all (n-1,n-1)-forms
            let g = random_metric(n, rng);
            let alpha = random_real_pp_form(n, 1, rng);
            let theta = forms::wedge(&alpha, &omega_pow(&g, n - 2)?)?;
            let closed = forms::hodge_star_n1n1(&theta, &g)?;
            let oracle = real_coordinate_star_sparse(
                &mut |k: &[usize], j: &[usize]| theta.get(k, j),
                &g,
            )?;
            Ok(rel_err_slices(&closed.coeffs, &oracle.coeffs))
        }
        "contract-1-1" | "contract-2-2" | "contract-3-3" => {
            let p = match name {
                "contract-1-1" => 1,
                "contract-2-2" => 2,
                _ => 3,
            };
            let g = random_metric(n, rng);
            let theta = random_form(n, p, p, rng);
            let closed = forms::contract_against_omega_power(&theta, &g)?;
            let oracle = contraction_via_top_form_fast(&theta, &g)?;
            Ok(rel_err_c(closed, oracle))
        }
        "torsion-wedge-double-trace" => {
            let g = random_metric(n, rng);
            let t = random_torsion(n, rng);
            let tt = forms::t_wedge_tbar_components(&t);
            let tau = t.tau(&g);
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 1e-30;
            for k in 0..n {
                for j in 0..n {
                    let mut lhs = ZERO;
                    let mut quad = ZERO;
                    for q in 0..n {
                        for p in 0..n {
                            let gqp = g.upper(q, p);
                            for s in 0..n {
                                for r in 0..n {
                                    let gg = gqp * g.upper(s, r);
                                    lhs += gg * tt.pp_get(&[(r, s), (p, q), (k, j)]);
                                    quad += gg
                                        * (2.0 * t.get(p, s, j) * t.get(q, r, k).conj()
                                            + t.get(k, q, s) * t.get(j, p, r).conj());
                                }
                            }
                        }
                    }
                    let mut rhs = quad;
                    for s in 0..n {
                        for r in 0..n {
                            rhs -= 2.0
                                * g.upper(s, r)
                                * (t.get(k, j, s) * tau[r].conj()
                                    + tau[s] * t.get(j, k, r).conj());
                        }
                    }
                    rhs -= 2.0 * tau[j] * tau[k].conj();
                    worst = worst.max((lhs - rhs).norm());
                    scale = scale.max(lhs.norm()).max(rhs.norm());
                }
            }
            Ok(worst / scale)
        }
        "torsion-wedge-triple-trace" => {
            let g = random_metric(n, rng);
            let t = random_torsion(n, rng);
            let tt = forms::t_wedge_tbar_components(&t);
            let mut lhs = ZERO;
            for j in 0..n {
                for k in 0..n {
                    let gjk = g.upper(j, k);
                    for q in 0..n {
                        for p in 0..n {
                            let gqp = g.upper(q, p);
                            for s in 0..n {
                                for r in 0..n {
                                    lhs += gjk
                                        * gqp
                                        * g.upper(s, r)
                                        * tt.pp_get(&[(r, s), (p, q), (k, j)]);
                                }
                            }
                        }
                    }
                }
            }
            let rhs = C64::new(3.0 * (t.norm_sq(&g) - 2.0 * t.tau_norm_sq(&g)), 0.0);
            Ok(rel_err_c(lhs, rhs))
        }
        "torsion-wedge-top-form" => {
            let g = random_metric(n, rng);
            let t = random_torsion(n, rng);
            let tt = forms::t_wedge_tbar_components(&t);
            let w_rest = omega_pow(&g, n - 3)?;
            let lhs = top_coefficient_full(&tt, &w_rest)?;
            let top_omega_n = top_coefficient_full(&omega_pow(&g, 3)?, &w_rest)?;
            let coef = (t.norm_sq(&g) - 2.0 * t.tau_norm_sq(&g))
                / (2.0 * (n * (n - 1) * (n - 2)) as f64);
            let rhs = linalg::I * coef * top_omega_n;
            Ok(rel_err_c(lhs, rhs))
        }
        "iddbar-omega-trace" => {
            let am = AnalyticMetric::random_hermitian(n, 3, 0.25, rng);
            let u: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let jet = am.jet(&u);
            let inv = linalg::inverse(&jet.g, n).ok_or(Error::NotPositive { min_eig: 0.0 })?;
            let iddb = jet_iddbar_omega(&jet);
            let [r, rt, rp, rpp] = jet_riccis(&jet)?;
            let tor = jet_torsion(&jet)?;
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 1e-30;
            for l in 0..n {
                for m in 0..n {
                    let mut lhs = ZERO;
                    let mut quad = ZERO;
                    for j in 0..n {
                        for k in 0..n {
                            let gjk = inv[j * n + k];
                            lhs += gjk * iddb[((k * n + j) * n + l) * n + m];
                            for s in 0..n {
                                for rr in 0..n {
                                    quad += gjk
                                        * inv[s * n + rr]
                                        * tor.get(rr, m, j)
                                        * tor.get(s, l, k).conj();
                                }
                            }
                        }
                    }
                    let e = l * n + m;
                    let rhs = rt[e] - rpp[e] + r[e] - rp[e] - quad;
                    worst = worst.max((lhs - rhs).norm());
                    scale = scale.max(lhs.norm()).max(rhs.norm());
                }
            }
            Ok(worst / scale)
        }
        "balanced-ricci-relations" => {
            let am = AnalyticMetric::random_kahler(n, 3, 0.3, rng);
            let u: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let jet = conformally_balanced_lift(&am.jet(&u))?;
            let [r, rt, rp, rpp] = jet_riccis(&jet)?;
            let div = jet_div_torsion(&jet)?;
            let scale = r
                .iter()
                .map(|v| v.norm())
                .fold(1e-30f64, f64::max)
                .max(1.0);
            let mut worst: f64 = 0.0;
            for e in 0..n * n {
                worst = worst.max((rp[e] - 0.5 * r[e]).norm());
                worst = worst.max((rpp[e] - 0.5 * r[e]).norm());
                worst = worst.max((rt[e] - 0.5 * r[e] - div[e]).norm());
            }
            Ok(worst / scale)
        }
        other => Err(Error::Config(format!("unknown identity {other:?}"))),
    }
}

/// Run the randomized identity suite. `selection` empty means all
/// identities; dims must lie in 3..=6. `trials == 0` yields an empty report.
pub fn cmd_verify_identities(
    seed: u64,
    dims: &[usize],
    trials: usize,
    selection: &[String],
) -> Result<IdentityReport> {
    for &n in dims {
        if !(3..=6).contains(&n) {
            return Err(Error::Config(format!("dimension {n} outside 3..=6")));
        }
    }
    let names: Vec<&'static str> = if selection.is_empty() {
        IDENTITY_NAMES.to_vec()
    } else {
        let mut out = Vec::with_capacity(selection.len());
        for want in selection {
            match IDENTITY_NAMES.iter().find(|n| *n == want) {
                Some(name) => out.push(*name),
                None => return Err(Error::Config(format!("unknown identity {want:?}"))),
            }
        }
        out
    };
    let mut report = IdentityReport::default();
    if trials == 0 {
        return Ok(report);
    }
    for (idx, name) in names.iter().enumerate() {
        for &n in dims {
            if let Some(reason) = identity_skip(name, n) {
                report.lines.push(IdentityLine {
                    name,
                    n,
                    trials: 0,
                    max_rel_err: 0.0,
                    status: IdentityStatus::Skipped(reason),
                });
                continue;
            }
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                // stream derived from (identity, dimension, trial) so results
                // are independent of execution order
                let stream =
                    seed ^ ((idx as u64 + 1) << 48) ^ ((n as u64) << 40) ^ trial as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                worst = worst.max(identity_trial(name, n, &mut rng)?);
            }
            let status = if worst.is_finite() && worst <= IDENTITY_TOLERANCE {
                IdentityStatus::Pass
            } else {
                IdentityStatus::Fail
            };
            report.lines.push(IdentityLine {
                name,
                n,
                trials,
                max_rel_err: worst,
                status,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Flow runs
// ---------------------------------------------------------------------------

/// Quantities of the balanced-metric layer measured at one output step.
struct AnomalyColumns {
    m_dilaton: f64,
    dm_formula: f64,
    torsion_l2: f64,
    tau_l2: f64,
    stationary: f64,
    ansatz: f64,
}

fn anomaly_columns(sp: &Spectral, chi: &MetricField, lift: bool) -> Result<AnomalyColumns> {
    let n = sp.grid.n;
    if lift {
        let omega = anomaly::ansatz_lift(chi)?;
        let ansatz = anomaly::ansatz_residual(&omega, chi)?;
        let mut cols = metric_columns(sp, &omega)?;
        cols.ansatz = ansatz;
        Ok(cols)
    } else if n >= 3 {
        metric_columns(sp, chi)
    } else {
        // scalar-only low dimension: chi is Kahler, so its torsion vanishes
        // identically; the balanced-metric residuals are undefined here.
        Ok(AnomalyColumns {
            m_dilaton: anomaly::dilaton_functional(chi)?,
            dm_formula: f64::NAN,
            torsion_l2: 0.0,
            tau_l2: 0.0,
            stationary: f64::NAN,
            ansatz: f64::NAN,
        })
    }
}

fn metric_columns(sp: &Spectral, gf: &MetricField) -> Result<AnomalyColumns> {
    let mon = anomaly::monitor_readout(sp, gf)?;
    Ok(AnomalyColumns {
        m_dilaton: mon.m_dilaton,
        dm_formula: mon.rates.general,
        torsion_l2: mon.torsion_l2,
        tau_l2: mon.tau_l2,
        stationary: mon.stationary_residual,
        ansatz: f64::NAN,
    })
}

struct Row {
    t: f64,
    dt: f64,
    inf_speed: f64,
    sup_speed: f64,
    std_f_over_mean: f64,
    osc_phi: f64,
    min_eig_chi: f64,
    trh_max: f64,
    an: AnomalyColumns,
    dm_fd: f64,
    /// std/mean of the full speed field (not a CSV column; with a nonconstant
    /// dilaton factor it decays to zero while std_F_over_mean plateaus).
    speed_uniformity: f64,
}

fn measure_row(sp: &Spectral, flow: &Flow, st: &FlowState, lift: bool) -> Result<Row> {
    let total = sp.grid.total as f64;
    let mean_f = st.f_ratio.iter().sum::<f64>() / total;
    let var_f = st
        .f_ratio
        .iter()
        .map(|v| (v - mean_f) * (v - mean_f))
        .sum::<f64>()
        / total;
    let (trh_max, _) = flow.h_trace_bounds(st);
    Ok(Row {
        t: st.t,
        dt: st.dt,
        inf_speed: st.inf_speed(),
        sup_speed: st.sup_speed(),
        std_f_over_mean: var_f.sqrt() / mean_f,
        osc_phi: st.osc_phi(),
        min_eig_chi: st.chi.min_eigenvalue().0,
        trh_max,
        an: anomaly_columns(sp, &st.chi, lift)?,
        dm_fd: f64::NAN,
        speed_uniformity: st.speed_uniformity(),
    })
}

fn csv_header(lift: bool) -> &'static str {
    if lift {
        "t,dt,inf_speed,sup_speed,std_F_over_mean,osc_phi,min_eig_chi,trh_max,\
         M_dilaton,dM_dt_formula,dM_dt_finite_diff,torsion_L2,tau_L2,\
         stationary_residual,ansatz_residual"
    } else {
        "t,dt,inf_speed,sup_speed,std_F_over_mean,osc_phi,min_eig_chi,trh_max,\
         M_dilaton,dM_dt_formula,dM_dt_finite_diff,stationary_residual"
    }
}

fn write_csv(path: &Path, rows: &[Row], lift: bool) -> Result<()> {
    let mut out = String::new();
    out.push_str(csv_header(lift));
    out.push('\n');
    for r in rows {
        let base = format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.t,
            r.dt,
            r.inf_speed,
            r.sup_speed,
            r.std_f_over_mean,
            r.osc_phi,
            r.min_eig_chi,
            r.trh_max,
            r.an.m_dilaton,
            r.an.dm_formula,
            r.dm_fd,
        );
        if lift {
            out.push_str(&format!(
                "{base},{:e},{:e},{:e},{:e}\n",
                r.an.torsion_l2, r.an.tau_l2, r.an.stationary, r.an.ansatz
            ));
        } else {
            out.push_str(&format!("{base},{:e}\n", r.an.stationary));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Centered finite differences of M over the recorded rows (one-sided at the
/// ends).
fn patch_dm_fd(rows: &mut [Row]) {
    let k = rows.len();
    for i in 0..k {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(k - 1));
        if hi == lo {
            continue;
        }
        let dt = rows[hi].t - rows[lo].t;
        if dt > 0.0 {
            rows[i].dm_fd = (rows[hi].an.m_dilaton - rows[lo].an.m_dilaton) / dt;
        }
    }
}

fn is_breakdown(e: &Error) -> bool {
    matches!(
        e,
        Error::FlowBreakdown { .. }
            | Error::PositivityLoss { .. }
            | Error::NotPositive { .. }
            | Error::NonFinite(_)
    )
}

/// Least-squares decay rate of ln(uniformity) over the trailing half of the
/// recorded rows.
fn empirical_rate(rows: &[Row]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.speed_uniformity > 0.0 && r.speed_uniformity.is_finite())
        .map(|r| (r.t, r.speed_uniformity.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let tail = &pts[pts.len() / 2..];
    if tail.len() < 2 {
        return None;
    }
    let k = tail.len() as f64;
    let mt = tail.iter().map(|p| p.0).sum::<f64>() / k;
    let mu = tail.iter().map(|p| p.1).sum::<f64>() / k;
    let num: f64 = tail.iter().map(|p| (p.0 - mt) * (p.1 - mu)).sum();
    let den: f64 = tail.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    if den <= 0.0 {
        return None;
    }
    let rate = -num / den;
    rate.is_finite().then_some(rate)
}

#[derive(Debug)]
pub struct RunOutcome {
    /// "converged", "max_time", or "breakdown".
    pub outcome: String,
    pub breakdown_detail: Option<String>,
    pub final_t: f64,
    pub steps: usize,
    pub rows: usize,
    pub final_speed_uniformity: f64,
    pub empirical_rate: Option<f64>,
    pub max_principle_inf_drift: f64,
    pub max_principle_sup_drift: f64,
    pub final_stationary_residual: f64,
    pub final_ansatz_residual: f64,
    pub oracle_gap: Option<f64>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub snapshot_path: PathBuf,
}

/// Run the flow described by `spec`, writing the time series CSV, snapshots,
/// and a structured summary into `out_dir`. A flow breakdown is a reported
/// outcome, not an error.
pub fn cmd_run(spec: &ExperimentSpec, out_dir: &Path, emit_snapshots: usize) -> Result<RunOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let cfg = &spec.flow;
    let grid = TorusGrid::with_period(cfg.n, cfg.m, cfg.period)?;
    let sp = Spectral::new(grid);
    let chi_hat = spec.build_chi_hat(&sp)?;
    let flow = Flow::new(&sp, chi_hat, spec.fspec(), spec.flow_params())?;

    let mut st = flow.initial_state(vec![ZERO; grid.total])?;
    let mut monitor = ConvergenceMonitor::new();
    // max principle: inf speed is nondecreasing, sup speed nonincreasing;
    // drifts record the worst stepwise violation
    let (mut prev_inf, mut prev_sup) = (st.inf_speed(), st.sup_speed());
    let mut inf_drift: f64 = 0.0;
    let mut sup_drift: f64 = 0.0;

    let mut rows: Vec<Row> = vec![measure_row(&sp, &flow, &st, spec.lift)?];
    let mut steps = 0usize;
    let mut outcome = "max_time".to_string();
    let mut breakdown_detail: Option<String> = None;
    let mut snap_idx = 0usize;

    loop {
        if st.t >= cfg.max_t {
            break;
        }
        match flow.step(&st) {
            Ok(next) => {
                st = next;
                steps += 1;
            }
            Err(e) if is_breakdown(&e) => {
                outcome = "breakdown".into();
                breakdown_detail = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        inf_drift = inf_drift.max(prev_inf - st.inf_speed());
        sup_drift = sup_drift.max(st.sup_speed() - prev_sup);
        prev_inf = st.inf_speed();
        prev_sup = st.sup_speed();
        let converged = matches!(
            monitor.observe(&flow, &st),
            FlowStatus::Converged { .. }
        );
        let due = steps % cfg.output_every == 0 || converged || st.t >= cfg.max_t;
        if due {
            rows.push(measure_row(&sp, &flow, &st, spec.lift)?);
            // evenly spaced intermediate snapshots over [0, max_t]
            while emit_snapshots > 0
                && snap_idx < emit_snapshots
                && st.t >= cfg.max_t * (snap_idx + 1) as f64 / (emit_snapshots + 1) as f64
            {
                snap_idx += 1;
                let p = out_dir.join(format!("snap_{snap_idx:04}.bin"));
                save_state(&p, &st, grid)?;
            }
        }
        if converged {
            outcome = "converged".into();
            break;
        }
    }
    if rows.last().map(|r| r.t) != Some(st.t) {
        rows.push(measure_row(&sp, &flow, &st, spec.lift)?);
    }
    patch_dm_fd(&mut rows);

    let csv_path = out_dir.join("timeseries.csv");
    write_csv(&csv_path, &rows, spec.lift)?;
    let snapshot_path = out_dir.join("final.bin");
    save_state(&snapshot_path, &st, grid)?;
    fs::write(
        out_dir.join("config.toml"),
        toml::to_string_pretty(spec).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    let oracle_gap = if spec.oracle_compare {
        let sol = cy_oracle(&flow, 1e-10)?;
        let a = flow.normalize(&st.phi);
        let b = flow.normalize(&sol.phi);
        Some(
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0f64, f64::max),
        )
    } else {
        None
    };

    let last = rows.last().expect("at least one row");
    let rate = empirical_rate(&rows);
    let out = RunOutcome {
        outcome,
        breakdown_detail,
        final_t: st.t,
        steps,
        rows: rows.len(),
        final_speed_uniformity: st.speed_uniformity(),
        empirical_rate: rate,
        max_principle_inf_drift: inf_drift,
        max_principle_sup_drift: sup_drift,
        final_stationary_residual: last.an.stationary,
        final_ansatz_residual: last.an.ansatz,
        oracle_gap,
        csv_path,
        summary_path: out_dir.join("summary.json"),
        snapshot_path,
    };

    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let summary = serde_json::json!({
        "name": spec.name,
        "n": cfg.n,
        "m": cfg.m,
        "seed": spec.seed,
        "lift": spec.lift,
        "outcome": out.outcome,
        "breakdown_detail": out.breakdown_detail,
        "final_t": out.final_t,
        "steps": out.steps,
        "rows": out.rows,
        "final_speed_uniformity": out.final_speed_uniformity,
        "final_osc_phi": last.osc_phi,
        "final_min_eig_chi": last.min_eig_chi,
        "empirical_rate": out.empirical_rate,
        "max_principle_inf_drift": out.max_principle_inf_drift,
        "max_principle_sup_drift": out.max_principle_sup_drift,
        "final_m_dilaton": last.an.m_dilaton,
        "final_stationary_residual": finite_or_null(out.final_stationary_residual),
        "final_ansatz_residual": finite_or_null(out.final_ansatz_residual),
        "oracle_gap": out.oracle_gap,
        "timeseries": "timeseries.csv",
        "final_snapshot": "final.bin",
        "generated_at": stamp,
    });
    fs::write(&out.summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(out)
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn save_state(path: &Path, st: &FlowState, grid: TorusGrid) -> Result<()> {
    let speed: Vec<C64> = st.speed.iter().map(|&v| C64::new(v, 0.0)).collect();
    write_snapshot(
        path,
        grid.n as u32,
        grid.m as u32,
        &[("phi", &st.phi), ("speed", &speed)],
    )
}

// ---------------------------------------------------------------------------
// Stationary oracle command
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct OracleOutcome {
    pub c: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub snapshot_roundtrip_ok: bool,
    pub snapshot_path: PathBuf,
    pub history_path: PathBuf,
}

/// Solve the stationary equation for `spec` with the Newton-Krylov solver,
/// writing the solution snapshot and the residual-history CSV. Stagnation
/// still writes the history, then surfaces as an error.
pub fn cmd_oracle(spec: &ExperimentSpec, out_dir: &Path) -> Result<OracleOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let cfg = &spec.flow;
    let grid = TorusGrid::with_period(cfg.n, cfg.m, cfg.period)?;
    let sp = Spectral::new(grid);
    let chi_hat = spec.build_chi_hat(&sp)?;
    let flow = Flow::new(&sp, chi_hat, spec.fspec(), spec.flow_params())?;
    let history_path = out_dir.join("residual_history.csv");
    let write_history = |history: &[f64]| -> Result<()> {
        let mut out = String::from("iteration,sup_residual\n");
        for (i, r) in history.iter().enumerate() {
            out.push_str(&format!("{i},{r:e}\n"));
        }
        fs::write(&history_path, out)?;
        Ok(())
    };
    let sol = match cy_oracle(&flow, 1e-10) {
        Ok(sol) => sol,
        Err(Error::OracleStagnation { history }) => {
            write_history(&history)?;
            return Err(Error::OracleStagnation { history });
        }
        Err(e) => return Err(e),
    };
    write_history(&sol.residual_history)?;
    let snapshot_path = out_dir.join("oracle.bin");
    write_snapshot(
        &snapshot_path,
        grid.n as u32,
        grid.m as u32,
        &[("phi", &sol.phi)],
    )?;
    let back = read_snapshot(&snapshot_path)?;
    let roundtrip = back.n == grid.n as u32
        && back.m == grid.m as u32
        && back.fields.len() == 1
        && back.fields[0].0 == "phi"
        && back.fields[0].1.len() == sol.phi.len()
        && back.fields[0].1.iter().zip(&sol.phi).all(|(a, b)| {
            a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()
        });
    let final_residual = sol.residual_history.last().copied().unwrap_or(f64::NAN);
    let summary = serde_json::json!({
        "name": spec.name,
        "n": cfg.n,
        "m": cfg.m,
        "volume_constant": sol.c,
        "iterations": sol.residual_history.len(),
        "final_residual": final_residual,
        "snapshot": "oracle.bin",
        "snapshot_roundtrip_ok": roundtrip,
        "residual_history": "residual_history.csv",
    });
    fs::write(
        out_dir.join("oracle_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(OracleOutcome {
        c: sol.c,
        iterations: sol.residual_history.len(),
        final_residual,
        snapshot_roundtrip_ok: roundtrip,
        snapshot_path,
        history_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_from(toml_text: &str) -> ExperimentSpec {
        ExperimentSpec::from_str(toml_text).unwrap()
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("bflw-driver-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn template_parses_and_rejects_unknown_fields() {
        let spec = spec_from(CONFIG_TEMPLATE);
        assert_eq!(spec.flow.n, 3);
        assert!(spec.lift);
        let bad = CONFIG_TEMPLATE.replace("safety = 0.6", "saftey = 0.6");
        assert!(ExperimentSpec::from_str(&bad).is_err());
        let high_freq =
            CONFIG_TEMPLATE.replace("frequency = [1, 1, 0, 0, 0, 0]", "frequency = [4, 1, 0, 0, 0, 0]");
        assert!(ExperimentSpec::from_str(&high_freq).is_err());
    }

    #[test]
    fn identity_suite_smoke_with_skip_reporting() {
        let report = cmd_verify_identities(11, &[3], 2, &[]).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
        let star4 = report
            .lines
            .iter()
            .find(|l| l.name == "star-wedge-n-4")
            .unwrap();
        assert!(matches!(star4.status, IdentityStatus::Skipped(_)));
        // every non-skipped identity actually ran
        assert!(report
            .lines
            .iter()
            .all(|l| matches!(l.status, IdentityStatus::Skipped(_)) || l.trials == 2));
        // empty report for zero trials
        assert!(cmd_verify_identities(11, &[3], 0, &[]).unwrap().lines.is_empty());
        // unknown selections and bad dims are config errors
        assert!(cmd_verify_identities(11, &[3], 1, &["nope".into()]).is_err());
        assert!(cmd_verify_identities(11, &[2], 1, &[]).is_err());
    }

    fn small_run_spec() -> ExperimentSpec {
        spec_from(
            r#"
name = "tiny"
seed = 3
lift = false
oracle_compare = true

[flow]
n = 2
m = 4
f = "derived"
max_t = 2.0
tol_speed = 1e-9
tol_phi_rate = 1e-8
output_every = 5

[[flow.perturbation]]
amplitude = 0.005
frequency = [1, 0, 0, 1]
"#,
        )
    }

    #[test]
    fn run_emits_deterministic_csv_and_summary() {
        let spec = small_run_spec();
        let d1 = tmpdir("run1");
        let d2 = tmpdir("run2");
        let o1 = cmd_run(&spec, &d1, 2).unwrap();
        let o2 = cmd_run(&spec, &d2, 2).unwrap();
        assert_eq!(o1.outcome, "converged", "{o1:?}");
        let c1 = fs::read(&o1.csv_path).unwrap();
        let c2 = fs::read(&o2.csv_path).unwrap();
        assert_eq!(c1, c2, "time series must be byte-identical across reruns");
        let header = String::from_utf8(c1).unwrap();
        assert!(header.starts_with(csv_header(false)));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&o1.summary_path).unwrap()).unwrap();
        assert_eq!(summary["outcome"], "converged");
        assert!(o1.oracle_gap.unwrap() <= 1e-6, "gap {:?}", o1.oracle_gap);
        assert!(o1.snapshot_path.exists());
        let _ = fs::remove_dir_all(&d1);
        let _ = fs::remove_dir_all(&d2);
    }

    #[test]
    fn lifted_run_reports_balanced_metric_columns() {
        let spec = spec_from(
            r#"
name = "tiny-lift"
seed = 5
lift = true

[flow]
n = 3
m = 4
f = "derived"
max_t = 0.02
output_every = 2

[[flow.perturbation]]
amplitude = 0.004
frequency = [1, 0, 0, 0, 0, 0]
"#,
        );
        let d = tmpdir("lift");
        let out = cmd_run(&spec, &d, 0).unwrap();
        let csv = fs::read_to_string(&out.csv_path).unwrap();
        assert!(csv.starts_with(csv_header(true)));
        assert!(out.final_ansatz_residual < 1e-8, "{out:?}");
        assert!(out.final_stationary_residual.is_finite());
        let _ = fs::remove_dir_all(&d);
    }

    #[test]
    fn oracle_command_round_trips_snapshot() {
        let mut spec = small_run_spec();
        spec.oracle_compare = false;
        let d = tmpdir("oracle");
        let out = cmd_oracle(&spec, &d).unwrap();
        assert!(out.snapshot_roundtrip_ok);
        assert!(out.final_residual <= 1e-10);
        assert!(out.c.is_finite() && out.c > 0.0);
        let history = fs::read_to_string(&out.history_path).unwrap();
        assert!(history.starts_with("iteration,sup_residual\n"));
        assert!(history.lines().count() >= 2);
        let _ = fs::remove_dir_all(&d);
    }

    #[test]
    fn init_writes_template_once() {
        let d = tmpdir("init");
        let p = d.join("experiment.toml");
        cmd_init(&p).unwrap();
        assert!(ExperimentSpec::from_path(&p).is_ok());
        assert!(cmd_init(&p).is_err(), "must refuse to overwrite");
        let _ = fs::remove_dir_all(&d);
    }
}
