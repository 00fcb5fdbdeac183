//! Lift of the scalar flow to the conformally balanced metric flow:
//! the ansatz omega = (det chi)^{1/(n-2)} chi, the metric-level evolution
//! d/dt(||Omega||_omega omega^{n-1}) = i ddbar omega^{n-2} in both its
//! direct-form and metric-component versions, the dilaton functional with
//! its evolution rates, and stationarity diagnostics.
//!
//! Volume convention: unit periods, Omega = dz^1 ^ .. ^ dz^n, so
//! ||Omega||_omega^2 = (det g)^{-1} and omega^n = n! 2^n det g dV.

use crate::error::{Error, Result};
use crate::forms::{omega_pow, top_component, PQForm};
use crate::geometry::{FormField, Geometry, TorsionField};
use crate::linalg::{C64, I, ZERO};
use crate::torus::{MetricField, Spectral};

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Dilaton normalization n! 2^n from the volume convention.
fn volume_factor(n: usize) -> f64 {
    factorial(n) * (1u64 << n) as f64
}

/// omega = ||Omega||_chi^{-2/(n-2)} chi = (det chi)^{1/(n-2)} chi: the unique
/// metric with ||Omega||_omega omega^{n-1} = chi^{n-1}. Requires n >= 3.
pub fn ansatz_lift(chi: &MetricField) -> Result<MetricField> {
    let n = chi.grid.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    let power = 1.0 / (n - 2) as f64;
    let mut comps = chi.comps.clone();
    let mut buf = vec![ZERO; n * n];
    for pt in 0..chi.grid.total {
        chi.write_matrix_at(pt, &mut buf);
        let d = crate::linalg::hermitian_pd_det_in_place(&mut buf, n).ok_or_else(|| {
            Error::NotPositive {
                min_eig: crate::linalg::hermitian_eigenvalues(&chi.matrix_at(pt), n)[0],
            }
        })?;
        let lam = d.powf(power);
        for c in comps.iter_mut() {
            c[pt] *= lam;
        }
    }
    MetricField::from_components(chi.grid, comps)
}

/// Sup norm over grid points and components of
/// ||Omega||_omega omega^{n-1} - chi^{n-1}: zero in exact arithmetic for
/// lifted metrics, so this measures floating-point/aliasing drift only.
pub fn ansatz_residual(omega: &MetricField, chi: &MetricField) -> Result<f64> {
    let n = omega.grid.n;
    if omega.grid != chi.grid {
        return Err(Error::ShapeMismatch("ansatz residual grids".into()));
    }
    // The coefficients of the (n-1)-th wedge power of a metric's (1,1)-form
    // are, up to fixed signs and slot placement, (n-1)! times its adjugate
    // entries, so the sup norm reduces to an entrywise adjugate comparison
    // (checked against the dense wedge expansion in the tests).
    let fact = factorial(n - 1);
    let mut mo = vec![ZERO; n * n];
    let mut mc = vec![ZERO; n * n];
    let mut adj_o = vec![ZERO; n * n];
    let mut adj_c = vec![ZERO; n * n];
    let mut minor = vec![ZERO; (n - 1) * (n - 1)];
    let mut worst: f64 = 0.0;
    for pt in 0..omega.grid.total {
        omega.write_matrix_at(pt, &mut mo);
        chi.write_matrix_at(pt, &mut mc);
        let d = crate::linalg::det(&mo, n).re;
        if !(d > 0.0) {
            return Err(Error::NotPositive {
                min_eig: crate::linalg::hermitian_eigenvalues(&mo, n)[0],
            });
        }
        let onorm = 1.0 / d.sqrt();
        crate::linalg::adjugate_into(&mo, n, &mut adj_o, &mut minor);
        crate::linalg::adjugate_into(&mc, n, &mut adj_c, &mut minor);
        for e in 0..n * n {
            worst = worst.max((onorm * adj_o[e] - adj_c[e]).norm());
        }
    }
    Ok(worst * fact)
}

/// Sup deviation of omega from pointwise conformal multiples of chi: zero
/// when omega = lambda(z) chi(z).
pub fn conformal_deviation(omega: &MetricField, chi: &MetricField) -> Result<f64> {
    let n = omega.grid.n;
    if omega.grid != chi.grid {
        return Err(Error::ShapeMismatch("conformal deviation grids".into()));
    }
    let mut worst: f64 = 0.0;
    for pt in 0..omega.grid.total {
        let cm = chi.metric_at(pt)?;
        let om = omega.matrix_at(pt);
        let inv = cm.inverse_entries();
        // lambda = tr(chi^{-1} omega)/n
        let mut lam = ZERO;
        for j in 0..n {
            for k in 0..n {
                lam += inv[j * n + k] * om[k * n + j];
            }
        }
        lam /= n as f64;
        for e in 0..n * n {
            worst = worst.max((om[e] - lam * cm.entries()[e]).norm());
        }
    }
    Ok(worst)
}

/// Threshold on the conformally-balanced residual above which the metric-level
/// right-hand-side formula is flagged: its derivation uses the conformally
/// balanced Ricci relations.
pub const BALANCE_WARN_THRESHOLD: f64 = 1e-6;

/// Metric-level right-hand side with an optional precondition warning.
pub struct MetricRhs {
    /// d/dt g_{kbar j}, fields indexed k*n + j.
    pub comps: Vec<Vec<C64>>,
    /// Conformally-balanced residual, if it exceeded the warning threshold.
    pub balance_warning: Option<f64>,
}

impl MetricRhs {
    pub fn sup_norm(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

/// Metric evolution of the conformally balanced flow:
///
///   n = 3:  d/dt g = (1/(2||Omega||)) [ -Rt_{kbar j}
///             + g^{m lbar} g^{s rbar} T_{rbar m j} conj(T_{sbar l k}) ]
///   n >= 4: d/dt g = (1/((n-1)||Omega||)) [ -Rt
///             + (|T|^2 - 2|tau|^2)/(2(n-2)) g
///             - 1/2 g^{q pbar} g^{s rbar} T_{kbar q s} Tbar_{j pbar rbar}
///             + g^{s rbar} (T_{kbar j s} Tbar_{rbar} + T_s Tbar_{j kbar rbar})
///             + T_j Tbar_{kbar} ]
///
/// with Tbar_{a bbar cbar} = conj(T_{abar b c}). Valid on conformally
/// balanced metrics; the residual is measured and reported as a warning when
/// it exceeds [`BALANCE_WARN_THRESHOLD`].
pub fn anomaly_rhs_metric(sp: &Spectral, gf: &MetricField) -> Result<MetricRhs> {
    let geo = Geometry::new(sp, gf)?;
    let tor = geo.torsion();
    anomaly_rhs_metric_geo(&geo, &tor)
}

/// [`anomaly_rhs_metric`] on an already-built geometry and torsion, for
/// callers computing several diagnostics of the same metric snapshot.
pub fn anomaly_rhs_metric_geo(geo: &Geometry, tor: &TorsionField) -> Result<MetricRhs> {
    let residual = geo.conf_balanced_residual()?;
    let balance_warning = (residual > BALANCE_WARN_THRESHOLD).then_some(residual);
    rhs_metric_core(geo, tor, balance_warning)
}

fn rhs_metric_core(
    geo: &Geometry,
    tor: &TorsionField,
    balance_warning: Option<f64>,
) -> Result<MetricRhs> {
    let gf = geo.gf;
    let n = gf.grid.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    let total = gf.grid.total;
    let rt = geo.ricci_tilde_field();
    let mut comps = vec![vec![ZERO; total]; n * n];
    let tcomp = |k: usize, j: usize, l: usize, pt: usize| tor.comps[(k * n + j) * n + l][pt];
    // scratch for the factorized n = 3 torsion contraction
    let mut vbuf = vec![ZERO; n * n * n];
    let mut wbuf = vec![ZERO; n * n * n];
    for pt in 0..total {
        let omega_norm = geo.det[pt].powf(-0.5);
        if n == 3 {
            let scale = 1.0 / (2.0 * omega_norm);
            // tt_{kbar j} = g^{m lbar} g^{s rbar} T_{rbar m j} conj(T_{sbar l k})
            // built in two stages to avoid the full six-index sum:
            //   V_{s m j} = sum_r g^{s rbar} T_{rbar m j}
            //   W_{l s j} = sum_m g^{m lbar} V_{s m j}
            for s in 0..n {
                for m in 0..n {
                    for j in 0..n {
                        let mut v = ZERO;
                        for r in 0..n {
                            v += geo.upper(pt, s, r) * tcomp(r, m, j, pt);
                        }
                        vbuf[(s * n + m) * n + j] = v;
                    }
                }
            }
            for l in 0..n {
                for s in 0..n {
                    for j in 0..n {
                        let mut w = ZERO;
                        for m in 0..n {
                            w += geo.upper(pt, m, l) * vbuf[(s * n + m) * n + j];
                        }
                        wbuf[(l * n + s) * n + j] = w;
                    }
                }
            }
            // the result is Hermitian: fill the upper triangle and mirror
            for k in 0..n {
                for j in k..n {
                    let mut tt = ZERO;
                    for l in 0..n {
                        for s in 0..n {
                            tt += wbuf[(l * n + s) * n + j] * tcomp(s, l, k, pt).conj();
                        }
                    }
                    let val = (-rt[k * n + j][pt] + tt) * scale;
                    comps[k * n + j][pt] = val;
                    if j != k {
                        comps[j * n + k][pt] = val.conj();
                    }
                }
            }
        } else {
            let scale = 1.0 / ((n - 1) as f64 * omega_norm);
            let tsq = tor.t_norm_sq[pt];
            let tausq = tor.tau_norm_sq[pt];
            let iso = (tsq - 2.0 * tausq) / (2.0 * (n - 2) as f64);
            for k in 0..n {
                for j in 0..n {
                    let mut acc = -rt[k * n + j][pt]
                        + iso * gf.comps[k * n + j][pt]
                        + tor.tau[j][pt] * tor.tau[k][pt].conj();
                    for s in 0..n {
                        for r in 0..n {
                            let gsr = geo.upper(pt, s, r);
                            acc += gsr
                                * (tcomp(k, j, s, pt) * tor.tau[r][pt].conj()
                                    + tor.tau[s][pt] * tcomp(j, k, r, pt).conj());
                            for q in 0..n {
                                for p in 0..n {
                                    // Tbar_{j pbar rbar} = conj(T_{jbar p r})
                                    acc -= 0.5
                                        * geo.upper(pt, q, p)
                                        * gsr
                                        * tcomp(k, q, s, pt)
                                        * tcomp(j, p, r, pt).conj();
                                }
                            }
                        }
                    }
                    comps[k * n + j][pt] = acc * scale;
                }
            }
        }
    }
    Ok(MetricRhs { comps, balance_warning })
}

/// Right-hand side of the form-level flow equation.
pub enum FormRhs {
    /// i ddbar omega^{n-2} as an (n-1, n-1)-form field (n <= 4).
    Full(FormField),
    /// For n = 5, 6 the full form is not materialized (memory scales
    /// combinatorially); the trace diagnostics below determine the trace of
    /// the flow via the expansion
    /// i ddbar omega^{n-2} = (n-2) i ddbar omega ^ omega^{n-3}
    ///                       + i (n-2)(n-3) T ^ Tbar ^ omega^{n-4}.
    Contracted {
        /// g^{j kbar} g^{m lbar} (i ddbar omega)_{kbar j lbar m}
        trace_iddbar_omega: Vec<C64>,
        /// triple trace of T ^ Tbar = 3 (|T|^2 - 2|tau|^2)
        tt_trace: Vec<f64>,
    },
}

/// i ddbar omega^{n-2}, the right-hand side of
/// d/dt(||Omega||_omega omega^{n-1}) = i ddbar omega^{n-2}.
pub fn anomaly_rhs_form(sp: &Spectral, gf: &MetricField) -> Result<FormRhs> {
    let n = gf.grid.n;
    if !(3..=6).contains(&n) {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    if n <= 4 {
        let total = gf.grid.total;
        let pow = FormField::from_pointwise(n, total, n - 2, n - 2, |pt| {
            let g = gf.metric_at(pt).expect("positive metric");
            omega_pow(&g, n - 2).expect("degree in range")
        });
        let full = pow.d_antiholo(sp)?.d_holo(sp)?.scaled(I);
        Ok(FormRhs::Full(full))
    } else {
        let (trace_iddbar_omega, tt_trace) = contracted_form_diagnostics(sp, gf)?;
        Ok(FormRhs::Contracted { trace_iddbar_omega, tt_trace })
    }
}

/// Trace diagnostics of the form-level flow, computed without materializing
/// any 4-index field: the double trace of i ddbar omega accumulated one
/// spectral second derivative at a time, and the triple trace of T ^ Tbar.
pub fn contracted_form_diagnostics(
    sp: &Spectral,
    gf: &MetricField,
) -> Result<(Vec<C64>, Vec<f64>)> {
    let n = gf.grid.n;
    let total = gf.grid.total;
    let geo = Geometry::new(sp, gf)?;
    let tor = geo.torsion();
    // (i ddbar omega)_{kbar j lbar m} = d_lbar d_j g_{kbar m}
    //   - d_lbar d_m g_{kbar j} - d_kbar d_j g_{lbar m} + d_kbar d_m g_{lbar j};
    // contract with g^{j kbar} g^{m lbar}. By relabeling, the four terms give
    // 2 Re-type pairs; we accumulate them all directly.
    let mut tr = vec![ZERO; total];
    for a in 0..n {
        for b in 0..n {
            let hat = sp.forward(&gf.comps[a * n + b]);
            for c in 0..n {
                for d in 0..n {
                    // d_cbar d_d g_{abar b}
                    let d2 = sp.apply_symbol(&hat, |fr| {
                        let sd = C64::new(fr[2 * d + 1], fr[2 * d]) * 0.5;
                        let sc = C64::new(-fr[2 * c + 1], fr[2 * c]) * 0.5;
                        sd * sc
                    });
                    let d2 = sp.backward(&d2);
                    for pt in 0..total {
                        // term 1: k = a, m = b, l = c, j = d
                        let w1 = geo.upper(pt, d, a) * geo.upper(pt, b, c);
                        // term 2: k = a, j = b, l = c, m = d (with a minus)
                        let w2 = geo.upper(pt, b, a) * geo.upper(pt, d, c);
                        tr[pt] += (w1 - w2) * d2[pt];
                    }
                }
            }
        }
    }
    // terms 3 and 4 of (i ddbar omega) are the (kbar <-> lbar, j <-> m)
    // relabelings of terms 2 and 1: over the full (a,b,c,d) sweep they
    // contribute the same sums again.
    for v in &mut tr {
        *v *= 2.0;
    }
    let tt: Vec<f64> = tor
        .t_norm_sq
        .iter()
        .zip(&tor.tau_norm_sq)
        .map(|(t, tau)| 3.0 * (t - 2.0 * tau))
        .collect();
    Ok((tr, tt))
}

/// Dilaton functional M = integral of ||Omega||_omega omega^n
///                      = n! 2^n integral of (det g)^{1/2} dV.
pub fn dilaton_functional(gf: &MetricField) -> Result<f64> {
    let n = gf.grid.n;
    let mut acc = 0.0;
    let mut buf = vec![ZERO; n * n];
    for pt in 0..gf.grid.total {
        gf.write_matrix_at(pt, &mut buf);
        let d = crate::linalg::hermitian_pd_det_in_place(&mut buf, n).ok_or_else(|| {
            Error::NotPositive {
                min_eig: crate::linalg::hermitian_eigenvalues(&gf.matrix_at(pt), n)[0],
            }
        })?;
        acc += d.sqrt();
    }
    Ok(volume_factor(n) * acc / gf.grid.total as f64 * gf.grid.volume())
}

/// The two closed-form expressions for dM/dt along the flow.
pub struct DilatonRates {
    /// (1/(2(n-1)(n-2))) integral of (|T|^2 - 2|tau|^2) omega^n
    pub general: f64,
    /// -(1/(2(n-1))) integral of |T|^2 omega^n; equals `general` exactly on
    /// conformally Kahler states, where 2|tau|^2 = (n-1)|T|^2.
    pub conformally_kahler: f64,
}

pub fn dilaton_rate(sp: &Spectral, gf: &MetricField) -> Result<DilatonRates> {
    let n = gf.grid.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    let geo = Geometry::new(sp, gf)?;
    let tor = geo.torsion();
    let nf = n as f64;
    let vf = volume_factor(n) * gf.grid.volume() / gf.grid.total as f64;
    let mut gen = 0.0;
    let mut ck = 0.0;
    for pt in 0..gf.grid.total {
        let det = geo.det[pt];
        gen += (tor.t_norm_sq[pt] - 2.0 * tor.tau_norm_sq[pt]) * det;
        ck += tor.t_norm_sq[pt] * det;
    }
    Ok(DilatonRates {
        general: vf * gen / (2.0 * (nf - 1.0) * (nf - 2.0)),
        conformally_kahler: -vf * ck / (2.0 * (nf - 1.0)),
    })
}

/// One monitored time point of the dilaton functional.
#[derive(Clone, Copy, Debug)]
pub struct DilatonRecord {
    pub t: f64,
    pub m: f64,
    pub rate_general: f64,
    pub rate_conformally_kahler: f64,
    /// Centered finite difference of M from neighboring records, when both
    /// neighbors are available.
    pub rate_finite_diff: Option<f64>,
}

/// Right-hand side of the balanced-class flow d/dt omega^{n-1} = i ddbar
/// omega^{n-2} in metric components (n >= 4):
///
///   d/dt g = -(1/(n-1)) div T + (1/(2(n-1))) { -g g T Tbar + |T|^2 g/(n-1) }.
pub fn af1_rhs(sp: &Spectral, gf: &MetricField) -> Result<MetricRhs> {
    let n = gf.grid.n;
    if n < 4 {
        return Err(Error::UnsupportedDimension { n, required: 4 });
    }
    let total = gf.grid.total;
    let geo = Geometry::new(sp, gf)?;
    // balanced residual d(omega^{n-1}): same construction as the
    // conformally balanced one without the ||Omega|| weight
    let pow = FormField::from_pointwise(n, total, n - 1, n - 1, |pt| {
        let g = gf.metric_at(pt).expect("positive metric");
        omega_pow(&g, n - 1).expect("degree in range")
    });
    let residual = pow.d_holo(sp)?.sup_norm();
    let balance_warning = (residual > BALANCE_WARN_THRESHOLD).then_some(residual);
    let tor = geo.torsion();
    let div = geo.div_torsion(&tor);
    let tcomp = |k: usize, j: usize, l: usize, pt: usize| tor.comps[(k * n + j) * n + l][pt];
    let c1 = -1.0 / (n - 1) as f64;
    let c2 = 1.0 / (2.0 * (n - 1) as f64);
    let mut comps = vec![vec![ZERO; total]; n * n];
    for pt in 0..total {
        for k in 0..n {
            for j in 0..n {
                let mut tt = ZERO;
                for q in 0..n {
                    for p in 0..n {
                        let gqp = geo.upper(pt, q, p);
                        for s in 0..n {
                            for r in 0..n {
                                tt += gqp
                                    * geo.upper(pt, s, r)
                                    * tcomp(k, q, s, pt)
                                    * tcomp(j, p, r, pt).conj();
                            }
                        }
                    }
                }
                comps[k * n + j][pt] = c1 * div[k * n + j][pt]
                    + c2 * (-tt
                        + tor.t_norm_sq[pt] / (n - 1) as f64 * gf.comps[k * n + j][pt]);
            }
        }
    }
    Ok(MetricRhs { comps, balance_warning })
}

/// Composite stationarity residual: sup|metric RHS| + sup|T|^2 + sup
/// deviation of log||Omega||^2_omega from its grid mean. Zero exactly at
/// Kahler Ricci-flat metrics.
pub fn stationary_residual(sp: &Spectral, gf: &MetricField) -> Result<f64> {
    let rhs = anomaly_rhs_metric(sp, gf)?;
    let geo = Geometry::new(sp, gf)?;
    let tor = geo.torsion();
    let sup_t = tor.t_norm_sq.iter().copied().fold(0.0f64, f64::max);
    // log||Omega||^2 = -log det g
    let logs: Vec<f64> = geo.det.iter().map(|d| -d.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let dev = logs.iter().map(|v| (v - mean).abs()).fold(0.0f64, f64::max);
    Ok(rhs.sup_norm() + sup_t + dev)
}

/// Flow-monitoring scalars of one metric snapshot, all computed from a
/// single geometry pass (building the geometry dominates the cost, so the
/// combined readout is much cheaper than the individual functions).
pub struct MonitorReadout {
    pub m_dilaton: f64,
    pub rates: DilatonRates,
    /// L2 norm of the torsion in the metric's own volume measure
    /// (omega^n / n! weighting).
    pub torsion_l2: f64,
    pub tau_l2: f64,
    pub stationary_residual: f64,
    pub balance_warning: Option<f64>,
}

pub fn monitor_readout(sp: &Spectral, gf: &MetricField) -> Result<MonitorReadout> {
    let n = gf.grid.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    let geo = Geometry::new(sp, gf)?;
    let tor = geo.torsion();
    let nf = n as f64;
    let total = gf.grid.total;
    let vf = volume_factor(n) * gf.grid.volume() / total as f64;
    let w0 = (1u64 << n) as f64 * gf.grid.volume() / total as f64;
    let mut m = 0.0;
    let mut gen = 0.0;
    let mut ck = 0.0;
    let mut t2 = 0.0;
    let mut tau2 = 0.0;
    for pt in 0..total {
        let det = geo.det[pt];
        m += det.sqrt();
        gen += (tor.t_norm_sq[pt] - 2.0 * tor.tau_norm_sq[pt]) * det;
        ck += tor.t_norm_sq[pt] * det;
        t2 += tor.t_norm_sq[pt] * det * w0;
        tau2 += tor.tau_norm_sq[pt] * det * w0;
    }
    // the cheap scalar form of the conformally balanced condition stands in
    // for the full (n-1, n-1)-form residual in this per-step readout
    let lee = geo.lee_form_residual(&tor);
    let rhs = rhs_metric_core(&geo, &tor, (lee > BALANCE_WARN_THRESHOLD).then_some(lee))?;
    let sup_t = tor.t_norm_sq.iter().copied().fold(0.0f64, f64::max);
    let logs: Vec<f64> = geo.det.iter().map(|d| -d.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let dev = logs.iter().map(|v| (v - mean).abs()).fold(0.0f64, f64::max);
    Ok(MonitorReadout {
        m_dilaton: volume_factor(n) * m / total as f64 * gf.grid.volume(),
        rates: DilatonRates {
            general: vf * gen / (2.0 * (nf - 1.0) * (nf - 2.0)),
            conformally_kahler: -vf * ck / (2.0 * (nf - 1.0)),
        },
        torsion_l2: t2.max(0.0).sqrt(),
        tau_l2: tau2.max(0.0).sqrt(),
        stationary_residual: rhs.sup_norm() + sup_t + dev,
        balance_warning: rhs.balance_warning,
    })
}

/// Residual of the stationary-point trace identity
/// (n-2) Delta log||Omega||^2 = |T|^2 + 2(n-3)|tau|^2 (sup norm). Meaningful
/// at (near-)stationary states of the flow.
pub fn stationary_trace_identity_residual(sp: &Spectral, gf: &MetricField) -> Result<f64> {
    let n = gf.grid.n;
    let geo = Geometry::new(sp, gf)?;
    let tor = geo.torsion();
    let logs: Vec<C64> = geo.det.iter().map(|d| C64::new(-d.ln(), 0.0)).collect();
    let h = sp.i_ddbar(&logs);
    let mut worst: f64 = 0.0;
    for pt in 0..gf.grid.total {
        let mut lap = ZERO;
        for j in 0..n {
            for k in 0..n {
                lap += geo.upper(pt, j, k) * h[k * n + j][pt];
            }
        }
        let lhs = (n - 2) as f64 * lap;
        let rhs = tor.t_norm_sq[pt] + 2.0 * (n - 3) as f64 * tor.tau_norm_sq[pt];
        worst = worst.max((lhs - C64::new(rhs, 0.0)).norm());
    }
    Ok(worst)
}

/// Pairings of ||Omega||_omega omega^{n-1} against the constant-coefficient
/// closed (1,1)-forms gamma_{ab} = i dz^b ^ dzbar^a, indexed a*n + b. These
/// are constant along the flow (the balanced class is preserved).
pub fn balanced_pairing(gf: &MetricField) -> Result<Vec<C64>> {
    let n = gf.grid.n;
    let total = gf.grid.total;
    let mut out = vec![ZERO; n * n];
    for pt in 0..total {
        let g = gf.metric_at(pt)?;
        let psi = omega_pow(&g, n - 1)?.scaled(C64::new(g.omega_norm(), 0.0));
        for a in 0..n {
            for b in 0..n {
                let mut gamma = PQForm::zero(n, 1, 1);
                gamma.set(&[a], &[b], I);
                out[a * n + b] += top_component(&psi, &gamma)?;
            }
        }
    }
    let scale = gf.grid.volume() / total as f64;
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::hodge_star_n1n1;
    use crate::torus::TorusGrid;
    use std::f64::consts::PI;

    /// Band-limited diagonal Kahler metric: chi_{kbar k} = f_k(x^k) with
    /// f_k = 1 + a_k cos(2 pi x^k). Exactly representable on m >= 4 grids;
    /// its n=3 ansatz lift has harmonics up to frequency 2 per axis (m >= 8).
    fn diag_kahler(grid: TorusGrid, amps: &[f64]) -> MetricField {
        let n = grid.n;
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for pt in 0..grid.total {
            let c = grid.coords(pt);
            for k in 0..n {
                comps[k * n + k][pt] =
                    C64::new(1.0 + amps[k] * (2.0 * PI * c[2 * k]).cos(), 0.0);
            }
        }
        MetricField::from_components(grid, comps).unwrap()
    }

    #[test]
    fn ansatz_residual_matches_dense_wedge_expansion() {
        // the adjugate shortcut must agree with the literal sup norm of
        // ||Omega||_omega omega^{n-1} - chi^{n-1}, including on unrelated
        // metric pairs where the residual is O(1)
        use crate::bruteforce::random_metric;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        for n in [3usize, 4] {
            let grid = TorusGrid::new(n, 4).unwrap();
            // random pairs on the first few points, identity elsewhere
            // (where the residual vanishes identically), so the dense
            // expansion only needs those points
            let probed = 64.min(grid.total);
            let mut oc = vec![vec![ZERO; grid.total]; n * n];
            let mut cc = vec![vec![ZERO; grid.total]; n * n];
            for d in 0..n {
                for v in &mut oc[d * n + d] {
                    *v = C64::new(1.0, 0.0);
                }
                for v in &mut cc[d * n + d] {
                    *v = C64::new(1.0, 0.0);
                }
            }
            for pt in 0..probed {
                let go = random_metric(n, &mut rng);
                let gc = random_metric(n, &mut rng);
                for e in 0..n * n {
                    oc[e][pt] = go.entries()[e];
                    cc[e][pt] = gc.entries()[e];
                }
            }
            let omega = MetricField::from_components(grid, oc).unwrap();
            let chi = MetricField::from_components(grid, cc).unwrap();
            let fast = ansatz_residual(&omega, &chi).unwrap();
            let mut dense: f64 = 0.0;
            for pt in 0..probed {
                let gm = omega.metric_at(pt).unwrap();
                let cm = chi.metric_at(pt).unwrap();
                let lhs = omega_pow(&gm, n - 1)
                    .unwrap()
                    .scaled(C64::new(gm.omega_norm(), 0.0));
                let rhs = omega_pow(&cm, n - 1).unwrap();
                dense = dense.max(lhs.sub(&rhs).max_norm());
            }
            assert!(
                (fast - dense).abs() < 1e-11 * dense.max(1.0),
                "n={n}: fast {fast} vs dense {dense}"
            );
        }
    }

    #[test]
    fn lift_of_constant_metric_scales_by_determinant_power() {
        let grid = TorusGrid::new(3, 4).unwrap();
        let mut chi = MetricField::identity(grid);
        for d in 0..3 {
            for v in &mut chi.comps[d * 3 + d] {
                *v *= 2.0;
            }
        }
        let omega = ansatz_lift(&chi).unwrap();
        // det = 8, power 1/(n-2) = 1: omega = 8 * chi = 16 I
        for d in 0..3 {
            assert!((omega.comps[d * 3 + d][0] - C64::new(16.0, 0.0)).norm() < 1e-12);
        }
        assert!(ansatz_residual(&omega, &chi).unwrap() < 1e-10);
        assert!(conformal_deviation(&omega, &chi).unwrap() < 1e-12);
    }

    #[test]
    fn lifted_kahler_metric_is_conformally_balanced() {
        let grid = TorusGrid::new(3, 6).unwrap();
        let sp = Spectral::new(grid);
        let chi = diag_kahler(grid, &[0.2, 0.15, 0.1]);
        let omega = ansatz_lift(&chi).unwrap();
        assert!(ansatz_residual(&omega, &chi).unwrap() < 1e-10);
        let geo = Geometry::new(&sp, &omega).unwrap();
        assert!(geo.conf_balanced_residual().unwrap() < 1e-9);
        // conformally Kahler pointwise identity 2|tau|^2 = (n-1)|T|^2
        let tor = geo.torsion();
        for pt in (0..grid.total).step_by(101) {
            let lhs = 2.0 * tor.tau_norm_sq[pt];
            let rhs = (grid.n - 1) as f64 * tor.t_norm_sq[pt];
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn flat_metric_is_stationary() {
        let grid = TorusGrid::new(3, 4).unwrap();
        let sp = Spectral::new(grid);
        let gf = MetricField::identity(grid);
        let rhs = anomaly_rhs_metric(&sp, &gf).unwrap();
        assert!(rhs.sup_norm() < 1e-12);
        assert!(rhs.balance_warning.is_none());
        assert!(stationary_residual(&sp, &gf).unwrap() < 1e-12);
        assert!(stationary_trace_identity_residual(&sp, &gf).unwrap() < 1e-12);
        let rates = dilaton_rate(&sp, &gf).unwrap();
        assert!(rates.general.abs() < 1e-14 && rates.conformally_kahler.abs() < 1e-14);
    }

    #[test]
    fn dilaton_value_and_scaling() {
        let grid = TorusGrid::new(3, 4).unwrap();
        let gf = MetricField::identity(grid);
        let m0 = dilaton_functional(&gf).unwrap();
        assert!((m0 - 48.0).abs() < 1e-12, "n! 2^n = 48 for n=3, got {m0}");
        let mut scaled = gf.clone();
        for c in &mut scaled.comps {
            for v in c.iter_mut() {
                *v *= 2.5;
            }
        }
        let m1 = dilaton_functional(&scaled).unwrap();
        assert!((m1 / m0 - 2.5f64.powf(1.5)).abs() < 1e-12, "scaling exponent n/2");
    }

    /// Hodge-star consistency of the two flow representations: applying the
    /// star to d/dt(||Omega|| omega^{n-1}) with the closed-form stars gives
    ///   star(i ddbar omega^{n-2}) = (n-1)! ||Omega|| { -omega_dot
    ///                                 + 1/2 (Tr omega_dot) omega }
    /// as (1,1)-forms, where omega_dot carries the metric-level RHS.
    fn star_consistency(grid: TorusGrid, amps: &[f64], stride: usize, tol: f64) {
        let sp = Spectral::new(grid);
        let chi = diag_kahler(grid, amps);
        let omega = ansatz_lift(&chi).unwrap();
        let rhs = anomaly_rhs_metric(&sp, &omega).unwrap();
        let FormRhs::Full(form) = anomaly_rhs_form(&sp, &omega).unwrap() else {
            panic!("full form expected for n <= 4");
        };
        let n = grid.n;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for pt in (0..grid.total).step_by(stride) {
            let g = omega.metric_at(pt).unwrap();
            let star = hodge_star_n1n1(&form.dense_at(pt), &g).unwrap();
            // Tr omega_dot = g^{j kbar} d/dt g_{kbar j}
            let mut trd = ZERO;
            for j in 0..n {
                for k in 0..n {
                    trd += g.upper(j, k) * rhs.comps[k * n + j][pt];
                }
            }
            let pre = factorial(n - 1) * g.omega_norm();
            for k in 0..n {
                for j in 0..n {
                    // (1,1)-form coefficients carry the factor i g_{kbar j}
                    let expect =
                        pre * I * (-rhs.comps[k * n + j][pt] + 0.5 * trd * g.lower(k, j));
                    let got = star.get(&[k], &[j]);
                    worst = worst.max((got - expect).norm());
                    scale = scale.max(expect.norm());
                }
            }
        }
        assert!(
            worst <= tol * scale.max(1e-6),
            "star mismatch {worst:.3e} vs scale {scale:.3e}"
        );
    }

    #[test]
    fn star_of_form_rhs_matches_metric_rhs_n3() {
        // exactly band-limited lift: the comparison is roundoff-limited
        let grid = TorusGrid::new(3, 6).unwrap();
        let mut bw = None;
        {
            let sp = Spectral::new(grid);
            let chi = diag_kahler(grid, &[0.15, 0.1, 0.05]);
            let omega = ansatz_lift(&chi).unwrap();
            bw = anomaly_rhs_metric(&sp, &omega).unwrap().balance_warning.or(bw);
        }
        assert!(bw.is_none(), "lifted metric should be balanced: {bw:?}");
        star_consistency(grid, &[0.15, 0.1, 0.05], 937, 1e-8);
    }

    #[test]
    fn star_of_form_rhs_matches_metric_rhs_n4() {
        // n=4 lift involves (det chi)^{1/2}, which is not band-limited: the
        // m=4 grid aliases at the square of the amplitude, so the amplitude
        // is kept small and the tolerance reflects the aliasing floor. This
        // pins the dimension-dependent prefactor (n-1)!.
        star_consistency(TorusGrid::new(4, 4).unwrap(), &[2e-3, 1.5e-3, 1e-3, 5e-4], 397, 1e-2);
    }

    #[test]
    fn dilaton_rates_agree_on_conformally_kahler_states() {
        let grid = TorusGrid::new(3, 6).unwrap();
        let sp = Spectral::new(grid);
        let chi = diag_kahler(grid, &[0.2, 0.1, 0.05]);
        let omega = ansatz_lift(&chi).unwrap();
        let rates = dilaton_rate(&sp, &omega).unwrap();
        let rel = (rates.general - rates.conformally_kahler).abs()
            / rates.conformally_kahler.abs();
        assert!(rel < 1e-9, "general vs conformally Kahler rate gap {rel:.3e}");
        assert!(rates.conformally_kahler < 0.0, "rate must be negative for non-Kahler");
    }

    #[test]
    fn af1_vanishes_on_kahler_metrics() {
        let grid = TorusGrid::new(4, 4).unwrap();
        let sp = Spectral::new(grid);
        let chi = diag_kahler(grid, &[0.15, 0.1, 0.08, 0.05]);
        let rhs = af1_rhs(&sp, &chi).unwrap();
        assert!(rhs.sup_norm() < 1e-10, "Kahler torsion-free => af1 RHS zero");
        assert!(rhs.balance_warning.is_none());
        assert!(af1_rhs(&Spectral::new(TorusGrid::new(3, 4).unwrap()),
            &MetricField::identity(TorusGrid::new(3, 4).unwrap())).is_err());
    }

    #[test]
    fn contracted_diagnostics_match_full_trace_at_n3() {
        let grid = TorusGrid::new(3, 6).unwrap();
        let sp = Spectral::new(grid);
        let chi = diag_kahler(grid, &[0.15, 0.1, 0.05]);
        let omega = ansatz_lift(&chi).unwrap();
        let geo = Geometry::new(&sp, &omega).unwrap();
        let routes = geo.i_ddbar_omega().unwrap();
        let (tr, tt) = contracted_form_diagnostics(&sp, &omega).unwrap();
        let n = grid.n;
        let sign2 = PQForm::interleave_sign(2);
        let tor = geo.torsion();
        let mut worst: f64 = 0.0;
        for pt in (0..grid.total).step_by(211) {
            let mut expect = ZERO;
            for j in 0..n {
                for k in 0..n {
                    for m in 0..n {
                        for l in 0..n {
                            // interleaved component from the grouped storage
                            expect += geo.upper(pt, j, k)
                                * geo.upper(pt, m, l)
                                * routes.direct.value(pt, &[k, l], &[j, m])
                                * sign2;
                        }
                    }
                }
            }
            worst = worst.max((tr[pt] - expect).norm());
            let tt_expect =
                3.0 * (tor.t_norm_sq[pt] - 2.0 * tor.tau_norm_sq[pt]);
            assert!((tt[pt] - tt_expect).abs() < 1e-12);
        }
        assert!(worst < 1e-8, "double trace mismatch {worst:.3e}");
    }

    #[test]
    fn balanced_pairing_is_invariant_under_potential_shifts() {
        let grid = TorusGrid::new(3, 6).unwrap();
        let sp = Spectral::new(grid);
        let hat = MetricField::identity(grid);
        let psi = grid.sample(|c| C64::new(0.01 * (2.0 * PI * (c[0] + c[1])).sin(), 0.0));
        let h = sp.i_ddbar(&psi);
        let mut comps = hat.comps.clone();
        for (c, d) in comps.iter_mut().zip(&h) {
            for (v, w) in c.iter_mut().zip(d) {
                *v += *w;
            }
        }
        let chi = MetricField::from_components(grid, comps).unwrap();
        let p0 = balanced_pairing(&ansatz_lift(&hat).unwrap()).unwrap();
        let p1 = balanced_pairing(&ansatz_lift(&chi).unwrap()).unwrap();
        let scale = p0.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).norm() <= 1e-8 * scale, "pairing moved: {a} vs {b}");
        }
    }
}
