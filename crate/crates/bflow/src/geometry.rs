//! Torsion, Chern curvature, the four Ricci contractions, i ddbar omega,
//! and conformally-balanced diagnostics of a metric field on the torus.
//!
//! Conventions (all in the component normalization of [`crate::forms`]):
//!
//!   T_{kbar j l}      = d_j g_{kbar l} - d_l g_{kbar j}
//!   R_{kbar j mbar l} = -d_kbar d_j g_{mbar l}
//!                       + g^{p sbar} d_kbar g_{mbar p} d_j g_{sbar l}
//!   R_{kbar j}  = g^{l mbar} R_{kbar j mbar l}     Rt_{kbar j} = g^{l mbar} R_{mbar l kbar j}
//!   R'_{kbar j} = g^{p mbar} R_{kbar p mbar j}     R''_{kbar j} = g^{p mbar} R_{mbar j kbar p}

use crate::error::{Error, Result};
use crate::forms::{combinations, sort_with_sign, HermitianMetric, PQForm};
use crate::linalg::{self, C64, I, ZERO};
use crate::torus::{MetricField, Spectral};

/// Antisymmetric (p,q)-form field stored by its independent components:
/// one scalar field per pair of strictly increasing index tuples.
#[derive(Clone)]
pub struct FormField {
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub total: usize,
    pub kcombos: Vec<Vec<usize>>,
    pub jcombos: Vec<Vec<usize>>,
    /// comps[ki * jcombos.len() + ji]
    pub comps: Vec<Vec<C64>>,
}

impl FormField {
    pub fn zero(n: usize, total: usize, p: usize, q: usize) -> Self {
        let kcombos = combinations(n, q);
        let jcombos = combinations(n, p);
        let comps = vec![vec![ZERO; total]; kcombos.len() * jcombos.len()];
        Self { p, q, n, total, kcombos, jcombos, comps }
    }

    /// Extract the independent components of a dense pointwise form.
    pub fn from_pointwise(
        n: usize,
        total: usize,
        p: usize,
        q: usize,
        f: impl Fn(usize) -> PQForm,
    ) -> Self {
        let mut out = Self::zero(n, total, p, q);
        for pt in 0..total {
            let dense = f(pt);
            debug_assert_eq!((dense.p, dense.q), (p, q));
            let mut ci = 0;
            for kc in &out.kcombos {
                for jc in &out.jcombos {
                    out.comps[ci][pt] = dense.get(kc, jc);
                    ci += 1;
                }
            }
        }
        out
    }

    fn rank(combos: &[Vec<usize>], tuple: &[usize]) -> usize {
        combos
            .binary_search_by(|c| c.as_slice().cmp(tuple))
            .expect("increasing tuple in range")
    }

    /// Component index for increasing tuples.
    pub fn comp_index(&self, barred: &[usize], unbarred: &[usize]) -> usize {
        Self::rank(&self.kcombos, barred) * self.jcombos.len()
            + Self::rank(&self.jcombos, unbarred)
    }

    /// Value at arbitrary index tuples (resolved by antisymmetry).
    pub fn value(&self, pt: usize, barred: &[usize], unbarred: &[usize]) -> C64 {
        let Some((kb, sk)) = sort_with_sign(barred) else {
            return ZERO;
        };
        let Some((ju, sj)) = sort_with_sign(unbarred) else {
            return ZERO;
        };
        self.comps[self.comp_index(&kb, &ju)][pt] * (sk * sj)
    }

    /// Dense component tensor at one point.
    pub fn dense_at(&self, pt: usize) -> PQForm {
        let n = self.n;
        let mut out = PQForm::zero(n, self.p, self.q);
        let mut barred = vec![0usize; self.q];
        let mut unbarred = vec![0usize; self.p];
        for idx in 0..out.coeffs.len() {
            let mut rest = idx;
            for j in (0..self.p).rev() {
                unbarred[j] = rest % n;
                rest /= n;
            }
            for k in (0..self.q).rev() {
                barred[k] = rest % n;
                rest /= n;
            }
            out.coeffs[idx] = self.value(pt, &barred, &unbarred);
        }
        out
    }

    pub fn sup_norm(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        for c in &mut out.comps {
            for v in c.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.p, self.q, self.n), (other.p, other.q, other.n));
        let mut out = self.clone();
        for (c, o) in out.comps.iter_mut().zip(&other.comps) {
            for (v, w) in c.iter_mut().zip(o) {
                *v -= *w;
            }
        }
        out
    }

    /// Holomorphic exterior derivative: (p+1, q)-form with
    /// (dTheta)_{K;J'} = sum_i (-1)^{p-i} d_{j'_i} Theta_{K; J' minus i}.
    pub fn d_holo(&self, sp: &Spectral) -> Result<FormField> {
        if self.p + 1 > self.n {
            return Err(Error::DegreeOutOfRange { p: self.p + 1, q: self.q, n: self.n });
        }
        let mut out = FormField::zero(self.n, self.total, self.p + 1, self.q);
        // d_a of every input component, computed once
        let mut deriv: Vec<Vec<Vec<C64>>> = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let hat = sp.forward(c);
            deriv.push((0..self.n).map(|a| sp.dz_hat(&hat, a)).collect());
        }
        let jlen_in = self.jcombos.len();
        for (ki, kc) in out.kcombos.iter().enumerate() {
            let krank_in = Self::rank(&self.kcombos, kc);
            for (ji, jc) in out.jcombos.iter().enumerate() {
                let dst = &mut out.comps[ki * out.jcombos.len() + ji];
                for (i, &a) in jc.iter().enumerate() {
                    let rest: Vec<usize> =
                        jc.iter().enumerate().filter(|&(t, _)| t != i).map(|(_, &v)| v).collect();
                    let src = krank_in * jlen_in + Self::rank(&self.jcombos, &rest);
                    let sign = if (self.p + 1 - (i + 1)) % 2 == 0 { 1.0 } else { -1.0 };
                    for (v, w) in dst.iter_mut().zip(&deriv[src][a]) {
                        *v += *w * sign;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Antiholomorphic exterior derivative: (p, q+1)-form with
    /// (dbar Theta)_{K';J} = (-1)^p sum_i (-1)^{q-i} d_{kbar'_i} Theta_{K' minus i; J}.
    pub fn d_antiholo(&self, sp: &Spectral) -> Result<FormField> {
        if self.q + 1 > self.n {
            return Err(Error::DegreeOutOfRange { p: self.p, q: self.q + 1, n: self.n });
        }
        let mut out = FormField::zero(self.n, self.total, self.p, self.q + 1);
        let mut deriv: Vec<Vec<Vec<C64>>> = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let hat = sp.forward(c);
            deriv.push((0..self.n).map(|a| sp.dzbar_hat(&hat, a)).collect());
        }
        let outer = if self.p % 2 == 0 { 1.0 } else { -1.0 };
        let jlen_in = self.jcombos.len();
        for (ki, kc) in out.kcombos.iter().enumerate() {
            for (ji, jc) in out.jcombos.iter().enumerate() {
                let jrank_in = Self::rank(&self.jcombos, jc);
                let dst = &mut out.comps[ki * out.jcombos.len() + ji];
                for (i, &a) in kc.iter().enumerate() {
                    let rest: Vec<usize> =
                        kc.iter().enumerate().filter(|&(t, _)| t != i).map(|(_, &v)| v).collect();
                    let src = Self::rank(&self.kcombos, &rest) * jlen_in + jrank_in;
                    let sign =
                        outer * if (self.q + 1 - (i + 1)) % 2 == 0 { 1.0 } else { -1.0 };
                    for (v, w) in dst.iter_mut().zip(&deriv[src][a]) {
                        *v += *w * sign;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Torsion of a metric field with its derived scalars.
pub struct TorsionField {
    pub n: usize,
    pub total: usize,
    /// comps[(k*n + j)*n + l][pt] = T_{kbar j l}
    pub comps: Vec<Vec<C64>>,
    /// tau[l][pt] = T_l = g^{j kbar} T_{kbar j l}
    pub tau: Vec<Vec<C64>>,
    pub t_norm_sq: Vec<f64>,
    pub tau_norm_sq: Vec<f64>,
}

impl TorsionField {
    pub fn sup_norm(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

/// Full lowered Chern curvature with the four Ricci contractions.
pub struct CurvatureField {
    pub n: usize,
    pub total: usize,
    /// lowered[(((k*n + j)*n + m)*n + l)][pt] = R_{kbar j mbar l}
    pub lowered: Vec<Vec<C64>>,
    /// riccis, each n^2 fields indexed k*n + j for the (kbar, j) slot
    pub ricci: Vec<Vec<C64>>,
    pub ricci_tilde: Vec<Vec<C64>>,
    pub ricci_prime: Vec<Vec<C64>>,
    pub ricci_dprime: Vec<Vec<C64>>,
}

impl CurvatureField {
    #[inline]
    pub fn at(&self, pt: usize, k: usize, j: usize, m: usize, l: usize) -> C64 {
        self.lowered[((k * self.n + j) * self.n + m) * self.n + l][pt]
    }
}

/// Both representations of i ddbar omega with their disagreement.
pub struct IddbarOmega {
    pub direct: FormField,
    pub via_curvature: FormField,
    pub max_diff: f64,
}

/// Derivative data of a metric field: pointwise inverse and determinant plus
/// all first holomorphic derivatives, shared by the torsion/curvature ops.
pub struct Geometry<'a> {
    pub sp: &'a Spectral,
    pub gf: &'a MetricField,
    /// inv[j*n + k][pt] = g^{j kbar}
    pub inv: Vec<Vec<C64>>,
    pub det: Vec<f64>,
    /// dg[(a*n + k)*n + j][pt] = d_a g_{kbar j}
    dg: Vec<Vec<C64>>,
}

impl<'a> Geometry<'a> {
    pub fn new(sp: &'a Spectral, gf: &'a MetricField) -> Result<Self> {
        let grid = gf.grid;
        assert_eq!(sp.grid, grid);
        let n = grid.n;
        let mut inv = vec![vec![ZERO; grid.total]; n * n];
        let mut det = vec![0.0; grid.total];
        let mut mat = vec![ZERO; n * n];
        let mut adj = vec![ZERO; n * n];
        let mut minor = vec![ZERO; (n - 1) * (n - 1)];
        for pt in 0..grid.total {
            gf.write_matrix_at(pt, &mut mat);
            let d = linalg::det(&mat, n);
            if !(d.re > 0.0) {
                return Err(Error::NotPositive { min_eig: d.re });
            }
            det[pt] = d.re;
            linalg::adjugate_into(&mat, n, &mut adj, &mut minor);
            let s = 1.0 / d.re;
            for e in 0..n * n {
                inv[e][pt] = adj[e] * s;
            }
        }
        let mut dg = vec![Vec::new(); n * n * n];
        for k in 0..n {
            for j in 0..n {
                let hat = sp.forward(&gf.comps[k * n + j]);
                for a in 0..n {
                    dg[(a * n + k) * n + j] = sp.dz_hat(&hat, a);
                }
            }
        }
        Ok(Self { sp, gf, inv, det, dg })
    }

    #[inline]
    fn n(&self) -> usize {
        self.gf.grid.n
    }

    /// d_a g_{kbar j} at a point.
    #[inline]
    pub fn dg_h(&self, pt: usize, a: usize, k: usize, j: usize) -> C64 {
        self.dg[(a * self.n() + k) * self.n() + j][pt]
    }

    /// d_abar g_{kbar j} at a point, from Hermitian symmetry.
    #[inline]
    pub fn dg_a(&self, pt: usize, a: usize, k: usize, j: usize) -> C64 {
        self.dg[(a * self.n() + j) * self.n() + k][pt].conj()
    }

    #[inline]
    pub fn upper(&self, pt: usize, j: usize, k: usize) -> C64 {
        self.inv[j * self.n() + k][pt]
    }

    pub fn torsion(&self) -> TorsionField {
        let n = self.n();
        let total = self.gf.grid.total;
        let mut comps = vec![vec![ZERO; total]; n * n * n];
        for k in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let dst = &mut comps[(k * n + j) * n + l];
                    let a = &self.dg[(j * n + k) * n + l];
                    let b = &self.dg[(l * n + k) * n + j];
                    for (v, (x, y)) in dst.iter_mut().zip(a.iter().zip(b)) {
                        *v = x - y;
                    }
                }
            }
        }
        let mut tau = vec![vec![ZERO; total]; n];
        for l in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let src = &comps[(k * n + j) * n + l];
                    let w = &self.inv[j * n + k];
                    for (v, (t, u)) in tau[l].iter_mut().zip(src.iter().zip(w)) {
                        *v += u * t;
                    }
                }
            }
        }
        let mut t_norm_sq = vec![0.0; total];
        let mut tau_norm_sq = vec![0.0; total];
        for pt in 0..total {
            let mut acc = ZERO;
            for k in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let tv = comps[(k * n + j) * n + l][pt];
                        if tv == ZERO {
                            continue;
                        }
                        for m in 0..n {
                            for nn in 0..n {
                                for p in 0..n {
                                    acc += self.upper(pt, m, k)
                                        * self.upper(pt, j, nn)
                                        * self.upper(pt, l, p)
                                        * tv
                                        * comps[(m * n + nn) * n + p][pt].conj();
                                }
                            }
                        }
                    }
                }
            }
            t_norm_sq[pt] = acc.re;
            let mut acc2 = ZERO;
            for j in 0..n {
                for k in 0..n {
                    acc2 += self.upper(pt, j, k) * tau[j][pt] * tau[k][pt].conj();
                }
            }
            tau_norm_sq[pt] = acc2.re;
        }
        TorsionField { n, total, comps, tau, t_norm_sq, tau_norm_sq }
    }

    /// First Chern Ricci R_{kbar j} = -d_kbar d_j log det g, computed
    /// without the full curvature tensor. Fields indexed k*n + j.
    pub fn ricci_logdet(&self) -> Vec<Vec<C64>> {
        let logdet: Vec<C64> = self.det.iter().map(|&d| C64::new(d.ln(), 0.0)).collect();
        let h = self.sp.i_ddbar(&logdet);
        h.into_iter()
            .map(|f| f.into_iter().map(|v| -v).collect())
            .collect()
    }

    /// Rt_{kbar j} = g^{p qbar} R_{qbar p kbar j}
    ///             = -g^{p qbar} d_qbar d_p g_{kbar j}
    ///               + g^{p qbar} g^{r sbar} d_qbar g_{kbar r} d_p g_{sbar j},
    /// computed without materializing the full curvature. Indexed k*n + j.
    pub fn ricci_tilde_field(&self) -> Vec<Vec<C64>> {
        let n = self.n();
        let total = self.gf.grid.total;
        let mut out = vec![vec![ZERO; total]; n * n];
        // The result is a Hermitian matrix field; compute the upper triangle
        // and mirror the rest by conjugation.
        for k in 0..n {
            for j in k..n {
                let hat = self.sp.forward(&self.gf.comps[k * n + j]);
                let dst = &mut out[k * n + j];
                for p in 0..n {
                    for q in 0..n {
                        let d2 = self.sp.apply_symbol(&hat, |fr| {
                            let sp_ = C64::new(fr[2 * p + 1], fr[2 * p]) * 0.5;
                            let sq = C64::new(-fr[2 * q + 1], fr[2 * q]) * 0.5;
                            sp_ * sq
                        });
                        let d2 = self.sp.backward(&d2);
                        let w = &self.inv[p * n + q];
                        for (v, (u, x)) in dst.iter_mut().zip(w.iter().zip(&d2)) {
                            *v -= u * x;
                        }
                    }
                }
                for pt in 0..total {
                    let mut acc = ZERO;
                    for p in 0..n {
                        for q in 0..n {
                            let gpq = self.upper(pt, p, q);
                            for r in 0..n {
                                for s in 0..n {
                                    acc += gpq
                                        * self.upper(pt, r, s)
                                        * self.dg_a(pt, q, k, r)
                                        * self.dg_h(pt, p, s, j);
                                }
                            }
                        }
                    }
                    dst[pt] += acc;
                }
            }
        }
        for k in 0..n {
            for j in 0..k {
                // out[k*n+j] = conj(out[j*n+k]); note j*n+k < k*n+j here.
                let (lo, hi) = out.split_at_mut(k * n + j);
                let src = &lo[j * n + k];
                let dst = &mut hi[0];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.conj();
                }
            }
        }
        out
    }

    /// Full lowered curvature and the four Ricci contractions. Memory is
    /// n^4 fields; guarded against oversized grids.
    pub fn chern_curvature(&self) -> Result<CurvatureField> {
        let n = self.n();
        let total = self.gf.grid.total;
        if n.pow(4) * total > 100_000_000 {
            return Err(Error::ShapeMismatch(
                "grid too large for full curvature storage".into(),
            ));
        }
        let mut lowered = vec![vec![ZERO; total]; n.pow(4)];
        for m in 0..n {
            for l in 0..n {
                let hat = self.sp.forward(&self.gf.comps[m * n + l]);
                for k in 0..n {
                    for j in 0..n {
                        // -d_kbar d_j g_{mbar l}
                        let d2 = self.sp.apply_symbol(&hat, |a| {
                            let sj = C64::new(a[2 * j + 1], a[2 * j]) * 0.5;
                            let sk = C64::new(-a[2 * k + 1], a[2 * k]) * 0.5;
                            sj * sk
                        });
                        let d2 = self.sp.backward(&d2);
                        let dst = &mut lowered[((k * n + j) * n + m) * n + l];
                        for (v, w) in dst.iter_mut().zip(&d2) {
                            *v = -w;
                        }
                        for pt in 0..total {
                            let mut acc = ZERO;
                            for p in 0..n {
                                for s in 0..n {
                                    acc += self.upper(pt, p, s)
                                        * self.dg_a(pt, k, m, p)
                                        * self.dg_h(pt, j, s, l);
                                }
                            }
                            dst[pt] += acc;
                        }
                    }
                }
            }
        }
        let contract = |pick: &dyn Fn(usize, usize, usize, usize) -> usize| -> Vec<Vec<C64>> {
            let mut out = vec![vec![ZERO; total]; n * n];
            for k in 0..n {
                for j in 0..n {
                    let dst = &mut out[k * n + j];
                    for l in 0..n {
                        for m in 0..n {
                            let src = &lowered[pick(k, j, m, l)];
                            let w = &self.inv[l * n + m];
                            for (v, (u, x)) in dst.iter_mut().zip(w.iter().zip(src)) {
                                *v += u * x;
                            }
                        }
                    }
                }
            }
            out
        };
        let idx4 = |a: usize, b: usize, c: usize, d: usize| ((a * n + b) * n + c) * n + d;
        let ricci = contract(&|k, j, m, l| idx4(k, j, m, l));
        let ricci_tilde = contract(&|k, j, m, l| idx4(m, l, k, j));
        let ricci_prime = contract(&|k, j, m, l| idx4(k, l, m, j));
        let ricci_dprime = contract(&|k, j, m, l| idx4(m, j, k, l));
        Ok(CurvatureField { n, total, lowered, ricci, ricci_tilde, ricci_prime, ricci_dprime })
    }

    /// omega as a compressed (1,1)-form field.
    pub fn omega_field(&self) -> FormField {
        let n = self.n();
        let total = self.gf.grid.total;
        let mut out = FormField::zero(n, total, 1, 1);
        for k in 0..n {
            for j in 0..n {
                let src = &self.gf.comps[k * n + j];
                let dst = &mut out.comps[k * n + j];
                for (v, w) in dst.iter_mut().zip(src) {
                    *v = I * w;
                }
            }
        }
        out
    }

    /// i ddbar omega by spectral exterior derivatives and by the
    /// curvature-torsion expansion, with their sup disagreement.
    pub fn i_ddbar_omega(&self) -> Result<IddbarOmega> {
        let n = self.n();
        let total = self.gf.grid.total;
        let direct = self
            .omega_field()
            .d_antiholo(self.sp)?
            .d_holo(self.sp)?
            .scaled(I);
        let curv = self.chern_curvature()?;
        let tor = self.torsion();
        let mut via = FormField::zero(n, total, 2, 2);
        let sign2 = PQForm::interleave_sign(2); // grouped = sign2 * interleaved
        let mut ci = 0;
        for kc in via.kcombos.clone() {
            let (k, l) = (kc[0], kc[1]);
            for jc in via.jcombos.clone() {
                let (j, m) = (jc[0], jc[1]);
                let dst = &mut via.comps[ci];
                for pt in 0..total {
                    let mut tt = ZERO;
                    for s in 0..n {
                        for r in 0..n {
                            tt += self.upper(pt, s, r)
                                * tor.comps[(r * n + m) * n + j][pt]
                                * tor.comps[(s * n + l) * n + k][pt].conj();
                        }
                    }
                    let interleaved = curv.at(pt, k, j, l, m) - curv.at(pt, k, m, l, j)
                        + curv.at(pt, l, m, k, j)
                        - curv.at(pt, l, j, k, m)
                        - tt;
                    dst[pt] = interleaved * sign2;
                }
                ci += 1;
            }
        }
        let max_diff = direct.sub(&via).sup_norm();
        Ok(IddbarOmega { direct, via_curvature: via, max_diff })
    }

    /// Divergence of torsion nabla^m T_{kbar j m} with the Chern connection,
    /// fields indexed k*n + j.
    pub fn div_torsion(&self, tor: &TorsionField) -> Vec<Vec<C64>> {
        let n = self.n();
        let total = self.gf.grid.total;
        let mut out = vec![vec![ZERO; total]; n * n];
        // second-derivative part: g^{m bbar} dbar_b T_{kbar j m}
        for k in 0..n {
            for c in 0..n {
                let hat = self.sp.forward(&self.gf.comps[k * n + c]);
                for b in 0..n {
                    for a in 0..n {
                        // d_bbar d_a g_{kbar c}
                        let d2 = self.sp.apply_symbol(&hat, |fr| {
                            let sa = C64::new(fr[2 * a + 1], fr[2 * a]) * 0.5;
                            let sb = C64::new(-fr[2 * b + 1], fr[2 * b]) * 0.5;
                            sa * sb
                        });
                        let d2 = self.sp.backward(&d2);
                        // + g^{c bbar} (d_bbar d_a g_{kbar c}) into (k, a): m = c
                        {
                            let w = &self.inv[c * n + b];
                            let dst = &mut out[k * n + a];
                            for (v, (u, x)) in dst.iter_mut().zip(w.iter().zip(&d2)) {
                                *v += u * x;
                            }
                        }
                        // - g^{a bbar} (d_bbar d_a g_{kbar c}) into (k, c): m = a, j = c
                        {
                            let w = &self.inv[a * n + b];
                            let dst = &mut out[k * n + c];
                            for (v, (u, x)) in dst.iter_mut().zip(w.iter().zip(&d2)) {
                                *v -= u * x;
                            }
                        }
                    }
                }
            }
        }
        // connection part: - g^{m bbar} conj(Gamma^lam_{b k}) T_{lambar j m}
        for pt in 0..total {
            for k in 0..n {
                // conj(Gamma^lam_{b k}) for all (b, lam)
                let mut cgam = vec![ZERO; n * n];
                for b in 0..n {
                    for lam in 0..n {
                        let mut acc = ZERO;
                        for s in 0..n {
                            acc += self.upper(pt, lam, s) * self.dg_h(pt, b, s, k);
                        }
                        cgam[b * n + lam] = acc.conj();
                    }
                }
                for j in 0..n {
                    let mut acc = ZERO;
                    for m in 0..n {
                        for b in 0..n {
                            let gmb = self.upper(pt, m, b);
                            for lam in 0..n {
                                acc += gmb
                                    * cgam[b * n + lam]
                                    * tor.comps[(lam * n + j) * n + m][pt];
                            }
                        }
                    }
                    out[k * n + j][pt] -= acc;
                }
            }
        }
        out
    }

    /// Sup norm of the components of d(||Omega||_omega omega^{n-1}); zero
    /// exactly when the metric is conformally balanced. Only the holomorphic
    /// half is computed (the antiholomorphic half is its conjugate).
    /// Sup-norm residual of the scalar form of the conformally balanced
    /// condition: tau_l = -(1/2) d_l log det g, i.e. the (1,0) Lee form
    /// equals d log ||Omega||_omega. Vanishes exactly when
    /// [`Self::conf_balanced_residual`] does, at a fraction of the cost.
    pub fn lee_form_residual(&self, tor: &TorsionField) -> f64 {
        let n = self.n();
        let logdet: Vec<C64> = self.det.iter().map(|&d| C64::new(d.ln(), 0.0)).collect();
        let hat = self.sp.forward(&logdet);
        let mut worst: f64 = 0.0;
        for l in 0..n {
            let dl = self.sp.dz_hat(&hat, l);
            for (tau, d) in tor.tau[l].iter().zip(&dl) {
                worst = worst.max((tau + 0.5 * d).norm());
            }
        }
        worst
    }

    pub fn conf_balanced_residual(&self) -> Result<f64> {
        let n = self.n();
        if n < 2 {
            return Err(Error::UnsupportedDimension { n, required: 2 });
        }
        let total = self.gf.grid.total;
        let psi = FormField::from_pointwise(n, total, n - 1, n - 1, |pt| {
            let g = HermitianMetric::new(n, self.gf.matrix_at(pt)).expect("positive metric");
            crate::forms::omega_pow(&g, n - 1)
                .expect("degree in range")
                .scaled(C64::new(self.det[pt].powf(-0.5), 0.0))
        });
        Ok(psi.d_holo(self.sp)?.sup_norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::TorusGrid;
    use std::f64::consts::PI;

    fn conformal_metric(grid: TorusGrid, sp: &Spectral) -> (MetricField, Vec<C64>) {
        // g = e^psi I with band-limited real psi; amplitudes small enough
        // that harmonics of e^psi beyond Nyquist are below 1e-13
        let psi = grid.sample(|c| {
            C64::new(
                0.05 * (2.0 * PI * c[0]).cos() + 0.02 * (2.0 * PI * (c[2] + c[1])).sin(),
                0.0,
            )
        });
        let n = grid.n;
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for pt in 0..grid.total {
            let e = psi[pt].re.exp();
            for d in 0..n {
                comps[d * n + d][pt] = C64::new(e, 0.0);
            }
        }
        let _ = sp;
        (MetricField::from_components(grid, comps).unwrap(), psi)
    }

    #[test]
    fn constant_metric_has_zero_torsion_and_curvature() {
        let grid = TorusGrid::new(2, 4).unwrap();
        let sp = Spectral::new(grid);
        let gf = MetricField::identity(grid);
        let geo = Geometry::new(&sp, &gf).unwrap();
        assert!(geo.torsion().sup_norm() < 1e-14);
        let curv = geo.chern_curvature().unwrap();
        let worst = curv
            .lowered
            .iter()
            .flat_map(|f| f.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-13);
    }

    #[test]
    fn kahler_perturbation_is_torsion_free() {
        let grid = TorusGrid::new(2, 8).unwrap();
        let sp = Spectral::new(grid);
        let psi = grid.sample(|c| C64::new(0.02 * (2.0 * PI * (c[0] + c[3])).sin(), 0.0));
        let h = sp.i_ddbar(&psi);
        let n = grid.n;
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for k in 0..n {
            for j in 0..n {
                comps[k * n + j] = h[k * n + j].clone();
                if k == j {
                    for v in comps[k * n + j].iter_mut() {
                        *v += C64::new(1.0, 0.0);
                    }
                }
            }
        }
        let gf = MetricField::from_components(grid, comps).unwrap();
        let geo = Geometry::new(&sp, &gf).unwrap();
        assert!(geo.torsion().sup_norm() < 1e-10);
        // i ddbar omega vanishes for Kahler fields
        let routes = geo.i_ddbar_omega().unwrap();
        assert!(routes.direct.sup_norm() < 1e-10);
        assert!(routes.max_diff < 1e-9);
    }

    #[test]
    fn conformal_metric_torsion_matches_closed_form() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let sp = Spectral::new(grid);
        let (gf, psi) = conformal_metric(grid, &sp);
        let geo = Geometry::new(&sp, &gf).unwrap();
        let tor = geo.torsion();
        let n = grid.n;
        // analytic d_a psi
        let dpsi: Vec<Vec<C64>> = (0..n).map(|a| sp.dz(&psi, a)).collect();
        let mut worst: f64 = 0.0;
        for pt in 0..grid.total {
            for k in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let expect = dpsi[j][pt] * gf.comps[k * n + l][pt]
                            - dpsi[l][pt] * gf.comps[k * n + j][pt];
                        worst = worst
                            .max((tor.comps[(k * n + j) * n + l][pt] - expect).norm());
                    }
                }
            }
        }
        assert!(worst < 1e-10, "torsion closed form defect {worst}");
        // |T|^2 = 2(n-1)|grad psi|^2, |tau|^2 = (n-1)^2 |grad psi|^2
        for pt in 0..grid.total {
            let mut grad = 0.0;
            for j in 0..n {
                for k in 0..n {
                    grad += (geo.upper(pt, j, k) * dpsi[j][pt] * dpsi[k][pt].conj()).re;
                }
            }
            let nf = n as f64;
            assert!((tor.t_norm_sq[pt] - 2.0 * (nf - 1.0) * grad).abs() < 1e-10);
            assert!((tor.tau_norm_sq[pt] - (nf - 1.0) * (nf - 1.0) * grad).abs() < 1e-10);
        }
    }

    #[test]
    fn ricci_routes_agree() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let sp = Spectral::new(grid);
        let (gf, _) = conformal_metric(grid, &sp);
        let geo = Geometry::new(&sp, &gf).unwrap();
        let first = geo.ricci_logdet();
        let tilde = geo.ricci_tilde_field();
        let curv = geo.chern_curvature().unwrap();
        let n = grid.n;
        let mut worst_r: f64 = 0.0;
        let mut worst_t: f64 = 0.0;
        for e in 0..n * n {
            for pt in 0..grid.total {
                worst_r = worst_r.max((first[e][pt] - curv.ricci[e][pt]).norm());
                worst_t = worst_t.max((tilde[e][pt] - curv.ricci_tilde[e][pt]).norm());
            }
        }
        assert!(worst_r < 1e-9, "R route disagreement {worst_r}");
        assert!(worst_t < 1e-9, "Rt route disagreement {worst_t}");
    }

    #[test]
    fn i_ddbar_omega_routes_agree_on_generic_metric() {
        let grid = TorusGrid::new(2, 8).unwrap();
        let sp = Spectral::new(grid);
        let n = grid.n;
        // band-limited non-conformal Hermitian perturbation of the identity
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for pt in 0..grid.total {
            let c = grid.coords(pt);
            let u = 0.08 * (2.0 * PI * c[0]).cos();
            let v = 0.05 * (2.0 * PI * (c[1] + c[2])).sin();
            let w = C64::new(0.04 * (2.0 * PI * c[3]).cos(), 0.03 * (2.0 * PI * c[0]).sin());
            comps[0][pt] = C64::new(1.0 + u, 0.0);
            comps[3][pt] = C64::new(1.0 + v, 0.0);
            comps[1][pt] = w;
            comps[2][pt] = w.conj();
        }
        let gf = MetricField::from_components(grid, comps).unwrap();
        let geo = Geometry::new(&sp, &gf).unwrap();
        let routes = geo.i_ddbar_omega().unwrap();
        let scale = routes.direct.sup_norm().max(1.0);
        assert!(
            routes.max_diff < 1e-8 * scale,
            "route disagreement {} vs scale {}",
            routes.max_diff,
            scale
        );
    }

    #[test]
    fn constant_metric_is_conformally_balanced() {
        let grid = TorusGrid::new(3, 4).unwrap();
        let sp = Spectral::new(grid);
        let gf = MetricField::identity(grid);
        let geo = Geometry::new(&sp, &gf).unwrap();
        assert!(geo.conf_balanced_residual().unwrap() < 1e-12);
    }

    #[test]
    fn lee_form_residual_tracks_conformally_balanced_condition() {
        // vanishes on a lifted (conformally balanced) metric...
        let grid = TorusGrid::new(3, 8).unwrap();
        let sp = Spectral::new(grid);
        let n = grid.n;
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for pt in 0..grid.total {
            let c = grid.coords(pt);
            for k in 0..n {
                comps[k * n + k][pt] =
                    C64::new(1.0 + 0.01 * (2.0 * PI * c[2 * k]).cos(), 0.0);
            }
        }
        let chi = MetricField::from_components(grid, comps).unwrap();
        let omega = crate::anomaly::ansatz_lift(&chi).unwrap();
        let geo = Geometry::new(&sp, &omega).unwrap();
        let tor = geo.torsion();
        assert!(geo.lee_form_residual(&tor) < 1e-6);

        // ...and is of the same order as the form residual off the class
        let (gf, _) = conformal_metric(grid, &sp);
        let geo = Geometry::new(&sp, &gf).unwrap();
        let tor = geo.torsion();
        assert!(geo.lee_form_residual(&tor) > 1e-3);
    }

    #[test]
    fn conformal_metric_is_not_balanced() {
        // needs n >= 3: in n=2 every conformal metric is conformally
        // balanced (||Omega|| omega^{n-1} reduces to a constant multiple)
        let grid = TorusGrid::new(3, 4).unwrap();
        let sp = Spectral::new(grid);
        let (gf, _) = conformal_metric(grid, &sp);
        let geo = Geometry::new(&sp, &gf).unwrap();
        assert!(geo.conf_balanced_residual().unwrap() > 1e-3);
    }
}
