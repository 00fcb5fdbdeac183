//! Pointwise multilinear algebra for (p,q)-form components.
//!
//! A (p,q)-form is stored by its full component tensor under the convention
//!
//!   Theta = 1/(p! q!) sum Theta_{kbar_1..kbar_q j_1..j_p}
//!             dz^{j_p} ^ .. ^ dz^{j_1} ^ dzbar^{k_q} ^ .. ^ dzbar^{k_1},
//!
//! with the barred index group first in storage. Identities for (p,p)-forms
//! are usually quoted with interleaved index slots (kbar_1 j_1 kbar_2 j_2 ..);
//! the [`PQForm::pp_get`] accessor converts, absorbing the group-reordering
//! sign (-1)^{p(p-1)/2}.
//!
//! Everything here is exact pointwise algebra on dense arrays; dimensions are
//! tiny (n <= 6) and no symmetry compression is attempted.

use crate::error::{Error, Result};
use crate::linalg::{self, C64, I, ONE, ZERO};

/// Positive Hermitian metric g_{kbar j} at a point, with cached inverse and
/// determinant. Entry layout: `g[k*n + j]` is g_{kbar j}; the inverse stores
/// `inv[j*n + k]` = g^{j kbar}.
#[derive(Clone, Debug)]
pub struct HermitianMetric {
    pub n: usize,
    g: Vec<C64>,
    inv: Vec<C64>,
    det: f64,
}

impl HermitianMetric {
    pub fn new(n: usize, g: Vec<C64>) -> Result<Self> {
        if g.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "metric needs {} entries, got {}",
                n * n,
                g.len()
            )));
        }
        let defect = linalg::hermitian_defect(&g, n);
        if defect > 1e-10 {
            return Err(Error::NotHermitian(defect));
        }
        let eigs = linalg::hermitian_eigenvalues(&g, n);
        if eigs[0] <= 0.0 {
            return Err(Error::NotPositive { min_eig: eigs[0] });
        }
        let inv = linalg::inverse(&g, n).ok_or(Error::NotPositive { min_eig: 0.0 })?;
        let det = linalg::det(&g, n).re;
        Ok(Self { n, g, inv, det })
    }

    pub fn identity(n: usize) -> Self {
        let mut g = vec![ZERO; n * n];
        for i in 0..n {
            g[i * n + i] = ONE;
        }
        Self::new(n, g).unwrap()
    }

    #[inline]
    pub fn lower(&self, kbar: usize, j: usize) -> C64 {
        self.g[kbar * self.n + j]
    }

    #[inline]
    pub fn upper(&self, j: usize, kbar: usize) -> C64 {
        self.inv[j * self.n + kbar]
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    pub fn entries(&self) -> &[C64] {
        &self.g
    }

    pub fn inverse_entries(&self) -> &[C64] {
        &self.inv
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::hermitian_eigenvalues(&self.g, self.n)[0]
    }

    /// The associated Kahler form omega = i g_{kbar j} dz^j ^ dzbar^k.
    pub fn omega(&self) -> PQForm {
        let n = self.n;
        let mut f = PQForm::zero(n, 1, 1);
        for k in 0..n {
            for j in 0..n {
                f.coeffs[k * n + j] = I * self.lower(k, j);
            }
        }
        f
    }

    /// Norm of the holomorphic volume form: ||Omega||_g = (det g)^{-1/2}.
    pub fn omega_norm(&self) -> f64 {
        self.det.powf(-0.5)
    }
}

/// i^k for any integer k.
pub fn ipow(k: i64) -> C64 {
    match k.rem_euclid(4) {
        0 => ONE,
        1 => I,
        2 => -ONE,
        _ => -I,
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Enumerate all k-subsets of {0..len}, each with the sign of the shuffle
/// moving the subset to the front while preserving internal order.
fn signed_subsets(len: usize, k: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let inversions: usize = idx.iter().enumerate().map(|(i, &s)| s - i).sum();
        let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
        out.push((idx.clone(), sign));
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + len - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All size-k strictly increasing index tuples over 0..len, lexicographic.
pub fn combinations(len: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > len {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + len - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Sort an index tuple ascending, tracking the permutation sign. Returns
/// None when two entries coincide.
pub fn sort_with_sign(indices: &[usize]) -> Option<(Vec<usize>, f64)> {
    let mut v = indices.to_vec();
    let mut sign = 1.0;
    for i in 0..v.len() {
        for j in (i + 1)..v.len() {
            if v[i] == v[j] {
                return None;
            }
            if v[i] > v[j] {
                v.swap(i, j);
                sign = -sign;
            }
        }
    }
    Some((v, sign))
}

/// All permutations of 0..len with signs (Heap's algorithm).
pub fn signed_permutations(len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..len).collect();
    let mut c = vec![0usize; len];
    let mut sign = 1.0;
    out.push((perm.clone(), sign));
    let mut i = 0;
    while i < len {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            sign = -sign;
            out.push((perm.clone(), sign));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Dense component tensor of a (p,q)-form at a point.
#[derive(Clone, Debug)]
pub struct PQForm {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Row-major over (kbar_1..kbar_q, j_1..j_p), each index in 0..n.
    pub coeffs: Vec<C64>,
}

impl PQForm {
    pub fn zero(n: usize, p: usize, q: usize) -> Self {
        let len = n.pow((p + q) as u32);
        Self {
            n,
            p,
            q,
            coeffs: vec![ZERO; len],
        }
    }

    #[inline]
    fn offset(&self, barred: &[usize], unbarred: &[usize]) -> usize {
        debug_assert_eq!(barred.len(), self.q);
        debug_assert_eq!(unbarred.len(), self.p);
        let mut idx = 0;
        for &k in barred {
            idx = idx * self.n + k;
        }
        for &j in unbarred {
            idx = idx * self.n + j;
        }
        idx
    }

    #[inline]
    pub fn get(&self, barred: &[usize], unbarred: &[usize]) -> C64 {
        self.coeffs[self.offset(barred, unbarred)]
    }

    #[inline]
    pub fn set(&mut self, barred: &[usize], unbarred: &[usize], v: C64) {
        let o = self.offset(barred, unbarred);
        self.coeffs[o] = v;
    }

    /// Group-reordering sign between interleaved (kbar_1 j_1 .. kbar_p j_p)
    /// and grouped (kbar_1..kbar_p j_1..j_p) slot order for a (p,p)-form.
    pub fn interleave_sign(p: usize) -> f64 {
        if (p * (p.saturating_sub(1)) / 2) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Interleaved accessor for (p,p)-forms: pairs are (barred, unbarred)
    /// slots in Theta_{kbar_1 j_1 .. kbar_p j_p} order.
    #[inline]
    pub fn pp_get(&self, pairs: &[(usize, usize)]) -> C64 {
        debug_assert_eq!(self.p, self.q);
        debug_assert_eq!(pairs.len(), self.p);
        let mut idx = 0;
        for &(k, _) in pairs {
            idx = idx * self.n + k;
        }
        for &(_, j) in pairs {
            idx = idx * self.n + j;
        }
        self.coeffs[idx] * Self::interleave_sign(self.p)
    }

    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        for v in &mut out.coeffs {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.n, self.p, self.q), (other.n, other.p, other.q));
        let mut out = self.clone();
        for (v, w) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *v += *w;
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scaled(-ONE))
    }

    pub fn max_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Complex conjugate form: a (q,p)-form with
    /// conj(Theta)_{J;K} = (-1)^{pq} conj(Theta_{K;J}).
    pub fn conjugate(&self) -> Self {
        let n = self.n;
        let sign = if (self.p * self.q) % 2 == 0 { 1.0 } else { -1.0 };
        let mut out = PQForm::zero(n, self.q, self.p);
        let mut barred = vec![0usize; self.q];
        let mut unbarred = vec![0usize; self.p];
        for idx in 0..self.coeffs.len() {
            decompose_index(idx, n, &mut barred, &mut unbarred);
            let v = self.coeffs[idx].conj() * sign;
            out.set(&unbarred, &barred, v);
        }
        out
    }

    /// Max deviation from antisymmetry under adjacent transpositions in each
    /// index group.
    pub fn antisymmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        let mut barred = vec![0usize; self.q];
        let mut unbarred = vec![0usize; self.p];
        for idx in 0..self.coeffs.len() {
            decompose_index(idx, n, &mut barred, &mut unbarred);
            let v = self.coeffs[idx];
            for a in 0..self.q.saturating_sub(1) {
                let mut b = barred.clone();
                b.swap(a, a + 1);
                worst = worst.max((self.get(&b, &unbarred) + v).norm());
            }
            for a in 0..self.p.saturating_sub(1) {
                let mut u = unbarred.clone();
                u.swap(a, a + 1);
                worst = worst.max((self.get(&barred, &u) + v).norm());
            }
        }
        worst
    }

    /// Antisymmetrizing projection over both index groups.
    pub fn antisymmetrized(&self) -> Self {
        let n = self.n;
        let mut out = PQForm::zero(n, self.p, self.q);
        let perms_b = signed_permutations(self.q);
        let perms_u = signed_permutations(self.p);
        let norm = 1.0 / (factorial(self.p) * factorial(self.q));
        let mut barred = vec![0usize; self.q];
        let mut unbarred = vec![0usize; self.p];
        let mut pb = vec![0usize; self.q];
        let mut pu = vec![0usize; self.p];
        for idx in 0..self.coeffs.len() {
            decompose_index(idx, n, &mut barred, &mut unbarred);
            let mut acc = ZERO;
            for (sb, sgb) in &perms_b {
                for (su, sgu) in &perms_u {
                    for (t, &s) in sb.iter().enumerate() {
                        pb[t] = barred[s];
                    }
                    for (t, &s) in su.iter().enumerate() {
                        pu[t] = unbarred[s];
                    }
                    acc += self.get(&pb, &pu) * (sgb * sgu);
                }
            }
            out.coeffs[idx] = acc * norm;
        }
        out
    }
}

#[inline]
fn decompose_index(mut idx: usize, n: usize, barred: &mut [usize], unbarred: &mut [usize]) {
    for j in (0..unbarred.len()).rev() {
        unbarred[j] = idx % n;
        idx /= n;
    }
    for k in (0..barred.len()).rev() {
        barred[k] = idx % n;
        idx /= n;
    }
}

/// Wedge product under the component normalization above, computed as a
/// signed shuffle sum over index-position splits.
pub fn wedge(a: &PQForm, b: &PQForm) -> Result<PQForm> {
    if a.n != b.n {
        return Err(Error::ShapeMismatch(format!(
            "wedge over different dimensions {} vs {}",
            a.n, b.n
        )));
    }
    let n = a.n;
    let (p, q) = (a.p + b.p, a.q + b.q);
    if p > n || q > n {
        return Err(Error::DegreeOutOfRange { p, q, n });
    }
    let mut out = PQForm::zero(n, p, q);
    // group-reordering sign from moving B's dz block past A's dzbar block
    let outer_sign = if (b.p * a.q) % 2 == 0 { 1.0 } else { -1.0 };
    let splits_j = signed_subsets(p, b.p);
    let splits_k = signed_subsets(q, b.q);
    let mut barred = vec![0usize; q];
    let mut unbarred = vec![0usize; p];
    let mut kb = vec![0usize; b.q];
    let mut ka = vec![0usize; a.q];
    let mut jb = vec![0usize; b.p];
    let mut ja = vec![0usize; a.p];
    for idx in 0..out.coeffs.len() {
        decompose_index(idx, n, &mut barred, &mut unbarred);
        let mut acc = ZERO;
        for (sk, sgk) in &splits_k {
            split_by(&barred, sk, &mut kb, &mut ka);
            for (sj, sgj) in &splits_j {
                split_by(&unbarred, sj, &mut jb, &mut ja);
                acc += b.get(&kb, &jb) * a.get(&ka, &ja) * (sgk * sgj);
            }
        }
        out.coeffs[idx] = acc * outer_sign;
    }
    Ok(out)
}

#[inline]
fn split_by(src: &[usize], sel: &[usize], selected: &mut [usize], rest: &mut [usize]) {
    let mut si = 0;
    let mut ri = 0;
    for (pos, &v) in src.iter().enumerate() {
        if si < sel.len() && sel[si] == pos {
            selected[si] = v;
            si += 1;
        } else {
            rest[ri] = v;
            ri += 1;
        }
    }
}

/// omega^k as a (k,k)-form, by repeated wedging.
pub fn omega_pow(g: &HermitianMetric, k: usize) -> Result<PQForm> {
    let omega = g.omega();
    let mut acc = omega.clone();
    if k == 0 {
        let mut unit = PQForm::zero(g.n, 0, 0);
        unit.coeffs[0] = ONE;
        return Ok(unit);
    }
    for _ in 1..k {
        acc = wedge(&acc, &omega)?;
    }
    Ok(acc)
}

/// The single independent coefficient of the top (n,n) component of a ^ b,
/// i.e. (a ^ b)_{(1..n);(1..n)} in grouped order, computed without
/// materializing the full tensor.
pub fn top_component(a: &PQForm, b: &PQForm) -> Result<C64> {
    let n = a.n;
    if a.p + b.p != n || a.q + b.q != n {
        return Err(Error::DegreeOutOfRange {
            p: a.p + b.p,
            q: a.q + b.q,
            n,
        });
    }
    let all: Vec<usize> = (0..n).collect();
    let outer_sign = if (b.p * a.q) % 2 == 0 { 1.0 } else { -1.0 };
    let splits_j = signed_subsets(n, b.p);
    let splits_k = signed_subsets(n, b.q);
    let mut kb = vec![0usize; b.q];
    let mut ka = vec![0usize; a.q];
    let mut jb = vec![0usize; b.p];
    let mut ja = vec![0usize; a.p];
    let mut acc = ZERO;
    for (sk, sgk) in &splits_k {
        split_by(&all, sk, &mut kb, &mut ka);
        for (sj, sgj) in &splits_j {
            split_by(&all, sj, &mut jb, &mut ja);
            acc += b.get(&kb, &jb) * a.get(&ka, &ja) * (sgk * sgj);
        }
    }
    Ok(acc * outer_sign)
}

/// Trace of a (p,p)-form: Tr Theta = i^{-p} prod g^{k_l jbar_l}
/// Theta_{jbar_1 k_1 .. jbar_p k_p}.
pub fn trace_pp(theta: &PQForm, g: &HermitianMetric) -> Result<C64> {
    if theta.p != theta.q {
        return Err(Error::ShapeMismatch(format!(
            "trace needs p=q, got ({},{})",
            theta.p, theta.q
        )));
    }
    let n = g.n;
    let p = theta.p;
    if p == 0 {
        return Ok(theta.coeffs[0]);
    }
    let mut acc = ZERO;
    let mut pairs = vec![(0usize, 0usize); p];
    let total = n.pow((2 * p) as u32);
    for flat in 0..total {
        let mut rest = flat;
        let mut weight = ONE;
        for slot in 0..p {
            let j = rest % n;
            rest /= n;
            let k = rest % n;
            rest /= n;
            // slots are (jbar, k) in the trace formula
            pairs[slot] = (j, k);
            weight *= g.upper(k, j);
        }
        acc += weight * theta.pp_get(&pairs);
    }
    Ok(acc * ipow(-(p as i64)))
}

/// The scalar c with Theta ^ omega^{n-p}/(n-p)! = c omega^n/n!, from the
/// closed-form contraction identities for p in {1,2,3}.
pub fn contract_against_omega_power(theta: &PQForm, g: &HermitianMetric) -> Result<C64> {
    if theta.p != theta.q {
        return Err(Error::ShapeMismatch(format!(
            "contraction needs p=q, got ({},{})",
            theta.p, theta.q
        )));
    }
    let n = g.n;
    match theta.p {
        1 => {
            let mut acc = ZERO;
            for j in 0..n {
                for k in 0..n {
                    acc += g.upper(j, k) * theta.pp_get(&[(k, j)]);
                }
            }
            Ok(-I * acc)
        }
        2 => {
            let mut acc = ZERO;
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        for m in 0..n {
                            acc += g.upper(j, k)
                                * g.upper(l, m)
                                * theta.pp_get(&[(k, j), (m, l)]);
                        }
                    }
                }
            }
            Ok(acc * C64::new(-0.5, 0.0))
        }
        3 => {
            let mut acc = ZERO;
            for j in 0..n {
                for k in 0..n {
                    for qq in 0..n {
                        for pp in 0..n {
                            for s in 0..n {
                                for r in 0..n {
                                    acc += g.upper(j, k)
                                        * g.upper(qq, pp)
                                        * g.upper(s, r)
                                        * theta.pp_get(&[(k, j), (pp, qq), (r, s)]);
                                }
                            }
                        }
                    }
                }
            }
            Ok(acc * I / 6.0)
        }
        p => Err(Error::UnsupportedDegree {
            p,
            supported: "1, 2, 3",
        }),
    }
}

/// Hodge star of an (n-1,n-1)-form, returning a (1,1)-form:
///
///   (star Theta)_{jbar k} = 1/(n-1)! {
///       -(n-1) i^{-(n-2)} prod g^{k_p jbar_p} Theta_{jbar k jbar_1 k_1 ..}
///       + (Tr Theta) i g_{jbar k} }
///
/// Consistency: writing Theta = alpha ^ omega^{n-2} (every (n-1,n-1)-form is
/// such a wedge), this agrees with star_alpha_wedge for all n >= 3; both are
/// cross-validated against the brute-force real-coordinate star in the
/// identity suite.
pub fn hodge_star_n1n1(theta: &PQForm, g: &HermitianMetric) -> Result<PQForm> {
    let n = g.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    if theta.p != n - 1 || theta.q != n - 1 {
        return Err(Error::ShapeMismatch(format!(
            "hodge star expects ({},{})-form, got ({},{})",
            n - 1,
            n - 1,
            theta.p,
            theta.q
        )));
    }
    let denom = factorial(n - 1);
    let tr = trace_pp(theta, g)?;
    let mut out = PQForm::zero(n, 1, 1);
    let m = n - 2;
    let total = n.pow((2 * m) as u32);
    let mut pairs = vec![(0usize, 0usize); n - 1];
    for j in 0..n {
        for k in 0..n {
            let mut contracted = ZERO;
            pairs[0] = (j, k);
            for flat in 0..total {
                let mut rest = flat;
                let mut weight = ONE;
                for slot in 0..m {
                    let jp = rest % n;
                    rest /= n;
                    let kp = rest % n;
                    rest /= n;
                    pairs[slot + 1] = (jp, kp);
                    weight *= g.upper(kp, jp);
                }
                contracted += weight * theta.pp_get(&pairs);
            }
            let v = (contracted * ipow(-(m as i64)) * (-(n as f64 - 1.0))
                + tr * I * g.lower(j, k))
                / denom;
            // (1,1) result stored grouped with barred index first
            out.coeffs[j * n + k] = v;
        }
    }
    Ok(out)
}

/// star(alpha ^ omega^{n-2}) = -(n-2)! alpha + (n-2)! (Tr alpha) omega.
pub fn star_alpha_wedge(alpha: &PQForm, g: &HermitianMetric) -> Result<PQForm> {
    let n = g.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    if alpha.p != 1 || alpha.q != 1 {
        return Err(Error::ShapeMismatch("star_alpha_wedge expects (1,1)".into()));
    }
    let f = factorial(n - 2);
    let tr = trace_pp(alpha, g)?;
    Ok(alpha
        .scaled(C64::new(-f, 0.0))
        .add(&g.omega().scaled(tr * f)))
}

/// (star(Phi ^ omega^{n-3}))_{kbar j} = i(n-3)! g^{s rbar} Phi_{rbar s kbar j}
///   + i (n-3)!/2 (Tr Phi) g_{kbar j}.
pub fn star_phi_wedge(phi: &PQForm, g: &HermitianMetric) -> Result<PQForm> {
    let n = g.n;
    if n < 3 {
        return Err(Error::UnsupportedDimension { n, required: 3 });
    }
    if phi.p != 2 || phi.q != 2 {
        return Err(Error::ShapeMismatch("star_phi_wedge expects (2,2)".into()));
    }
    let f = factorial(n - 3);
    let tr = trace_pp(phi, g)?;
    let mut out = PQForm::zero(n, 1, 1);
    for k in 0..n {
        for j in 0..n {
            let mut contracted = ZERO;
            for s in 0..n {
                for r in 0..n {
                    contracted += g.upper(s, r) * phi.pp_get(&[(r, s), (k, j)]);
                }
            }
            out.coeffs[k * n + j] = I * f * contracted + I * (f / 2.0) * tr * g.lower(k, j);
        }
    }
    Ok(out)
}

/// (star(Psi ^ omega^{n-4}))_{kbar j} = (n-4)!/2 g^{q pbar} g^{s rbar}
///   Psi_{rbar s pbar q kbar j} + i (n-4)!/6 (Tr Psi) g_{kbar j}, n >= 4.
pub fn star_psi_wedge(psi: &PQForm, g: &HermitianMetric) -> Result<PQForm> {
    let n = g.n;
    if n < 4 {
        return Err(Error::UnsupportedDimension { n, required: 4 });
    }
    if psi.p != 3 || psi.q != 3 {
        return Err(Error::ShapeMismatch("star_psi_wedge expects (3,3)".into()));
    }
    let f = factorial(n - 4);
    let tr = trace_pp(psi, g)?;
    let mut out = PQForm::zero(n, 1, 1);
    for k in 0..n {
        for j in 0..n {
            let mut contracted = ZERO;
            for qq in 0..n {
                for pp in 0..n {
                    for s in 0..n {
                        for r in 0..n {
                            contracted += g.upper(qq, pp)
                                * g.upper(s, r)
                                * psi.pp_get(&[(r, s), (pp, qq), (k, j)]);
                        }
                    }
                }
            }
            out.coeffs[k * n + j] =
                contracted * (f / 2.0) + I * (f / 6.0) * tr * g.lower(k, j);
        }
    }
    Ok(out)
}

/// Torsion components T_{kbar j l} at a point, antisymmetric in (j, l).
#[derive(Clone, Debug)]
pub struct TorsionTensor {
    pub n: usize,
    /// `t[(k*n + j)*n + l]` = T_{kbar j l}
    pub t: Vec<C64>,
}

impl TorsionTensor {
    pub fn new(n: usize, t: Vec<C64>) -> Result<Self> {
        if t.len() != n * n * n {
            return Err(Error::ShapeMismatch("torsion needs n^3 entries".into()));
        }
        Ok(Self { n, t })
    }

    #[inline]
    pub fn get(&self, kbar: usize, j: usize, l: usize) -> C64 {
        self.t[(kbar * self.n + j) * self.n + l]
    }

    /// Torsion one-form T_l = g^{j kbar} T_{kbar j l}.
    pub fn tau(&self, g: &HermitianMetric) -> Vec<C64> {
        let n = self.n;
        let mut out = vec![ZERO; n];
        for l in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out[l] += g.upper(j, k) * self.get(k, j, l);
                }
            }
        }
        out
    }

    /// |T|^2 = g^{m kbar} g^{j nbar} g^{l pbar} T_{kbar j l} conj(T_{mbar n p}).
    pub fn norm_sq(&self, g: &HermitianMetric) -> f64 {
        let n = self.n;
        let mut acc = ZERO;
        for k in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let tv = self.get(k, j, l);
                    if tv == ZERO {
                        continue;
                    }
                    for m in 0..n {
                        for nn in 0..n {
                            for pp in 0..n {
                                acc += g.upper(m, k)
                                    * g.upper(j, nn)
                                    * g.upper(l, pp)
                                    * tv
                                    * self.get(m, nn, pp).conj();
                            }
                        }
                    }
                }
            }
        }
        acc.re
    }

    /// |tau|^2 = g^{j kbar} T_j conj(T_k).
    pub fn tau_norm_sq(&self, g: &HermitianMetric) -> f64 {
        let n = self.n;
        let tau = self.tau(g);
        let mut acc = ZERO;
        for j in 0..n {
            for k in 0..n {
                acc += g.upper(j, k) * tau[j] * tau[k].conj();
            }
        }
        acc.re
    }

    /// T as a (2,1)-form: T = 1/2 T_{kbar j l} dz^l ^ dz^j ^ dzbar^k.
    pub fn as_form(&self) -> PQForm {
        PQForm {
            n: self.n,
            p: 2,
            q: 1,
            coeffs: self.t.clone(),
        }
    }

    /// conj(T) as a (1,2)-form with components Tbar_{k jbar lbar} = conj(T_{kbar j l}).
    pub fn conj_form(&self) -> PQForm {
        let n = self.n;
        let mut out = PQForm::zero(n, 1, 2);
        for k in 0..n {
            for j in 0..n {
                for l in 0..n {
                    out.set(&[j, l], &[k], self.get(k, j, l).conj());
                }
            }
        }
        out
    }
}

/// The (3,3)-form T ^ Tbar from the nine-term antisymmetrized expansion
///
///   (T ^ Tbar)_{pbar q rbar s kbar j} = T_{kbar s j} Tbar_{q pbar rbar} + ...
pub fn t_wedge_tbar_components(t: &TorsionTensor) -> PQForm {
    let n = t.n;
    let tb = |a: usize, b: usize, c: usize| t.get(a, b, c).conj(); // Tbar_{a bbar cbar}
    let mut out = PQForm::zero(n, 3, 3);
    let sign3 = PQForm::interleave_sign(3); // grouped = sign3 * interleaved
    for pp in 0..n {
        for qq in 0..n {
            for r in 0..n {
                for s in 0..n {
                    for k in 0..n {
                        for j in 0..n {
                            let v = t.get(k, s, j) * tb(qq, pp, r)
                                + t.get(r, s, j) * tb(qq, k, pp)
                                + t.get(pp, s, j) * tb(qq, r, k)
                                + t.get(k, qq, s) * tb(j, pp, r)
                                + t.get(r, qq, s) * tb(j, k, pp)
                                + t.get(pp, qq, s) * tb(j, r, k)
                                + t.get(k, j, qq) * tb(s, pp, r)
                                + t.get(r, j, qq) * tb(s, k, pp)
                                + t.get(pp, j, qq) * tb(s, r, k);
                            out.set(&[pp, r, k], &[qq, s, j], v * sign3);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_metric(n: usize, rng: &mut ChaCha8Rng) -> HermitianMetric {
        let mut g = vec![ZERO; n * n];
        let a: Vec<C64> = (0..n * n)
            .map(|_| C64::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)))
            .collect();
        for r in 0..n {
            for c in 0..n {
                for k in 0..n {
                    g[r * n + c] += a[r * n + k] * a[c * n + k].conj();
                }
            }
            g[r * n + r] += C64::new(1.0, 0.0);
        }
        HermitianMetric::new(n, g).unwrap()
    }

    pub fn random_form(n: usize, p: usize, q: usize, rng: &mut ChaCha8Rng) -> PQForm {
        let mut f = PQForm::zero(n, p, q);
        for v in &mut f.coeffs {
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        f.antisymmetrized()
    }

    #[test]
    fn antisymmetrized_projection_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_form(3, 2, 2, &mut rng);
        assert!(f.antisymmetry_defect() < 1e-13);
    }

    #[test]
    fn trace_of_omega_is_n() {
        for n in 2..=5 {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let g = random_metric(n, &mut rng);
            let tr = trace_pp(&g.omega(), &g).unwrap();
            assert!((tr - C64::new(n as f64, 0.0)).norm() < 1e-12 * n as f64);
        }
    }

    #[test]
    fn alpha_wedge_omega_matches_four_term_formula() {
        // (alpha ^ omega)_{rbar s kbar j} = i(alpha_{kbar j} g_{rbar s}
        //   - alpha_{kbar s} g_{rbar j} - alpha_{rbar j} g_{kbar s}
        //   + alpha_{rbar s} g_{kbar j})
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_metric(n, &mut rng);
        let alpha = random_form(n, 1, 1, &mut rng);
        let w = wedge(&alpha, &g.omega()).unwrap();
        let al = |k: usize, j: usize| alpha.pp_get(&[(k, j)]);
        for r in 0..n {
            for s in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        let expect = I
                            * (al(k, j) * g.lower(r, s) - al(k, s) * g.lower(r, j)
                                - al(r, j) * g.lower(k, s)
                                + al(r, s) * g.lower(k, j));
                        let got = w.pp_get(&[(r, s), (k, j)]);
                        assert!(
                            (got - expect).norm() < 1e-12,
                            "mismatch at ({r},{s},{k},{j}): {got} vs {expect}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn wedge_with_zero_form_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_form(4, 1, 1, &mut rng);
        let z = PQForm::zero(4, 2, 2);
        assert_eq!(wedge(&a, &z).unwrap().max_norm(), 0.0);
    }

    #[test]
    fn wedge_degree_overflow_is_error() {
        let a = PQForm::zero(3, 2, 2);
        let b = PQForm::zero(3, 2, 2);
        assert!(matches!(
            wedge(&a, &b),
            Err(Error::DegreeOutOfRange { .. })
        ));
    }

    #[test]
    fn trace_wedge_recursions() {
        // Tr(alpha ^ omega) = 2(n-1) Tr alpha; Tr(Phi ^ omega) = 3(n-2) Tr Phi
        for n in 3..=5 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + n as u64);
            let g = random_metric(n, &mut rng);
            let alpha = random_form(n, 1, 1, &mut rng);
            let phi = random_form(n, 2, 2, &mut rng);
            let tr_a = trace_pp(&alpha, &g).unwrap();
            let tr_aw = trace_pp(&wedge(&alpha, &g.omega()).unwrap(), &g).unwrap();
            assert!((tr_aw - tr_a * (2.0 * (n as f64 - 1.0))).norm() < 1e-10 * tr_aw.norm().max(1.0));
            let tr_p = trace_pp(&phi, &g).unwrap();
            let tr_pw = trace_pp(&wedge(&phi, &g.omega()).unwrap(), &g).unwrap();
            assert!((tr_pw - tr_p * (3.0 * (n as f64 - 2.0))).norm() < 1e-10 * tr_pw.norm().max(1.0));
        }
    }

    #[test]
    fn star_of_omega_power_is_factorial_omega() {
        for n in 3..=5 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + n as u64);
            let g = random_metric(n, &mut rng);
            let wn1 = omega_pow(&g, n - 1).unwrap();
            let star = hodge_star_n1n1(&wn1, &g).unwrap();
            let expect = g.omega().scaled(C64::new(factorial(n - 1), 0.0));
            let scale = expect.max_norm();
            assert!(star.sub(&expect).max_norm() < 1e-10 * scale, "n={n}");
        }
    }

    #[test]
    fn star_traceless_alpha_wedge() {
        // Tr alpha = 0 => star(alpha ^ omega^{n-2}) = -(n-2)! alpha
        for n in [3usize, 5] {
            let mut rng = ChaCha8Rng::seed_from_u64(60 + n as u64);
            let g = random_metric(n, &mut rng);
            let mut alpha = random_form(n, 1, 1, &mut rng);
            // project out the trace
            let tr = trace_pp(&alpha, &g).unwrap();
            alpha = alpha.sub(&g.omega().scaled(tr / n as f64));
            assert!(trace_pp(&alpha, &g).unwrap().norm() < 1e-12);
            let closed = star_alpha_wedge(&alpha, &g).unwrap();
            let expect = alpha.scaled(C64::new(-factorial(n - 2), 0.0));
            assert!(closed.sub(&expect).max_norm() < 1e-12 * expect.max_norm().max(1.0));
        }
    }

    #[test]
    fn contraction_of_omega_is_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_metric(4, &mut rng);
        let c = contract_against_omega_power(&g.omega(), &g).unwrap();
        assert!((c - C64::new(4.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn conjugate_of_omega_is_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_metric(3, &mut rng);
        let w = g.omega();
        assert!(w.conjugate().sub(&w).max_norm() < 1e-14);
    }

    #[test]
    fn torsion_zero_gives_zero_wedge() {
        let t = TorsionTensor::new(3, vec![ZERO; 27]).unwrap();
        assert_eq!(t_wedge_tbar_components(&t).max_norm(), 0.0);
    }
}
