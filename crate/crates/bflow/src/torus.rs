//! Periodic grids on the square complex torus and spectral calculus on them.
//!
//! Coordinates are z^j = x^j + i y^j with all real periods 1, sampled on a
//! uniform m^(2n) grid laid out row-major over (x^1, y^1, .., x^n, y^n) with
//! x^1 slowest. Derivatives act by Fourier symbol: for a mode with signed
//! angular frequencies a = 2 pi k per axis,
//!
//!   d/dz^j   -> (i a_x + a_y) / 2,     d/dzbar^j -> (i a_x - a_y) / 2,
//!
//! with the Nyquist frequency zeroed so derivatives of real fields stay real.

use std::io::{Read as _, Write as _};
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::forms::HermitianMetric;
use crate::linalg::{self, C64, ZERO};

/// Uniform grid on T^{2n} with m points per real axis. All 2n real axes
/// share one period (anisotropic lattices are out of scope).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusGrid {
    pub n: usize,
    pub m: usize,
    pub period: f64,
    pub total: usize,
}

impl TorusGrid {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        Self::with_period(n, m, 1.0)
    }

    pub fn with_period(n: usize, m: usize, period: f64) -> Result<Self> {
        if n == 0 || m < 4 || m % 2 != 0 {
            return Err(Error::Config(format!(
                "invalid grid n={n}, m={m} (need n >= 1, m >= 4 even)"
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Config(format!("invalid period {period}")));
        }
        let total = m
            .checked_pow(2 * n as u32)
            .ok_or_else(|| Error::Config("grid too large".into()))?;
        Ok(Self { n, m, period, total })
    }

    /// Real coordinates (x^1, y^1, .., x^n, y^n) of a flat index, in
    /// [0, period).
    pub fn coords(&self, mut idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.n];
        for a in (0..2 * self.n).rev() {
            out[a] = (idx % self.m) as f64 * self.period / self.m as f64;
            idx /= self.m;
        }
        out
    }

    /// Lebesgue volume of the real torus.
    pub fn volume(&self) -> f64 {
        self.period.powi(2 * self.n as i32)
    }

    /// Integral against the Lebesgue measure: mean times volume, spectrally
    /// exact for band-limited fields.
    pub fn integrate(&self, field: &[C64]) -> C64 {
        self.mean(field) * self.volume()
    }

    /// Sample a function of the real coordinates at every grid point.
    pub fn sample(&self, f: impl Fn(&[f64]) -> C64) -> Vec<C64> {
        let mut out = vec![ZERO; self.total];
        let mut digits = vec![0usize; 2 * self.n];
        let mut coords = vec![0.0; 2 * self.n];
        let inv_m = 1.0 / self.m as f64;
        for v in out.iter_mut() {
            for (c, &d) in coords.iter_mut().zip(digits.iter()) {
                *c = d as f64 * inv_m;
            }
            *v = f(&coords);
            advance(&mut digits, self.m);
        }
        out
    }

    /// Mean over the grid = integral against the unit-volume measure dV.
    pub fn mean(&self, field: &[C64]) -> C64 {
        debug_assert_eq!(field.len(), self.total);
        field.iter().sum::<C64>() / self.total as f64
    }
}

#[inline]
fn advance(digits: &mut [usize], m: usize) {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < m {
            return;
        }
        *d = 0;
    }
}

/// Cached FFT plans and frequency tables for one grid.
pub struct Spectral {
    pub grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// signed angular frequency 2 pi k per axis digit, Nyquist zeroed
    freq: Vec<f64>,
}

impl Spectral {
    pub fn new(grid: TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.m);
        let inv = planner.plan_fft_inverse(grid.m);
        let m = grid.m;
        let scale = 2.0 * std::f64::consts::PI / grid.period;
        let freq = (0..m)
            .map(|k| {
                if 2 * k == m {
                    0.0
                } else if 2 * k > m {
                    scale * (k as f64 - m as f64)
                } else {
                    scale * k as f64
                }
            })
            .collect();
        Self { grid, fwd, inv, freq }
    }

    fn fft_axis(&self, data: &mut [C64], axis: usize, forward: bool) {
        let m = self.grid.m;
        let axes = 2 * self.grid.n;
        let stride = m.pow((axes - 1 - axis) as u32);
        let plan = if forward { &self.fwd } else { &self.inv };
        let mut scratch = vec![ZERO; plan.get_inplace_scratch_len()];
        if stride == 1 {
            // lines are contiguous: one batched call over everything
            plan.process_with_scratch(data, &mut scratch);
            return;
        }
        let mut line = vec![ZERO; m];
        let block = stride * m;
        let mut start = 0;
        while start < data.len() {
            for off in 0..stride {
                for (t, v) in line.iter_mut().enumerate() {
                    *v = data[start + off + t * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (t, &v) in line.iter().enumerate() {
                    data[start + off + t * stride] = v;
                }
            }
            start += block;
        }
    }

    /// Forward transform over all axes (unnormalized).
    pub fn forward(&self, field: &[C64]) -> Vec<C64> {
        let mut hat = field.to_vec();
        for axis in 0..2 * self.grid.n {
            self.fft_axis(&mut hat, axis, true);
        }
        hat
    }

    /// Inverse transform over all axes, normalized by 1/total.
    pub fn backward(&self, hat: &[C64]) -> Vec<C64> {
        let mut out = hat.to_vec();
        for axis in 0..2 * self.grid.n {
            self.fft_axis(&mut out, axis, false);
        }
        let s = 1.0 / self.grid.total as f64;
        for v in &mut out {
            *v *= s;
        }
        out
    }

    /// Multiply spectral coefficients by a symbol of the signed angular
    /// frequency vector (one entry per real axis).
    pub fn apply_symbol(&self, hat: &[C64], sym: impl Fn(&[f64]) -> C64) -> Vec<C64> {
        let axes = 2 * self.grid.n;
        let mut digits = vec![0usize; axes];
        let mut a = vec![0.0; axes];
        let mut out = vec![ZERO; hat.len()];
        for (o, &h) in out.iter_mut().zip(hat.iter()) {
            for (av, &d) in a.iter_mut().zip(digits.iter()) {
                *av = self.freq[d];
            }
            *o = h * sym(&a);
            advance(&mut digits, self.grid.m);
        }
        out
    }

    /// Holomorphic derivative d/dz^j of a sampled field.
    pub fn dz(&self, field: &[C64], j: usize) -> Vec<C64> {
        self.dz_hat(&self.forward(field), j)
    }

    /// Antiholomorphic derivative d/dzbar^j of a sampled field.
    pub fn dzbar(&self, field: &[C64], j: usize) -> Vec<C64> {
        self.dzbar_hat(&self.forward(field), j)
    }

    pub fn dz_hat(&self, hat: &[C64], j: usize) -> Vec<C64> {
        let out = self.apply_symbol(hat, |a| C64::new(a[2 * j + 1], a[2 * j]) * 0.5);
        self.backward(&out)
    }

    pub fn dzbar_hat(&self, hat: &[C64], j: usize) -> Vec<C64> {
        let out = self.apply_symbol(hat, |a| C64::new(-a[2 * j + 1], a[2 * j]) * 0.5);
        self.backward(&out)
    }

    /// All n^2 components h_{kbar j} = d_j d_kbar phi of i ddbar phi, from a
    /// single forward transform.
    pub fn i_ddbar(&self, phi: &[C64]) -> Vec<Vec<C64>> {
        let n = self.grid.n;
        let hat = self.forward(phi);
        let mut out = Vec::with_capacity(n * n);
        for k in 0..n {
            for j in 0..n {
                let sym = |a: &[f64]| {
                    let sj = C64::new(a[2 * j + 1], a[2 * j]) * 0.5;
                    let sk = C64::new(-a[2 * k + 1], a[2 * k]) * 0.5;
                    sj * sk
                };
                out.push(self.backward(&self.apply_symbol(&hat, sym)));
            }
        }
        out
    }

    /// i ddbar of a real scalar field. The result is Hermitian,
    /// h_{jbar k} = conj(h_{kbar j}), so only the upper triangle is
    /// transformed back; the rest is filled by conjugation.
    pub fn i_ddbar_real(&self, phi: &[C64]) -> Vec<Vec<C64>> {
        let n = self.grid.n;
        let hat = self.forward(phi);
        let mut out = vec![Vec::new(); n * n];
        for k in 0..n {
            for j in k..n {
                let sym = |a: &[f64]| {
                    let sj = C64::new(a[2 * j + 1], a[2 * j]) * 0.5;
                    let sk = C64::new(-a[2 * k + 1], a[2 * k]) * 0.5;
                    sj * sk
                };
                let f = self.backward(&self.apply_symbol(&hat, sym));
                if j != k {
                    out[j * n + k] = f.iter().map(|v| v.conj()).collect();
                }
                out[k * n + j] = f;
            }
        }
        out
    }

    /// Largest per-axis squared derivative symbol |s|^2 on this grid,
    /// attained just below Nyquist: used in stability bounds.
    pub fn max_symbol_sq(&self) -> f64 {
        let amax = self
            .freq
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        // |s_j|^2 = (a_x^2 + a_y^2)/4 <= amax^2/2
        amax * amax / 2.0
    }
}

/// Hermitian metric field over the grid, stored component-major:
/// `comps[k*n + j][point]` = g_{kbar j}(point).
#[derive(Clone)]
pub struct MetricField {
    pub grid: TorusGrid,
    pub comps: Vec<Vec<C64>>,
}

impl MetricField {
    pub fn identity(grid: TorusGrid) -> Self {
        let n = grid.n;
        let mut comps = vec![vec![ZERO; grid.total]; n * n];
        for d in 0..n {
            comps[d * n + d] = vec![C64::new(1.0, 0.0); grid.total];
        }
        Self { grid, comps }
    }

    pub fn from_components(grid: TorusGrid, comps: Vec<Vec<C64>>) -> Result<Self> {
        if comps.len() != grid.n * grid.n || comps.iter().any(|c| c.len() != grid.total) {
            return Err(Error::ShapeMismatch("metric field components".into()));
        }
        Ok(Self { grid, comps })
    }

    /// Dense n x n matrix at one grid point.
    pub fn matrix_at(&self, idx: usize) -> Vec<C64> {
        self.comps.iter().map(|c| c[idx]).collect()
    }

    /// Dense matrix at one grid point, written into a caller-owned buffer
    /// (length n*n) to avoid per-point allocation in hot loops.
    pub fn write_matrix_at(&self, idx: usize, buf: &mut [C64]) {
        for (b, c) in buf.iter_mut().zip(&self.comps) {
            *b = c[idx];
        }
    }

    pub fn metric_at(&self, idx: usize) -> Result<HermitianMetric> {
        HermitianMetric::new(self.grid.n, self.matrix_at(idx))
    }

    /// Minimum eigenvalue over the grid and the point attaining it.
    pub fn min_eigenvalue(&self) -> (f64, usize) {
        let n = self.grid.n;
        let mut best = f64::INFINITY;
        let mut at = 0;
        for idx in 0..self.grid.total {
            let e = linalg::hermitian_eigenvalues(&self.matrix_at(idx), n)[0];
            if e < best {
                best = e;
                at = idx;
            }
        }
        (best, at)
    }

    pub fn det_field(&self) -> Vec<C64> {
        let n = self.grid.n;
        (0..self.grid.total)
            .map(|idx| linalg::det(&self.matrix_at(idx), n))
            .collect()
    }

    pub fn add_scaled(&self, other: &Self, s: f64) -> Self {
        let mut out = self.clone();
        for (c, o) in out.comps.iter_mut().zip(&other.comps) {
            for (v, w) in c.iter_mut().zip(o) {
                *v += *w * s;
            }
        }
        out
    }

    pub fn max_hermitian_defect(&self) -> f64 {
        let n = self.grid.n;
        let mut worst: f64 = 0.0;
        for k in 0..n {
            for j in 0..n {
                let a = &self.comps[k * n + j];
                let b = &self.comps[j * n + k];
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y.conj()).norm());
                }
            }
        }
        worst
    }
}

/// Number of worker threads for pointwise loops, from BFLW_THREADS.
pub fn thread_count() -> usize {
    std::env::var("BFLW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|v| v.clamp(1, 64))
        .unwrap_or(1)
}

/// Run a pointwise pass over `out` in parallel chunks; `f` receives the
/// starting flat index of its chunk. Results are independent of the thread
/// count because chunks never overlap.
pub fn par_apply<T: Send>(out: &mut [T], f: impl Fn(usize, &mut [T]) + Sync) {
    let nt = thread_count();
    if nt <= 1 || out.len() < 2 * nt {
        f(0, out);
        return;
    }
    let chunk = out.len().div_ceil(nt);
    std::thread::scope(|s| {
        for (ci, c) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || f(ci * chunk, c));
        }
    });
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"BFLW";
const SNAPSHOT_VERSION: u32 = 1;

/// Write named complex fields in the flat binary snapshot format:
/// 32-byte header (magic, version, n, m, field count, flags, padding), then
/// per field a length-prefixed UTF-8 name, a u64 element count, and the
/// elements as little-endian (re, im) f64 pairs in grid row-major order.
pub fn write_snapshot(
    path: &std::path::Path,
    n: u32,
    m: u32,
    fields: &[(&str, &[C64])],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    w.write_all(&(fields.len() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&[0u8; 8])?;
    for (name, data) in fields {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for v in *data {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Snapshot {
    pub n: u32,
    pub m: u32,
    pub fields: Vec<(String, Vec<C64>)>,
}

pub fn read_snapshot(path: &std::path::Path) -> Result<Snapshot> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[0..4] != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    if u32_at(4) != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {}", u32_at(4))));
    }
    let (n, m, count) = (u32_at(8), u32_at(12), u32_at(16));
    let mut fields = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let name_len = u32::from_le_bytes(len4) as usize;
        if name_len > 4096 {
            return Err(Error::Snapshot("field name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Snapshot("bad field name".into()))?;
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let elems = u64::from_le_bytes(len8) as usize;
        let mut raw = vec![0u8; elems * 16];
        r.read_exact(&mut raw)?;
        let data: Vec<C64> = raw
            .chunks_exact(16)
            .map(|c| {
                C64::new(
                    f64::from_le_bytes(c[0..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..16].try_into().unwrap()),
                )
            })
            .collect();
        fields.push((name, data));
    }
    Ok(Snapshot { n, m, fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn fft_roundtrip() {
        let grid = TorusGrid::new(2, 4).unwrap();
        let sp = Spectral::new(grid);
        let f = grid.sample(|c| C64::new((2.0 * PI * c[0]).sin() + c[2], c[1] * c[3]));
        let back = sp.backward(&sp.forward(&f));
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn laplacian_of_cosine() {
        // d_1 d_1bar cos(2 pi x^1) = -pi^2 cos(2 pi x^1)
        let grid = TorusGrid::new(1, 8).unwrap();
        let sp = Spectral::new(grid);
        let f = grid.sample(|c| C64::new((2.0 * PI * c[0]).cos(), 0.0));
        let d = sp.dzbar(&sp.dz(&f, 0), 0);
        for (idx, v) in d.iter().enumerate() {
            let x = grid.coords(idx)[0];
            let expect = -PI * PI * (2.0 * PI * x).cos();
            assert!((v - C64::new(expect, 0.0)).norm() < 1e-11, "at x={x}");
        }
    }

    #[test]
    fn mixed_second_derivative_of_diagonal_wave() {
        // phi = sin(2 pi (x^1 + y^1)): d_1bar d_1 phi = -2 pi^2 phi
        let grid = TorusGrid::new(2, 8).unwrap();
        let sp = Spectral::new(grid);
        let phi = grid.sample(|c| C64::new((2.0 * PI * (c[0] + c[1])).sin(), 0.0));
        let h = sp.i_ddbar(&phi);
        for (idx, v) in h[0].iter().enumerate() {
            let c = grid.coords(idx);
            let expect = -2.0 * PI * PI * (2.0 * PI * (c[0] + c[1])).sin();
            assert!((v - C64::new(expect, 0.0)).norm() < 1e-10);
        }
        // no dependence on z^2: those components vanish
        assert!(h[3].iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn holomorphic_derivative_phase() {
        // f = exp(2 pi i x^1): d_1 f = pi i f, d_1bar f = pi i f
        let grid = TorusGrid::new(1, 8).unwrap();
        let sp = Spectral::new(grid);
        let f = grid.sample(|c| (C64::new(0.0, 2.0 * PI * c[0])).exp());
        let dz = sp.dz(&f, 0);
        let dzb = sp.dzbar(&f, 0);
        for idx in 0..grid.total {
            let expect = f[idx] * C64::new(0.0, PI);
            assert!((dz[idx] - expect).norm() < 1e-11);
            assert!((dzb[idx] - expect).norm() < 1e-11);
        }
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = std::env::temp_dir().join("bflw_snap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bflw");
        let a: Vec<C64> = (0..10).map(|i| C64::new(i as f64, -0.5 * i as f64)).collect();
        let b: Vec<C64> = (0..4).map(|i| C64::new(0.0, i as f64)).collect();
        write_snapshot(&path, 2, 4, &[("g_00", &a), ("phi", &b)]).unwrap();
        let snap = read_snapshot(&path).unwrap();
        assert_eq!((snap.n, snap.m), (2, 4));
        assert_eq!(snap.fields.len(), 2);
        assert_eq!(snap.fields[0].0, "g_00");
        assert_eq!(snap.fields[0].1, a);
        assert_eq!(snap.fields[1].1, b);
    }

    #[test]
    fn mean_is_exact_for_trig_mode() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let f = grid.sample(|c| C64::new(1.5 + (2.0 * PI * c[1]).cos(), 0.0));
        assert!((grid.mean(&f) - C64::new(1.5, 0.0)).norm() < 1e-14);
    }
}
