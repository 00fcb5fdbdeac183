//! Pointwise (p,q)-form algebra: wedge powers of the metric form, the closed
//! form Hodge star on (n-1,n-1)-forms, and the trace/contraction identities
//! that the library verifies at runtime.
//!
//! Run: cargo run --release --example hodge_star_forms

use bflow::bruteforce::contraction_via_top_form_fast;
use bflow::forms::{
    contract_against_omega_power, hodge_star_n1n1, omega_pow, star_alpha_wedge, trace_pp,
    HermitianMetric, PQForm,
};
use bflow::linalg::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_metric(n: usize, rng: &mut ChaCha8Rng) -> HermitianMetric {
    // g = I + 0.3 (B + B^H)/2 with random complex B: Hermitian, positive
    let mut g = vec![C64::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            let v = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            g[r * n + c] += 0.15 * v;
            g[c * n + r] += 0.15 * v.conj();
        }
        g[r * n + r] += C64::new(1.0, 0.0);
    }
    HermitianMetric::new(n, g).expect("positive definite")
}

fn random_11(n: usize, rng: &mut ChaCha8Rng) -> PQForm {
    // a real (1,1)-form: coefficients i a_{kbar j} with a Hermitian
    let mut a = PQForm::zero(n, 1, 1);
    for k in 0..n {
        for j in k..n {
            let v = if j == k {
                C64::new(0.0, rng.gen::<f64>() - 0.5)
            } else {
                C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            };
            a.set(&[k], &[j], v);
            a.set(&[j], &[k], -v.conj());
        }
    }
    a
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for n in [3usize, 4, 5] {
        let g = random_metric(n, &mut rng);
        let om_n2 = omega_pow(&g, n - 2).unwrap();

        // star(alpha ^ omega^{n-2}) = (n-2)! [ (tr alpha) omega - alpha ]
        let alpha = random_11(n, &mut rng);
        let wedged = bflow::forms::wedge(&alpha, &om_n2).unwrap();
        let star = star_alpha_wedge(&alpha, &g).unwrap();
        let direct = hodge_star_n1n1(&wedged, &g).unwrap();
        let star_err = star.sub(&direct).max_norm() / star.max_norm();

        // full contraction of a (2,2)-form: metric contraction vs the
        // independent route through the top form
        let theta = bflow::forms::wedge(&alpha, &alpha).unwrap();
        let contracted = contract_against_omega_power(&theta, &g).unwrap();
        let via_top = contraction_via_top_form_fast(&theta, &g).unwrap();
        let contract_err = (contracted - via_top).norm() / via_top.norm().max(1e-30);

        // single trace of a (1,1) against the metric
        let tr = trace_pp(&alpha, &g).unwrap();

        // volume form: omega^n at distinct holomorphic/antiholomorphic indices
        // equals i^n (-1)^{n(n-1)/2} n! det g
        let om_n = omega_pow(&g, n).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let om_top = om_n.get(&idx, &idx);
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        let phase = bflow::forms::ipow(n as i64 + (n * (n - 1)) as i64); // i^n (i^2)^{n(n-1)/2}
        let expect = phase * fact * g.det();
        let top_err = (om_top - expect).norm() / expect.norm();

        println!("n = {n}");
        println!("  star(alpha ^ omega^(n-2)) closed form vs direct star: rel err {star_err:.3e}");
        println!("  <alpha^2, omega-powers>: contraction vs top-form route: rel err {contract_err:.3e}");
        println!("  tr_g alpha = {:.6} + {:.6}i", tr.re, tr.im);
        println!("  omega^n vs i^n (-1)^(n(n-1)/2) n! det g:               rel err {top_err:.3e}");
    }
}
