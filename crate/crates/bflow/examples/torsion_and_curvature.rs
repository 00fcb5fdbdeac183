//! Torsion, Lee form, Ricci contractions and the conformally balanced
//! condition for Hermitian metric fields on a flat complex 3-torus.
//!
//! Builds a Kahler metric chi = I + i ddbar(psi), lifts it to
//! omega = (det chi)^{1/(n-2)} chi, and shows that the lift is conformally
//! balanced while a generic conformal rescaling of the flat metric is not.
//!
//! Run: cargo run --release --example torsion_and_curvature

use bflow::anomaly::{ansatz_lift, ansatz_residual, dilaton_functional};
use bflow::geometry::Geometry;
use bflow::linalg::C64;
use bflow::torus::{MetricField, Spectral, TorusGrid};
use std::f64::consts::PI;

fn main() {
    let n = 3usize;
    let grid = TorusGrid::new(n, 8).unwrap();
    let sp = Spectral::new(grid);

    // Kahler potential perturbation of the flat metric
    let psi = grid.sample(|u| C64::new(0.02 * (2.0 * PI * u[0]).sin(), 0.0));
    let h = sp.i_ddbar(&psi);
    let mut chi = MetricField::identity(grid);
    for (c, d) in chi.comps.iter_mut().zip(&h) {
        for (v, w) in c.iter_mut().zip(d) {
            *v += *w;
        }
    }

    let omega = ansatz_lift(&chi).unwrap();
    println!("ansatz residual sup |  ||Omega||_omega omega^(n-1) - chi^(n-1) |  = {:.3e}",
        ansatz_residual(&omega, &chi).unwrap());
    println!("dilaton functional M(omega) = {:.6}", dilaton_functional(&omega).unwrap());

    let geo = Geometry::new(&sp, &omega).unwrap();
    let tor = geo.torsion();
    let sup_t: f64 = tor.t_norm_sq.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
    println!("lifted omega:  sup |T|        = {sup_t:.3e}");
    println!("lifted omega:  lee-form check = {:.3e}  (conformally balanced: ~0)",
        geo.lee_form_residual(&tor));
    println!("lifted omega:  d(||Omega|| omega^(n-1)) residual = {:.3e}",
        geo.conf_balanced_residual().unwrap());

    // Ricci contractions of the lifted metric
    let rt = geo.ricci_tilde_field();
    let sup_rt = rt
        .iter()
        .flat_map(|c| c.iter())
        .map(|v| v.norm())
        .fold(0.0f64, f64::max);
    println!("lifted omega:  sup |Ricci~|   = {sup_rt:.3e}");

    // a conformal rescaling of the flat metric is NOT conformally balanced
    let conf = MetricField::from_components(
        grid,
        {
            let scale: Vec<C64> = psi.iter().map(|p| C64::new((0.5 * p.re).exp(), 0.0)).collect();
            let mut comps = vec![vec![C64::new(0.0, 0.0); grid.total]; n * n];
            for d in 0..n {
                comps[d * n + d] = scale.clone();
            }
            comps
        },
    )
    .unwrap();
    let geo2 = Geometry::new(&sp, &conf).unwrap();
    let tor2 = geo2.torsion();
    println!("conformal e^psi I: lee-form check = {:.3e}  (not balanced: > 0)",
        geo2.lee_form_residual(&tor2));
}
