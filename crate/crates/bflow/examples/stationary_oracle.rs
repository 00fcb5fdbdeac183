//! Newton-Krylov solve of the stationary Monge-Ampere equation
//! e^{-f} det(chi_hat + i ddbar phi) / det(chi_hat) = c, and cross-validation
//! against the limit of the time-dependent flow: two independent code paths
//! reaching the same potential.
//!
//! Run: cargo run --release --example stationary_oracle

use bflow::driver::ExperimentSpec;
use bflow::flow::{cy_oracle, ConvergenceMonitor, Flow, FlowStatus};
use bflow::linalg::ZERO;
use bflow::torus::{Spectral, TorusGrid};

const CONFIG: &str = r#"
name = "oracle-example"
seed = 1
lift = false
oracle_compare = false
identities = []

[flow]
n = 2
m = 8
f = "derived"
tol_speed = 1e-10
tol_phi_rate = 1e-9
max_t = 10.0

[[flow.perturbation]]
amplitude = 0.02
frequency = [1, 1, 0, 0]
"#;

fn main() {
    let spec = ExperimentSpec::from_str(CONFIG).unwrap();
    let grid = TorusGrid::new(spec.flow.n, spec.flow.m).unwrap();
    let sp = Spectral::new(grid);
    let chi_hat = spec.build_chi_hat(&sp).unwrap();
    let flow = Flow::new(&sp, chi_hat, spec.fspec(), spec.flow_params()).unwrap();

    // independent stationary solve
    let sol = cy_oracle(&flow, 1e-12).unwrap();
    println!("Newton iterations and sup residuals:");
    for (i, r) in sol.residual_history.iter().enumerate() {
        println!("  iter {i}: {r:.3e}");
    }
    println!("constant speed c = {:.12}", sol.c);

    // flow limit
    let mut st = flow.initial_state(vec![ZERO; grid.total]).unwrap();
    let mut monitor = ConvergenceMonitor::new();
    while st.t < spec.flow.max_t {
        st = flow.step(&st).unwrap();
        if let FlowStatus::Converged { .. } = monitor.observe(&flow, &st) {
            break;
        }
    }

    let a = flow.normalize(&st.phi);
    let b = flow.normalize(&sol.phi);
    let gap = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0f64, f64::max);
    println!("flow limit reached at t = {:.4}", st.t);
    println!("sup |phi_flow - phi_oracle| (both mean-normalized) = {gap:.3e}");
}
