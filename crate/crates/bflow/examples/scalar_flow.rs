//! The scalar parabolic flow d phi/dt = e^{-f} det(chi_hat + i ddbar phi) /
//! det(chi_hat) on a complex 2-torus, stepped with adaptive RK4 until the
//! speed field is uniform: the limit solves a Monge-Ampere equation and the
//! limiting metric has constant determinant.
//!
//! Run: cargo run --release --example scalar_flow

use bflow::driver::ExperimentSpec;
use bflow::flow::{ConvergenceMonitor, Flow, FlowStatus};
use bflow::linalg::ZERO;
use bflow::torus::{Spectral, TorusGrid};

const CONFIG: &str = r#"
name = "scalar-flow-example"
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
frequency = [1, 0, 0, 0]

[[flow.perturbation]]
amplitude = 0.015
frequency = [0, 1, 1, 0]
"#;

fn main() {
    let spec = ExperimentSpec::from_str(CONFIG).unwrap();
    let grid = TorusGrid::new(spec.flow.n, spec.flow.m).unwrap();
    let sp = Spectral::new(grid);
    let chi_hat = spec.build_chi_hat(&sp).unwrap();
    let flow = Flow::new(&sp, chi_hat, spec.fspec(), spec.flow_params()).unwrap();

    let mut st = flow.initial_state(vec![ZERO; grid.total]).unwrap();
    let mut monitor = ConvergenceMonitor::new();
    println!("{:>8} {:>10} {:>13} {:>13} {:>13}", "step", "t", "dt", "uniformity", "osc(phi)");
    let mut steps = 0usize;
    loop {
        if st.t >= spec.flow.max_t {
            println!("hit max_t before convergence");
            break;
        }
        st = flow.step(&st).unwrap();
        steps += 1;
        let status = monitor.observe(&flow, &st);
        if steps % 50 == 0 {
            println!(
                "{steps:>8} {:>10.4} {:>13.3e} {:>13.3e} {:>13.3e}",
                st.t,
                st.dt,
                st.speed_uniformity(),
                st.osc_phi()
            );
        }
        if let FlowStatus::Converged { speed_uniformity, phi_rate } = status {
            println!(
                "converged at t = {:.4} after {steps} steps: speed uniformity {speed_uniformity:.3e}, potential drift {phi_rate:.3e}/unit time",
                st.t
            );
            break;
        }
    }
    println!(
        "speed range at the end: [{:.12}, {:.12}]",
        st.inf_speed(),
        st.sup_speed()
    );
}
