//! The randomized identity suite: every closed-form identity the library
//! relies on (Hodge star formulas, contractions, torsion wedge traces,
//! curvature relations) checked against slow brute-force oracles on random
//! band-limited data. This is what `bflw verify-identities` runs.
//!
//! Run: cargo run --release --example identity_sweep

use bflow::driver::cmd_verify_identities;

fn main() {
    let report = cmd_verify_identities(7, &[3, 4], 10, &[]).unwrap();
    print!("{}", report.render());
    println!(
        "overall: {}",
        if report.all_passed() { "all identities hold" } else { "FAILURES present" }
    );
}
