// Runs the finite-difference gradient suite over every differentiable
// operator and loss.

use frontier_ssc::nn::suite::{gradient_suite, SUITE_TOLERANCE};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let entries = gradient_suite(0)?;
    let mut worst = 0.0f64;
    for e in &entries {
        worst = worst.max(e.check.max_rel_error);
        if !e.passed() {
            println!("FAIL {} wrt {} {:?}: {:.2e}", e.op, e.wrt, e.shape, e.check.max_rel_error);
        }
    }
    println!("{} checks, worst relative error {worst:.2e} (tolerance {SUITE_TOLERANCE:.0e})", entries.len());
    if entries.iter().all(|e| e.passed()) {
        Ok(())
    } else {
        Err("gradient suite reported failures".into())
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
