//! Finite-difference checks of every differentiable operation and of the
//! whole model, the same suite `mrff verify` starts with.
//!
//! cargo run --release --example gradient_check

use mrff::cli::verify::{gradient_suite, GRAD_TOL};

fn main() {
    let checks = gradient_suite();
    for c in &checks {
        println!("{:<28} {:>10.2e}  {}", c.name, c.metric.unwrap_or(f64::NAN), if c.passed { "ok" } else { "FAIL" });
    }
    let bad = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks against tolerance {GRAD_TOL:e}, {bad} failed", checks.len());
    if bad > 0 {
        std::process::exit(1);
    }
}
