//! Finite-difference audit of every differentiable module.
//!
//! Rebuilds each module family on random shapes and compares analytic
//! gradients against central differences, then runs a deliberately broken
//! backward as a negative control to prove the comparison has teeth.

use artnet::harness::{gradcheck, negative_control, HarnessError};
use std::time::Instant;

fn main() -> Result<(), HarnessError> {
    let mut args = std::env::args().skip(1);
    let instances: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(41);
    let start = Instant::now();
    let reports = gradcheck(instances, seed)?;
    let mut all_ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} {:>2} instances  max rel err {:.3e}  (tol {:.0e})  {}",
            r.module, r.instances, r.max_rel_err, r.tol, status
        );
        all_ok &= r.passed();
    }
    let control = negative_control()?;
    println!("negative control (corrupted backward): max rel err {control:.3e}");
    println!("elapsed: {:.1?}", start.elapsed());
    if !all_ok || control < 1e-2 {
        std::process::exit(2);
    }
    Ok(())
}
