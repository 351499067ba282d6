//! Finite-difference checks of the primitives, the spectral decompositions and
//! every loss term.

use geoslot::gradsuite::{loss_suite, primitive_suite, spectral_suite, LOSS_TOL};

fn main() -> geoslot::Result<()> {
    let mut results = primitive_suite(360, 1)?;
    results.extend(spectral_suite(20, 1)?);
    results.extend(loss_suite(LOSS_TOL, 4, 1)?);
    for r in &results {
        println!("{:<20} {:>4} checks  max rel err {:.2e}  (tol {:.0e})", r.name, r.checks, r.max_rel_err, r.tol);
    }
    println!("all passed: {}", results.iter().all(|r| r.passed()));
    Ok(())
}
