//! Central-difference gradient checks of every differentiable operation
//! and of small transformer and CNN models.
//!
//! cargo run --release --example gradient_check

fn main() -> cthgr::Result<()> {
    let mut failed = 0;
    for c in cthgr::selftest::gradient_suite()? {
        let r = &c.report;
        println!("{:<26} {:>4} inputs  max rel {:.2e}  {}", c.name, r.checked, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
