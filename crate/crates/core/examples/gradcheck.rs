//! Finite-difference verification of every differentiable operation.

use synthvlp::trainer::{gradcheck, Suite};

fn main() -> synthvlp::Result<()> {
    let start = std::time::Instant::now();
    let report = gradcheck(&[Suite::All], 0)?;
    print!("{}", report.to_csv());
    println!(
        "{} instances in {:.1?}, passed: {}",
        report.total_instances(),
        start.elapsed(),
        report.passed()
    );
    Ok(())
}
