//! All self-verification suites with their reports.
//!
//!     cargo run --release --example verify_suites

use fuzzqe::verify::{gradcheck_suite, logic_laws, oracle_agreement, score_laws};
use fuzzqe::Logic;

fn main() {
    let reports = [
        logic_laws(&Logic::ALL, 2_000, 16, 0),
        score_laws(200, 0),
        gradcheck_suite(0, 1e-4),
        oracle_agreement(5, 28, 0),
    ];
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} of {} suites passed", reports.len() - failed, reports.len());
    std::process::exit(i32::from(failed > 0));
}
