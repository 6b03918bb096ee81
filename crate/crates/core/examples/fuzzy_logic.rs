//! The three fuzzy logics on small vectors, then the law suite at scale.
//!
//!     cargo run --release --example fuzzy_logic

use fuzzqe::fuzzy::{fold_conj, fold_disj, negate, tconorm, tnorm};
use fuzzqe::verify::logic_laws;
use fuzzqe::{FuzzyVec, Logic};

fn show(v: &FuzzyVec) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn main() -> anyhow::Result<()> {
    let a = FuzzyVec::new(vec![0.9, 0.5, 0.2, 1.0])?;
    let b = FuzzyVec::new(vec![0.6, 0.5, 0.7, 0.0])?;
    let c = FuzzyVec::new(vec![0.3, 1.0, 0.4, 0.8])?;
    println!("a = {}\nb = {}\n¬a = {}", show(&a), show(&b), show(&negate(&a)));
    for logic in Logic::ALL {
        println!("{:>11}: a∧b = {}  a∨b = {}", logic.to_string(), show(&tnorm(logic, &a, &b)?), show(&tconorm(logic, &a, &b)?));
    }
    let three = [a.clone(), b.clone(), c];
    println!("product ∧(a,b,c) = {}", show(&fold_conj(Logic::Product, &three)?));
    println!("gödel   ∨(a,b,c) = {}", show(&fold_disj(Logic::Godel, &three)?));

    print!("{}", logic_laws(&[Logic::Product, Logic::Godel], 10_000, 16, 0));
    Ok(())
}
