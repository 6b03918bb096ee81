//! Self-verification suites: fuzzy-logic laws, score-level propositions,
//! finite-difference gradient checks and oracle agreement.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fuzzy::{negate, tconorm, tnorm, FuzzyVec, Logic};
use crate::gen::sample_structure_instance;
use crate::grad::{grad_check, Example, GradCheckOptions, LossConfig};
use crate::kg::GraphView;
use crate::model::{embed_node, entity_embedding, score, Activation, ModelConfig, NormMode, Parameters};
use crate::oracle::{answer_query, indicator, symbolic_fuzzy_eval};
use crate::query::{QueryNode, Structure};
use crate::synth::random_kg;

/// Outcome of one named check within a suite.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Check {
    pub cases: u64,
    pub violations: u64,
    /// Largest observed error for tolerance-based checks.
    pub max_error: f64,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: BTreeMap<String, Check>,
    /// Ungated measurements shown alongside the checks.
    pub notes: BTreeMap<String, f64>,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self { name, checks: BTreeMap::new(), notes: BTreeMap::new(), elapsed: Duration::ZERO }
    }

    fn record(&mut self, check: &str, ok: bool, detail: impl FnOnce() -> String) {
        let c = self.checks.entry(check.to_string()).or_default();
        c.cases += 1;
        if !ok {
            c.violations += 1;
            if c.first_violation.is_none() {
                c.first_violation = Some(detail());
            }
        }
    }

    fn record_error(&mut self, check: &str, err: f64, tol: f64, detail: impl FnOnce() -> String) {
        self.record(check, err <= tol, detail);
        let c = self.checks.get_mut(check).expect("just recorded");
        c.max_error = c.max_error.max(err);
    }

    pub fn violations(&self) -> u64 {
        self.checks.values().map(|c| c.violations).sum()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0 && !self.checks.is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.checks.values().map(|c| c.max_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({:.2?}): {}", self.name, self.elapsed, if self.passed() { "PASS" } else { "FAIL" })?;
        for (name, c) in &self.checks {
            write!(f, "  {name:<32} {:>8} cases {:>5} violations", c.cases, c.violations)?;
            if c.max_error > 0.0 {
                write!(f, "  max err {:.3e}", c.max_error)?;
            }
            writeln!(f)?;
            if let Some(v) = &c.first_violation {
                writeln!(f, "    first violation: {v}")?;
            }
        }
        for (name, v) in &self.notes {
            if v.fract() == 0.0 {
                writeln!(f, "  note: {name} {v}")?;
            } else {
                writeln!(f, "  note: {name} {v:.3e}")?;
            }
        }
        Ok(())
    }
}

fn random_fuzzy<R: Rng>(rng: &mut R, d: usize) -> FuzzyVec {
    // Mix in exact 0, 1 and ½ so boundary cases get exercised.
    let v = (0..d)
        .map(|_| match rng.gen_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            2 => 0.5,
            _ => rng.gen::<f64>(),
        })
        .collect();
    FuzzyVec::new(v).expect("values in [0, 1]")
}

fn bits(v: &FuzzyVec) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Table-1 laws of the t-norm / t-conorm pair on random vector triples.
pub fn logic_laws(logics: &[Logic], triples: usize, d: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("logic laws");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = FuzzyVec::universe(d);
    let zero = FuzzyVec::empty(d);
    for &logic in logics {
        let name = |law: &str| format!("{logic}/{law}");
        let assoc_tol = if logic == Logic::Godel { 0.0 } else { 1e-12 };
        for _ in 0..triples {
            let (a, b, c) = (random_fuzzy(&mut rng, d), random_fuzzy(&mut rng, d), random_fuzzy(&mut rng, d));
            let t = |x: &FuzzyVec, y: &FuzzyVec| tnorm(logic, x, y).expect("same dim");
            let s = |x: &FuzzyVec, y: &FuzzyVec| tconorm(logic, x, y).expect("same dim");
            let show = || format!("a={:?} b={:?} c={:?}", a.as_slice(), b.as_slice(), c.as_slice());

            let (tab, sab) = (t(&a, &b), s(&a, &b));
            rep.record(&name("commutativity"), bits(&tab) == bits(&t(&b, &a)) && bits(&sab) == bits(&s(&b, &a)), show);
            let e1 = max_abs_diff(&t(&tab, &c), &t(&a, &t(&b, &c)));
            let e2 = max_abs_diff(&s(&sab, &c), &s(&a, &s(&b, &c)));
            rep.record_error(&name("associativity"), e1.max(e2), assoc_tol, show);
            let elim = (0..d).all(|i| tab[i] <= a[i].min(b[i]));
            rep.record(&name("conjunction elimination"), elim, show);
            let amp = (0..d).all(|i| sab[i] >= a[i].max(b[i]));
            rep.record(&name("disjunction amplification"), amp, show);
            let dm1 = max_abs_diff(&negate(&tab), &s(&negate(&a), &negate(&b)));
            let dm2 = max_abs_diff(&negate(&sab), &t(&negate(&a), &negate(&b)));
            rep.record_error(&name("de morgan"), dm1.max(dm2), 1e-12, show);
            let boundary = bits(&t(&a, &one)) == bits(&a)
                && bits(&t(&a, &zero)) == bits(&zero)
                && bits(&s(&a, &zero)) == bits(&a)
                && bits(&s(&a, &one)) == bits(&one);
            rep.record(&name("boundary"), boundary, show);
            let bigger = FuzzyVec::new(a.iter().zip(c.iter()).map(|(x, y)| x.max(*y)).collect()).expect("unit");
            let (tb, sb) = (t(&bigger, &b), s(&bigger, &b));
            let mono = (0..d).all(|i| tab[i] <= tb[i] && sab[i] <= sb[i]);
            rep.record(&name("monotonicity"), mono, show);
            rep.record(&name("involution"), bits(&negate(&negate(&a))) == bits(&a), show);
        }
    }
    rep.elapsed = start.elapsed();
    rep
}

/// Random model configurations used by the score-level and gradient suites.
fn model_modes() -> Vec<(Activation, NormMode)> {
    let mut out = Vec::new();
    for g in [Activation::Logistic, Activation::BoundedRectifier] {
        for n in [NormMode::L1, NormMode::L2] {
            out.push((g, n));
        }
    }
    out
}

/// Propositions on scores: conjunction lowers, disjunction raises, double
/// negation is exact and `φ(q) + φ(¬q) = ‖p_e‖₁`.
pub fn score_laws(per_structure: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("score laws");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ne, nr, d) = (20, 4, 8);
    for s in Structure::ALL {
        for i in 0..per_structure {
            let (g, norm) = model_modes()[i % 4];
            let logic = if i % 8 < 4 { Logic::Product } else { Logic::Godel };
            let cfg = ModelConfig { dim: d, num_bases: 2, logic, norm, activation: g, ln_eps: 1e-5 };
            let params = Parameters::init(&cfg, ne, nr, &mut rng);
            let q1 = s.random_query(&mut rng, ne, nr);
            let q2 = Structure::ALL[rng.gen_range(0..14)].random_query(&mut rng, ne, nr);
            let e = rng.gen_range(0..ne) as u32;
            let p = entity_embedding(&params, &cfg, e).expect("in range");
            let phi = |node: &QueryNode| score(&embed_node(&params, &cfg, node).expect("valid"), &p).expect("dim");
            let (n1, n2) = (q1.root().clone(), q2.root().clone());
            let (f1, f2) = (phi(&n1), phi(&n2));
            let and = phi(&QueryNode::and(vec![n1.clone(), n2.clone()]));
            let or = phi(&QueryNode::or(vec![n1.clone(), n2.clone()]));
            let show = || format!("{s} #{i}: q1={q1} q2={q2} e={e} logic={logic} g={g} norm={norm}");
            let tag = |law: &str| format!("{law} [{s}]");
            rep.record(&tag("conjunction ≤ min"), and <= f1.min(f2), show);
            rep.record(&tag("disjunction ≥ max"), or >= f1.max(f2), show);
            let double = phi(&QueryNode::not(QueryNode::not(n1.clone())));
            rep.record(&tag("double negation bit-exact"), double.to_bits() == f1.to_bits(), show);
            let l1: f64 = p.iter().sum();
            let comp = (f1 + phi(&QueryNode::not(n1)) - l1).abs();
            rep.record_error(&tag("φ(q)+φ(¬q) = ‖p‖₁"), comp, 1e-9, show);
        }
    }
    rep.elapsed = start.elapsed();
    rep
}

/// Central differences vs analytic gradients for every structure on small
/// random models, both activations and both normalizations, Product and Gödel.
pub fn gradcheck_suite(seed: u64, tol: f64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("gradient check");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ne, nr, d) = (20, 4, 8);
    for s in Structure::ALL {
        for (g, norm) in model_modes() {
            for logic in [Logic::Product, Logic::Godel] {
                let cfg = ModelConfig { dim: d, num_bases: 2, logic, norm, activation: g, ln_eps: 1e-5 };
                let params = Parameters::init(&cfg, ne, nr, &mut rng);
                let queries: Vec<_> = (0..2).map(|_| s.random_query(&mut rng, ne, nr)).collect();
                let batch: Vec<Example> = queries
                    .iter()
                    .map(|q| Example {
                        query: q,
                        positive: rng.gen_range(0..ne) as u32,
                        negatives: (0..4).map(|_| rng.gen_range(0..ne) as u32).collect(),
                    })
                    .collect();
                let opts = GradCheckOptions { h: 1e-6, max_per_tensor: None, seed };
                let name = format!("{s} g={g} norm={norm} logic={logic}");
                match grad_check(&params, &cfg, &LossConfig::default(), &batch, &opts) {
                    Ok(r) => {
                        let covered = r.per_tensor.iter().all(|n| *n > 0) && r.checked >= 200;
                        let detail = || format!("{name}: {:?}", r.worst);
                        rep.record_error(&format!("{s}"), r.max_rel_error, tol, detail);
                        rep.record(&format!("{s} coverage"), covered, || {
                            format!("{name}: {} coordinates, per tensor {:?}", r.checked, r.per_tensor)
                        });
                        let c = rep.checks.get_mut(&format!("{s} coverage")).expect("recorded");
                        c.max_error = 0.0;
                        *rep.notes.entry("excluded kink coordinates".into()).or_default() += r.excluded as f64;
                        let plain = rep.notes.entry("plain relative error, before resolution".into()).or_default();
                        *plain = plain.max(r.raw_max_rel_error);
                    }
                    Err(e) => rep.record(&format!("{s}"), false, || format!("{name}: {e}")),
                }
            }
        }
    }
    rep.elapsed = start.elapsed();
    rep
}

/// `symbolic_fuzzy_eval` on crisp inputs must equal the traversal's indicator.
pub fn oracle_agreement(num_kgs: usize, queries_per_kg: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("oracle agreement");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ne, nr) = (50, 4);
    for k in 0..num_kgs {
        let kg = random_kg(ne, nr, 150 + 10 * k, seed.wrapping_add(k as u64)).expect("valid graph");
        for i in 0..queries_per_kg {
            let s = Structure::ALL[(k * queries_per_kg + i) % 14];
            // Alternate answer-first instances with uniformly random ones (often empty).
            let q = if i % 2 == 0 {
                sample_structure_instance(&mut rng, &kg, GraphView::Train, s)
                    .unwrap_or_else(|| s.random_query(&mut rng, ne, nr))
            } else {
                s.random_query(&mut rng, ne, nr)
            };
            let want = indicator(&answer_query(&kg, GraphView::Full, q.root()), ne);
            for logic in [Logic::Product, Logic::Godel] {
                let got = symbolic_fuzzy_eval(&kg, GraphView::Full, q.root(), logic).expect("small graph");
                rep.record(&format!("{logic} [{s}]"), got == want, || format!("kg {k}: {q}"));
            }
        }
    }
    rep.elapsed = start.elapsed();
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(logic_laws(&Logic::ALL, 200, 16, 1).passed());
        assert!(score_laws(8, 2).passed());
        assert!(oracle_agreement(2, 14, 3).passed());
    }

    #[test]
    fn report_counts_violations() {
        let mut r = SuiteReport::new("t");
        r.record("x", true, String::new);
        r.record_error("y", 0.5, 0.1, || "too big".into());
        assert_eq!(r.violations(), 1);
        assert!(!r.passed());
        assert_eq!(r.max_error(), 0.5);
        assert!(r.to_string().contains("first violation: too big"));
    }
}
