//! Runs named checks, catching panics, and prints one PASS/FAIL line each.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Criteria selected through `ACCEPTANCE_ONLY=1,5,8`; all when unset.
pub fn selected(id: u32) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) if !list.trim().is_empty() => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        _ => true,
    }
}

#[derive(Default)]
pub struct Suite {
    pub outcomes: Vec<Outcome>,
}

impl Suite {
    /// `check` returns a summary on success and panics or errs on failure.
    pub fn run(&mut self, id: u32, name: &'static str, check: impl FnOnce() -> Result<String, String>) {
        if !selected(id) {
            return;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let seconds = start.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(Ok(d)) => (true, d),
            Ok(Err(d)) => (false, d),
            Err(p) => (false, panic_message(p)),
        };
        println!("{} criterion {id:>2} {name}: {detail} ({seconds:.1}s)", if passed { "PASS" } else { "FAIL" });
        self.outcomes.push(Outcome { id, name, passed, detail, seconds });
    }

    pub fn failures(&self) -> Vec<&Outcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

/// `Err(msg)` unless `cond`.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
