//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 8 is
//! reported as a warning and never fails the run.

mod mechanics;
mod oracles;
mod pipeline;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub type Outcome = Result<String, String>;

/// Fail the enclosing criterion with a formatted message.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // NaN comparisons are false, so they fail
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

enum Gate {
    Hard,
    Soft,
}

fn run(n: usize, name: &str, gate: Gate, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match (&outcome, gate) {
        (Ok(detail), _) => println!("[PASS] {n:>2} {name}: {detail} ({secs:.1} s)"),
        (Err(detail), Gate::Hard) => println!("[FAIL] {n:>2} {name}: {detail} ({secs:.1} s)"),
        (Err(detail), Gate::Soft) => {
            println!("[WARN] {n:>2} {name}: {detail} ({secs:.1} s)");
            return true;
        }
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    // libtest-style flags (--nocapture, filters) are accepted and ignored
    let list_only = std::env::args().any(|a| a == "--list");
    if list_only {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= run(1, "loss oracles", Gate::Hard, oracles::loss_oracles);
    ok &= run(2, "boundary collapses", Gate::Hard, oracles::boundary_collapses);
    ok &= run(3, "gradient check", Gate::Hard, oracles::gradient_check);
    ok &= run(4, "momentum contrast mechanics", Gate::Hard, mechanics::moco_mechanics);
    ok &= run(5, "k-means", Gate::Hard, mechanics::kmeans);
    ok &= run(6, "kNN monitor", Gate::Hard, mechanics::knn);
    let desk = pipeline::DeskResults::collect();
    ok &= run(7, "desk learning signal", Gate::Hard, || desk.learning_signal());
    ok &= run(8, "strategy ordering", Gate::Soft, || desk.trend());
    ok &= run(9, "determinism and resume", Gate::Hard, pipeline::determinism);
    ok &= run(10, "dataset invariants", Gate::Hard, || pipeline::dataset_invariants(&desk.build));
    let _ = std::panic::take_hook();
    if ok {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some hard criteria failed");
        ExitCode::FAILURE
    }
}
