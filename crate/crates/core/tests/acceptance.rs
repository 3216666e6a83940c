//! Runs every acceptance criterion and prints one line each. Built without the
//! libtest harness so the lines are never captured.

use std::process::ExitCode;

use gdnls::acceptance::{Suite, SuiteOptions};

fn main() -> ExitCode {
    let suite = Suite::new(SuiteOptions::default());
    let outcomes = suite.run_all();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
