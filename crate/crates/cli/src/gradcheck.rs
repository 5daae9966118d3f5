//! The `gradcheck` command: the finite-difference component suite.

use dwinkit_core::autodiff::OpKind;
use dwinkit_core::network::ModelConfig;
use dwinkit_core::verify::{run_suite, SuiteOptions, SuiteReport};
use dwinkit_core::Result;

pub fn run(model: &ModelConfig, fault: Option<OpKind>) -> Result<SuiteReport> {
    let opts = SuiteOptions {
        fault,
        ..SuiteOptions::from_config(model)
    };
    run_suite(&opts)
}

pub fn render(report: &SuiteReport) -> String {
    let mut out = format!("{:<40} {:>7} {:>7} {:>12}  result\n", "component", "tensors", "entries", "max_rel_err");
    for r in &report.rows {
        out.push_str(&format!(
            "{:<40} {:>7} {:>7} {:>12.3e}  {}\n",
            r.component,
            r.tensors,
            r.entries,
            r.max_rel,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    let failed = report.rows.iter().filter(|r| !r.passed).count();
    out.push_str(&format!(
        "{} of {} components pass at threshold {:e}\n",
        report.rows.len() - failed,
        report.rows.len(),
        report.threshold
    ));
    out
}
