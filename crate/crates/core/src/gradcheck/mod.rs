//! Finite-difference verification of the analytic gradients.

mod harness;
mod suites;

pub use harness::{check_function, check_tape, numeric_gradient, relative_error, CheckResult, REL_FLOOR, STEP};
pub use suites::{
    model_check, module_suite, op_cases, op_suite, run_case, run_suite, tiny_spec, OpCase, Scope, DEFAULT_DRAWS,
    MODEL_TOLERANCE, OP_TOLERANCE,
};
