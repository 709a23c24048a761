//! Activity-diagram virtual machine.
//!
//! Parses a textual diagram format into a static model, validates it against
//! the structural rules of the supported subset, compiles it into a runtime
//! of queues, paths, and push/pull token engines, and executes it under a
//! deterministic reaction scheduler while emitting a structured event trace.
//! A separate reference interpreter implements token-offer semantics so that
//! essential event traces of both machines can be cross-checked.

pub mod behavior;
pub mod compile;
pub mod expr;
pub mod generate;
pub mod machine;
pub mod model;
pub mod oracle;
pub mod parse;
pub mod rng;
pub mod trace;
pub mod validate;
pub mod value;

pub use behavior::{BehaviorRegistry, StubSpec};
pub use compile::dump_runtime;
pub use expr::{eval_guard, eval_join_criteria, parse_expr, Binding, Expr};
pub use machine::Machine;
pub use model::{ActivityModel, Program};
pub use parse::{parse_program, render_program};
pub use trace::{compare_essential_traces, RunResult, RunStatus, TraceEvent};
pub use validate::{validate, validate_program, ValidationReport};
