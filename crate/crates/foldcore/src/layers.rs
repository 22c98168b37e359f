//! Canonical folded layers used by the CLI, diagnostics, and tests.
// (populated after the solver modules)
