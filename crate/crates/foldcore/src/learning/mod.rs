//! Minimal training stack for the end-to-end experiments.
// (populated after the folding engine)
