//! C ABI for foldcore (populated after the core crate).
