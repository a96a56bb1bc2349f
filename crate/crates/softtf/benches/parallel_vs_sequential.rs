//! Placeholder bench; filled in once the evaluation paths exist.

fn main() {}
