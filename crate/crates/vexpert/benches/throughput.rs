//! Placeholder bench; filled in once the training path exists.
fn main() {}
