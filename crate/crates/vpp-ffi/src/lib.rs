//! C ABI surface for the video patch pruning pipeline (placeholder while the
//! core crate is under construction).
