pub mod binarize;
pub mod evaluate;
pub mod extract;
pub mod split;
pub mod synth;
pub mod train;
