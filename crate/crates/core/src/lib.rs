pub mod grad;
pub mod dsp;
pub mod text;
pub mod model;
pub mod corpus;
pub mod trainer;
pub mod synth;
