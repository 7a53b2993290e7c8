pub mod tensor;
pub mod segnet;
pub mod density;
pub mod divergence;
pub mod datagen;
pub mod seed;
pub mod stats;
pub mod trainer;
pub mod eval;
pub mod gradsuite;
pub mod preset;
