pub mod branch;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod tensor;
pub mod training;
