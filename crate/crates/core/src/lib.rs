pub mod augment;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod diversity;
pub mod fewshot;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod verify;
