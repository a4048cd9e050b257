pub mod cli;
pub mod controller;
pub mod costmodel;
pub mod evaluators;
pub mod searchspace;
pub mod tensors;
pub mod trainer;
