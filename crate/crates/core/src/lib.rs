pub mod cli;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod scene;
pub mod training;
pub mod types;
