pub mod cli;
pub mod config;
pub mod control;
pub mod eval;
pub mod finetune;
pub mod nn;
pub mod perception;
pub mod render;
pub mod sim;
