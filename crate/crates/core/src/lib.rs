pub mod autodiff;
pub mod blurcompose;
pub mod cli;
pub mod config;
pub mod liegroup;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod motionmodel;
pub mod neuralode;
mod nn;
pub mod scenegen;
pub mod splatter;
