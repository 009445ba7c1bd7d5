pub mod nn;
pub mod data;
pub mod seed;
pub mod codec;
pub mod checkpoint;
pub mod stdp;
pub mod autoencoder;
pub mod encoding;
pub mod cpc;
pub mod experiment;
