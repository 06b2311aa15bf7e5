//! Federated training with clipped, noised client updates.
//!
//! Clients train a small segmentation model on private shards, clip and
//! perturb their parameter deltas, and upload them over a simulated
//! transport; the server averages the deltas into the next global model.
//! A gradient-inversion harness measures how much of a client's input can be
//! recovered from a single upload.

pub mod attack;
pub mod client;
pub mod dp;
pub mod experiment;
pub mod learn;
pub mod net;
pub mod params;
pub mod seed;
pub mod server;
