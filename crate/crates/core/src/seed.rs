//! Seed derivation and the portable sampling primitives every module draws from.
//!
//! All randomness comes from ChaCha20 streams. A stream for a given purpose is
//! keyed by `derive(root, role, id, round)`, where each input is folded in with
//! the SplitMix64 finalizer:
//!
//! ```text
//! h = splitmix(root ^ K0); h = splitmix(h ^ role); h = splitmix(h ^ id); h = splitmix(h ^ round)
//! ```
//!
//! Uniforms are built from the top 53 bits of `next_u64`, so the sampled
//! values depend only on the ChaCha keystream and not on `rand` internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type Stream = ChaCha20Rng;

/// What a derived stream is used for. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Dataset = 1,
    Split = 2,
    Partition = 3,
    Init = 4,
    ClientTrain = 5,
    ClientNoise = 6,
    ServerNoise = 7,
    Selection = 8,
    Transport = 9,
    AttackSample = 10,
    AttackInit = 11,
}

const K0: u64 = 0x4644_5031_5345_4544; // "FDP1SEED"

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, role: Role, id: u64, round: u64) -> u64 {
    let mut h = splitmix(root ^ K0);
    h = splitmix(h ^ role as u64);
    h = splitmix(h ^ id);
    splitmix(h ^ round)
}

pub fn stream(seed: u64) -> Stream {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn derived_stream(root: u64, role: Role, id: u64, round: u64) -> Stream {
    stream(derive(root, role, id, round))
}

/// Uniform on `[0, 1)` with 53 bits of resolution.
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on `(0, 1)`.
pub fn uniform_open<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal pairs via Box–Muller:
/// `r = sqrt(-2 ln u1)`, `z0 = r cos(2π u2)`, `z1 = r sin(2π u2)` with
/// `u1 ∈ (0,1)` drawn first and `u2 ∈ [0,1)` second.
pub fn standard_normal_pair<R: RngCore + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = uniform_open(rng);
    let u2 = uniform(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// `n` standard normals; pairs are consumed in order and the odd tail drops
/// its second value.
pub fn standard_normals<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let (a, b) = standard_normal_pair(rng);
        out.push(a);
        out.push(b);
    }
    out.truncate(n);
    out
}
