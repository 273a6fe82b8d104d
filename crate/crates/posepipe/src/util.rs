//! Seed derivation and deterministic sampling helpers.
//!
//! Every random decision in the pipeline flows from an explicit u64 seed
//! through ChaCha8 streams, so identical seeds reproduce identical bytes
//! regardless of worker count or invocation order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Stable across platforms and releases.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed, a domain label,
/// and an index. Used to give every sample / frame / job its own stream.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(domain.wrapping_add(0x517c_c1b7_2722_0a95)) ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Domain labels for [`derive_seed`].
pub mod domains {
    pub const DATA_SAMPLE: u64 = 1;
    pub const INIT_PARAMS: u64 = 2;
    pub const TRAIN_LOOP: u64 = 3;
    pub const SAMPLE_FRAME: u64 = 4;
    pub const CODEC_MIX: u64 = 5;
}

/// One standard-normal draw via Box-Muller. Uses a cached second value so
/// consecutive calls consume the stream in a fixed pattern.
pub struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, spare: None }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(rng_from(seed))
    }

    pub fn next_f64(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        // Box-Muller on (0,1] uniforms; u1 > 0 guaranteed by the 1-u trick.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}
