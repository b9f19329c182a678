//! Counter-based deterministic random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(global seed, purpose, round, element, step)`. Streams are stateless to
//! construct, so chains for different batch elements can be evaluated in any
//! order and still produce identical results.

/// What a stream is used for. Keeps independent consumers of the same global
/// seed from colliding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ParamInit = 1,
    DataGen = 2,
    Shuffle = 3,
    PriorInit = 4,
    PriorNoise = 5,
    PosteriorInit = 6,
    PosteriorNoise = 7,
    ReparamPrior = 8,
    ReparamPosterior = 9,
    PredictPrior = 10,
    PredictNoise = 11,
    PredictReparam = 12,
    Test = 13,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A deterministic stream of draws for one key.
#[derive(Clone, Debug)]
pub struct Stream {
    state: u64,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, purpose: Purpose, round: u64, element: u64, step: u64) -> Self {
        let mut h = splitmix(seed ^ GOLDEN);
        for v in [purpose as u64, round, element, step] {
            h = splitmix(h ^ v.wrapping_mul(GOLDEN));
        }
        Self { state: h, spare_normal: None }
    }

    /// Stream keyed by a name instead of numeric indices (parameter init).
    pub fn named(seed: u64, purpose: Purpose, name: &str) -> Self {
        let mut h = splitmix(seed ^ GOLDEN);
        h = splitmix(h ^ (purpose as u64).wrapping_mul(GOLDEN));
        for b in name.as_bytes() {
            h = splitmix(h ^ (*b as u64).wrapping_mul(GOLDEN));
        }
        Self { state: h, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo is fine here: n is tiny relative to 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Per-(chain, step) noise for Langevin samplers. Implementations must be
/// pure functions of the indices so evaluation order cannot matter.
pub trait LangevinNoise {
    fn fill(&self, chain: usize, step: usize, out: &mut [f64]);
}

/// Unit Gaussian noise from the counter-based streams.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
    /// Offset added to the chain index; lets callers give each batch element
    /// a globally unique chain id.
    pub chain_base: u64,
}

impl LangevinNoise for GaussianNoise {
    fn fill(&self, chain: usize, step: usize, out: &mut [f64]) {
        Stream::new(self.seed, self.purpose, self.round, self.chain_base + chain as u64, step as u64)
            .fill_normal(out);
    }
}

/// Gaussian noise where each chain carries an arbitrary identity (e.g. the
/// dataset index of the sample it belongs to), so per-sample streams do not
/// depend on batch composition or order.
#[derive(Clone, Debug)]
pub struct ChainIdNoise {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
    pub ids: Vec<u64>,
}

impl LangevinNoise for ChainIdNoise {
    fn fill(&self, chain: usize, step: usize, out: &mut [f64]) {
        Stream::new(self.seed, self.purpose, self.round, self.ids[chain], step as u64).fill_normal(out);
    }
}

/// All-zero noise; turns a Langevin step into plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct ZeroNoise;

impl LangevinNoise for ZeroNoise {
    fn fill(&self, _chain: usize, _step: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}
