//! Deterministic random numbers.
//!
//! Everything stochastic in this crate (weight init, dropout masks, data
//! synthesis, shuffles) draws from [`Rng`], a xoshiro256** generator seeded
//! through SplitMix64. The normal sampler goes through hand-written `ln`,
//! `sin` and `cos` routines built from IEEE-exact primitive arithmetic, so a
//! seed produces the same stream bit for bit on every platform, independent
//! of the system libm.

/// SplitMix64 finalizer. Bijective on u64, used for seeding and seed derivation.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a root seed and a stream index.
///
/// Used so one user-facing `--seed` can fan out into decorrelated streams
/// (init, batch order, dropout, per-sample jitter, ...) without the streams
/// ever sharing state.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    mix64(mix64(root) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// [`derive_seed`] with a human-readable stream label plus an index.
pub fn derive_named(root: u64, label: &str, index: u64) -> u64 {
    derive_seed(derive_seed(root, fnv1a(label.as_bytes())), index)
}

/// FNV-1a 64-bit hash. Used for seed labels and for fingerprinting network
/// description text inside checkpoints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// xoshiro256** generator with explicit, checkpointable state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Builds a generator from a 64-bit seed, expanding it with SplitMix64.
    pub fn new(seed: u64) -> Self {
        let mut z = seed;
        let mut next = || {
            z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut t = z;
            t = (t ^ (t >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            t = (t ^ (t >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            t ^ (t >> 31)
        };
        let s = [next(), next(), next(), next()];
        // xoshiro's state must not be all zero; SplitMix64 cannot emit four
        // zeros in a row, but guard anyway.
        if s == [0, 0, 0, 0] {
            return Rng { s: [1, 2, 3, 4] };
        }
        Rng { s }
    }

    /// Restores a generator from a captured state, e.g. out of a checkpoint.
    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s }
    }

    /// Captures the full generator state.
    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in `(0, 1]`; safe to pass to `ln`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal draw via Box-Muller. Exactly one normal per call and
    /// exactly two `next_u64` draws, which keeps stream alignment easy to
    /// reason about across architectures that share a prefix of draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * portable_ln(u1)).sqrt();
        r * portable_cos(2.0 * std::f64::consts::PI * u2)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

const LN2_HI: f64 = 6.93147180369123816490e-01;
const LN2_LO: f64 = 1.90821492927058770002e-10;

/// Natural log from exponent extraction plus an atanh series, using only
/// IEEE-exact add/mul/div so results do not depend on the platform libm.
///
/// Accurate to within a few ulp for normal positive inputs.
pub fn portable_ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut bits = x.to_bits();
    let mut e: i64 = 0;
    // Scale subnormals into the normal range first.
    if bits >> 52 == 0 {
        bits = (x * 18014398509481984.0).to_bits(); // 2^54
        e -= 54;
    }
    e += ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // ln m = 2 atanh t with t = (m-1)/(m+1), |t| <= 0.1716.
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let p = 1.0 / 19.0;
    let p = p * t2 + 1.0 / 17.0;
    let p = p * t2 + 1.0 / 15.0;
    let p = p * t2 + 1.0 / 13.0;
    let p = p * t2 + 1.0 / 11.0;
    let p = p * t2 + 1.0 / 9.0;
    let p = p * t2 + 1.0 / 7.0;
    let p = p * t2 + 1.0 / 5.0;
    let p = p * t2 + 1.0 / 3.0;
    let p = p * t2 + 1.0;
    let ef = e as f64;
    ef * LN2_HI + (2.0 * t * p + ef * LN2_LO)
}

const PIO2_HI: f64 = 1.57079632679489655800e+00;
const PIO2_LO: f64 = 6.12323399573676603587e-17;

/// Sine and cosine together, via quadrant reduction and fixed-length Taylor
/// kernels on `[-pi/4, pi/4]`. Same portability contract as [`portable_ln`].
///
/// Intended for moderate arguments (|x| below a few thousand); accuracy
/// degrades with the usual Cody-Waite reduction error beyond that.
pub fn portable_sincos(x: f64) -> (f64, f64) {
    if !x.is_finite() {
        return (f64::NAN, f64::NAN);
    }
    let n = (x * std::f64::consts::FRAC_2_PI).round();
    let r = (x - n * PIO2_HI) - n * PIO2_LO;
    let s = sin_kernel(r);
    let c = cos_kernel(r);
    match (n as i64).rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

pub fn portable_sin(x: f64) -> f64 {
    portable_sincos(x).0
}

pub fn portable_cos(x: f64) -> f64 {
    portable_sincos(x).1
}

fn sin_kernel(r: f64) -> f64 {
    let r2 = r * r;
    let p = -1.0 / 355687428096000.0; // 1/17!
    let p = p * r2 + 1.0 / 1307674368000.0; // 1/15!
    let p = p * r2 - 1.0 / 6227020800.0; // 1/13!
    let p = p * r2 + 1.0 / 39916800.0; // 1/11!
    let p = p * r2 - 1.0 / 362880.0; // 1/9!
    let p = p * r2 + 1.0 / 5040.0; // 1/7!
    let p = p * r2 - 1.0 / 120.0; // 1/5!
    let p = p * r2 + 1.0 / 6.0; // 1/3!
    r - r * r2 * p
}

fn cos_kernel(r: f64) -> f64 {
    let r2 = r * r;
    let p = 1.0 / 20922789888000.0; // 1/16!
    let p = p * r2 - 1.0 / 87178291200.0; // 1/14!
    let p = p * r2 + 1.0 / 479001600.0; // 1/12!
    let p = p * r2 - 1.0 / 3628800.0; // 1/10!
    let p = p * r2 + 1.0 / 40320.0; // 1/8!
    let p = p * r2 - 1.0 / 720.0; // 1/6!
    let p = p * r2 + 1.0 / 24.0; // 1/4!
    let p = p * r2 - 0.5;
    1.0 + r2 * p
}
