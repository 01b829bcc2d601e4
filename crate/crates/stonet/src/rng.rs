//! Counter-based, splittable random number generation.
//!
//! Every random draw in the pipeline comes from an independent stream keyed by
//! a tuple such as `(base_seed, scenario index, point index, variable tag)`.
//! Streams are derived by hashing the key parts through the SplitMix64
//! finalizer, so a draw depends only on its key — never on iteration order,
//! thread count, or how many draws happened before it. That makes every
//! artifact bitwise reproducible from its base seed.
//!
//! The distributions implemented here are exactly the ones the sampling
//! pipeline needs: uniform, Gaussian (Box–Muller), Poisson (CDF inversion,
//! adequate for the λ ≈ 30–70 range used by fracture counts), and log-normal
//! parameterized by the target mean and standard deviation of the variable
//! itself (moment matching).

/// One derived random stream. Cheap to construct; create one per logical
/// random variable rather than sharing.
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit tag for a named random variable (FNV-1a). Used as the last
/// component of stream keys so call sites stay self-describing.
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl StreamRng {
    /// Derive a stream from key parts. Identical parts yield the identical
    /// stream; any differing part yields a statistically independent one.
    pub fn from_parts(parts: &[u64]) -> Self {
        // XOR-fold each part into the state and run it through the finalizer,
        // so every bit of every part diffuses before the first draw.
        let mut state: u64 = 0x243F_6A88_85A3_08D3; // fractional bits of pi
        for &p in parts {
            let mut s = state ^ p;
            state = splitmix64(&mut s);
        }
        StreamRng { state }
    }

    /// Next raw 64-bit value.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Gaussian draw via Box–Muller.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // `1 - uniform()` lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson draw by sequential CDF inversion. Exact and branch-free of
    /// algorithm switching, which keeps streams stable; cost is O(λ) per
    /// draw, fine for the λ ≤ ~200 this pipeline uses.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        assert!(
            (0.0..500.0).contains(&lambda),
            "poisson inversion is intended for small lambda, got {lambda}"
        );
        if lambda == 0.0 {
            return 0;
        }
        let u = self.uniform();
        let mut k: u64 = 0;
        let mut pmf = (-lambda).exp();
        let mut cdf = pmf;
        // The loop terminates long before the guard for any u < 1.
        while u >= cdf && k < 100_000 {
            k += 1;
            pmf *= lambda / k as f64;
            cdf += pmf;
        }
        k
    }

    /// Log-normal draw parameterized by the desired mean and standard
    /// deviation of the variable itself. The underlying normal parameters
    /// follow from moment matching:
    ///
    /// ```text
    /// sigma_log^2 = ln(1 + (std/mean)^2),   mu_log = ln(mean) - sigma_log^2 / 2
    /// ```
    pub fn lognormal_mean_std(&mut self, mean: f64, std: f64) -> f64 {
        assert!(mean > 0.0 && std >= 0.0, "log-normal needs mean > 0");
        let cv2 = (std / mean).powi(2);
        let sigma2 = cv2.ln_1p();
        let mu = mean.ln() - 0.5 * sigma2;
        (mu + sigma2.sqrt() * self.normal(0.0, 1.0)).exp()
    }
}
