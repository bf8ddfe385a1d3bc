//! Counter-based random number generation.
//!
//! Every random quantity in this crate is a pure function of
//! `(seed, stream, counter)`, so datasets and training runs are reproducible
//! regardless of iteration order or parallel scheduling. The generator chains
//! three rounds of the splitmix64 finalizer over the seed, stream id, and
//! counter; normal deviates come from Box-Muller using the cosine branch only
//! (two uniforms per deviate).

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MUL_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MUL_B: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MUL_A);
    z = (z ^ (z >> 27)).wrapping_mul(MUL_B);
    z ^ (z >> 31)
}

/// The raw word at position `counter` of stream `stream` under `seed`.
#[inline]
pub fn word_at(seed: u64, stream: u64, counter: u64) -> u64 {
    let a = mix(seed.wrapping_add(GOLDEN));
    let b = mix(a ^ stream.wrapping_mul(MUL_A));
    mix(b ^ counter.wrapping_mul(MUL_B))
}

/// Uniform deviate in [0, 1) at the given position.
#[inline]
pub fn uniform_at(seed: u64, stream: u64, counter: u64) -> f64 {
    (word_at(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stateful view of one stream. Cloning and re-creating with the same
/// `(seed, stream)` replays the identical sequence.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = word_at(self.seed, self.stream, self.counter);
        self.counter += 1;
        w
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal deviate via Box-Muller (cosine branch; consumes two
    /// uniforms). `u1` is shifted into (0, 1] so the log is finite.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn next_normal_with(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.next_normal()
    }

    /// Uniform index in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_index(i + 1);
            slice.swap(i, j);
        }
    }
}
