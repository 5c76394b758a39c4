//! Counter-based random streams.
//!
//! Every value is a pure function of `(seed, stream, draw index)`, so any
//! sample, epoch or initializer can be regenerated in isolation and in any
//! order. The construction, bit for bit:
//!
//! ```text
//! mix(z)   = z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!            z ^= z >> 27; z *= 0x94D049BB133111EB;
//!            z ^ (z >> 31)                          (wrapping u64 arithmetic)
//! key      = mix(mix(seed) ^ (stream * 0x9E3779B97F4A7C15))
//! draw(i)  = mix(key + (i + 1) * 0x9E3779B97F4A7C15)
//! uniform  = (draw >> 11) * 2^-53                   in [0, 1)
//! ```

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags that keep different consumers of one master seed apart.
pub mod streams {
    pub const SAMPLE_BASE: u64 = 0;
    pub const PARAM_INIT: u64 = 0x5041_5241_4D00_0000;
    pub const SHUFFLE: u64 = 0x5348_5546_0000_0000;
    pub const GRADCHECK: u64 = 0x4743_4845_434B_0000;
}

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(mix64(seed) ^ stream.wrapping_mul(GOLDEN)),
            counter: 0,
        }
    }

    /// Raw value at an explicit draw index; does not advance the counter.
    pub fn draw_at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.draw_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn set_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (`n > 0`) via Lemire's multiply-shift.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box–Muller (consumes two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
