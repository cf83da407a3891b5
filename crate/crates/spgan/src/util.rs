//! Small shared utilities.

/// Incremental FNV-1a 64-bit hash; used for weight checksums, config
/// digests, and deriving named RNG streams. Not cryptographic.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf29ce484222325)
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
        self
    }

    pub fn write_u64(&mut self, v: u64) -> &mut Self {
        self.write(&v.to_le_bytes())
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64::new()
    }
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    Fnv64::new().write(bytes).finish()
}

/// Seed for a named deterministic RNG stream: (root seed, stream label,
/// index) -> 64-bit seed.
pub fn stream_seed(seed: u64, stream: &str, index: u64) -> u64 {
    Fnv64::new().write_u64(seed).write(stream.as_bytes()).write_u64(index).finish()
}
