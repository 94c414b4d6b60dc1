//! Counter-based Gaussian noise: Philox4x32-10 keyed by a master seed,
//! addressed by (stream, absolute grid index, component block).

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

#[inline]
fn round(c: [u32; 4], k: [u32; 2]) -> [u32; 4] {
    let (hi0, lo0) = mulhilo(M0, c[0]);
    let (hi1, lo1) = mulhilo(M1, c[2]);
    [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0]
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = round(ctr, key);
    let mut k = key;
    for _ in 1..10 {
        k = [k[0].wrapping_add(W0), k[1].wrapping_add(W1)];
        c = round(c, k);
    }
    c
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draws for one noise stream.
#[derive(Debug, Clone, Copy)]
pub struct GaussianStream {
    keys: [[u32; 2]; 4],
    stream: u64,
}

impl GaussianStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut keys = [[0u32; 2]; 4];
        for (b, k) in keys.iter_mut().enumerate() {
            let z = splitmix64(seed ^ splitmix64(b as u64 + 1));
            *k = [z as u32, (z >> 32) as u32];
        }
        GaussianStream { keys, stream }
    }

    /// Fills `out` with independent N(0, 1) values for grid index `k`.
    /// Each counter yields two values, so blocks of two components
    /// share one Philox call; at most 8 components are supported.
    #[inline]
    pub fn fill(&self, k: i64, out: &mut [f64]) {
        debug_assert!(out.len() <= 8);
        let idx = (k as u64) ^ (1u64 << 63);
        let ctr = [
            idx as u32,
            (idx >> 32) as u32,
            self.stream as u32,
            (self.stream >> 32) as u32,
        ];
        for (b, pair) in out.chunks_mut(2).enumerate() {
            let x = philox4x32_10(ctr, self.keys[b]);
            let u = ((x[0] as u64) << 32) | x[1] as u64;
            let v = ((x[2] as u64) << 32) | x[3] as u64;
            let u1 = ((u >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (v >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let rad = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            pair[0] = rad * c;
            if pair.len() > 1 {
                pair[1] = rad * s;
            }
        }
    }
}
