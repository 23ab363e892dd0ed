//! Sobol low-discrepancy sequences in Gray-code order, with optional
//! randomization by linear matrix scrambling plus a digital shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sobol_table::DIRECTIONS;
use crate::error::{Error, Result};

const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4_294_967_296.0;

/// Largest supported dimension.
pub const MAX_DIMENSION: usize = DIRECTIONS.len() + 1;

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (poly, m) = DIRECTIONS[dim - 1];
    let s = (32 - poly.leading_zeros() - 1) as usize;
    for k in 0..s {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (poly >> (s - j)) & 1 == 1 {
                x ^= v[k - j];
            }
        }
        v[k] = x;
    }
    v
}

fn scramble_directions(v: &mut [u32; BITS], rng: &mut ChaCha8Rng) {
    // random lower-triangular binary matrix with unit diagonal, rows in
    // most-significant-bit-first order
    let rows: Vec<u32> = (0..BITS)
        .map(|i| {
            let high = if i == 0 { 0 } else { !0u32 << (BITS - i) };
            (1u32 << (BITS - 1 - i)) | (rng.gen::<u32>() & high)
        })
        .collect();
    for vk in v.iter_mut() {
        let mut out = 0u32;
        for (i, row) in rows.iter().enumerate() {
            if (row & *vk).count_ones() & 1 == 1 {
                out |= 1 << (BITS - 1 - i);
            }
        }
        *vk = out;
    }
}

/// Streaming generator.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    /// `scramble = None` gives the plain sequence starting at the origin.
    pub fn new(dim: usize, scramble: Option<u64>) -> Result<Self> {
        if dim > MAX_DIMENSION {
            return Err(Error::Dimension {
                requested: dim,
                max: MAX_DIMENSION,
            });
        }
        let mut directions: Vec<[u32; BITS]> = (0..dim).map(direction_numbers).collect();
        let mut state = vec![0u32; dim];
        if let Some(seed) = scramble {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x736f_626f_6c00);
            for v in directions.iter_mut() {
                scramble_directions(v, &mut rng);
            }
            for s in state.iter_mut() {
                *s = rng.gen();
            }
        }
        Ok(Self {
            directions,
            state,
            index: 0,
        })
    }

    pub fn dimension(&self) -> usize {
        self.directions.len()
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let point = self.state.iter().map(|&s| s as f64 * SCALE).collect();
        let c = self.index.trailing_ones() as usize;
        assert!(c < BITS, "Sobol sequence exhausted");
        for (s, v) in self.state.iter_mut().zip(&self.directions) {
            *s ^= v[c];
        }
        self.index += 1;
        point
    }

    pub fn take_points(&mut self, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.next_point()).collect()
    }
}

/// `n` scrambled points in `[0,1)^d`, keyed by `seed`.
pub fn sobol(n: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(Sobol::new(d, Some(seed))?.take_points(n))
}

/// The first `n` points of the unscrambled sequence.
pub fn sobol_unscrambled(n: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    Ok(Sobol::new(d, None)?.take_points(n))
}
