//! Dense row-major `f64` tensors and the deterministic random stream
//! everything draws from.

use crate::error::{Error, Result};

/// N-dimensional numeric array with optional gradient.
///
/// Storage is a flat row-major `Vec<f64>`; `shape` carries the logical
/// dimensions. `grad`, when present, has exactly `data.len()` entries and is
/// filled in by [`crate::tape::Tape::backward`] for leaves that request it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Fan-in-scaled uniform init in `(-limit, limit)` with `limit = sqrt(6/fan_in)`.
    pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let limit = libm::sqrt(6.0 / fan_in.max(1) as f64);
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| (rng.next_f64() * 2.0 - 1.0) * limit)
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string; used to turn stream labels into fork tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Splittable counter-based generator (splitmix64 core).
///
/// The same seed produces a bit-identical stream on every platform: the
/// integer pipeline is exact and the Gaussian transform goes through `libm`,
/// whose results do not depend on the host libm. Substreams are derived from
/// the root seed by [`Rng::fork`], so a stream's identity depends only on its
/// label path, never on how much of a sibling stream was consumed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed ^ 0x6A09_E667_F3BC_C909;
        let state = splitmix(&mut s);
        Rng { seed, state }
    }

    /// Derive an independent substream; independent of consumption state.
    pub fn fork(&self, tag: u64) -> Rng {
        let mut s = self.seed ^ tag.wrapping_mul(GAMMA);
        let mixed = splitmix(&mut s);
        Rng::new(mixed)
    }

    pub fn fork_str(&self, label: &str) -> Rng {
        self.fork(fnv1a(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix(&mut self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Index uniform in `0..n`.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Two uniforms per draw, no caching, so
    /// the stream position is a pure function of the number of calls.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        for v in out.iter_mut() {
            *v = sigma * self.next_normal();
        }
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_index(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Derive the rng for a labelled point in a run, e.g.
/// `stream(seed, &["stage2", "conv", "noise"], &[epoch, batch])`.
pub fn stream(seed: u64, labels: &[&str], indices: &[u64]) -> Rng {
    let mut r = Rng::new(seed);
    for l in labels {
        r = r.fork_str(l);
    }
    for &i in indices {
        r = r.fork(i.wrapping_add(0x5555_5555_5555_5555));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_are_independent_of_consumption() {
        let mut a = Rng::new(7);
        let b = Rng::new(7);
        let _ = a.next_u64();
        let _ = a.next_u64();
        let mut fa = a.fork(3);
        let mut fb = b.fork(3);
        for _ in 0..10 {
            assert_eq!(fa.next_u64(), fb.next_u64());
        }
    }

    #[test]
    fn distinct_tags_distinct_streams() {
        let r = Rng::new(1);
        let mut a = r.fork(1);
        let mut b = r.fork(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(123);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = r.next_normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = Rng::new(9);
        let mut p = r.permutation(17);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }
}
