//! Sampling and assignment vectors: simple random sampling without
//! replacement and complete randomization share one representation, a binary
//! vector with a fixed number of ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Default limit on the number of assignments [`enumerate_designs`] will visit.
pub const DEFAULT_ENUM_CAP: u64 = 10_000_000;

/// Binary inclusion / treatment vector. `z[i]` is true when unit `i` is
/// sampled (survey) or treated (experiment).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    z: Vec<bool>,
    margin: usize,
}

impl Assignment {
    pub fn new(z: Vec<bool>) -> Self {
        let margin = z.iter().filter(|&&b| b).count();
        Self { z, margin }
    }

    /// Builds an assignment with ones at the given (distinct) positions.
    pub fn from_positions(n_units: usize, positions: &[usize]) -> Self {
        let mut z = vec![false; n_units];
        for &i in positions {
            z[i] = true;
        }
        Self::new(z)
    }

    /// Parses a `0`/`1` string such as `"1100"`.
    pub fn parse(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "assignment must be a 0/1 string, found `{other}`"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn n_units(&self) -> usize {
        self.z.len()
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.z
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.z.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_bit_string(&self) -> String {
        self.z.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl Serialize for Assignment {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bit_string())
    }
}

/// `ceil(p * N)` clamped to `[1, N - 1]`.
pub fn sample_size(n_units: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProportion(p));
    }
    if n_units < 2 {
        return Err(Error::TooFewUnits(n_units));
    }
    let n = (p * n_units as f64).ceil() as usize;
    Ok(n.clamp(1, n_units - 1))
}

pub(crate) fn check_margin(n_units: usize, margin: usize) -> Result<()> {
    if n_units < 2 || margin < 1 || margin > n_units - 1 {
        return Err(Error::MarginOutOfRange {
            margin,
            n_units,
            max: n_units.saturating_sub(1),
        });
    }
    Ok(())
}

/// Counter-based generator for stream `stream` under `seed`.
///
/// ChaCha keys on the seed and addresses blocks by (stream, counter), so any
/// number of workers can open disjoint streams without coordination.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reusable partial Fisher-Yates sampler over `0..n_units`.
#[derive(Debug, Clone)]
pub struct AssignmentSampler {
    n_units: usize,
    margin: usize,
    scratch: Vec<usize>,
}

impl AssignmentSampler {
    pub fn new(n_units: usize, margin: usize) -> Result<Self> {
        check_margin(n_units, margin)?;
        Ok(Self {
            n_units,
            margin,
            scratch: Vec::with_capacity(n_units),
        })
    }

    /// Fills `z` with a uniformly drawn assignment of the configured margin.
    ///
    /// The scratch permutation is reset on every call so the output depends
    /// only on the generator state.
    pub fn draw_into<R: Rng>(&mut self, rng: &mut R, z: &mut Vec<bool>) {
        let n = self.n_units;
        // Select the smaller side; the complement of a uniform k-subset is a
        // uniform (n - k)-subset.
        let select_ones = self.margin <= n - self.margin;
        let picks = if select_ones { self.margin } else { n - self.margin };
        self.scratch.clear();
        self.scratch.extend(0..n);
        for i in 0..picks {
            let j = rng.random_range(i..n);
            self.scratch.swap(i, j);
        }
        z.clear();
        z.resize(n, !select_ones);
        for &unit in &self.scratch[..picks] {
            z[unit] = select_ones;
        }
    }

    pub fn draw<R: Rng>(&mut self, rng: &mut R) -> Assignment {
        let mut z = Vec::with_capacity(self.n_units);
        self.draw_into(rng, &mut z);
        Assignment {
            z,
            margin: self.margin,
        }
    }
}

/// Uniform draw over all `C(N, margin)` assignments, deterministic in `seed`.
pub fn draw_assignment(n_units: usize, margin: usize, seed: u64) -> Result<Assignment> {
    let mut sampler = AssignmentSampler::new(n_units, margin)?;
    Ok(sampler.draw(&mut stream_rng(seed, 0)))
}

/// Exact binomial coefficient; `None` on overflow of `u128`.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Lexicographic stream over every assignment with `margin` ones.
#[derive(Debug, Clone)]
pub struct Designs {
    n_units: usize,
    positions: Vec<usize>,
    started: bool,
    remaining: u128,
}

impl Designs {
    /// Assignments not yet yielded.
    pub fn remaining(&self) -> u128 {
        self.remaining
    }

    /// Positions of the ones in the next assignment, without allocating an
    /// [`Assignment`].
    pub fn next_positions(&mut self) -> Option<&[usize]> {
        if self.remaining == 0 {
            return None;
        }
        if !self.started {
            self.started = true;
        } else {
            let k = self.positions.len();
            let n = self.n_units;
            let mut i = k;
            while i > 0 && self.positions[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            // remaining > 0 guarantees a successor exists
            self.positions[i - 1] += 1;
            for j in i..k {
                self.positions[j] = self.positions[j - 1] + 1;
            }
        }
        self.remaining -= 1;
        Some(&self.positions)
    }
}

impl Iterator for Designs {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        let n = self.n_units;
        self.next_positions().map(|p| Assignment::from_positions(n, p))
    }
}

/// Every assignment of `margin` ones among `n_units`, in lexicographic order
/// of the one-positions, using [`DEFAULT_ENUM_CAP`].
pub fn enumerate_designs(n_units: usize, margin: usize) -> Result<Designs> {
    enumerate_designs_with_cap(n_units, margin, DEFAULT_ENUM_CAP)
}

pub fn enumerate_designs_with_cap(n_units: usize, margin: usize, cap: u64) -> Result<Designs> {
    if margin > n_units {
        return Err(Error::MarginOutOfRange {
            margin,
            n_units,
            max: n_units,
        });
    }
    let required = binomial(n_units, margin).unwrap_or(u128::MAX);
    if required > cap as u128 {
        return Err(Error::CapExceeded { required, cap });
    }
    Ok(Designs {
        n_units,
        positions: (0..margin).collect(),
        started: false,
        remaining: required,
    })
}
