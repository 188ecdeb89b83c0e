//! Mix-and-Match index sampling, resampling and the curriculum over how many
//! of the sampled indices are random.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};

/// `⌈αL⌉`, robust to representation error in `α·L`.
pub fn sampled_count(len: usize, alpha: f64) -> usize {
    let x = alpha * len as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(len)
}

/// Split of `0..len` into the sampled set and its complement, both sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMask {
    pub len: usize,
    pub alpha: f64,
    pub sampled: Vec<usize>,
    pub complement: Vec<usize>,
}

impl IndexMask {
    pub fn from_sampled(len: usize, alpha: f64, mut sampled: Vec<usize>) -> Result<Self> {
        sampled.sort_unstable();
        sampled.dedup();
        if sampled.last().is_some_and(|&i| i >= len) {
            return Err(Error::InvalidParameter(format!(
                "mask index out of range for length {len}"
            )));
        }
        let mut member = vec![false; len];
        for &i in &sampled {
            member[i] = true;
        }
        let complement = (0..len).filter(|&i| !member[i]).collect();
        Ok(Self {
            len,
            alpha,
            sampled,
            complement,
        })
    }

    /// Deterministic prefix `{0..⌈αL⌉-1}`.
    pub fn prefix(len: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Self::from_sampled(len, alpha, (0..sampled_count(len, alpha)).collect())
    }

    /// Mask with sampled and complement swapped.
    pub fn inverted(&self) -> Self {
        Self {
            len: self.len,
            alpha: 1.0 - self.alpha,
            sampled: self.complement.clone(),
            complement: self.sampled.clone(),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.sampled.binary_search(&i).is_ok()
    }

    /// `1×L` row with ones at sampled positions.
    pub fn indicator(&self) -> Tensor {
        let mut m = Tensor::zeros((1, self.len));
        for &i in &self.sampled {
            m[[0, i]] = 1.0;
        }
        m
    }

    /// `|idx|×L` matrix that scatters a compact vector into positions `idx`.
    pub(crate) fn scatter_matrix(idx: &[usize], len: usize) -> Tensor {
        let mut p = Array2::zeros((idx.len(), len));
        for (r, &i) in idx.iter().enumerate() {
            p[[r, i]] = 1.0;
        }
        p
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha {alpha} outside [0,1]"
        )));
    }
    Ok(())
}

/// How many of the `c_max` sampled indices are drawn at random.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub c: usize,
    pub c_max: usize,
    pub step_size: usize,
    pub interval: u64,
}

impl CurriculumState {
    /// Reaches `c_max` halfway through `total_steps`.
    pub fn new(len: usize, alpha: f64, total_steps: u64) -> Self {
        let c_max = sampled_count(len, alpha);
        let interval = (total_steps / (2 * c_max.max(1) as u64)).max(1);
        Self {
            c: 0,
            c_max,
            step_size: 1,
            interval,
        }
    }

    pub fn fully_random(len: usize, alpha: f64) -> Self {
        let c_max = sampled_count(len, alpha);
        Self {
            c: c_max,
            c_max,
            step_size: 1,
            interval: 1,
        }
    }
}

/// `c = min(c_max, step_size · ⌊step / interval⌋)`.
pub fn curriculum_step(state: CurriculumState, training_step: u64) -> CurriculumState {
    let increments = training_step / state.interval.max(1);
    let c = (state.step_size as u64)
        .saturating_mul(increments)
        .min(state.c_max as u64) as usize;
    CurriculumState { c, ..state }
}

/// Swap count at which the curriculum hands over to uniform sampling.
///
/// A uniform `k`-subset of `0..len` leaves on average `k(len-k)/len` prefix
/// entries out. Swapping more than that makes the mask less random again
/// (at `c = k - 1` it is nearly the fixed complement), so from this point on
/// masks are drawn uniformly.
pub fn uniform_swap_point(len: usize, k: usize) -> usize {
    if len == 0 {
        return 0;
    }
    (k * (len - k)).div_ceil(len)
}

/// Samples `⌈αL⌉` indices: the prefix with `c` of its entries swapped for
/// random complement entries, or a uniform subset once `c` reaches
/// [`uniform_swap_point`] (and in particular at `c = c_max`).
pub fn sample_mask(
    len: usize,
    alpha: f64,
    rng: &mut impl Rng,
    curr: &CurriculumState,
) -> Result<IndexMask> {
    check_alpha(alpha)?;
    let k = sampled_count(len, alpha);
    if k > 0 && (curr.c >= k || curr.c >= uniform_swap_point(len, k)) {
        let picked = index::sample(rng, len, k).into_vec();
        return IndexMask::from_sampled(len, alpha, picked);
    }
    let swaps = curr.c.min(len - k).min(k);
    let mut sampled: Vec<usize> = (0..k).collect();
    if swaps > 0 {
        let out = index::sample(rng, k, swaps).into_vec();
        let incoming = index::sample(rng, len - k, swaps).into_vec();
        for (o, i) in out.into_iter().zip(incoming) {
            sampled[o] = k + i;
        }
    }
    IndexMask::from_sampled(len, alpha, sampled)
}

/// `out[i] = a[i]` on the sampled set, `b[i]` on the complement.
pub fn resample(a: &[f64], b: &[f64], mask: &IndexMask) -> Result<Vec<f64>> {
    if a.len() != mask.len || b.len() != mask.len {
        return Err(Error::ShapeMismatch(format!(
            "resample inputs {} and {} for mask length {}",
            a.len(),
            b.len(),
            mask.len
        )));
    }
    let mut out = b.to_vec();
    for &i in &mask.sampled {
        out[i] = a[i];
    }
    Ok(out)
}

/// Row-wise [`resample`] of two `B×L` variables.
pub fn resample_var(g: &mut Graph, a: Var, b: Var, mask: &IndexMask) -> Var {
    let m = mask.indicator();
    let inv = m.mapv(|x| 1.0 - x);
    let m = g.constant(m);
    let inv = g.constant(inv);
    let ia = g.mul(a, m);
    let ib = g.mul(b, inv);
    g.add(ia, ib)
}
