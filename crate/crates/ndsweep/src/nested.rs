//! Nested dropout: per-sample truncated-geometric draws of a kept-prefix
//! length, prefix channel masking, and mask-mirrored gradients. Unit
//! indices are 1-based throughout; `k` counts kept units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// State of one nested-dropout attachment point.
///
/// `n` is the channel count of the layer it follows, `s` the sweep index
/// (leading units permanently kept and excluded from draws), `rho` the
/// geometric success parameter. `last_draws`/`last_mask` hold the draws
/// of the most recent train-mode forward for the matching backward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NestedDropoutState {
    pub n: usize,
    pub s: usize,
    pub rho: f64,
    #[serde(skip)]
    pub last_draws: Vec<usize>,
    #[serde(skip)]
    pub last_mask: Option<Tensor<f32>>,
}

// Tensor has no serde impls; masks are transient so they are skipped
// above and rebuilt on the next forward.
impl PartialEq for NestedDropoutState {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.s == other.s && self.rho == other.rho
    }
}

impl NestedDropoutState {
    pub fn new(n: usize, rho: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("unit count must be >= 1".into()));
        }
        check_rho(rho)?;
        Ok(NestedDropoutState {
            n,
            s: 0,
            rho,
            last_draws: Vec::new(),
            last_mask: None,
        })
    }
}

/// Masking mode for [`nd_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NdMode {
    /// Fresh per-sample draws; masks stored for the backward pass.
    Train,
    /// Identity.
    EvalFull,
    /// Deterministic prefix mask keeping channels `1..=k` for every sample.
    EvalTruncate(usize),
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rho must be in (0, 1], got {rho}"
        )));
    }
    Ok(())
}

/// Draw the kept count `k = s + j`, where `j` follows a geometric
/// distribution truncated to the `n - s` unswept units and renormalized:
/// `P(j) = rho (1-rho)^(j-1) / (1 - (1-rho)^(n-s))`.
pub fn sample_kept_count<R: Rng>(rho: f64, s: usize, n: usize, rng: &mut R) -> Result<usize> {
    check_rho(rho)?;
    if s >= n {
        return Err(Error::NoRemainingUnits { s, n });
    }
    let m = n - s;
    if m == 1 || rho == 1.0 {
        // single remaining unit, or degenerate geometric
        return Ok(s + 1);
    }
    let u: f64 = rng.gen();
    let q = 1.0 - rho;
    let z = 1.0 - q.powi(m as i32);
    // inverse CDF of the truncated geometric
    let j = ((1.0 - u * z).ln() / q.ln()).ceil() as usize;
    Ok(s + j.clamp(1, m))
}

/// Closed-form pmf of the truncated draw: probability that
/// [`sample_kept_count`] returns `k`.
pub fn truncated_geometric_pmf(rho: f64, s: usize, n: usize, k: usize) -> Result<f64> {
    check_rho(rho)?;
    if s >= n {
        return Err(Error::NoRemainingUnits { s, n });
    }
    if k <= s || k > n {
        return Ok(0.0);
    }
    let m = (n - s) as i32;
    let j = (k - s) as i32;
    if rho == 1.0 {
        return Ok(if j == 1 { 1.0 } else { 0.0 });
    }
    let q = 1.0 - rho;
    let z = 1.0 - q.powi(m);
    Ok(rho * q.powi(j - 1) / z)
}

/// Exact probability that unit `i` (1-based) is kept by a train-mode
/// draw: 1 for swept units and for the first unswept unit, then the
/// truncated-geometric tail.
pub fn keep_probability(i: usize, rho: f64, s: usize, n: usize) -> Result<f64> {
    check_rho(rho)?;
    if i == 0 || i > n {
        return Err(Error::InvalidParameter(format!(
            "unit index {i} out of range [1, {n}]"
        )));
    }
    if i <= s {
        return Ok(1.0);
    }
    if s >= n {
        return Err(Error::NoRemainingUnits { s, n });
    }
    let m = (n - s) as i32;
    let j_min = (i - s) as i32; // kept iff drawn j >= i - s
    if rho == 1.0 {
        return Ok(if j_min <= 1 { 1.0 } else { 0.0 });
    }
    let q = 1.0 - rho;
    let z = 1.0 - q.powi(m);
    Ok((q.powi(j_min - 1) - q.powi(m)) / z)
}

/// Build per-sample prefix masks `[B, n]`: `mask[b, i] = 1` iff
/// `i <= k_b` (1-based units).
pub fn build_mask(n: usize, draws: &[usize]) -> Result<Tensor<f32>> {
    if draws.is_empty() {
        return Err(Error::InvalidParameter("no draws provided".into()));
    }
    let mut mask = Tensor::zeros(&[draws.len(), n])?;
    for (b, &k) in draws.iter().enumerate() {
        if k == 0 || k > n {
            return Err(Error::InvalidParameter(format!(
                "draw k={k} out of range [1, {n}]"
            )));
        }
        for i in 0..k {
            mask.data_mut()[b * n + i] = 1.0;
        }
    }
    Ok(mask)
}

fn channel_layout<T: Scalar>(input: &Tensor<T>, n: usize) -> Result<(usize, usize)> {
    let shape = input.shape();
    if shape.len() < 2 || shape[1] != n {
        return Err(Error::InvalidShape(format!(
            "expected channel dimension {n} in position 1, got shape {shape:?}"
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], spatial))
}

/// Apply nested dropout to a `[B, n]` or `[B, n, H, W]` activation.
/// Kept channels are never rescaled, in any mode.
pub fn nd_forward<T: Scalar, R: Rng>(
    input: &Tensor<T>,
    state: &mut NestedDropoutState,
    mode: NdMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (batch, spatial) = channel_layout(input, state.n)?;
    match mode {
        NdMode::EvalFull => Ok(input.clone()),
        NdMode::EvalTruncate(k) => {
            if k == 0 || k > state.n {
                return Err(Error::InvalidParameter(format!(
                    "truncation k={k} out of range [1, {}]",
                    state.n
                )));
            }
            if k == state.n {
                return Ok(input.clone());
            }
            let mut out = input.clone();
            for b in 0..batch {
                let row = &mut out.data_mut()
                    [(b * state.n + k) * spatial..(b + 1) * state.n * spatial];
                row.fill(T::ZERO);
            }
            Ok(out)
        }
        NdMode::Train => {
            let draws: Vec<usize> = if state.s == state.n {
                vec![state.n; batch]
            } else {
                (0..batch)
                    .map(|_| sample_kept_count(state.rho, state.s, state.n, rng))
                    .collect::<Result<_>>()?
            };
            let mask = build_mask(state.n, &draws)?;
            let out = apply_mask(input, &draws, batch, state.n, spatial);
            state.last_draws = draws;
            state.last_mask = Some(mask);
            Ok(out)
        }
    }
}

/// Train-mode forward with caller-supplied draws; used by the training
/// loop replay tests and anywhere a deterministic mask is injected.
pub fn nd_forward_with_draws<T: Scalar>(
    input: &Tensor<T>,
    state: &mut NestedDropoutState,
    draws: &[usize],
) -> Result<Tensor<T>> {
    let (batch, spatial) = channel_layout(input, state.n)?;
    if draws.len() != batch {
        return Err(Error::InvalidParameter(format!(
            "{} draws for a batch of {batch}",
            draws.len()
        )));
    }
    let mask = build_mask(state.n, draws)?;
    let out = apply_mask(input, draws, batch, state.n, spatial);
    state.last_draws = draws.to_vec();
    state.last_mask = Some(mask);
    Ok(out)
}

fn apply_mask<T: Scalar>(
    input: &Tensor<T>,
    draws: &[usize],
    batch: usize,
    n: usize,
    spatial: usize,
) -> Tensor<T> {
    let mut out = input.clone();
    for (b, &k) in draws.iter().enumerate().take(batch) {
        if k < n {
            out.data_mut()[(b * n + k) * spatial..(b + 1) * n * spatial].fill(T::ZERO);
        }
    }
    out
}

/// Gradient of the masking: `grad_in = grad_out` on kept channels,
/// exactly zero on dropped ones. Requires the masks stored by the
/// immediately preceding train-mode [`nd_forward`].
pub fn nd_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    state: &NestedDropoutState,
) -> Result<Tensor<T>> {
    if state.last_mask.is_none() || state.last_draws.is_empty() {
        return Err(Error::ProtocolViolation(
            "nd_backward called with no stored mask from a train-mode forward".into(),
        ));
    }
    let (batch, spatial) = channel_layout(grad_out, state.n)?;
    if state.last_draws.len() != batch {
        return Err(Error::ProtocolViolation(format!(
            "stored masks cover a batch of {}, gradient has {batch}",
            state.last_draws.len()
        )));
    }
    Ok(apply_mask(grad_out, &state.last_draws, batch, state.n, spatial))
}
