//! Real-valued logic over truth bounds.
//!
//! A [`TruthBounds`] of dimension `d` stores `[l_1..l_d, u_1..u_d]` with
//! `0 <= l_i <= u_i <= 1`. Conjunction applies a (weighted) t-norm to the
//! lowers and uppers separately, then collapses crossed bounds to their
//! midpoint. Disjunction is derived through De Morgan.

use thiserror::Error;

/// Smoothing constant of the weighted minimum.
pub const SMOOTHMIN_ALPHA: f64 = -10.0;

/// Floor on interval widths before taking logs.
pub const ENTROPY_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LogicError {
    #[error("invalid truth bounds at dimension {dim}: [{lower}, {upper}]")]
    Invalid { dim: usize, lower: f64, upper: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{weights} weights for {truths} truths")]
    WeightCount { weights: usize, truths: usize },
    #[error("all inputs removed")]
    AllInputsRemoved,
    #[error("at least one input is required")]
    NoInputs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthBounds {
    data: Vec<f64>,
}

impl TruthBounds {
    pub fn new(lower: &[f64], upper: &[f64]) -> Result<Self, LogicError> {
        if lower.len() != upper.len() {
            return Err(LogicError::DimensionMismatch { expected: lower.len(), found: upper.len() });
        }
        let mut data = lower.to_vec();
        data.extend_from_slice(upper);
        Self::from_flat(data)
    }

    /// From the `[l.., u..]` layout.
    pub fn from_flat(data: Vec<f64>) -> Result<Self, LogicError> {
        if !data.len().is_multiple_of(2) {
            return Err(LogicError::DimensionMismatch { expected: data.len() + 1, found: data.len() });
        }
        let d = data.len() / 2;
        for i in 0..d {
            let (l, u) = (data[i], data[d + i]);
            if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&u) || l > u {
                return Err(LogicError::Invalid { dim: i, lower: l, upper: u });
            }
        }
        Ok(Self { data })
    }

    pub fn uniform(d: usize, lower: f64, upper: f64) -> Self {
        let mut data = vec![lower; d];
        data.resize(2 * d, upper);
        Self { data }
    }

    pub fn all_true(d: usize) -> Self {
        Self::uniform(d, 1.0, 1.0)
    }

    pub fn all_false(d: usize) -> Self {
        Self::uniform(d, 0.0, 0.0)
    }

    pub fn unknown(d: usize) -> Self {
        Self::uniform(d, 0.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.data.len() / 2
    }

    pub fn lower(&self) -> &[f64] {
        &self.data[..self.dim()]
    }

    pub fn upper(&self) -> &[f64] {
        &self.data[self.dim()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TNormKind {
    #[default]
    Min,
    Prod,
    Luk,
}

impl TNormKind {
    pub const ALL: [TNormKind; 3] = [Self::Min, Self::Prod, Self::Luk];

    pub fn name(self) -> &'static str {
        match self {
            Self::Min => "min",
            Self::Prod => "prod",
            Self::Luk => "luk",
        }
    }
}

impl std::fmt::Display for TNormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TNormKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Self::Min),
            "prod" => Ok(Self::Prod),
            "luk" => Ok(Self::Luk),
            _ => Err(format!("unknown t-norm `{s}` (min|prod|luk)")),
        }
    }
}

/// `[1 - u, 1 - l]` per dimension.
pub fn negate(s: &TruthBounds) -> TruthBounds {
    let d = s.dim();
    let mut data = Vec::with_capacity(2 * d);
    data.extend(s.upper().iter().map(|u| 1.0 - u));
    data.extend(s.lower().iter().map(|l| 1.0 - l));
    TruthBounds { data }
}

/// `n + 1` evenly spaced truth values from 0 to 1. Values below one half
/// are built as complements of those above it, which puts every value on the
/// `2^-53` lattice where `1 - (1 - t) == t` holds exactly.
pub fn truth_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|k| if 2 * k >= n { k as f64 / n as f64 } else { 1.0 - (n - k) as f64 / n as f64 }).collect()
}

/// Unweighted t-norm; the minimum is the hard minimum.
pub fn tnorm(kind: TNormKind, truths: &[f64]) -> f64 {
    match kind {
        TNormKind::Min => truths.iter().copied().fold(1.0, f64::min),
        TNormKind::Prod => truths.iter().product(),
        TNormKind::Luk => (1.0 - truths.iter().map(|t| 1.0 - t).sum::<f64>()).max(0.0),
    }
}

/// Weighted t-norm with the default smoothing constant.
pub fn weighted_tnorm(kind: TNormKind, weights: &[f64], truths: &[f64]) -> Result<f64, LogicError> {
    weighted_tnorm_alpha(kind, SMOOTHMIN_ALPHA, weights, truths)
}

/// Weighted t-norm. The weighted minimum is the smoothmin
/// `Σ t w e^{αt} / Σ w e^{αt}`; product is `∏ t^w`; Łukasiewicz is
/// `max(0, 1 - Σ w (1 - t))`.
pub fn weighted_tnorm_alpha(kind: TNormKind, alpha: f64, weights: &[f64], truths: &[f64]) -> Result<f64, LogicError> {
    if weights.len() != truths.len() {
        return Err(LogicError::WeightCount { weights: weights.len(), truths: truths.len() });
    }
    match kind {
        TNormKind::Min => {
            let (mut num, mut den) = (0.0, 0.0);
            for (&w, &t) in weights.iter().zip(truths) {
                let e = w * (alpha * t).exp();
                num += t * e;
                den += e;
            }
            if den == 0.0 {
                return Err(LogicError::AllInputsRemoved);
            }
            Ok(num / den)
        }
        TNormKind::Prod => Ok(weights.iter().zip(truths).map(|(&w, &t)| t.powf(w)).product()),
        TNormKind::Luk => Ok((1.0 - weights.iter().zip(truths).map(|(&w, &t)| w * (1.0 - t)).sum::<f64>()).max(0.0)),
    }
}

fn check_dims(inputs: &[TruthBounds]) -> Result<usize, LogicError> {
    let first = inputs.first().ok_or(LogicError::NoInputs)?;
    let d = first.dim();
    for s in inputs {
        if s.dim() != d {
            return Err(LogicError::DimensionMismatch { expected: d, found: s.dim() });
        }
    }
    Ok(d)
}

/// Result of a conjunction and the number of dimensions whose bounds crossed
/// and were collapsed to their midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Conjunction {
    pub bounds: TruthBounds,
    pub repairs: usize,
}

/// Per-dimension t-norm over the lowers and the uppers of `inputs`.
/// `weights[j][i]` weighs input `j` at dimension `i`; `None` uses the
/// unweighted t-norm.
pub fn conjoin_bounds(
    kind: TNormKind,
    weights: Option<&[Vec<f64>]>,
    inputs: &[TruthBounds],
) -> Result<Conjunction, LogicError> {
    let d = check_dims(inputs)?;
    if let Some(w) = weights {
        if w.len() != inputs.len() {
            return Err(LogicError::WeightCount { weights: w.len(), truths: inputs.len() });
        }
        for wj in w {
            if wj.len() != d {
                return Err(LogicError::DimensionMismatch { expected: d, found: wj.len() });
            }
        }
    }
    let k = inputs.len();
    let mut data = vec![0.0; 2 * d];
    let mut repairs = 0;
    let mut ls = vec![0.0; k];
    let mut us = vec![0.0; k];
    let mut ws = vec![1.0; k];
    for i in 0..d {
        for j in 0..k {
            ls[j] = inputs[j].lower()[i];
            us[j] = inputs[j].upper()[i];
            if let Some(w) = weights {
                ws[j] = w[j][i];
            }
        }
        let (mut l, mut u) = match weights {
            None => (tnorm(kind, &ls), tnorm(kind, &us)),
            Some(_) => (weighted_tnorm(kind, &ws, &ls)?, weighted_tnorm(kind, &ws, &us)?),
        };
        if l > u {
            let mid = 0.5 * (l + u);
            l = mid;
            u = mid;
            repairs += 1;
        }
        data[i] = l.clamp(0.0, 1.0);
        data[d + i] = u.clamp(0.0, 1.0);
    }
    Ok(Conjunction { bounds: TruthBounds { data }, repairs })
}

/// `¬(¬x_1 ∧ … ∧ ¬x_k)`.
pub fn disjoin_bounds(
    kind: TNormKind,
    weights: Option<&[Vec<f64>]>,
    inputs: &[TruthBounds],
) -> Result<Conjunction, LogicError> {
    let negated: Vec<TruthBounds> = inputs.iter().map(negate).collect();
    let c = conjoin_bounds(kind, weights, &negated)?;
    Ok(Conjunction { bounds: negate(&c.bounds), repairs: c.repairs })
}

/// Mean absolute difference over all `2d` bound slots.
pub fn dissimilarity(a: &TruthBounds, b: &TruthBounds) -> Result<f64, LogicError> {
    flat_dissimilarity(a.as_slice(), b.as_slice())
}

/// [`dissimilarity`] on raw slices, also used for point truths.
pub fn flat_dissimilarity(a: &[f64], b: &[f64]) -> Result<f64, LogicError> {
    if a.len() != b.len() {
        return Err(LogicError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `u_i - l_i` per dimension.
pub fn widths(s: &TruthBounds) -> Vec<f64> {
    s.lower().iter().zip(s.upper()).map(|(l, u)| u - l).collect()
}

/// `log(max(u_i - l_i, ε))` per dimension.
pub fn entropy_vector(s: &TruthBounds) -> Vec<f64> {
    widths(s).into_iter().map(|w| w.max(ENTROPY_EPS).ln()).collect()
}
