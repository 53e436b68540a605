//! Client contribution normalization.
//!
//! Given the mean latent representation `z_r` of every participating client:
//!
//! 1. `S(r, p) = cos(z_r, z_p)` for `r != p`, `S(r, r) = 1`;
//! 2. `sigma_q = sum_p S(q, p)` (row sums, diagonal included);
//! 3. `Lambda_r = sum_{q != r} exp(sigma_q / T) / sum_q exp(sigma_q / T)`,
//!    i.e. one minus the temperature softmax of the row sums;
//! 4. `u_r = Lambda_r nu_r / (Lambda . nu)` replaces the strategy's own
//!    importance weights `nu` in aggregation.
//!
//! A client that resembles the cohort has a large row sum and therefore a
//! small contribution factor; an outlier gets the largest one. The factors
//! always sum to `R - 1`.

use crate::math;
use crate::{Error, Result};

/// Default softmax temperature. Values below one sharpen the factors.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Latents with a smaller Euclidean norm are treated as degenerate.
pub const MIN_LATENT_NORM: f64 = 1e-12;

const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Mean last-hidden-layer activation of one client over its local data.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanLatent {
    pub client_id: usize,
    pub z: Vec<f64>,
}

impl MeanLatent {
    pub fn new(client_id: usize, z: Vec<f64>) -> Result<Self> {
        if !math::all_finite(&z) {
            return Err(Error::NonFinite(format!("mean latent of client {client_id}")));
        }
        Ok(Self { client_id, z })
    }

    pub fn norm(&self) -> f64 {
        math::dot(&self.z, &self.z).sqrt()
    }

    fn check_norm(&self) -> Result<()> {
        let norm = self.norm();
        if norm < MIN_LATENT_NORM {
            return Err(Error::DegenerateLatent { client: self.client_id, norm });
        }
        Ok(())
    }
}

/// Cosine similarity of two latents, clamped to `[-1, 1]`.
pub fn cosine(a: &MeanLatent, b: &MeanLatent) -> Result<f64> {
    if a.z.len() != b.z.len() {
        return Err(Error::DimensionMismatch(format!(
            "latent of client {} has {} entries, client {} has {}",
            a.client_id,
            a.z.len(),
            b.client_id,
            b.z.len()
        )));
    }
    a.check_norm()?;
    b.check_norm()?;
    Ok(math::cosine(&a.z, &b.z).expect("norms checked"))
}

/// Symmetric `R x R` matrix of pairwise cosine similarities with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from explicit rows, checking the invariants.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        if size < 2 {
            return Err(Error::InvalidArgument(format!("similarity matrix needs R >= 2, got {size}")));
        }
        if let Some(r) = rows.iter().position(|row| row.len() != size) {
            return Err(Error::DimensionMismatch(format!("row {r} does not have {size} entries")));
        }
        for r in 0..size {
            if rows[r][r] != 1.0 {
                return Err(Error::InvalidArgument(format!("S({r},{r}) = {} but must be 1", rows[r][r])));
            }
            for p in 0..size {
                let v = rows[r][p];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("S({r},{p}) = {v} outside [-1, 1]")));
                }
                if v != rows[p][r] {
                    return Err(Error::InvalidArgument(format!("S is not symmetric at ({r},{p})")));
                }
            }
        }
        Ok(Self { size, entries: rows.concat() })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, r: usize, p: usize) -> f64 {
        self.entries[r * self.size + p]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.size..(r + 1) * self.size]
    }

    /// `sigma_q = sum_p S(q, p)`, including the diagonal.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.size).map(|q| self.row(q).iter().sum()).collect()
    }
}

pub fn similarity_matrix(latents: &[MeanLatent]) -> Result<SimilarityMatrix> {
    let size = latents.len();
    if size < 2 {
        return Err(Error::InvalidArgument(format!("similarity needs at least 2 clients, got {size}")));
    }
    for z in latents {
        z.check_norm()?;
    }
    let mut entries = vec![1.0; size * size];
    for r in 0..size {
        for p in r + 1..size {
            let c = cosine(&latents[r], &latents[p])?;
            entries[r * size + p] = c;
            entries[p * size + r] = c;
        }
    }
    Ok(SimilarityMatrix { size, entries })
}

/// Per-client contribution factors `Lambda` at temperature `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionVector {
    lambda: Vec<f64>,
    temperature: f64,
}

impl ContributionVector {
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn into_lambda(self) -> Vec<f64> {
        self.lambda
    }
}

pub fn contribution(s: &SimilarityMatrix, temperature: f64) -> Result<ContributionVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be finite and > 0, got {temperature}")));
    }
    let scaled: Vec<f64> = s.row_sums().iter().map(|sigma| sigma / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    // Summing the other clients directly keeps an outlier's factor accurate
    // when its own softmax share is close to one. The exact factor lies in
    // (0, 1); results that round onto either end are rounded toward the
    // interior instead.
    let lambda = (0..weights.len())
        .map(|r| {
            let others: f64 = weights.iter().enumerate().filter(|&(q, _)| q != r).map(|(_, w)| w).sum();
            (others / total).clamp(f64::MIN_POSITIVE, LARGEST_BELOW_ONE)
        })
        .collect();
    Ok(ContributionVector { lambda, temperature })
}

/// Aggregation weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    /// Accepts non-negative weights that sum to one within `1e-9`.
    pub fn new(u: Vec<f64>) -> Result<Self> {
        check_simplex(&u, "aggregation weights")?;
        Ok(Self(u))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} are empty")));
    }
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} contain invalid entry {x}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} sum to {sum}, not 1")));
    }
    Ok(())
}

/// `u_r = Lambda_r nu_r / (Lambda . nu)`.
///
/// When every factor is equal the factors cancel and `nu` is returned as is.
pub fn normalize_weights(lambda: &[f64], nu: &[f64]) -> Result<AggregationWeights> {
    if lambda.len() != nu.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} contribution factors for {} importance weights",
            lambda.len(),
            nu.len()
        )));
    }
    check_simplex(nu, "importance weights")?;
    if let Some(x) = lambda.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("invalid contribution factor {x}")));
    }
    if lambda.iter().all(|&l| l == lambda[0]) && lambda[0] > 0.0 {
        return Ok(AggregationWeights(nu.to_vec()));
    }
    let dot = math::dot(lambda, nu);
    if !(dot > 0.0) {
        return Err(Error::InvalidArgument(format!("Lambda . nu = {dot} must be positive")));
    }
    Ok(AggregationWeights(lambda.iter().zip(nu).map(|(l, n)| l * n / dot).collect()))
}
