//! Mean/covariance statistics for each normalization method.
//!
//! A group slice is a `C_g x P` matrix whose columns are pixels: the whole
//! mini-batch (`P = N*H*W`) for the batch methods, a single sample
//! (`P = H*W`) for the instance methods. The layer-moment construction
//! derives the all-channel statistics of a sample from its instance moments.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, SymMatrix};

/// The statistic methods the layer can mix over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodTag {
    /// Batch whitening: full covariance over all N*H*W pixels.
    Bw,
    /// Instance whitening: full covariance per sample.
    Iw,
    /// Batch normalization: diagonal of the batch covariance.
    Bn,
    /// Instance normalization: diagonal of the instance covariance.
    In,
    /// Layer normalization: scalar mean/variance over all channels of a sample.
    Ln,
}

impl MethodTag {
    pub const ALL: [MethodTag; 5] = [
        MethodTag::Bw,
        MethodTag::Iw,
        MethodTag::Bn,
        MethodTag::In,
        MethodTag::Ln,
    ];

    /// True for methods whose statistics come from the whole mini-batch.
    pub fn is_batch_scoped(self) -> bool {
        matches!(self, MethodTag::Bw | MethodTag::Bn)
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodTag::Bw => "bw",
            MethodTag::Iw => "iw",
            MethodTag::Bn => "bn",
            MethodTag::In => "in",
            MethodTag::Ln => "ln",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bw" => Ok(MethodTag::Bw),
            "iw" => Ok(MethodTag::Iw),
            "bn" => Ok(MethodTag::Bn),
            "in" => Ok(MethodTag::In),
            "ln" => Ok(MethodTag::Ln),
            other => Err(Error::ConfigError(format!(
                "unknown method '{other}' (expected one of bw, iw, bn, in, ln)"
            ))),
        }
    }
}

impl core::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a comma-separated method list, e.g. `"bw,iw"`.
pub fn parse_omega(s: &str) -> Result<Vec<MethodTag>> {
    let tags: Vec<MethodTag> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(MethodTag::parse)
        .collect::<Result<_>>()?;
    if tags.is_empty() {
        return Err(Error::ConfigError(String::from("empty method set")));
    }
    Ok(tags)
}

/// Mean vector and covariance matrix of one statistic method on one group.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair<S> {
    pub mean: Vec<S>,
    pub cov: SymMatrix<S>,
    /// Pixel count used in the denominator (N*H*W or H*W).
    pub pixel_count: usize,
}

impl<S: Scalar> MomentPair<S> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Biased mean/covariance over the columns of `x`, without the ridge term.
/// The running buffers store these raw statistics.
pub fn batch_moments_raw<S: Scalar>(x: &Matrix<S>) -> Result<MomentPair<S>> {
    let pixels = x.cols();
    if pixels == 0 || x.rows() == 0 {
        return Err(Error::ShapeError(format!(
            "moments of an empty {}x{} slice",
            x.rows(),
            x.cols()
        )));
    }
    let inv_p = S::one() / S::from_usize(pixels);
    let mean: Vec<S> = x.row_sums().iter().map(|&s| s * inv_p).collect();
    let centered = x.sub_col_broadcast(&mean)?;
    let mut gram = centered.matmul_bt(&centered)?;
    gram.scale(inv_p);
    Ok(MomentPair {
        mean,
        cov: SymMatrix::symmetrized(gram)?,
        pixel_count: pixels,
    })
}

/// Mini-batch moments: `mean = X 1 / P`, `cov = (X - mean 1^T)(..)^T / P + eps I`.
pub fn batch_moments<S: Scalar>(x: &Matrix<S>, eps: S) -> Result<MomentPair<S>> {
    if eps <= S::zero() {
        return Err(Error::ConfigError(format!("eps must be positive, got {eps}")));
    }
    let mut pair = batch_moments_raw(x)?;
    pair.cov.add_scaled_identity(eps);
    Ok(pair)
}

/// Per-sample moments; identical to [`batch_moments`] with denominator `H*W`.
pub fn instance_moments<S: Scalar>(x_n: &Matrix<S>, eps: S) -> Result<MomentPair<S>> {
    batch_moments(x_n, eps)
}

/// Keeps the covariance diagonal, zeroes the off-diagonal: BW -> BN, IW -> IN.
pub fn diagonalize<S: Scalar>(m: &MomentPair<S>) -> MomentPair<S> {
    MomentPair {
        mean: m.mean.clone(),
        cov: m.cov.diagonal_only(),
        pixel_count: m.pixel_count,
    }
}

/// Layer moments of one sample from its instance moments.
///
/// The scalar mean is the mean of the per-channel means; the scalar variance
/// is the mean of the per-channel variances plus the variance of the
/// per-channel means (law of total variance), which equals the variance of
/// all `C_g * H*W` values of the sample. The ridge eps rides along inside the
/// instance covariance diagonal, so it is added exactly once.
pub fn layer_moments<S: Scalar>(instance: &MomentPair<S>) -> MomentPair<S> {
    let dim = instance.dim();
    let inv_c = S::one() / S::from_usize(dim);
    let mean_of_means = instance.mean.iter().copied().sum::<S>() * inv_c;
    let var_of_means = instance
        .mean
        .iter()
        .map(|&m| (m - mean_of_means) * (m - mean_of_means))
        .sum::<S>()
        * inv_c;
    let mean_of_vars = instance.cov.diagonal().iter().copied().sum::<S>() * inv_c;
    let sigma = mean_of_vars + var_of_means;
    MomentPair {
        mean: vec![mean_of_means; dim],
        cov: SymMatrix::scaled_identity(dim, sigma),
        pixel_count: instance.pixel_count,
    }
}
