//! The switchable whitening layer.
//!
//! Per channel group, the layer computes the mean/covariance statistics of
//! every method in the configured set, mixes them with two softmax weight
//! groups (one for means, one for covariances), whitens each sample with the
//! mixed statistics, and applies a per-channel affine transform. Training
//! maintains exponential running buffers of the raw batch statistics;
//! inference substitutes them for the batch statistics. The backward pass is
//! fully analytic: eigendecomposition gradients with the K-matrix on the
//! exact path, reverse-mode unrolling of the iterate stack on the Newton
//! path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::EigPair;
use crate::scalar::Scalar;
use crate::stats::{
    batch_moments_raw, diagonalize, instance_moments, layer_moments, MethodTag, MomentPair,
};
use crate::tensor::{dot, frobenius_inner, Matrix, SymMatrix, Tensor4};
use crate::whitening::{newton_inverse_sqrt, whiten_apply, zca_inverse_sqrt, NewtonStack, WhiteningPath};

/// Relative eigenvalue-gap threshold below which the eigen backward pass
/// refuses to evaluate the K-matrix.
pub const DEGENERATE_GAP_FACTOR: f64 = 1e-8;

/// Layer configuration: the method set, grouping, and numeric knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SwConfig {
    /// Ordered method set the layer mixes over.
    pub omega: Vec<MethodTag>,
    /// Channels per whitening group; must divide the channel count.
    pub group_size: usize,
    /// Ridge added once inside every method's covariance.
    pub eps: f64,
    /// Running-buffer momentum: `buf = (1 - alpha) buf + alpha batch`.
    pub momentum: f64,
    /// Inverse-square-root route.
    pub path: WhiteningPath,
    /// Importance weights are shared by all groups of a layer. Per-group
    /// weights are not supported; the flag exists so configurations are
    /// explicit about it.
    pub share_lambda_across_groups: bool,
}

impl Default for SwConfig {
    fn default() -> Self {
        Self {
            omega: vec![MethodTag::Bw, MethodTag::Iw],
            group_size: 16,
            eps: 1e-5,
            momentum: 0.1,
            path: WhiteningPath::default(),
            share_lambda_across_groups: true,
        }
    }
}

impl SwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega.is_empty() {
            return Err(Error::ConfigError(String::from("empty method set")));
        }
        for (i, a) in self.omega.iter().enumerate() {
            if self.omega[i + 1..].contains(a) {
                return Err(Error::ConfigError(format!("duplicate method '{a}'")));
            }
        }
        if self.group_size == 0 {
            return Err(Error::ConfigError(String::from("group size must be >= 1")));
        }
        if !(self.eps > 0.0) {
            return Err(Error::ConfigError(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::ConfigError(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        self.path.validate()?;
        if !self.share_lambda_across_groups {
            return Err(Error::ConfigError(String::from(
                "per-group importance weights are not supported",
            )));
        }
        Ok(())
    }

    pub fn methods(&self) -> usize {
        self.omega.len()
    }
}

/// Learnable parameters and running buffers of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SwState<S> {
    /// Mean-mixture control parameters, one per method.
    pub lambda_mean: Vec<S>,
    /// Covariance-mixture control parameters, one per method.
    pub lambda_cov: Vec<S>,
    /// Per-channel scale.
    pub gamma: Vec<S>,
    /// Per-channel shift.
    pub beta: Vec<S>,
    /// Per-group running mean of the raw batch statistics.
    pub running_mean: Vec<Vec<S>>,
    /// Per-group running covariance of the raw batch statistics (no ridge).
    pub running_cov: Vec<SymMatrix<S>>,
    pub step_count: u64,
}

impl<S: Scalar> SwState<S> {
    /// Fresh state: uniform importance weights (lambda = 1), identity affine,
    /// zero running mean, identity running covariance.
    pub fn new(channels: usize, config: &SwConfig) -> Result<Self> {
        config.validate()?;
        let groups = num_groups(channels, config.group_size)?;
        Ok(Self {
            lambda_mean: vec![S::one(); config.omega.len()],
            lambda_cov: vec![S::one(); config.omega.len()],
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![vec![S::zero(); config.group_size]; groups],
            running_cov: vec![SymMatrix::identity(config.group_size); groups],
            step_count: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_groups(&self) -> usize {
        self.running_mean.len()
    }

    fn check_compatible(&self, config: &SwConfig, channels: usize) -> Result<()> {
        if self.channels() != channels {
            return Err(Error::StateError(format!(
                "state has {} channels, input has {channels}",
                self.channels()
            )));
        }
        if self.lambda_mean.len() != config.omega.len()
            || self.lambda_cov.len() != config.omega.len()
        {
            return Err(Error::StateError(format!(
                "state carries {} importance weights, config has {} methods",
                self.lambda_mean.len(),
                config.omega.len()
            )));
        }
        let groups = num_groups(channels, config.group_size)?;
        if self.num_groups() != groups
            || self.running_mean[0].len() != config.group_size
        {
            return Err(Error::StateError(format!(
                "state buffers cover {} groups of {}, config wants {groups} of {}",
                self.num_groups(),
                self.running_mean[0].len(),
                config.group_size
            )));
        }
        Ok(())
    }

    /// Plain SGD step: affine parameters move with `lr_theta`, importance
    /// weights with `lr_phi`.
    pub fn sgd_step(&mut self, grads: &SwGradients<S>, lr_theta: S, lr_phi: S) {
        for (p, g) in self.gamma.iter_mut().zip(grads.dgamma.iter()) {
            *p = *p - lr_theta * *g;
        }
        for (p, g) in self.beta.iter_mut().zip(grads.dbeta.iter()) {
            *p = *p - lr_theta * *g;
        }
        for (p, g) in self.lambda_mean.iter_mut().zip(grads.dlambda_mean.iter()) {
            *p = *p - lr_phi * *g;
        }
        for (p, g) in self.lambda_cov.iter_mut().zip(grads.dlambda_cov.iter()) {
            *p = *p - lr_phi * *g;
        }
    }
}

fn num_groups(channels: usize, group_size: usize) -> Result<usize> {
    if group_size == 0 {
        return Err(Error::ConfigError(String::from("group size must be >= 1")));
    }
    if group_size > channels {
        return Err(Error::ConfigError(format!(
            "group size {group_size} exceeds channel count {channels}"
        )));
    }
    if channels % group_size != 0 {
        return Err(Error::ConfigError(format!(
            "group size {group_size} does not divide channel count {channels}"
        )));
    }
    Ok(channels / group_size)
}

/// Softmax with max-shift. All-equal inputs produce exactly uniform weights.
pub fn importance_weights<S: Scalar>(lambda: &[S]) -> Vec<S> {
    debug_assert!(lambda.iter().all(|v| v.is_finite()));
    let max = lambda
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<S> = lambda.iter().map(|&l| (l - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Convex mixture of per-method moments: `mu = sum_k w_k mu_k`,
/// `Sigma = sum_k w'_k Sigma_k`.
pub fn mix_moments<S: Scalar>(
    per_method: &[&MomentPair<S>],
    omega: &[S],
    omega_prime: &[S],
) -> Result<(Vec<S>, SymMatrix<S>)> {
    if per_method.is_empty() || per_method.len() != omega.len() || omega.len() != omega_prime.len()
    {
        return Err(Error::ShapeError(format!(
            "mix_moments: {} moment pairs, {} mean weights, {} cov weights",
            per_method.len(),
            omega.len(),
            omega_prime.len()
        )));
    }
    let dim = per_method[0].dim();
    let mut mu = vec![S::zero(); dim];
    let mut sigma = SymMatrix::scaled_identity(dim, S::zero());
    for ((pair, &w), &wp) in per_method.iter().zip(omega).zip(omega_prime) {
        if pair.dim() != dim {
            return Err(Error::ShapeError(format!(
                "mix_moments: moment dims {} vs {dim}",
                pair.dim()
            )));
        }
        for (m, &x) in mu.iter_mut().zip(pair.mean.iter()) {
            *m += w * x;
        }
        sigma.blend(S::one(), &pair.cov, wp)?;
    }
    Ok((mu, sigma))
}

/// Splits `(N, C, H, W)` into `C/G` matrices of shape `G x N*H*W`; column
/// index is `n*H*W + h*W + w`.
pub fn split_groups<S: Scalar>(x: &Tensor4<S>, group_size: usize) -> Result<Vec<Matrix<S>>> {
    let (n, c, h, w) = x.shape();
    let groups = num_groups(c, group_size)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut m = Matrix::zeros(group_size, n * hw);
        for r in 0..group_size {
            let channel = g * group_size + r;
            let row = m.row_mut(r);
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        row[ni * hw + hi * w + wi] = x.get(ni, channel, hi, wi);
                    }
                }
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Inverse of [`split_groups`]; bit-exact round trip.
pub fn merge_groups<S: Scalar>(
    groups: &[Matrix<S>],
    shape: (usize, usize, usize, usize),
) -> Result<Tensor4<S>> {
    let (n, c, h, w) = shape;
    if groups.is_empty() {
        return Err(Error::ShapeError(String::from("merge_groups: no groups")));
    }
    let group_size = groups[0].rows();
    if groups.len() * group_size != c {
        return Err(Error::ShapeError(format!(
            "merge_groups: {} groups of {group_size} channels vs C = {c}",
            groups.len()
        )));
    }
    let hw = h * w;
    let mut out = Tensor4::zeros(shape);
    for (g, m) in groups.iter().enumerate() {
        if m.rows() != group_size || m.cols() != n * hw {
            return Err(Error::ShapeError(format!(
                "merge_groups: group {g} is {}x{}, expected {group_size}x{}",
                m.rows(),
                m.cols(),
                n * hw
            )));
        }
        for r in 0..group_size {
            let channel = g * group_size + r;
            let row = m.row(r);
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        out.set(ni, channel, hi, wi, row[ni * hw + hi * w + wi]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-method statistics of one group for one step.
#[derive(Debug, Clone)]
pub enum MethodMoments<S> {
    /// Batch-scoped statistics, shared by every sample.
    Shared(MomentPair<S>),
    /// Per-sample statistics, indexed by sample.
    PerSample(Vec<MomentPair<S>>),
}

impl<S: Scalar> MethodMoments<S> {
    pub fn for_sample(&self, n: usize) -> &MomentPair<S> {
        match self {
            MethodMoments::Shared(p) => p,
            MethodMoments::PerSample(v) => &v[n],
        }
    }
}

/// Whitening-route intermediates cached per sample.
#[derive(Debug, Clone)]
pub enum PathCache<S> {
    Eigen(EigPair<S>),
    Newton(NewtonStack<S>),
}

#[derive(Debug, Clone)]
pub struct SampleCache<S> {
    /// Mixed mean.
    pub mu_hat: Vec<S>,
    /// Mixed covariance.
    pub sigma_hat: SymMatrix<S>,
    /// Whitening matrix actually applied.
    pub u: SymMatrix<S>,
    /// `X_n - mu_hat 1^T`.
    pub centered: Matrix<S>,
    pub path: PathCache<S>,
}

#[derive(Debug, Clone)]
pub struct GroupCache<S> {
    /// Per-method moments, aligned with the configured method set.
    pub moments: Vec<MethodMoments<S>>,
    pub samples: Vec<SampleCache<S>>,
}

/// Everything the backward pass needs from a training forward.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub shape: (usize, usize, usize, usize),
    pub methods: Vec<MethodTag>,
    pub group_size: usize,
    pub path: WhiteningPath,
    /// Mean-mixture weights.
    pub omega: Vec<S>,
    /// Covariance-mixture weights.
    pub omega_prime: Vec<S>,
    /// Output before the affine transform.
    pub pre_affine: Tensor4<S>,
    pub groups: Vec<GroupCache<S>>,
}

/// Gradients returned by [`backward`].
#[derive(Debug, Clone)]
pub struct SwGradients<S> {
    pub dx: Tensor4<S>,
    pub dlambda_mean: Vec<S>,
    pub dlambda_cov: Vec<S>,
    pub dgamma: Vec<S>,
    pub dbeta: Vec<S>,
}

enum Mode {
    Train,
    Eval,
}

/// Training forward: batch statistics come from the mini-batch, running
/// buffers are updated with the raw (ridge-free) batch moments, and the full
/// cache for [`backward`] is returned.
pub fn forward_train<S: Scalar>(
    x: &Tensor4<S>,
    state: &mut SwState<S>,
    config: &SwConfig,
) -> Result<(Tensor4<S>, ForwardCache<S>)> {
    config.validate()?;
    let (_, c, _, _) = x.shape();
    state.check_compatible(config, c)?;
    if !x.all_finite() {
        return Err(Error::InvalidInput(String::from(
            "non-finite entry in layer input",
        )));
    }
    let groups = split_groups(x, config.group_size)?;

    // Batch moments and buffer updates happen every training step, whether
    // or not a batch-scoped method is in the mix.
    let alpha = S::from_f64(config.momentum);
    let one_minus = S::one() - alpha;
    let mut batch_pairs = Vec::with_capacity(groups.len());
    for (g, xg) in groups.iter().enumerate() {
        let raw = batch_moments_raw(xg)?;
        for (buf, &m) in state.running_mean[g].iter_mut().zip(raw.mean.iter()) {
            *buf = one_minus * *buf + alpha * m;
        }
        state.running_cov[g].blend(one_minus, &raw.cov, alpha)?;
        let mut pair = raw;
        pair.cov.add_scaled_identity(S::from_f64(config.eps));
        batch_pairs.push(pair);
    }
    state.step_count += 1;

    let (y, cache) = run_forward(x, &groups, state, config, batch_pairs, Mode::Train)?;
    Ok((y, cache.expect("training mode builds a cache")))
}

/// Inference forward: the running buffers stand in for the batch statistics,
/// nothing is updated, and no cache is produced.
pub fn forward_eval<S: Scalar>(
    x: &Tensor4<S>,
    state: &SwState<S>,
    config: &SwConfig,
) -> Result<Tensor4<S>> {
    config.validate()?;
    let (_, c, _, _) = x.shape();
    state.check_compatible(config, c)?;
    if !x.all_finite() {
        return Err(Error::InvalidInput(String::from(
            "non-finite entry in layer input",
        )));
    }
    let groups = split_groups(x, config.group_size)?;
    let (n, _, h, w) = x.shape();
    let pixels = n * h * w;
    let eps = S::from_f64(config.eps);
    let batch_pairs = (0..groups.len())
        .map(|g| {
            let mut cov = state.running_cov[g].clone();
            cov.add_scaled_identity(eps);
            MomentPair {
                mean: state.running_mean[g].clone(),
                cov,
                pixel_count: pixels,
            }
        })
        .collect();
    let (y, _) = run_forward(x, &groups, state, config, batch_pairs, Mode::Eval)?;
    Ok(y)
}

fn run_forward<S: Scalar>(
    x: &Tensor4<S>,
    groups: &[Matrix<S>],
    state: &SwState<S>,
    config: &SwConfig,
    batch_pairs: Vec<MomentPair<S>>,
    mode: Mode,
) -> Result<(Tensor4<S>, Option<ForwardCache<S>>)> {
    let (n, _, h, w) = x.shape();
    let hw = h * w;
    let eps = S::from_f64(config.eps);
    let omega = importance_weights(&state.lambda_mean);
    let omega_prime = importance_weights(&state.lambda_cov);
    let needs_instance = config
        .omega
        .iter()
        .any(|m| matches!(m, MethodTag::Iw | MethodTag::In | MethodTag::Ln));

    let mut pre_affine = Tensor4::zeros(x.shape());
    let mut group_caches = Vec::with_capacity(groups.len());

    for (g, xg) in groups.iter().enumerate() {
        let batch_pair = &batch_pairs[g];

        let iw_pairs: Vec<MomentPair<S>> = if needs_instance {
            (0..n)
                .map(|ni| instance_moments(&xg.col_block(ni * hw, hw), eps))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let moments: Vec<MethodMoments<S>> = config
            .omega
            .iter()
            .map(|tag| match tag {
                MethodTag::Bw => MethodMoments::Shared(batch_pair.clone()),
                MethodTag::Bn => MethodMoments::Shared(diagonalize(batch_pair)),
                MethodTag::Iw => MethodMoments::PerSample(iw_pairs.clone()),
                MethodTag::In => {
                    MethodMoments::PerSample(iw_pairs.iter().map(diagonalize).collect())
                }
                MethodTag::Ln => {
                    MethodMoments::PerSample(iw_pairs.iter().map(layer_moments).collect())
                }
            })
            .collect();

        let mut samples = Vec::with_capacity(n);
        for ni in 0..n {
            let per_method: Vec<&MomentPair<S>> =
                moments.iter().map(|m| m.for_sample(ni)).collect();
            let (mu_hat, sigma_hat) = mix_moments(&per_method, &omega, &omega_prime)?;

            let (u, path_cache) = match config.path {
                WhiteningPath::Eigen => {
                    let (u, eig) = zca_inverse_sqrt(&sigma_hat)?;
                    (u, PathCache::Eigen(eig))
                }
                WhiteningPath::Newton { t } => {
                    let (u, stack) = newton_inverse_sqrt(&sigma_hat, t)?;
                    (u, PathCache::Newton(stack))
                }
            };

            let xn = xg.col_block(ni * hw, hw);
            let xhat = whiten_apply(&xn, &mu_hat, &u)?;

            for r in 0..config.group_size {
                let channel = g * config.group_size + r;
                let row = xhat.row(r);
                for hi in 0..h {
                    for wi in 0..w {
                        pre_affine.set(ni, channel, hi, wi, row[hi * w + wi]);
                    }
                }
            }

            if matches!(mode, Mode::Train) {
                let centered = xn.sub_col_broadcast(&mu_hat)?;
                samples.push(SampleCache {
                    mu_hat,
                    sigma_hat,
                    u,
                    centered,
                    path: path_cache,
                });
            }
        }
        if matches!(mode, Mode::Train) {
            group_caches.push(GroupCache { moments, samples });
        }
    }

    // Per-channel affine.
    let mut y = pre_affine.clone();
    {
        let (nn, c, h, w) = y.shape();
        for ni in 0..nn {
            for ci in 0..c {
                let gamma = state.gamma[ci];
                let beta = state.beta[ci];
                for hi in 0..h {
                    for wi in 0..w {
                        let v = y.get(ni, ci, hi, wi);
                        y.set(ni, ci, hi, wi, gamma * v + beta);
                    }
                }
            }
        }
    }

    let cache = match mode {
        Mode::Train => Some(ForwardCache {
            shape: x.shape(),
            methods: config.omega.clone(),
            group_size: config.group_size,
            path: config.path,
            omega,
            omega_prime,
            pre_affine,
            groups: group_caches,
        }),
        Mode::Eval => None,
    };
    Ok((y, cache))
}

/// Analytic backward pass.
///
/// Consumes the upstream gradient with respect to the layer output and the
/// cache of the matching training forward; produces gradients for the input,
/// both importance-weight groups, and the affine parameters.
pub fn backward<S: Scalar>(
    dy: &Tensor4<S>,
    cache: &ForwardCache<S>,
    state: &SwState<S>,
    config: &SwConfig,
) -> Result<SwGradients<S>> {
    if dy.shape() != cache.shape {
        return Err(Error::ShapeError(format!(
            "backward: dy shape {:?} vs cached {:?}",
            dy.shape(),
            cache.shape
        )));
    }
    if cache.methods != config.omega
        || cache.group_size != config.group_size
        || cache.path != config.path
    {
        return Err(Error::StateError(String::from(
            "cache does not match the layer configuration",
        )));
    }
    let (n, c, h, w) = cache.shape;
    state.check_compatible(config, c)?;
    let hw = h * w;
    let gs = config.group_size;
    let k_methods = config.omega.len();

    // Affine backward.
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut dxhat = Tensor4::zeros(cache.shape);
    for ni in 0..n {
        for ci in 0..c {
            let gamma = state.gamma[ci];
            for hi in 0..h {
                for wi in 0..w {
                    let g = dy.get(ni, ci, hi, wi);
                    dgamma[ci] += g * cache.pre_affine.get(ni, ci, hi, wi);
                    dbeta[ci] += g;
                    dxhat.set(ni, ci, hi, wi, gamma * g);
                }
            }
        }
    }

    let dxhat_groups = split_groups(&dxhat, gs)?;
    let mut dx_groups: Vec<Matrix<S>> = Vec::with_capacity(dxhat_groups.len());
    let mut a_mean = vec![S::zero(); k_methods];
    let mut b_cov = vec![S::zero(); k_methods];

    let two = S::from_f64(2.0);
    let inv_nhw = S::one() / S::from_usize(n * hw);
    let inv_hw = S::one() / S::from_usize(hw);
    let inv_ghw = S::one() / S::from_usize(gs * hw);

    for (g, ghat) in dxhat_groups.iter().enumerate() {
        let gc = &cache.groups[g];

        // Per-sample gradients of the mixed moments.
        let mut dmu: Vec<Vec<S>> = Vec::with_capacity(n);
        let mut dsigma: Vec<Matrix<S>> = Vec::with_capacity(n);
        for ni in 0..n {
            let sample = &gc.samples[ni];
            let ghat_n = ghat.col_block(ni * hw, hw);
            let (m_n, v_n) = match &sample.path {
                PathCache::Eigen(eig) => backward_eigen(&ghat_n, sample, eig)?,
                PathCache::Newton(stack) => backward_newton(&ghat_n, sample, stack)?,
            };
            dmu.push(v_n);
            dsigma.push(m_n);
        }

        // Importance-weight accumulators (importance weights are shared
        // across groups, so sums run over groups and samples).
        for (k, method) in gc.moments.iter().enumerate() {
            for ni in 0..n {
                let pair = method.for_sample(ni);
                a_mean[k] += dot(&dmu[ni], &pair.mean);
                b_cov[k] += frobenius_inner(&dsigma[ni], pair.cov.as_matrix())?;
            }
        }

        // Batch-shared sums.
        let mut sum_dmu = vec![S::zero(); gs];
        for v in &dmu {
            for (s, &x) in sum_dmu.iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut sum_dsigma = Matrix::zeros(gs, gs);
        for m in &dsigma {
            sum_dsigma.add_scaled(S::one(), m)?;
        }

        // Per-method weights by position.
        let weight = |tag: MethodTag| -> Option<(S, S)> {
            config
                .omega
                .iter()
                .position(|&t| t == tag)
                .map(|k| (cache.omega[k], cache.omega_prime[k]))
        };
        let w_bw = weight(MethodTag::Bw);
        let w_bn = weight(MethodTag::Bn);
        let w_iw = weight(MethodTag::Iw);
        let w_in = weight(MethodTag::In);
        let w_ln = weight(MethodTag::Ln);

        let batch_mean: Option<Vec<S>> = config
            .omega
            .iter()
            .position(|t| t.is_batch_scoped())
            .map(|k| gc.moments[k].for_sample(0).mean.clone());

        // Combined batch covariance flow: full part from BW, diagonal
        // projection from BN.
        let batch_cov_matrix: Option<Matrix<S>> = {
            let mut m: Option<Matrix<S>> = None;
            if let Some((_, wp)) = w_bw {
                let mut sym = sum_dsigma.sym_part()?;
                sym.scale(two * wp * inv_nhw);
                m = Some(sym);
            }
            if let Some((_, wp)) = w_bn {
                let mut diag = Matrix::zeros(gs, gs);
                for i in 0..gs {
                    diag.set(i, i, two * wp * inv_nhw * sum_dsigma.get(i, i));
                }
                match &mut m {
                    Some(acc) => acc.add_scaled(S::one(), &diag)?,
                    None => m = Some(diag),
                }
            }
            m
        };

        let mut dx_g = Matrix::zeros(gs, n * hw);
        for ni in 0..n {
            let sample = &gc.samples[ni];
            let ghat_n = ghat.col_block(ni * hw, hw);

            // Direct whitening term: U^T Ghat (U is exactly symmetric).
            let mut dx_n = sample.u.as_matrix().matmul(&ghat_n)?;

            // Mean flows. Batch-scoped methods spread the summed gradient
            // over every pixel of the batch; instance-scoped ones stay within
            // the sample.
            let mut mean_col = vec![S::zero(); gs];
            for (tag_weight, scale, source) in [
                (w_bw, inv_nhw, &sum_dmu),
                (w_bn, inv_nhw, &sum_dmu),
                (w_iw, inv_hw, &dmu[ni]),
                (w_in, inv_hw, &dmu[ni]),
            ] {
                if let Some((wm, _)) = tag_weight {
                    for (acc, &v) in mean_col.iter_mut().zip(source.iter()) {
                        *acc += wm * scale * v;
                    }
                }
            }
            let mut constant_add = S::zero();
            if let Some((wm, _)) = w_ln {
                let total: S = dmu[ni].iter().copied().sum();
                constant_add += wm * inv_ghw * total;
            }
            for r in 0..gs {
                let add = mean_col[r] + constant_add;
                if add != S::zero() {
                    for v in dx_n.row_mut(r) {
                        *v += add;
                    }
                }
            }

            // Covariance flows.
            if let Some(bm) = &batch_cov_matrix {
                let batch_mean = batch_mean.as_ref().expect("batch method present");
                let shift: Vec<S> = sample
                    .mu_hat
                    .iter()
                    .zip(batch_mean.iter())
                    .map(|(&mh, &mb)| mh - mb)
                    .collect();
                let xc_bw = add_col_broadcast(&sample.centered, &shift);
                dx_n.add_scaled(S::one(), &bm.matmul(&xc_bw)?)?;
            }
            if w_iw.is_some() || w_in.is_some() {
                let inst_mean = instance_mean(config, gc, ni)?;
                let shift: Vec<S> = sample
                    .mu_hat
                    .iter()
                    .zip(inst_mean.iter())
                    .map(|(&mh, &mi)| mh - mi)
                    .collect();
                let xc_iw = add_col_broadcast(&sample.centered, &shift);
                let mut inst_cov = Matrix::zeros(gs, gs);
                if let Some((_, wp)) = w_iw {
                    let mut sym = dsigma[ni].sym_part()?;
                    sym.scale(two * wp * inv_hw);
                    inst_cov.add_scaled(S::one(), &sym)?;
                }
                if let Some((_, wp)) = w_in {
                    for i in 0..gs {
                        let v = inst_cov.get(i, i) + two * wp * inv_hw * dsigma[ni].get(i, i);
                        inst_cov.set(i, i, v);
                    }
                }
                dx_n.add_scaled(S::one(), &inst_cov.matmul(&xc_iw)?)?;
            }
            if let Some((_, wp)) = w_ln {
                let k_ln = config
                    .omega
                    .iter()
                    .position(|&t| t == MethodTag::Ln)
                    .expect("ln present");
                let ln_mean = &gc.moments[k_ln].for_sample(ni).mean;
                let shift: Vec<S> = sample
                    .mu_hat
                    .iter()
                    .zip(ln_mean.iter())
                    .map(|(&mh, &ml)| mh - ml)
                    .collect();
                let xc_ln = add_col_broadcast(&sample.centered, &shift);
                let tr: S = (0..gs).map(|i| dsigma[ni].get(i, i)).sum();
                let coeff = wp * tr * two * inv_ghw;
                dx_n.add_scaled(coeff, &xc_ln)?;
            }

            dx_g.set_col_block(ni * hw, &dx_n);
        }
        dx_groups.push(dx_g);
    }

    let dx = merge_groups(&dx_groups, cache.shape)?;

    // Softmax Jacobian, generalized to any number of methods: it reduces to
    // w_k (1 - w_k) a_k - sum_{z != k} w_k w_z a_z.
    let dlambda_mean = softmax_backward(&cache.omega, &a_mean);
    let dlambda_cov = softmax_backward(&cache.omega_prime, &b_cov);

    Ok(SwGradients {
        dx,
        dlambda_mean,
        dlambda_cov,
        dgamma,
        dbeta,
    })
}

fn softmax_backward<S: Scalar>(weights: &[S], upstream: &[S]) -> Vec<S> {
    let mixed: S = weights
        .iter()
        .zip(upstream.iter())
        .map(|(&w, &u)| w * u)
        .sum();
    weights
        .iter()
        .zip(upstream.iter())
        .map(|(&w, &u)| w * (u - mixed))
        .collect()
}

fn instance_mean<'a, S: Scalar>(
    config: &SwConfig,
    gc: &'a GroupCache<S>,
    sample: usize,
) -> Result<&'a [S]> {
    config
        .omega
        .iter()
        .position(|&t| matches!(t, MethodTag::Iw | MethodTag::In))
        .map(|k| gc.moments[k].for_sample(sample).mean.as_slice())
        .ok_or_else(|| Error::StateError(String::from("no instance-scoped method in cache")))
}

fn add_col_broadcast<S: Scalar>(m: &Matrix<S>, v: &[S]) -> Matrix<S> {
    let mut out = m.clone();
    for (r, &add) in v.iter().enumerate() {
        for x in out.row_mut(r) {
            *x += add;
        }
    }
    out
}

/// Appendix-style eigendecomposition backward: gradients of the loss with
/// respect to the mixed covariance and mean for one sample.
fn backward_eigen<S: Scalar>(
    ghat_n: &Matrix<S>,
    sample: &SampleCache<S>,
    eig: &EigPair<S>,
) -> Result<(Matrix<S>, Vec<S>)> {
    let dim = eig.dim();
    let values = &eig.values;

    // Eigenvalues are sorted descending, so the smallest pairwise gap is the
    // smallest adjacent difference.
    if dim > 1 {
        let threshold = S::from_f64(DEGENERATE_GAP_FACTOR) * values[0].abs();
        let mut min_gap = S::infinity();
        for i in 0..dim - 1 {
            let gap = (values[i] - values[i + 1]).abs();
            if gap < min_gap {
                min_gap = gap;
            }
        }
        if min_gap < threshold {
            return Err(Error::DegenerateSpectrum {
                gap: min_gap.as_f64(),
                threshold: threshold.as_f64(),
            });
        }
    }

    let d = &eig.vectors;
    let xc = &sample.centered;
    let half = S::from_f64(0.5);

    // X~ = L^{-1/2} D^T Xc
    let mut xt = d.matmul_at(xc)?;
    for i in 0..dim {
        let s = S::one() / values[i].sqrt();
        for v in xt.row_mut(i) {
            *v *= s;
        }
    }

    // dX~ = D^T Ghat
    let dxt = d.matmul_at(ghat_n)?;
    // dV = dX~ Xc^T
    let dv = dxt.matmul_bt(xc)?;
    // dL_i = -1/2 l_i^{-3/2} [dV D]_ii
    let dvd = dv.matmul(d)?;
    let dlam: Vec<S> = (0..dim)
        .map(|i| -half / (values[i] * values[i].sqrt()) * dvd.get(i, i))
        .collect();
    // dD = dV^T L^{-1/2} + Ghat X~^T
    let mut dd = dv.transpose();
    for i in 0..dim {
        for j in 0..dim {
            let v = dd.get(i, j) / values[j].sqrt();
            dd.set(i, j, v);
        }
    }
    dd.add_scaled(S::one(), &ghat_n.matmul_bt(&xt)?)?;

    // dSigma = D [ K^T o (D^T dD) + diag(dL) ] D^T with K_ij = 1/(l_i - l_j).
    let dtdd = d.matmul_at(&dd)?;
    let mut inner = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            if i == j {
                inner.set(i, j, dlam[i]);
            } else {
                inner.set(i, j, dtdd.get(i, j) / (values[j] - values[i]));
            }
        }
    }
    let m_n = d.matmul(&inner)?.matmul_bt(d)?;

    let v_n = mu_hat_gradient(&sample.u, ghat_n)?;
    Ok((m_n, v_n))
}

/// Exact reverse-mode unrolling of the Newton iteration.
fn backward_newton<S: Scalar>(
    ghat_n: &Matrix<S>,
    sample: &SampleCache<S>,
    stack: &NewtonStack<S>,
) -> Result<(Matrix<S>, Vec<S>)> {
    let dim = stack.sigma_n.dim();
    let xc = &sample.centered;
    let tr = stack.trace_value;
    let half = S::from_f64(0.5);
    let three_half = S::from_f64(1.5);

    // dU from Xhat = U Xc; the forward symmetrized P_T / sqrt(tr), and the
    // symmetrization is self-adjoint.
    let du = ghat_n.matmul_bt(xc)?.sym_part()?;
    let inv_sqrt_tr = S::one() / tr.sqrt();
    let mut g_p = du.scaled(inv_sqrt_tr);
    let mut d_tr = frobenius_inner(&du, &stack.iterates[stack.steps()])?
        * (-half)
        / (tr * tr.sqrt());

    let s_mat = stack.sigma_n.as_matrix();
    let mut ds = Matrix::zeros(dim, dim);
    for k in (1..=stack.steps()).rev() {
        let a = &stack.iterates[k - 1];
        let at = a.transpose();
        let at2 = at.matmul(&at)?;
        let a3t = at2.matmul(&at)?; // (A^3)^T

        // dS += -1/2 (A^3)^T G
        ds.add_scaled(-half, &a3t.matmul(&g_p)?)?;

        // dA = 3/2 G - 1/2 [ G S A^T2 + A^T G S A^T + A^T2 G S ]  (S = S^T)
        let gs = g_p.matmul(s_mat)?;
        let mut da = g_p.scaled(three_half);
        da.add_scaled(-half, &gs.matmul(&at2)?)?;
        da.add_scaled(-half, &at.matmul(&gs)?.matmul(&at)?)?;
        da.add_scaled(-half, &at2.matmul(&gs)?)?;
        g_p = da;
    }

    // S = Sigma / tr and tr = tr(Sigma).
    let sigma_hat = sample.sigma_hat.as_matrix();
    d_tr += -frobenius_inner(&ds, sigma_hat)? / (tr * tr);
    let mut m_n = ds;
    m_n.scale(S::one() / tr);
    for i in 0..dim {
        let v = m_n.get(i, i) + d_tr;
        m_n.set(i, i, v);
    }

    let v_n = mu_hat_gradient(&sample.u, ghat_n)?;
    Ok((m_n, v_n))
}

/// `dL/dmu_hat = -(U^T Ghat) 1`; `U` is stored exactly symmetric.
fn mu_hat_gradient<S: Scalar>(u: &SymMatrix<S>, ghat_n: &Matrix<S>) -> Result<Vec<S>> {
    let ug = u.as_matrix().matmul(ghat_n)?;
    Ok(ug.row_sums().iter().map(|&s| -s).collect())
}
