//! Large-margin Gaussian-mixture loss with diagonal covariances, in batched
//! matrix form, with analytic gradients for features, means and
//! log-variances.
//!
//! For a batch `F` (n×h), means `M` (K×h) and precisions `P = 1 / var`
//! (K×h), the squared Mahalanobis distances are
//!
//! ```text
//! D = ½ [ (F⊙F)·Pᵀ − 2·F·(M⊙P)ᵀ + 1·g' ],   g'_k = Σ_j M_kj² P_kj
//! ```
//!
//! and the logits are `−D ⊙ (1 + α·Y) + 1·logqᵀ` with
//! `logq_k = −½ Σ_j log var_kj`. The loss is the softmax cross-entropy of
//! the logits plus `λ` times the likelihood term `D[i, z_i] − logq[z_i]`,
//! both averaged over the batch.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm_distribution::GmmParams;

/// Margin and regularization weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgmConfig {
    /// Margin parameter; the true-class distance is scaled by `1 + alpha`.
    pub alpha: f64,
    /// Weight of the likelihood regularizer.
    pub lambda_lkd: f64,
}

impl Default for LgmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda_lkd: 0.1,
        }
    }
}

impl LgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha = {} must be >= 0", self.alpha)));
        }
        if !(self.lambda_lkd.is_finite() && self.lambda_lkd >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_lkd = {} must be >= 0",
                self.lambda_lkd
            )));
        }
        Ok(())
    }
}

/// Squared Mahalanobis distances (halved), one row per sample, one column
/// per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Loss values and gradients of one evaluation.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub total: f64,
    pub cls: f64,
    pub lkd: f64,
    /// `cls_i + λ·lkd_i` for every sample, unweighted.
    pub per_sample: Array1<f64>,
    pub grad_features: Array2<f64>,
    pub grad_means: Array2<f64>,
    pub grad_log_variances: Array2<f64>,
}

fn check_features(features: &ArrayView2<f64>, params: &GmmParams) -> Result<()> {
    if features.ncols() != params.dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, mixture dim is {}",
            features.ncols(),
            params.dim()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("features contain non-finite values".into()));
    }
    Ok(())
}

fn precisions(params: &GmmParams) -> Array2<f64> {
    params.log_variances().mapv(|lv| (-lv).exp())
}

/// Batched distances via the matrix identity above.
pub fn mahalanobis_distances(
    features: ArrayView2<f64>,
    params: &GmmParams,
) -> Result<DistanceMatrix> {
    check_features(&features, params)?;
    let prec = precisions(params);
    let means = params.means();
    let sq = features.mapv(|v| v * v);
    let weighted_means = means * &prec;
    let g = (&weighted_means * means).sum_axis(Axis(1));
    let mut d = sq.dot(&prec.t()) - 2.0 * features.dot(&weighted_means.t());
    d += &g.view().insert_axis(Axis(0));
    d.mapv_inplace(|v| (0.5 * v).max(0.0));
    Ok(DistanceMatrix(d))
}

/// `logq_k = −½ Σ_j log var_kj`, the log of `|Λ_k|^{-1/2}`.
pub fn log_q(params: &GmmParams) -> Array1<f64> {
    params.log_variances().sum_axis(Axis(1)) * -0.5
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), class_count));
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::Input(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        y[[i, l]] = 1.0;
    }
    Ok(y)
}

fn check_one_hot(labels: &ArrayView2<f64>) -> Result<()> {
    for (i, row) in labels.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Input(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

fn check_matching(d: &DistanceMatrix, labels: &ArrayView2<f64>, logq: &Array1<f64>) -> Result<()> {
    if d.0.dim() != labels.dim() || logq.len() != d.0.ncols() {
        return Err(Error::Shape(format!(
            "distances {:?}, labels {:?}, logq {}",
            d.0.dim(),
            labels.dim(),
            logq.len()
        )));
    }
    Ok(())
}

/// `logit = −D ⊙ (Ones + α·label) + Q`.
pub fn lgm_logits(
    d: &DistanceMatrix,
    labels: ArrayView2<f64>,
    alpha: f64,
    logq: &Array1<f64>,
) -> Result<Array2<f64>> {
    check_matching(d, &labels, logq)?;
    check_one_hot(&labels)?;
    let mut logits = Zip::from(&d.0)
        .and(&labels)
        .map_collect(|&dist, &y| -dist * (1.0 + alpha * y));
    logits += &logq.view().insert_axis(Axis(0));
    Ok(logits)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Weighted softmax cross-entropy. Returns the per-sample losses and the
/// gradient of `Σ_i w_i·loss_i` with respect to the logits.
pub fn softmax_cross_entropy(
    logits: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, k) = logits.dim();
    check_labels(n, k, labels)?;
    if weights.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} weights", weights.len())));
    }
    let log_p = log_softmax(logits);
    let per_sample = Array1::from_iter(labels.iter().enumerate().map(|(i, &z)| -log_p[[i, z]]));
    let mut grad = log_p.mapv(f64::exp);
    for (i, &z) in labels.iter().enumerate() {
        grad[[i, z]] -= 1.0;
        grad.row_mut(i).mapv_inplace(|g| g * weights[i]);
    }
    Ok((per_sample, grad))
}

/// Batch-mean cross-entropy of softmax(logits) against integer labels.
pub fn classification_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dim();
    check_labels(n, k, labels)?;
    if n == 0 {
        return Ok(0.0);
    }
    let log_p = log_softmax(logits);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &z)| -log_p[[i, z]])
        .sum::<f64>()
        / n as f64)
}

/// Batch mean of `D[i, z_i] − logq[z_i]`.
pub fn likelihood_regularization(
    d: &DistanceMatrix,
    logq: &Array1<f64>,
    labels: ArrayView2<f64>,
) -> Result<f64> {
    check_matching(d, &labels, logq)?;
    check_one_hot(&labels)?;
    let n = d.0.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut shifted = d.0.clone();
    shifted -= &logq.view().insert_axis(Axis(0));
    Ok((&shifted * &labels).sum() / n as f64)
}

/// Loss and gradients with the batch mean as reduction.
pub fn lgm_loss_and_grads(
    features: ArrayView2<f64>,
    labels: &[usize],
    params: &GmmParams,
    cfg: &LgmConfig,
) -> Result<LossBundle> {
    let n = features.nrows();
    let w = vec![1.0 / n.max(1) as f64; n];
    lgm_loss_weighted(features, labels, params, cfg, &w)
}

/// Loss `Σ_i w_i (cls_i + λ·lkd_i)` and its exact gradients.
///
/// With `w_i = 1/n` this is the batch mean; other weightings express
/// minority/majority combinations.
pub fn lgm_loss_weighted(
    features: ArrayView2<f64>,
    labels: &[usize],
    params: &GmmParams,
    cfg: &LgmConfig,
    weights: &[f64],
) -> Result<LossBundle> {
    cfg.validate()?;
    let (n, h) = features.dim();
    let k = params.class_count();
    check_labels(n, k, labels)?;
    if weights.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} weights", weights.len())));
    }
    let d = mahalanobis_distances(features, params)?;
    let logq = log_q(params);
    let y = one_hot(labels, k)?;
    let logits = lgm_logits(&d, y.view(), cfg.alpha, &logq)?;
    let (ce, grad_logits) = softmax_cross_entropy(logits.view(), labels, weights)?;

    let lkd_i = Array1::from_iter(
        labels
            .iter()
            .enumerate()
            .map(|(i, &z)| d.0[[i, z]] - logq[z]),
    );
    let w = Array1::from(weights.to_vec());
    let cls = (&ce * &w).sum();
    let lkd = (&lkd_i * &w).sum();
    let total = cls + cfg.lambda_lkd * lkd;
    let per_sample = &ce + &(&lkd_i * cfg.lambda_lkd);

    // dL/dD and dL/dlogq
    let mut grad_d = Zip::from(&grad_logits)
        .and(&y)
        .map_collect(|&g, &yv| -g * (1.0 + cfg.alpha * yv));
    let weighted_y = &y * &w.view().insert_axis(Axis(1));
    grad_d.scaled_add(cfg.lambda_lkd, &weighted_y);
    let grad_logq = grad_logits.sum_axis(Axis(0)) - weighted_y.sum_axis(Axis(0)) * cfg.lambda_lkd;

    let prec = precisions(params);
    let means = params.means();
    let weighted_means = means * &prec;

    let grad_features = &features * &grad_d.dot(&prec) - &grad_d.dot(&weighted_means);

    let at_f = grad_d.t().dot(&features);
    let at_ff = grad_d.t().dot(&features.mapv(|v| v * v));
    let col = grad_d.sum_axis(Axis(0)).insert_axis(Axis(1));

    let grad_means = -(&prec * &(&at_f - &(means * &col)));
    let spread = &at_ff - &(means * &at_f * 2.0) + &(means * means * &col);
    let mut grad_log_variances = &prec * &spread * -0.5;
    grad_log_variances -= &(grad_logq.insert_axis(Axis(1)) * 0.5);

    debug_assert_eq!(grad_features.dim(), (n, h));
    Ok(LossBundle {
        total,
        cls,
        lkd,
        per_sample,
        grad_features,
        grad_means,
        grad_log_variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(k: usize, h: usize, means: Array2<f64>) -> GmmParams {
        GmmParams::new(means, Array2::zeros((k, h))).unwrap()
    }

    #[test]
    fn distance_is_zero_at_mean() {
        let params = unit(2, 2, array![[1.0, 2.0], [3.0, -1.0]]);
        let d = mahalanobis_distances(array![[3.0, -1.0]].view(), &params).unwrap();
        assert_eq!(d.values()[[0, 1]], 0.0);
    }

    #[test]
    fn distance_euclidean_and_scaled() {
        let params = unit(1, 2, array![[3.0, 4.0]]);
        let d = mahalanobis_distances(array![[0.0, 0.0]].view(), &params).unwrap();
        assert!((d.values()[[0, 0]] - 12.5).abs() < 1e-12);

        let params = GmmParams::from_variances(array![[0.0, 0.0]], array![[4.0, 1.0]]).unwrap();
        let d = mahalanobis_distances(array![[2.0, 0.0]].view(), &params).unwrap();
        assert!((d.values()[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distance_rejects_non_finite() {
        let params = unit(1, 2, array![[0.0, 0.0]]);
        assert!(matches!(
            mahalanobis_distances(array![[f64::NAN, 0.0]].view(), &params),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn log_q_closed_forms() {
        let params = GmmParams::from_variances(array![[0.0, 0.0], [0.0, 0.0]], array![[1.0, 1.0], [4.0, 1.0]]).unwrap();
        let lq = log_q(&params);
        assert_eq!(lq[0], 0.0);
        assert!((lq[1] + std::f64::consts::LN_2).abs() < 1e-15);

        let params = GmmParams::from_variances(array![[0.0, 0.0, 0.0]], array![[2.0, 3.0, 5.0]]).unwrap();
        let oracle = -0.5 * [2.0f64, 3.0, 5.0].iter().map(|v| v.ln()).sum::<f64>();
        assert!((log_q(&params)[0] - oracle).abs() < 1e-15);
        assert!((oracle + 0.5 * 30f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logits_margin_cases() {
        let d = DistanceMatrix(array![[1.0, 2.0, 3.0], [0.5, 0.25, 4.0]]);
        let y = one_hot(&[2, 0], 3).unwrap();
        let lq = array![0.1, -0.2, 0.3];
        let no_margin = lgm_logits(&d, y.view(), 0.0, &lq).unwrap();
        let expect = -d.values() + &lq.view().insert_axis(Axis(0));
        assert_eq!(no_margin, expect);

        let zero = Array1::zeros(3);
        let with_margin = lgm_logits(&d, y.view(), 1.0, &zero).unwrap();
        assert_eq!(with_margin[[0, 2]], -6.0);
        assert_eq!(with_margin[[0, 0]], -1.0);
        assert_eq!(with_margin[[1, 0]], -1.0);
        assert_eq!(with_margin[[1, 1]], -0.25);
    }

    #[test]
    fn logits_reject_non_one_hot() {
        let d = DistanceMatrix(array![[1.0, 2.0]]);
        let lq = array![0.0, 0.0];
        assert!(matches!(
            lgm_logits(&d, array![[1.0, 1.0]].view(), 0.1, &lq),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            lgm_logits(&d, array![[0.5, 0.5]].view(), 0.1, &lq),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn classification_loss_cases() {
        let l = classification_loss(array![[0.0, 0.0]].view(), &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = classification_loss(array![[60.0, 10.0, 0.0]].view(), &[0]).unwrap();
        assert!(l <= 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Array2::<f64>::from_shape_simple_fn((6, 4), || rng.random_range(-3.0..3.0));
        let labels = [0, 3, 2, 1, 1, 0];
        let naive = labels
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let s: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
                -(logits[[i, z]].exp() / s).ln()
            })
            .sum::<f64>()
            / 6.0;
        let got = classification_loss(logits.view(), &labels).unwrap();
        assert!((got - naive).abs() < 1e-10);
    }

    #[test]
    fn regularizer_cases() {
        let params = unit(2, 2, array![[1.0, 1.0], [-1.0, 2.0]]);
        let feats = array![[1.0, 1.0], [-1.0, 2.0]];
        let d = mahalanobis_distances(feats.view(), &params).unwrap();
        let y = one_hot(&[0, 1], 2).unwrap();
        assert_eq!(likelihood_regularization(&d, &log_q(&params), y.view()).unwrap(), 0.0);

        let feats = array![[0.0, 0.0], [0.0, 0.0]];
        let d = mahalanobis_distances(feats.view(), &params).unwrap();
        let expect = (d.values()[[0, 0]] + d.values()[[1, 1]]) / 2.0;
        let got = likelihood_regularization(&d, &log_q(&params), y.view()).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_total_is_classification_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = GmmParams::random(3, 4, 1.0, &mut rng).unwrap();
        let feats = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0..2.0));
        let labels = [0, 1, 2, 2, 1];
        let cfg = LgmConfig { alpha: 0.3, lambda_lkd: 0.0 };
        let bundle = lgm_loss_and_grads(feats.view(), &labels, &params, &cfg).unwrap();
        let d = mahalanobis_distances(feats.view(), &params).unwrap();
        let logits = lgm_logits(&d, one_hot(&labels, 3).unwrap().view(), 0.3, &log_q(&params)).unwrap();
        assert_eq!(bundle.total, classification_loss(logits.view(), &labels).unwrap());
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = array![[0.3, -1.2, 2.0], [1.0, 1.0, 0.5]];
        let mut shifted = logits.clone();
        shifted.row_mut(0).mapv_inplace(|v| v + 17.25);
        let a = classification_loss(logits.view(), &[2, 0]).unwrap();
        let b = classification_loss(shifted.view(), &[2, 0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
