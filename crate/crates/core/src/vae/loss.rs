//! Reconstruction and regularization terms of the VAE objective.

use candle_core::{DType, Device, Tensor, D};

use super::PlaneTensors;
use crate::error::{Error, Result};

/// Loss tensors; `total = ce + alpha·lovasz + beta·kl`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub ce: Tensor,
    pub lovasz: Tensor,
    pub kl: Tensor,
}

fn flatten_logits(logits: &Tensor, labels: &[u8]) -> Result<(Tensor, usize)> {
    let k = *logits.dims().last().ok_or_else(|| Error::Shape("scalar logits".into()))?;
    let n = logits.elem_count() / k.max(1);
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelOutOfRange { label: l as u32, num_classes: k as u32 });
    }
    Ok((logits.reshape((n, k))?, k))
}

/// Mean voxel cross-entropy of `(.., K)` logits against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (flat, _) = flatten_logits(logits, labels)?;
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (labels.len(), 1), &Device::Cpu)?;
    let lsm = candle_nn::ops::log_softmax(&flat, D::Minus1)?;
    Ok(lsm.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Gradient of the Jaccard loss extension along a sorted foreground indicator.
///
/// `fg_sorted[i]` is 1 when the i-th largest error belongs to a foreground voxel.
pub fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = fg_sorted.iter().sum();
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            cum_fg += f;
            cum_bg += 1.0 - f;
            let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let g = jac - prev;
            prev = jac;
            g
        })
        .collect()
}

/// Descending-error order; ties keep the lower index first.
pub fn sort_errors_desc(errors: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..errors.len()).collect();
    perm.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    perm
}

/// Lovász extension of the Jaccard loss for one class, on host values.
pub fn lovasz_class(errors: &[f64], fg: &[f64]) -> f64 {
    let perm = sort_errors_desc(errors);
    let fg_sorted: Vec<f64> = perm.iter().map(|&i| fg[i]).collect();
    perm.iter().zip(lovasz_grad(&fg_sorted)).map(|(&i, g)| errors[i] * g).sum()
}

/// Lovász-softmax averaged over the classes present in `labels`.
pub fn lovasz_softmax(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (flat, k) = flatten_logits(logits, labels)?;
    let n = labels.len();
    let dtype = flat.dtype();
    let probs = candle_nn::ops::softmax(&flat, D::Minus1)?;
    let mut onehot = vec![0f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l as usize] = 1.0;
    }
    let onehot_t = Tensor::from_vec(onehot.clone(), (n, k), &Device::Cpu)?.to_dtype(dtype)?;
    let err = (onehot_t - &probs)?.abs()?;
    let err_host: Vec<f64> = err.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;

    let mut weights = vec![0f64; n * k];
    let mut present = 0usize;
    for c in 0..k {
        let fg: Vec<f64> = (0..n).map(|i| onehot[i * k + c]).collect();
        if fg.iter().all(|&f| f == 0.0) {
            continue;
        }
        present += 1;
        let e: Vec<f64> = (0..n).map(|i| err_host[i * k + c]).collect();
        let perm = sort_errors_desc(&e);
        let fg_sorted: Vec<f64> = perm.iter().map(|&i| fg[i]).collect();
        for (&i, g) in perm.iter().zip(lovasz_grad(&fg_sorted)) {
            weights[i * k + c] = g;
        }
    }
    let w = Tensor::from_vec(weights, (n, k), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((err.mul(&w)?.sum_all()? / present.max(1) as f64)?)
}

/// `Σ_planes ½ Σ (mu² + e^logvar − 1 − logvar)`, averaged over the batch.
pub fn kl_planes(mu: &PlaneTensors, logvar: &PlaneTensors) -> Result<Tensor> {
    let b = mu[0].dim(0)?;
    let mut total: Option<Tensor> = None;
    for (m, lv) in mu.iter().zip(logvar.iter()) {
        if m.dims() != lv.dims() {
            return Err(Error::Shape(format!("mu {:?} vs logvar {:?}", m.dims(), lv.dims())));
        }
        let term = ((m.sqr()? + lv.exp()?)? - 1.0)?.sub(lv)?;
        let plane = (term.sum_all()? * 0.5)?;
        total = Some(match total {
            Some(t) => (t + plane)?,
            None => plane,
        });
    }
    Ok((total.expect("six planes") / b as f64)?)
}

/// Full objective with Lovász weight `alpha` and KL weight `beta`.
pub fn vae_loss(
    logits: &Tensor,
    labels: &[u8],
    mu: &PlaneTensors,
    logvar: &PlaneTensors,
    alpha: f64,
    beta: f64,
) -> Result<LossTerms> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Invalid(format!("loss weights must be non-negative, got {alpha}, {beta}")));
    }
    let ce = cross_entropy(logits, labels)?;
    let lovasz = lovasz_softmax(logits, labels)?;
    let kl = kl_planes(mu, logvar)?;
    let total = ((&ce + (&lovasz * alpha)?)? + (&kl * beta)?)?;
    Ok(LossTerms { total, ce, lovasz, kl })
}
