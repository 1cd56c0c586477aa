//! Training objectives on tensors (differentiable through candle's autograd).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp used by every log-based loss.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Use `α` for positives and `1 − α` for negatives instead of a uniform `α`.
    pub alpha_balanced: bool,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.75, gamma: 2.0, alpha_balanced: false }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || self.gamma < 0.0 {
            return Err(Error::Config(format!("focal alpha {} / gamma {} out of range", self.alpha, self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_dice: f64,
    pub w_focal: f64,
    /// Weight of the denoiser's noise-prediction loss.
    pub w_diffusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_mse: 1.0, w_dice: 1.0, w_focal: 1.0, w_diffusion: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_mse, self.w_dice, self.w_focal, self.w_diffusion];
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean of `α (1 − p_t)^γ · (−ln p_t)`, `p_t = p` where `y = 1` and `1 − p` elsewhere.
pub fn focal_loss(p: &Tensor, y: &Tensor, params: &FocalParams) -> Result<Tensor> {
    same_shape(p, y, "focal loss")?;
    let y = y.to_dtype(p.dtype())?;
    let p = p.clamp(EPS, 1.0 - EPS)?;
    let pt = ((&y * &p)? + ((1.0 - &y)? * (1.0 - &p)?)?)?;
    let log_pt = pt.log()?;
    let one_minus = (1.0 - &pt)?;
    let modulating = if params.gamma == 0.0 { one_minus.ones_like()? } else { one_minus.powf(params.gamma)? };
    let per = (modulating * log_pt.neg()?)?;
    let per = if params.alpha_balanced {
        let at = ((&y * params.alpha)? + ((1.0 - &y)? * (1.0 - params.alpha))?)?;
        (per * at)?
    } else {
        (per * params.alpha)?
    };
    Ok(per.mean_all()?)
}

/// Mean binary cross-entropy with the same clamp as the focal loss.
pub fn bce_loss(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(p, y, "bce loss")?;
    let y = y.to_dtype(p.dtype())?;
    let p = p.clamp(EPS, 1.0 - EPS)?;
    let ll = ((&y * p.log()?)? + ((1.0 - &y)? * (1.0 - &p)?.log()?)?)?;
    Ok(ll.neg()?.mean_all()?)
}

/// `1 − (2 Σpy + s) / (Σp + Σy + s)` over all elements.
pub fn dice_loss(p: &Tensor, y: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(p, y, "dice loss")?;
    if smooth <= 0.0 {
        return Err(Error::Config("dice smoothing must be positive".into()));
    }
    let y = y.to_dtype(p.dtype())?;
    let inter = (p * &y)?.sum_all()?;
    let denom = ((p.sum_all()? + y.sum_all()?)? + smooth)?;
    Ok((1.0 - (((inter * 2.0)? + smooth)? / denom)?)?)
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mse loss")?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Inputs to the composite objective. A term whose input is `None` contributes 0.
#[derive(Debug, Clone, Default)]
pub struct ObjectiveInputs<'a> {
    /// Reconstruction pairs (prediction, target); their MSEs are summed.
    pub recon: Vec<(&'a Tensor, &'a Tensor)>,
    pub seg: Option<(&'a Tensor, &'a Tensor)>,
    pub diffusion: Option<&'a Tensor>,
}

/// Weighted terms; they sum to `total`.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub mse: f64,
    pub dice: f64,
    pub focal: f64,
    pub diffusion: f64,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// `w_mse·MSE + w_dice·Dice + w_focal·Focal + w_diffusion·L_diff`. Terms with
/// zero weight are not computed and are reported as exactly 0.
pub fn composite_objective(
    inp: &ObjectiveInputs,
    weights: &LossWeights,
    focal: &FocalParams,
    dice_smooth: f64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut terms: Vec<Tensor> = Vec::new();
    let mut record = |t: Tensor, w: f64| -> Result<f64> {
        let wt = (t * w)?;
        let v = scalar(&wt)?;
        terms.push(wt);
        Ok(v)
    };
    let mut mse = 0.0;
    if weights.w_mse > 0.0 && !inp.recon.is_empty() {
        let mut sum = mse_loss(inp.recon[0].0, inp.recon[0].1)?;
        for (a, b) in &inp.recon[1..] {
            sum = (sum + mse_loss(a, b)?)?;
        }
        mse = record(sum, weights.w_mse)?;
    }
    let (mut dice, mut foc) = (0.0, 0.0);
    if let Some((p, y)) = inp.seg {
        if weights.w_dice > 0.0 {
            dice = record(dice_loss(p, y, dice_smooth)?, weights.w_dice)?;
        }
        if weights.w_focal > 0.0 {
            foc = record(focal_loss(p, y, focal)?, weights.w_focal)?;
        }
    }
    let mut diffusion = 0.0;
    if let (Some(d), true) = (inp.diffusion, weights.w_diffusion > 0.0) {
        diffusion = record(d.clone(), weights.w_diffusion)?;
    }
    let total = match terms.split_first() {
        Some((first, rest)) => rest.iter().try_fold(first.clone(), |acc, t| acc + t)?,
        None => Tensor::new(0f64, &candle_core::Device::Cpu)?,
    };
    Ok(LossBreakdown { total, mse, dice, focal: foc, diffusion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn value(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn focal_reference_points() -> Result<()> {
        let fp = FocalParams::default();
        assert!(value(&focal_loss(&t(&[1.0 - EPS]), &t(&[1.0]), &fp)?) <= 1e-6);
        let half = value(&focal_loss(&t(&[0.5]), &t(&[1.0]), &fp)?);
        assert!((half - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((half - 0.129966).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn focal_reduces_to_bce() -> Result<()> {
        let p = t(&[0.1, 0.4, 0.8, 0.99, 0.3]);
        let y = t(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        let fp = FocalParams { alpha: 1.0, gamma: 0.0, alpha_balanced: false };
        assert!((value(&focal_loss(&p, &y, &fp)?) - value(&bce_loss(&p, &y)?)).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn dice_and_mse_examples() -> Result<()> {
        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        assert!(value(&dice_loss(&y, &y, 1.0)?).abs() < 1e-15);
        let mut p = vec![0.0; 20];
        let mut q = vec![0.0; 20];
        p[..10].fill(1.0);
        q[10..].fill(1.0);
        assert!((value(&dice_loss(&t(&p), &t(&q), 1.0)?) - (1.0 - 1.0 / 21.0)).abs() < 1e-12);
        let z = t(&[0.0; 4]);
        assert_eq!(value(&dice_loss(&z, &z, 1.0)?), 0.0);
        assert_eq!(value(&mse_loss(&y, &y)?), 0.0);
        assert_eq!(value(&mse_loss(&(&y + 2.0)?, &y)?), 4.0);
        assert!(mse_loss(&y, &t(&[1.0])).is_err());
        Ok(())
    }

    #[test]
    fn composite_projects_and_sums() -> Result<()> {
        let a = Tensor::randn(0f64, 1.0, (3, 5), &Device::Cpu)?;
        let b = Tensor::randn(0f64, 1.0, (3, 5), &Device::Cpu)?;
        let p = Tensor::rand(0.01f64, 0.99, (2, 8), &Device::Cpu)?;
        let y = p.ge(0.5)?.to_dtype(DType::F64)?;
        let inp = ObjectiveInputs { recon: vec![(&a, &b)], seg: Some((&p, &y)), diffusion: None };
        let fp = FocalParams::default();
        let only_mse = LossWeights { w_mse: 1.0, w_dice: 0.0, w_focal: 0.0, w_diffusion: 0.0 };
        let r = composite_objective(&inp, &only_mse, &fp, 1.0)?;
        assert_eq!(r.total_value()?, value(&mse_loss(&a, &b)?));
        assert_eq!((r.dice, r.focal), (0.0, 0.0));

        let all = LossWeights { w_diffusion: 0.0, ..LossWeights::default() };
        let r = composite_objective(&inp, &all, &fp, 1.0)?;
        let sum = value(&mse_loss(&a, &b)?) + value(&dice_loss(&p, &y, 1.0)?) + value(&focal_loss(&p, &y, &fp)?);
        assert!((r.total_value()? - sum).abs() < 1e-9);
        assert!((r.mse + r.dice + r.focal + r.diffusion - r.total_value()?).abs() < 1e-12);

        let zero = LossWeights { w_mse: 0.0, w_dice: 0.0, w_focal: 0.0, w_diffusion: 0.0 };
        assert!(matches!(composite_objective(&inp, &zero, &fp, 1.0), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn perfect_predictions_give_near_zero_total() -> Result<()> {
        let a = Tensor::randn(0f64, 1.0, (2, 6), &Device::Cpu)?;
        let y = t(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let p = t(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let inp = ObjectiveInputs { recon: vec![(&a, &a)], seg: Some((&p, &y)), diffusion: None };
        let r = composite_objective(&inp, &LossWeights::default(), &FocalParams::default(), 1.0)?;
        assert!(r.total_value()? <= 1e-5);
        Ok(())
    }

    #[test]
    fn focal_decreases_in_p_for_positives() -> Result<()> {
        let fp = FocalParams::default();
        let mut last = f64::INFINITY;
        for k in 1..100 {
            let v = value(&focal_loss(&t(&[k as f64 / 100.0]), &t(&[1.0]), &fp)?);
            assert!(v >= 0.0 && v < last);
            last = v;
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn dice_stays_in_unit_interval(p in proptest::collection::vec(0.0f64..1.0, 1..40), bits in any::<u64>(), smooth in 0.01f64..5.0) {
            let y: Vec<f64> = (0..p.len()).map(|i| ((bits >> (i % 64)) & 1) as f64).collect();
            let d = value(&dice_loss(&t(&p), &t(&y), smooth).unwrap());
            prop_assert!((0.0..1.0).contains(&d));
        }

        #[test]
        fn focal_gradient_matches_finite_differences(p in 0.01f64..0.99, y in 0u8..2, gamma in 0.0f64..4.0) {
            let fp = FocalParams { alpha: 0.75, gamma, alpha_balanced: false };
            let yt = t(&[y as f64]);
            let v = Var::new(&[p], &Device::Cpu).unwrap();
            let g = focal_loss(v.as_tensor(), &yt, &fp).unwrap().backward().unwrap();
            let g = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
            let h = 1e-5;
            let f = |x: f64| value(&focal_loss(&t(&[x]), &yt, &fp).unwrap());
            let num = (f(p + h) - f(p - h)) / (2.0 * h);
            prop_assert!((num - g).abs() <= 1e-4 * num.abs().max(1e-8), "fd {} grad {}", num, g);
        }
    }
}
