//! Dynamically weighted cross-entropy and the consistency KL term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_w: f64,
    pub ctcr_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 2.0,
            beta: 0.002,
            lambda_w: 1.5,
            ctcr_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_w > 0.0) || !(self.ctcr_weight >= 0.0) {
            return Err(Error::invalid("loss_config", "need lambda_w > 0 and ctcr_weight >= 0"));
        }
        Ok(())
    }
}

/// Binary change labels of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelLabels<T> {
    pub y: Tensor<T>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl<T: Real> PixelLabels<T> {
    /// Values `>= 0.5` count as changed.
    pub fn from_mask(mask: &Tensor<T>) -> Self {
        let half = T::lit(0.5);
        let y = Tensor::new(
            mask.shape(),
            mask.data()
                .iter()
                .map(|&v| if v >= half { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        let n_pos = y.data().iter().filter(|&&v| v > T::zero()).count();
        PixelLabels {
            n_neg: y.len() - n_pos,
            y,
            n_pos,
        }
    }
}

/// `exp(alpha - beta * n_pos / n_neg) + lambda_w`.
pub fn pos_weight(n_pos: usize, n_neg: usize, cfg: &LossConfig) -> Result<f64> {
    if n_neg == 0 {
        return Err(Error::invalid("pos_weight", "tile has no unchanged pixels"));
    }
    let rho = n_pos as f64 / n_neg as f64;
    Ok((cfg.alpha - cfg.beta * rho).exp() + cfg.lambda_w)
}

fn clamp<T: Real>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn check_prob<T: Real>(op: &'static str, p: &Tensor<T>) -> Result<()> {
    if let Some(v) = p.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::numeric(op, format!("probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// `-(1/N) sum_j mean_px [w_j y log P + (1 - y) log(1 - P)]` for
/// `P, y: N x 1 x H x W` (or `N x H x W`).
pub fn weighted_bce<T: Real>(tape: &Tape<T>, p: Var, y: &Tensor<T>, weights: &[f64]) -> Result<Var> {
    let pv = tape.value(p);
    if pv.shape() != y.shape() {
        return Err(Error::shape("weighted_bce", pv.shape(), y.shape()));
    }
    check_prob("weighted_bce", &pv)?;
    let n = pv.shape()[0];
    if weights.len() != n {
        return Err(Error::invalid(
            "weighted_bce",
            format!("{} weights for {n} pairs", weights.len()),
        ));
    }
    let per = pv.len() / n;
    let scale = T::one() / T::from_usize_lossy(n * per);
    let w: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
    let mut total = T::zero();
    for (j, (ps, ys)) in pv.data().chunks(per).zip(y.data().chunks(per)).enumerate() {
        let mut s = T::zero();
        for (&pp, &yy) in ps.iter().zip(ys) {
            let (c, _) = clamp(pp);
            s = s + w[j] * yy * c.ln() + (T::one() - yy) * (T::one() - c).ln();
        }
        total = total + s;
    }
    let loss = Tensor::scalar(-total * scale);
    let y = y.clone();
    Ok(tape.push(
        loss,
        &[p],
        Box::new(move |ctx| {
            let g = ctx.grad[0] * scale;
            let pd = ctx.inputs[0].data();
            let d = pd
                .iter()
                .zip(y.data())
                .enumerate()
                .map(|(k, (&pp, &yy))| {
                    let (c, clamped) = clamp(pp);
                    if clamped {
                        return T::zero();
                    }
                    -g * (w[k / per] * yy / c - (T::one() - yy) / (T::one() - c))
                })
                .collect();
            vec![Some(d)]
        }),
    ))
}

/// Pixel-mean Bernoulli KL divergence `KL(p_sty || p_ori)`, differentiable
/// in both arguments.
pub fn ctcr_kl<T: Real>(tape: &Tape<T>, p_sty: Var, p_ori: Var) -> Result<Var> {
    let pv = tape.value(p_sty);
    let qv = tape.value(p_ori);
    if pv.shape() != qv.shape() {
        return Err(Error::shape("ctcr_kl", pv.shape(), qv.shape()));
    }
    check_prob("ctcr_kl", &pv)?;
    check_prob("ctcr_kl", &qv)?;
    let scale = T::one() / T::from_usize_lossy(pv.len());
    let total: T = pv
        .data()
        .iter()
        .zip(qv.data())
        .map(|(&p, &q)| bernoulli_kl(clamp(p).0, clamp(q).0))
        .sum();
    Ok(tape.push(
        Tensor::scalar(total * scale),
        &[p_sty, p_ori],
        Box::new(move |ctx| {
            let g = ctx.grad[0] * scale;
            let (pd, qd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dp = ctx.needs[0].then(|| {
                pd.iter()
                    .zip(qd)
                    .map(|(&p, &q)| {
                        let ((p, cp), (q, _)) = (clamp(p), clamp(q));
                        if cp {
                            T::zero()
                        } else {
                            g * ((p / q).ln() - ((T::one() - p) / (T::one() - q)).ln())
                        }
                    })
                    .collect()
            });
            let dq = ctx.needs[1].then(|| {
                pd.iter()
                    .zip(qd)
                    .map(|(&p, &q)| {
                        let ((p, _), (q, cq)) = (clamp(p), clamp(q));
                        if cq {
                            T::zero()
                        } else {
                            g * ((T::one() - p) / (T::one() - q) - p / q)
                        }
                    })
                    .collect()
            });
            vec![dp, dq]
        }),
    ))
}

fn bernoulli_kl<T: Real>(p: T, q: T) -> T {
    let one = T::one();
    p * (p / q).ln() + (one - p) * ((one - p) / (one - q)).ln()
}

/// Values of the individual terms of [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub wce_ori: f64,
    pub wce_sty: f64,
    pub ctcr: f64,
}

/// Per-pair positive weights from a `N x ...` mask.
pub fn pair_weights<T: Real>(mask: &Tensor<T>, cfg: &LossConfig) -> Result<Vec<f64>> {
    let n = mask.shape()[0];
    let per = mask.len() / n;
    let half = T::lit(0.5);
    mask.data()
        .chunks(per)
        .map(|m| {
            let pos = m.iter().filter(|&&v| v >= half).count();
            pos_weight(pos, per - pos, cfg)
        })
        .collect()
}

/// `WCE(ori) + WCE(sty) + ctcr_weight * KL(sty || ori)`; without a stylized
/// pass only the first term.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    p_ori: Var,
    p_sty: Option<Var>,
    mask: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let w = pair_weights(mask, cfg)?;
    let ori = weighted_bce(tape, p_ori, mask, &w)?;
    let mut parts = LossParts {
        wce_ori: tape.value(ori).item().to_f64().unwrap_or(f64::NAN),
        ..LossParts::default()
    };
    let Some(p_sty) = p_sty else {
        return Ok((ori, parts));
    };
    let sty = weighted_bce(tape, p_sty, mask, &w)?;
    let kl = ctcr_kl(tape, p_sty, p_ori)?;
    parts.wce_sty = tape.value(sty).item().to_f64().unwrap_or(f64::NAN);
    parts.ctcr = tape.value(kl).item().to_f64().unwrap_or(f64::NAN);
    let sum = tape.add(ori, sty)?;
    let kl = tape.scale(kl, cfg.ctcr_weight)?;
    Ok((tape.add(sum, kl)?, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.02..0.98))
    }

    fn mask(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
    }

    #[test]
    fn pos_weight_values() {
        let cfg = LossConfig::default();
        let w0 = pos_weight(0, 100, &cfg).unwrap();
        assert!((w0 - (2f64.exp() + 1.5)).abs() < 1e-12);
        assert!((w0 - 8.889).abs() < 1e-3);
        assert!((pos_weight(usize::MAX / 2, 1, &cfg).unwrap() - 1.5).abs() < 1e-12);
        assert!(pos_weight(3, 0, &cfg).is_err());
    }

    #[test]
    fn bce_reference_and_perfect_prediction() {
        let p = probs(&[2, 1, 4, 4], 1);
        let y = mask(&[2, 1, 4, 4], 2);
        let tape = Tape::new();
        let l = weighted_bce(&tape, tape.constant(p.clone()), &y, &[1.0, 1.0]).unwrap();
        let direct = -p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / 32.0;
        assert!((tape.value(l).item() - direct).abs() < 1e-12);

        let perfect = Tensor::new(
            y.shape(),
            y.data().iter().map(|&v| if v > 0.5 { 1.0 - 1e-7 } else { 1e-7 }).collect(),
        )
        .unwrap();
        let l = weighted_bce(&tape, tape.constant(perfect), &y, &[8.0, 8.0]).unwrap();
        assert!(tape.value(l).item() < 1e-5);
        let bad = Tensor::full(&[2, 1, 4, 4], 1.5);
        assert!(weighted_bce(&tape, tape.constant(bad), &y, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn bce_is_linear_in_weight() {
        let p = probs(&[1, 1, 4, 4], 3);
        let y = mask(&[1, 1, 4, 4], 4);
        let tape = Tape::new();
        let at = |w: f64| tape.value(weighted_bce(&tape, tape.constant(p.clone()), &y, &[w]).unwrap()).item();
        let pos_term = -p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| 2.0 * y * p.ln())
            .sum::<f64>()
            / 16.0;
        assert!((at(4.0) - at(2.0) - pos_term).abs() < 1e-12);
    }

    #[test]
    fn kl_values_and_gradient() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1], 0.9));
        let q = tape.constant(Tensor::full(&[1], 0.5));
        let kl = tape.value(ctcr_kl(&tape, p, q).unwrap()).item();
        assert!((kl - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-12);
        assert!((kl - 0.368).abs() < 1e-3);
        assert_eq!(tape.value(ctcr_kl(&tape, q, q).unwrap()).item(), 0.0);
        let bad = tape.constant(Tensor::full(&[2], 0.5));
        assert!(ctcr_kl(&tape, p, bad).is_err());

        let err = grad_check(|t, v| ctcr_kl(t, v[0], v[1]), &[probs(&[2, 3], 5), probs(&[2, 3], 6)], 1e-6)
            .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bce_gradient() {
        let y = mask(&[2, 1, 3, 3], 7);
        let err = grad_check(|t, v| weighted_bce(t, v[0], &y, &[3.0, 1.5]), &[probs(&[2, 1, 3, 3], 8)], 1e-6)
            .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn total_loss_recombines() {
        let y = mask(&[2, 1, 4, 4], 9);
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let a = tape.constant(probs(&[2, 1, 4, 4], 10));
        let b = tape.constant(probs(&[2, 1, 4, 4], 11));
        let (t, parts) = total_loss(&tape, a, Some(b), &y, &cfg).unwrap();
        let sum = parts.wce_ori + parts.wce_sty + parts.ctcr;
        assert!((tape.value(t).item() - sum).abs() < 1e-12);

        let zero = LossConfig {
            ctcr_weight: 0.0,
            ..cfg.clone()
        };
        let (t, parts) = total_loss(&tape, a, Some(a), &y, &zero).unwrap();
        assert!((tape.value(t).item() - 2.0 * parts.wce_ori).abs() < 1e-12);
        let (t, _) = total_loss(&tape, a, None, &y, &cfg).unwrap();
        assert_eq!(tape.value(t).item(), parts.wce_ori);
    }

    #[test]
    fn labels_from_mask() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.7, 0.2]).unwrap();
        let l = PixelLabels::<f64>::from_mask(&m);
        assert_eq!((l.n_pos, l.n_neg), (2, 2));
        assert_eq!(l.y.data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
