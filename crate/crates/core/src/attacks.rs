//! l-inf bounded evasion attacks used for evaluation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::error::{invalid, Result};
use crate::losses::cross_entropy;
use crate::network::{self, argmax, Classifier, Mode};
use crate::rng;

/// Rows attacked per graph; bounds memory on large evaluation sets.
const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub radius: f64,
    pub steps: usize,
    /// Step size as a fraction of the radius.
    pub step_ratio: f64,
    pub restarts: usize,
    /// Start each restart from a uniform point in the ball instead of `x`.
    pub random_start: bool,
    pub seed: u64,
    /// Optional input domain, e.g. `[0, 1]` for pixels.
    pub clip: Option<(f64, f64)>,
}

impl AttackConfig {
    /// 40 steps of size `2.5 * radius / 40`, one random restart.
    pub fn standard(radius: f64, seed: u64) -> Self {
        Self { radius, steps: 40, step_ratio: 2.5 / 40.0, restarts: 1, random_start: true, seed, clip: None }
    }

    pub fn step_size(&self) -> f64 {
        self.step_ratio * self.radius
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self { radius, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(invalid(format!("attack radius must be >= 0, got {}", self.radius)));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(invalid("attack needs at least one step and one restart"));
        }
        if !(self.step_ratio > 0.0 && self.step_ratio.is_finite()) {
            return Err(invalid(format!("step ratio must be > 0, got {}", self.step_ratio)));
        }
        if let Some((lo, hi)) = self.clip {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(invalid(format!("clip range ({lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }
}

/// Per-example cross-entropy and its gradient with respect to the input.
pub fn input_gradient<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let nodes = model.bind(&mut g);
    let xn = g.param(x.clone());
    let trace = network::forward(&mut g, &nodes, None, xn, 0.0, Mode::Eval, &mut rng::stream(0, "unused"))?;
    let losses = cross_entropy(&mut g, trace.logits, y)?;
    let total = g.sum(losses)?;
    let per = g.value(losses).as_slice().to_vec();
    let mut grads = g.backward(total)?;
    let grad = grads.take(xn).unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    Ok((per, grad))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Single signed-gradient step of size `rho`.
pub fn fgsm<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], rho: f64) -> Result<Tensor<T>> {
    if rho.is_nan() || rho < 0.0 {
        return Err(invalid(format!("rho must be >= 0, got {rho}")));
    }
    let (_, grad) = input_gradient(model, x, y)?;
    let r = T::from_f64_lossy(rho);
    Ok(x.zip_map(&grad, |xv, gv| xv + r * sign(gv)))
}

/// Outcome of a PGD search for every row.
#[derive(Clone, Debug)]
pub struct PgdResult<T> {
    /// Highest-loss point found (the clean point is a candidate).
    pub x_adv: Tensor<T>,
    pub loss: Vec<T>,
    /// Whether any visited point, the clean one included, was misclassified.
    pub fooled: Vec<bool>,
}

fn project<T: Scalar>(x: &Tensor<T>, cand: &mut Tensor<T>, rho: T, clip: Option<(T, T)>) {
    for (c, &x0) in cand.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let mut v = c.max(x0 - rho).min(x0 + rho);
        if let Some((lo, hi)) = clip {
            v = v.max(lo).min(hi);
        }
        *c = v;
    }
}

/// Projected signed-gradient ascent on the cross-entropy.
pub fn pgd_search<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<PgdResult<T>> {
    cfg.validate()?;
    if y.len() != x.rows() {
        return Err(invalid(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    let mut x_adv = Vec::with_capacity(x.len());
    let mut loss = Vec::with_capacity(x.rows());
    let mut fooled = Vec::with_capacity(x.rows());
    for (chunk_idx, start) in (0..x.rows()).step_by(CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + CHUNK).min(x.rows())).collect();
        let xc = x.select_rows(&idx);
        let res = pgd_chunk(model, &xc, &y[start..start + idx.len()], cfg, chunk_idx)?;
        x_adv.extend_from_slice(res.x_adv.as_slice());
        loss.extend(res.loss);
        fooled.extend(res.fooled);
    }
    Ok(PgdResult { x_adv: Tensor::new(x.rows(), x.cols(), x_adv)?, loss, fooled })
}

fn pgd_chunk<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig, chunk: usize) -> Result<PgdResult<T>> {
    let rho = T::from_f64_lossy(cfg.radius);
    let step = T::from_f64_lossy(cfg.step_size());
    let clip = cfg.clip.map(|(lo, hi)| (T::from_f64_lossy(lo), T::from_f64_lossy(hi)));
    let (rows, cols) = (x.rows(), x.cols());

    let mut best = x.clone();
    let (mut best_loss, _) = input_gradient(model, x, y)?;
    let mut fooled: Vec<bool> = model.predict(x)?.iter().zip(y).map(|(p, t)| p != t).collect();

    let consider = |cand: &Tensor<T>, losses: &[T], best: &mut Tensor<T>, best_loss: &mut Vec<T>, fooled: &mut Vec<bool>| -> Result<()> {
        let logits = model.logits(cand)?;
        for r in 0..rows {
            if argmax(logits.row_slice(r)) != y[r] {
                fooled[r] = true;
            }
            if losses[r] > best_loss[r] {
                best_loss[r] = losses[r];
                best.as_mut_slice()[r * cols..(r + 1) * cols].copy_from_slice(cand.row_slice(r));
            }
        }
        Ok(())
    };

    if cfg.radius == 0.0 {
        return Ok(PgdResult { x_adv: best, loss: best_loss, fooled });
    }

    for restart in 0..cfg.restarts {
        let mut rng = rng::stream(cfg.seed, &format!("pgd/chunk{chunk}/restart{restart}"));
        let mut cur = if cfg.random_start {
            Tensor::from_fn(rows, cols, |r, c| x.get(r, c) + T::from_f64_lossy(rng.random_range(-cfg.radius..=cfg.radius)))
        } else {
            x.clone()
        };
        project(x, &mut cur, rho, clip);
        for s in 0..=cfg.steps {
            let (losses, grad) = input_gradient(model, &cur, y)?;
            consider(&cur, &losses, &mut best, &mut best_loss, &mut fooled)?;
            if s == cfg.steps {
                break;
            }
            cur = cur.zip_map(&grad, |v, gv| v + step * sign(gv));
            project(x, &mut cur, rho, clip);
        }
    }
    Ok(PgdResult { x_adv: best, loss: best_loss, fooled })
}

pub fn pgd<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<Tensor<T>> {
    Ok(pgd_search(model, x, y, cfg)?.x_adv)
}

/// Exhaustive maximum of `delta . g` over the corners of the l-inf ball.
pub fn corner_oracle(g: &[f64], rho: f64) -> Result<(f64, Vec<f64>)> {
    const MAX_DIM: usize = 20;
    if g.len() > MAX_DIM {
        return Err(invalid(format!("corner enumeration limited to {MAX_DIM} dimensions, got {}", g.len())));
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = vec![0.0; g.len()];
    for bits in 0u32..(1u32 << g.len()) {
        let corner: Vec<f64> = (0..g.len()).map(|i| if bits >> i & 1 == 1 { -rho } else { rho }).collect();
        let v: f64 = corner.iter().zip(g).map(|(d, gi)| d * gi).sum();
        if v > best {
            best = v;
            arg = corner;
        }
    }
    Ok((best, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Layer, MlpParams};

    /// Two-class linear model whose logit difference `z_1 - z_0` has gradient `g`.
    fn linear_model(g: &[f64]) -> Classifier<f64> {
        let m = g.len();
        let mut w = Tensor::zeros(m, 2);
        for (i, &gi) in g.iter().enumerate() {
            w.set(i, 1, gi);
        }
        let p = MlpParams { layers: vec![Layer { weight: w, bias: Tensor::zeros(1, 2) }], log_alpha: None };
        Classifier::new(&p, &Default::default())
    }

    #[test]
    fn fgsm_zero_radius_is_identity() {
        let clf = linear_model(&[3.0, -1.0]);
        let x = Tensor::from_f64(1, 2, &[0.2, 0.4]).unwrap();
        assert_eq!(fgsm(&clf, &x, &[0], 0.0).unwrap(), x);
    }

    #[test]
    fn fgsm_on_linear_model_moves_along_sign() {
        let clf = linear_model(&[3.0, -1.0]);
        let x = Tensor::zeros(1, 2);
        let adv = fgsm(&clf, &x, &[0], 0.1).unwrap();
        assert_eq!(adv.as_slice(), &[0.1, -0.1]);
        let z = clf.logits(&adv).unwrap();
        let margin = z.get(0, 1) - z.get(0, 0);
        assert!((margin - 0.4).abs() < 1e-15);
    }

    #[test]
    fn fgsm_zero_gradient_leaves_input() {
        let clf = linear_model(&[0.0, 0.0]);
        let x = Tensor::from_f64(1, 2, &[0.5, -0.5]).unwrap();
        assert_eq!(fgsm(&clf, &x, &[0], 0.3).unwrap(), x);
    }

    #[test]
    fn pgd_single_step_from_clean_point_is_fgsm() {
        let clf = linear_model(&[3.0, -1.0, 0.5]);
        let x = Tensor::from_f64(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.0, 0.9]).unwrap();
        let cfg = AttackConfig { radius: 0.05, steps: 1, step_ratio: 1.0, restarts: 1, random_start: false, seed: 0, clip: None };
        let y = [0, 0];
        assert_eq!(pgd(&clf, &x, &y, &cfg).unwrap(), fgsm(&clf, &x, &y, 0.05).unwrap());
    }

    #[test]
    fn pgd_respects_the_ball() {
        let p = MlpParams::<f64>::glorot(&[4, 6, 3], 2).unwrap();
        let clf = Classifier::new(&p, &Default::default());
        let x = Tensor::<f64>::from_fn(5, 4, |r, c| (r as f64 * 0.3) - c as f64 * 0.2);
        let y = [0, 1, 2, 1, 0];
        let cfg = AttackConfig::standard(0.07, 3);
        let adv = pgd(&clf, &x, &y, &cfg).unwrap();
        for (a, b) in adv.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() <= 0.07 + 1e-12);
        }
    }

    #[test]
    fn corner_oracle_examples() {
        let (v, d) = corner_oracle(&[1.0, -2.0, 0.0], 0.1).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert_eq!(&d[..2], &[0.1, -0.1]);
        assert_eq!(d[2].abs(), 0.1);
        assert_eq!(corner_oracle(&[0.0; 4], 0.2).unwrap().0, 0.0);
        assert!(corner_oracle(&[1.0; 21], 0.1).is_err());
    }

    #[test]
    fn invalid_attack_config() {
        let mut cfg = AttackConfig::standard(0.1, 0);
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig::standard(-0.1, 0);
        assert!(cfg.validate().is_err());
    }
}
