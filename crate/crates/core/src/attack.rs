//! Projected gradient descent under an ℓ∞ budget.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Tape, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::network::{argmax, batch_ranges, Network};
use crate::tensor::Tensor;

pub const DEFAULT_ITERS: usize = 40;

static CHECKS: AtomicU64 = AtomicU64::new(0);
static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Budget and schedule of one attack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iters: usize,
    pub clamp: (f64, f64),
    pub random_start: bool,
}

impl AttackConfig {
    /// Evaluation defaults: 40 iterations, step ε/10, no random start.
    /// With ε = 0 no iterations are run.
    pub fn eval(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step: epsilon / 10.0,
            iters: if epsilon > 0.0 { DEFAULT_ITERS } else { 0 },
            clamp: (0.0, 1.0),
            random_start: false,
        }
    }

    /// Training defaults: as [`AttackConfig::eval`] with a random start.
    pub fn train(epsilon: f64) -> Self {
        AttackConfig {
            random_start: epsilon > 0.0,
            ..Self::eval(epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.iters > 0 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!(
                "step {} must be > 0 when iterating",
                self.step
            )));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::invalid("clamp lower bound must be below upper bound"));
        }
        Ok(())
    }
}

/// A model the attack can differentiate.
pub trait Classifier {
    /// Class probabilities, one row per sample.
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor>;

    /// Per-sample negative log-likelihoods and their gradient with respect
    /// to the input (row `i` of the gradient belongs to sample `i` alone).
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<LossGrad>;
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub losses: Vec<f64>,
    pub grad: Tensor,
}

impl Classifier for Network {
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Network::predict_proba(self, x)
    }

    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<LossGrad> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone());
        let probs = self.predict_var(&mut tape, &b, xv)?;
        let loss = tape.nll_loss(probs, labels)?;
        // Undo the batch mean so each row is that sample's own gradient.
        let total = tape.scale(loss, labels.len() as f64);
        let mut grads = tape.backward(total)?;
        let grad = grads.take(xv).ok_or_else(|| {
            Error::NotDifferentiable("the loss does not depend on the input".into())
        })?;
        let losses = sample_losses(tape.value(probs), labels);
        Ok(LossGrad { losses, grad })
    }
}

pub fn sample_losses(probs: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(PROB_FLOOR).ln())
        .collect()
}

/// Attacked inputs plus, per sample, the clean loss and the largest loss
/// seen along the trajectory (the starting point included).
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub adv: Tensor,
    pub clean_loss: Vec<f64>,
    pub best_loss: Vec<f64>,
    /// Model probabilities at `adv`.
    pub probs: Tensor,
}

/// PGD on a batch: `iters` steps of `x <- proj(x + step * sign(grad))`,
/// projecting onto the ε-ball around `x` and the clamp box after each step.
/// The ℓ∞ and box constraints are verified on the output.
pub fn pgd_attack<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    Ok(pgd_tracked(model, x, labels, cfg, rng)?.adv)
}

/// [`pgd_attack`] that also records losses along the way.
pub fn pgd_tracked<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    if x.rows() != labels.len() {
        return Err(Error::shape(
            "pgd",
            format!("{} inputs, {} labels", x.rows(), labels.len()),
        ));
    }
    let (lo, hi) = cfg.clamp;
    if x.data().iter().any(|&v| !(lo..=hi).contains(&v)) {
        return Err(Error::invalid("attack input outside the clamp box"));
    }
    let eps = cfg.epsilon;
    let project = |v: f64, orig: f64| v.clamp(orig - eps, orig + eps).clamp(lo, hi);

    let mut adv = x.clone();
    if cfg.random_start && eps > 0.0 {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = project(o + rng.random_range(-eps..=eps), o);
        }
    }
    let mut best_loss: Option<Vec<f64>> = None;
    let mut merge = |losses: &[f64]| match best_loss.as_mut() {
        Some(b) => b.iter_mut().zip(losses).for_each(|(b, &l)| *b = b.max(l)),
        None => best_loss = Some(losses.to_vec()),
    };
    let mut first = None;
    for _ in 0..cfg.iters {
        let lg = model.loss_grad(&adv, labels)?;
        merge(&lg.losses);
        first.get_or_insert(lg.losses);
        for ((a, &o), &g) in adv.data_mut().iter_mut().zip(x.data()).zip(lg.grad.data()) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = project(*a + cfg.step * s, o);
        }
    }
    let probs = model.predict_proba(&adv)?;
    let last = sample_losses(&probs, labels);
    merge(&last);
    let started_at_x = !(cfg.random_start && eps > 0.0);
    let clean_loss = match first {
        Some(f) if started_at_x => f,
        None if started_at_x => last,
        _ => sample_losses(&model.predict_proba(x)?, labels),
    };
    check_constraint(x, &adv, cfg)?;
    Ok(PgdOutcome {
        adv,
        clean_loss,
        best_loss: best_loss.expect("at least one evaluation"),
        probs,
    })
}

/// Verifies `max |adv - x| <= ε + 1e-9` and the box, counting every call.
pub fn check_constraint(x: &Tensor, adv: &Tensor, cfg: &AttackConfig) -> Result<()> {
    CHECKS.fetch_add(1, Ordering::Relaxed);
    let (lo, hi) = cfg.clamp;
    let worst = x.max_abs_diff(adv);
    let in_box = adv.data().iter().all(|&v| v >= lo && v <= hi);
    if worst > cfg.epsilon + 1e-9 || !in_box {
        VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        return Err(Error::Constraint(format!(
            "max deviation {worst} against epsilon {}, inside box: {in_box}",
            cfg.epsilon
        )));
    }
    Ok(())
}

/// `(checks, violations)` since process start.
pub fn constraint_stats() -> (u64, u64) {
    (CHECKS.load(Ordering::Relaxed), VIOLATIONS.load(Ordering::Relaxed))
}

/// Accuracy on `(x, labels)` after attacking each chunk of `batch` samples.
pub fn evaluate_under_attack<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut hits = 0;
    for r in batch_ranges(labels.len(), batch) {
        let ids: Vec<usize> = r.clone().collect();
        let xb = x.select_rows(&ids)?;
        let probs = pgd_tracked(model, &xb, &labels[r.clone()], cfg, rng)?.probs;
        hits += labels[r]
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(probs.row(i)) == y)
            .count();
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// One row of an attack report.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    pub eps: f64,
    pub model: String,
    pub accuracy: f64,
    pub n: usize,
}

impl AttackRow {
    pub const HEADER: &'static str = "eps,model,accuracy,n";

    pub fn to_csv(&self) -> String {
        format!("{},{},{:.6},{}", self.eps, self.model, self.accuracy, self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loss equal to the input, so the gradient is +1 everywhere.
    struct Ramp;

    impl Classifier for Ramp {
        fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = x
                .data()
                .iter()
                .map(|&v| vec![(-v).exp(), 1.0 - (-v).exp()])
                .collect();
            Tensor::from_rows(&rows)
        }
        fn loss_grad(&self, x: &Tensor, _: &[usize]) -> Result<LossGrad> {
            Ok(LossGrad {
                losses: x.data().to_vec(),
                grad: Tensor::full(x.shape(), 1.0),
            })
        }
    }

    #[test]
    fn eps_zero_is_identity() {
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.5, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = AttackConfig::eval(0.0);
        cfg.iters = 5;
        cfg.step = 0.1;
        assert_eq!(pgd_attack(&Ramp, &x, &[0], &cfg, &mut rng).unwrap(), x);
    }

    #[test]
    fn hand_simulated_steps() {
        let x = Tensor::new(vec![1, 1], vec![0.2]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.5,
            step: 0.3,
            iters: 3,
            clamp: (-10.0, 10.0),
            random_start: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = pgd_tracked(&Ramp, &x, &[0], &cfg, &mut rng).unwrap();
        assert!((out.adv.data()[0] - 0.7).abs() < 1e-15);
        assert!((out.best_loss[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_keep_the_start() {
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = AttackConfig::train(0.1);
        cfg.iters = 0;
        let adv = pgd_attack(&Ramp, &x, &[0], &cfg, &mut rng).unwrap();
        assert!(x.max_abs_diff(&adv) <= 0.1);
        cfg.random_start = false;
        assert_eq!(pgd_attack(&Ramp, &x, &[0], &cfg, &mut rng).unwrap(), x);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = AttackConfig::eval(0.1);
        cfg.epsilon = -0.1;
        assert!(pgd_attack(&Ramp, &x, &[0], &cfg, &mut rng).is_err());
        let mut cfg = AttackConfig::eval(0.1);
        cfg.step = 0.0;
        assert!(pgd_attack(&Ramp, &x, &[0], &cfg, &mut rng).is_err());
        let outside = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        assert!(pgd_attack(&Ramp, &outside, &[0], &AttackConfig::eval(0.1), &mut rng).is_err());
    }

    #[test]
    fn constraint_check_counts_violations() {
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let far = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let (_, before) = constraint_stats();
        assert!(check_constraint(&x, &far, &AttackConfig::eval(0.1)).is_err());
        let (_, after) = constraint_stats();
        assert!(after > before);
    }
}
