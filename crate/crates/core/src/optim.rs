//! Adam over tabular logits, a seeded minibatch trainer, and a
//! central-difference gradient checker.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> Default for AdamConfig<F> {
    fn default() -> Self {
        Self {
            lr: F::lit(1e-2),
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Array2<F>,
    pub v: Array2<F>,
    pub cfg: AdamConfig<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(shape: (usize, usize), cfg: AdamConfig<F>) -> Self {
        Self {
            step: 0,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            cfg,
        }
    }

    /// In-place bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut Array2<F>, grad: &Array2<F>, lr: F) -> Result<()> {
        if params.dim() != grad.dim() || params.dim() != self.m.dim() {
            return Err(Error::Shape(format!(
                "params {:?}, grad {:?}, moments {:?}",
                params.dim(),
                grad.dim(),
                self.m.dim()
            )));
        }
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {pos} is not finite at Adam step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let one = F::one();
        let t = self.step as i32;
        let bc1 = one - beta1.powi(t);
        let bc2 = one - beta2.powi(t);
        ndarray::Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (one - beta1) * g;
                *v = beta2 * *v + (one - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        Ok(())
    }
}

/// Pure Adam step: returns updated parameters and state.
pub fn adam_step<F: Real>(params: &Array2<F>, grad: &Array2<F>, state: &AdamState<F>) -> Result<(Array2<F>, AdamState<F>)> {
    let mut p = params.clone();
    let mut s = state.clone();
    let lr = s.cfg.lr;
    s.update(&mut p, grad, lr)?;
    Ok((p, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly to zero over the whole run.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<F> {
    pub epochs: usize,
    /// `usize::MAX` (or anything ≥ the dataset size) means full batch.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    pub adam: AdamConfig<F>,
}

impl<F: Real> Default for TrainConfig<F> {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1024,
            schedule: LrSchedule::Constant,
            seed: 0,
            eval_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl<F: Real> TrainConfig<F> {
    pub fn full_batch(epochs: usize, lr: F) -> Self {
        Self {
            epochs,
            batch_size: usize::MAX,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.adam.lr > F::zero()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<F> {
    pub epoch: usize,
    /// Sample-weighted mean of the minibatch losses seen during the epoch.
    pub loss: F,
    pub eval: Vec<(String, F)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<F> {
    pub params: Array2<F>,
    pub trace: Vec<EpochRecord<F>>,
    pub steps: u64,
    pub clamped: usize,
}

/// Minibatch Adam with seeded shuffling.
pub fn train<F: Real, O: Objective<F>>(
    objective: &O,
    samples: &[O::Sample],
    weights: Option<&[F]>,
    init: &Array2<F>,
    cfg: &TrainConfig<F>,
) -> Result<TrainOutcome<F>> {
    train_with_eval(objective, samples, weights, init, cfg, |_, _| Vec::new())
}

/// As [`train`], calling `eval(epoch, params)` every `cfg.eval_every` epochs.
pub fn train_with_eval<F: Real, O: Objective<F>>(
    objective: &O,
    samples: &[O::Sample],
    weights: Option<&[F]>,
    init: &Array2<F>,
    cfg: &TrainConfig<F>,
    mut eval: impl FnMut(usize, &Array2<F>) -> Vec<(String, F)>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::Shape(format!("{} weights for {} samples", w.len(), samples.len())));
        }
    }
    let n = samples.len();
    let batch = cfg.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut params = init.clone();
    let mut adam = AdamState::new(init.dim(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut clamped = 0;
    let full_batch = batch == n;
    let mut buf_s: Vec<O::Sample> = Vec::with_capacity(batch);
    let mut buf_w: Vec<F> = Vec::with_capacity(batch);

    for epoch in 1..=cfg.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = F::zero();
        let mut epoch_weight = F::zero();
        for chunk in order.chunks(batch) {
            let (bs, bw): (&[O::Sample], Option<&[F]>) = if full_batch {
                (samples, weights)
            } else {
                buf_s.clear();
                buf_s.extend(chunk.iter().map(|&i| samples[i].clone()));
                let bw = weights.map(|w| {
                    buf_w.clear();
                    buf_w.extend(chunk.iter().map(|&i| w[i]));
                    buf_w.as_slice()
                });
                (buf_s.as_slice(), bw)
            };
            let out = objective.loss_grad(&params, bs, bw)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {} at step {} (epoch {epoch})",
                    out.loss,
                    adam.step + 1
                )));
            }
            let mass = bw.map_or(F::from_count(bs.len()), |w| w.iter().copied().sum());
            epoch_loss += out.loss * mass;
            epoch_weight += mass;
            clamped += out.clamped;
            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.adam.lr,
                LrSchedule::LinearDecay => {
                    let frac = F::from_u64(adam.step).unwrap() / F::from_u64(total_steps.max(1)).unwrap();
                    cfg.adam.lr * (F::one() - frac)
                }
            };
            adam.update(&mut params, &out.grad, lr)?;
        }
        let eval_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        trace.push(EpochRecord {
            epoch,
            loss: epoch_loss / epoch_weight,
            eval: if eval_now { eval(epoch, &params) } else { Vec::new() },
        });
    }
    Ok(TrainOutcome {
        params,
        trace,
        steps: adam.step,
        clamped,
    })
}

/// Writes `epoch,loss,<eval columns>` with 17 significant digits.
pub fn write_loss_trace<F: Real, W: Write>(trace: &[EpochRecord<F>], mut w: W) -> Result<()> {
    let names: Vec<&str> = trace
        .iter()
        .find(|r| !r.eval.is_empty())
        .map(|r| r.eval.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    write!(w, "epoch,loss")?;
    for n in &names {
        write!(w, ",{n}")?;
    }
    writeln!(w)?;
    for r in trace {
        write!(w, "{},{}", r.epoch, fmt17(r.loss))?;
        for n in &names {
            match r.eval.iter().find(|(k, _)| k == n) {
                Some((_, v)) => write!(w, ",{}", fmt17(*v))?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Full-precision decimal formatting used by every CSV writer.
pub fn fmt17<F: Real>(v: F) -> String {
    format!("{:.16e}", v.as_f64())
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: Real, O: Objective<F>>(
    objective: &O,
    params: &Array2<F>,
    samples: &[O::Sample],
    weights: Option<&[F]>,
    step: F,
) -> Result<F> {
    let analytic = objective.loss_grad(params, samples, weights)?.grad;
    let mut p = params.clone();
    let mut worst = F::zero();
    let floor = F::lit(1e-8);
    for idx in 0..p.len() {
        let (r, c) = (idx / p.ncols(), idx % p.ncols());
        let orig = p[[r, c]];
        p[[r, c]] = orig + step;
        let up = objective.loss(&p, samples, weights)?;
        p[[r, c]] = orig - step;
        let down = objective.loss(&p, samples, weights)?;
        p[[r, c]] = orig;
        let numeric = (up - down) / (step + step);
        let a = analytic[[r, c]];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::AnonymousSample;
    use crate::losses::{Dpo, LossConfig};
    use crate::preference::Policy;
    use ndarray::array;

    #[test]
    fn zero_gradient_keeps_params() {
        let p = array![[0.3, -0.2], [1.0, 4.0]];
        let s = AdamState::new((2, 2), AdamConfig::default());
        let (q, s2) = adam_step(&p, &Array2::zeros((2, 2)), &s).unwrap();
        assert_eq!(p, q);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = array![[0.0, 0.0]];
        let g = array![[2.0, -0.5]];
        let mut s = AdamState::new((1, 2), AdamConfig::default());
        for _ in 0..50 {
            let (np, ns) = adam_step(&p, &g, &s).unwrap();
            p = np;
            s = ns;
        }
        assert!(p[[0, 0]] < 0.0 && p[[0, 1]] > 0.0);
        // each bias-corrected step has magnitude ≈ lr
        assert!((p[[0, 0]] + 0.5f64).abs() < 1e-6);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let p = array![[0.1, 0.2]];
        let g = array![[0.3, -0.7]];
        let s = AdamState::new((1, 2), AdamConfig::default());
        assert_eq!(adam_step(&p, &g, &s).unwrap(), adam_step(&p, &g, &s).unwrap());
        assert!(matches!(adam_step(&p, &array![[f64::NAN, 0.0]], &s), Err(Error::NonFinite(_))));
        assert!(adam_step(&p, &array![[0.0, 0.0, 0.0]], &s).is_err());
    }

    fn tiny_problem() -> (Dpo<f64>, Vec<AnonymousSample>) {
        let pi_ref = Policy::uniform(1, 3);
        let dpo = Dpo::new(&pi_ref, LossConfig::default()).unwrap();
        let mut data = Vec::new();
        for i in 0..300 {
            // response 2 beats 1 beats 0, mostly
            let (y1, y2) = [(0, 1), (1, 2), (0, 2)][i % 3];
            data.push(AnonymousSample { x: 0, y1, y2, o: u8::from(i % 7 != 0) });
        }
        (dpo, data)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (dpo, data) = tiny_problem();
        let init = array![[0.4, -0.1, 0.0]];
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(&dpo, &data, None, &init, &cfg).unwrap();
        assert_eq!(out.params, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_orders_responses_and_is_reproducible() {
        let (dpo, data) = tiny_problem();
        let init = Array2::zeros((1, 3));
        let cfg = TrainConfig { epochs: 30, batch_size: 32, seed: 5, eval_every: 10, ..TrainConfig::default() };
        let a = train_with_eval(&dpo, &data, None, &init, &cfg, |_, p| vec![("top".into(), p[[0, 2]])]).unwrap();
        let b = train_with_eval(&dpo, &data, None, &init, &cfg, |_, p| vec![("top".into(), p[[0, 2]])]).unwrap();
        assert_eq!(a, b);
        let p = &a.params;
        assert!(p[[0, 2]] > p[[0, 1]] && p[[0, 1]] > p[[0, 0]]);
        assert!(a.trace.last().unwrap().loss < a.trace[0].loss);
        assert_eq!(a.trace[9].eval.len(), 1);
        assert!(a.trace[0].eval.is_empty());

        let mut csv = Vec::new();
        write_loss_trace(&a.trace, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,loss,top\n1,"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        struct Broken;
        impl Objective<f64> for Broken {
            type Sample = ();
            fn loss_grad(&self, logits: &Array2<f64>, _: &[()], _: Option<&[f64]>) -> Result<crate::losses::LossGrad<f64>> {
                Ok(crate::losses::LossGrad {
                    loss: logits.iter().map(|v| v * v).sum(),
                    grad: logits.mapv(|v| 3.0 * v),
                    clamped: 0,
                })
            }
        }
        let p = array![[0.5, -1.0]];
        assert!(grad_check(&Broken, &p, &[()], None, 1e-5).unwrap() > 0.1);
        let (dpo, data) = tiny_problem();
        assert!(grad_check(&dpo, &array![[0.2, -0.3, 0.5]], &data, None, 1e-5).unwrap() < 1e-6);
    }
}
