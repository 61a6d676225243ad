//! Noise schedules, the forward noising process, the eta-parameterized
//! reverse sampler (eta=0 deterministic, eta=1 ancestral variance), and the
//! loss primitives used by the three training stages.

use ndarray::ArrayD;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::randn;
use crate::tape::{check_same_shape, NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Beta/alpha/alpha-bar sequences for a K-step diffusion process.
///
/// Index convention: step k is 1-based as in the sampler equations;
/// `betas[k-1]` holds beta_k and `alpha_bar(0) == 1`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub k_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, k_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..k_steps)
                .map(|i| {
                    if k_steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (k_steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (0..k_steps)
                    .map(|i| {
                        let t1 = i as f64 / k_steps as f64;
                        let t2 = (i + 1) as f64 / k_steps as f64;
                        (1.0 - f(t2) / f(t1)).min(0.999)
                    })
                    .collect()
            }
        };
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(k_steps);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let sched = NoiseSchedule { k_steps, betas, alphas, alpha_bars };
        sched.validate()?;
        Ok(sched)
    }

    pub fn linear(k_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear, k_steps, beta_start, beta_end)
    }

    fn validate(&self) -> Result<()> {
        let mut prev = 1.0;
        for (i, &ab) in self.alpha_bars.iter().enumerate() {
            if !(0.0 < ab && ab < 1.0) {
                return Err(Error::config(format!("alpha_bar[{}] = {ab} outside (0,1)", i + 1)));
            }
            if ab >= prev {
                return Err(Error::config("alpha_bars must be strictly decreasing"));
            }
            prev = ab;
        }
        Ok(())
    }

    /// Cumulative product at step k (1-based); `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k_steps {
            return Err(Error::range(format!("step {k} outside 1..={}", self.k_steps)));
        }
        Ok(())
    }
}

/// Evenly spaced descending timestep subset for an n-step sampling chain.
pub fn spaced_timesteps(k_steps: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, k_steps);
    let mut ts: Vec<usize> = (0..n)
        .map(|i| ((i as f64 + 1.0) * k_steps as f64 / n as f64).round() as usize)
        .map(|k| k.clamp(1, k_steps))
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Noise a clean latent to step k: `sqrt(abar_k) z0 + sqrt(1 - abar_k) e`.
pub fn forward_noise(
    z0: &ArrayD<f64>,
    e: &ArrayD<f64>,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    check_same_shape("forward_noise", z0, e)?;
    sched.check_step(k)?;
    let ab = sched.alpha_bar(k);
    Ok(z0 * ab.sqrt() + e * (1.0 - ab).sqrt())
}

/// One reverse step k -> k_prev of the eta family.
///
/// eta = 0 is the deterministic sampler used at inference; eta = 1 recovers
/// the ancestral sampler's posterior variance. `rng` is consulted only when
/// the step variance is nonzero.
pub fn reverse_step_to(
    z_k: &ArrayD<f64>,
    k: usize,
    k_prev: usize,
    e_hat: &ArrayD<f64>,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<ArrayD<f64>> {
    check_same_shape("reverse_step", z_k, e_hat)?;
    sched.check_step(k)?;
    if k_prev >= k {
        return Err(Error::range(format!("k_prev {k_prev} must be below k {k}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::contract(format!("eta {eta} outside [0, 1]")));
    }
    let ab_k = sched.alpha_bar(k);
    let ab_prev = sched.alpha_bar(k_prev);
    let z0_hat = (z_k - &(e_hat * (1.0 - ab_k).sqrt())) / ab_k.sqrt();
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_k)).sqrt()
        * (1.0 - ab_k / ab_prev).sqrt();
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut z_prev = z0_hat * ab_prev.sqrt() + e_hat * dir_coeff;
    if sigma > 0.0 {
        z_prev = z_prev + randn(rng, z_k.shape()) * sigma;
    }
    Ok(z_prev)
}

/// One reverse step k -> k-1.
pub fn reverse_step(
    z_k: &ArrayD<f64>,
    k: usize,
    e_hat: &ArrayD<f64>,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<ArrayD<f64>> {
    if k == 0 {
        return Err(Error::range("reverse_step requires k >= 1"));
    }
    reverse_step_to(z_k, k, k - 1, e_hat, sched, eta, rng)
}

// ---- losses (plain arrays) ---------------------------------------------------

/// Mean squared error over all elements.
pub fn loss_mse(e: &ArrayD<f64>, e_hat: &ArrayD<f64>) -> Result<f64> {
    check_same_shape("loss_mse", e, e_hat)?;
    let n = e.len() as f64;
    let mut acc = 0.0;
    ndarray::Zip::from(e).and(e_hat).for_each(|&a, &b| {
        let d = a - b;
        acc += d * d;
    });
    Ok(acc / n)
}

fn cosine_flat(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "loss_ns: zero-norm prediction (dead output), refusing to smooth".into(),
        ));
    }
    Ok(num / (na.sqrt() * nb.sqrt()))
}

/// Negative-similarity loss `E(1 - cos)`.
///
/// Axis 0 is the batch axis for inputs of rank >= 2 (cosine per item, then
/// averaged); rank-1 inputs are one item.
pub fn loss_ns(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    check_same_shape("loss_ns", a, b)?;
    if a.ndim() <= 1 {
        return Ok(1.0 - cosine_flat(a.as_slice().unwrap(), b.as_slice().unwrap())?);
    }
    let batch = a.shape()[0];
    let m: usize = a.len() / batch;
    let av = a.to_owned().into_shape_with_order((batch, m)).unwrap();
    let bv = b.to_owned().into_shape_with_order((batch, m)).unwrap();
    let mut acc = 0.0;
    for i in 0..batch {
        acc += 1.0
            - cosine_flat(
                av.row(i).as_slice().unwrap(),
                bv.row(i).as_slice().unwrap(),
            )?;
    }
    Ok(acc / batch as f64)
}

/// Stage-1 combined loss: two reconstruction terms plus the weighted
/// contrastive term between the two predicted noises.
pub fn loss_st1(
    e_f: &ArrayD<f64>,
    e_f_hat: &ArrayD<f64>,
    e_r: &ArrayD<f64>,
    e_r_hat: &ArrayD<f64>,
    lambda: f64,
) -> Result<f64> {
    Ok(loss_mse(e_f, e_f_hat)? + loss_mse(e_r, e_r_hat)? + lambda * loss_ns(e_f_hat, e_r_hat)?)
}

// ---- losses (tape nodes, used inside training steps) ---------------------------

pub fn mse_node(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// `E(1 - cos)` with axis 0 as the batch axis.
pub fn ns_node(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let shape = tape.value(a).shape().to_vec();
    let batch = if shape.len() <= 1 { 1 } else { shape[0] };
    let m: usize = shape.iter().product::<usize>() / batch;
    let a2 = tape.reshape(a, &[batch, m]);
    let b2 = tape.reshape(b, &[batch, m]);
    let prod = tape.mul(a2, b2);
    let num = tape.sum_axis(prod, 1);
    let aa = tape.mul(a2, a2);
    let bb = tape.mul(b2, b2);
    let sa = tape.sum_axis(aa, 1);
    let sb = tape.sum_axis(bb, 1);
    let na = tape.sqrt(sa);
    let nb = tape.sqrt(sb);
    let den = tape.mul(na, nb);
    let cos = tape.div(num, den);
    let neg = tape.scale(cos, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    tape.mean_all(one_minus)
}
