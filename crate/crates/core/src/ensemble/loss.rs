//! Training losses with their parameter gradients.

use super::nn::{sigmoid, DynamicsNet, OutputKind, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::mdp::{Trajectory, Transition};

/// Loss value and `∂L/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Unrolled loss from `start`: the first step feeds the recorded state,
/// later steps feed the model's own prediction, and each step adds
/// `‖s_{j+1} − ŝ_{j+1}‖² + w·(r_j − r̂_j)²`. Gradients flow through the
/// whole unrolled chain.
pub fn loss_multistep(
    net: &DynamicsNet,
    traj: &Trajectory<Vec<f64>>,
    start: usize,
    k: usize,
    reward_weight: f64,
) -> Result<LossGrad> {
    let mut grad = vec![0.0; net.params().len()];
    let loss = accumulate_multistep(net, traj, start, k, reward_weight, &mut grad)?;
    Ok(LossGrad { loss, grad })
}

fn accumulate_multistep(
    net: &DynamicsNet,
    traj: &Trajectory<Vec<f64>>,
    start: usize,
    k: usize,
    reward_weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("unroll length must be at least 1".into()));
    }
    if start + k > traj.len() {
        return Err(Error::TrajectoryTooShort {
            needed: k,
            available: traj.len().saturating_sub(start),
        });
    }
    if let OutputKind::Bernoulli = net.kind() {
        return Err(Error::Config(
            "the unrolled squared loss needs a deterministic model".into(),
        ));
    }
    let steps = &traj.steps[start..start + k];
    let mut caches = Vec::with_capacity(k);
    let mut input = steps[0].state.clone();
    let mut loss = 0.0;
    for t in steps {
        let c = net.forward_cached(&input, t.action)?;
        if c.head.len() != t.next_state.len() {
            return Err(Error::SizeMismatch {
                expected: c.head.len(),
                got: t.next_state.len(),
            });
        }
        loss += c
            .head
            .iter()
            .zip(&t.next_state)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
        loss += reward_weight * (c.reward - t.reward) * (c.reward - t.reward);
        input = c.head.clone();
        caches.push(c);
    }
    let mut carry: Option<Vec<f64>> = None;
    for (c, t) in caches.iter().zip(steps).rev() {
        let mut d_head: Vec<f64> = c
            .head
            .iter()
            .zip(&t.next_state)
            .map(|(p, y)| 2.0 * (p - y))
            .collect();
        if let Some(dc) = &carry {
            d_head.iter_mut().zip(dc).for_each(|(a, b)| *a += b);
        }
        let d_reward = 2.0 * reward_weight * (c.reward - t.reward);
        carry = Some(net.backward(c, &d_head, d_reward, grad));
    }
    Ok(loss)
}

/// Mean unrolled loss over `(trajectory, start)` segments.
pub fn loss_multistep_batch(
    net: &DynamicsNet,
    segments: &[(&Trajectory<Vec<f64>>, usize)],
    k: usize,
    reward_weight: f64,
) -> Result<LossGrad> {
    if segments.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    for (traj, start) in segments {
        loss += accumulate_multistep(net, traj, *start, k, reward_weight, &mut grad)?;
    }
    let n = segments.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad {
        loss: loss / n,
        grad,
    })
}

/// Mean over the batch of `−Σ_bits log P(bit)` under the clamped Bernoulli
/// parameters, plus `w·(r − r̂)²`. Clamped bits contribute no gradient.
pub fn loss_nll_stochastic(
    net: &DynamicsNet,
    batch: &[&Transition<Vec<f64>>],
    reward_weight: f64,
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if net.kind() != OutputKind::Bernoulli {
        return Err(Error::Config(
            "the likelihood loss needs a Bernoulli-output model".into(),
        ));
    }
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    for t in batch {
        let c = net.forward_cached(&t.state, t.action)?;
        if c.head.len() != t.next_state.len() {
            return Err(Error::SizeMismatch {
                expected: c.head.len(),
                got: t.next_state.len(),
            });
        }
        let mut d_head = vec![0.0; c.head.len()];
        for ((&z, &y), d) in c.head.iter().zip(&t.next_state).zip(&mut d_head) {
            let raw = sigmoid(z);
            let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
                *d = p - y;
            }
        }
        loss += reward_weight * (c.reward - t.reward) * (c.reward - t.reward);
        net.backward(
            &c,
            &d_head,
            2.0 * reward_weight * (c.reward - t.reward),
            &mut grad,
        );
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad {
        loss: loss / n,
        grad,
    })
}
