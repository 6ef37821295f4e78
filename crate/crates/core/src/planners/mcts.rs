//! Monte-Carlo tree search over stochastic model ensembles.
//!
//! A node at depth h stands for an action sequence and holds K samples of
//! the state reached under each of the E models (an E×K block). Children
//! are created all at once in shuffled order and visited in that order
//! before UCB1 selection takes over. Playouts choose uniformly random
//! actions until the horizon, and the planner returns the action sequence of
//! the best playout.
//!
//! Samples for the k-th slot of every model share one random stream, so
//! identical models produce identical sample blocks.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PlannerMode, StochasticModel};
use crate::rng::{seeded, RunRng};

/// Estimator of the distance between two models' sample sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvEstimator {
    /// Total variation between empirical distributions over exact sample
    /// vectors.
    BitPattern,
    /// Mean over coordinates of the absolute difference between sample
    /// means, with the mean predicted reward appended as an extra
    /// coordinate.
    MeanL1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MctsConfig {
    pub playouts: usize,
    pub samples_per_model: usize,
    #[serde(default = "default_ucb")]
    pub ucb_c: f64,
    #[serde(default = "default_tv")]
    pub tv: TvEstimator,
}

fn default_ucb() -> f64 {
    std::f64::consts::SQRT_2
}

fn default_tv() -> TvEstimator {
    TvEstimator::MeanL1
}

impl MctsConfig {
    pub fn new(playouts: usize, samples_per_model: usize) -> Self {
        Self {
            playouts,
            samples_per_model,
            ucb_c: default_ucb(),
            tv: default_tv(),
        }
    }
}

/// E×K block of sampled states with their rewards.
#[derive(Debug, Clone)]
pub struct SampleBlock {
    pub states: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MctsNode {
    pub parent: Option<usize>,
    pub action: usize,
    pub children: Vec<usize>,
    pub explored_children: usize,
    pub visits: u64,
    pub value: f64,
    pub samples: Option<SampleBlock>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct MctsPlan {
    pub actions: Vec<usize>,
    pub best_return: f64,
    pub nodes: Vec<MctsNode>,
}

impl MctsPlan {
    pub fn root_visits(&self) -> u64 {
        self.nodes[0].visits
    }
}

fn advance<M: StochasticModel>(
    models: &[M],
    block: &SampleBlock,
    action: usize,
    rng: &mut RunRng,
) -> SampleBlock {
    let k = block.states[0].len();
    let seeds: Vec<u64> = (0..k).map(|_| rng.gen()).collect();
    let mut states = Vec::with_capacity(models.len());
    let mut rewards = Vec::with_capacity(models.len());
    for (m, row) in models.iter().zip(&block.states) {
        let mut s_row = Vec::with_capacity(k);
        let mut r_row = Vec::with_capacity(k);
        for (s, &seed) in row.iter().zip(&seeds) {
            let mut sub = seeded(seed);
            let (ns, r) = m.sample(s, action, &mut sub);
            s_row.push(ns);
            r_row.push(r);
        }
        states.push(s_row);
        rewards.push(r_row);
    }
    SampleBlock { states, rewards }
}

/// Total variation between the empirical distributions of two sample sets.
pub fn empirical_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let key = |s: &Vec<f64>| s.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let mut counts: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
    let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
    for s in a {
        counts.entry(key(s)).or_default().0 += wa;
    }
    for s in b {
        counts.entry(key(s)).or_default().1 += wb;
    }
    0.5 * counts.values().map(|(p, q)| (p - q).abs()).sum::<f64>()
}

fn mean_features(states: &[Vec<f64>], rewards: &[f64]) -> Vec<f64> {
    let k = states.len() as f64;
    let mut m = vec![0.0; states[0].len() + 1];
    for (s, r) in states.iter().zip(rewards) {
        for (acc, x) in m.iter_mut().zip(s) {
            *acc += x;
        }
        *m.last_mut().expect("non-empty") += r;
    }
    m.iter_mut().for_each(|x| *x /= k);
    m
}

/// Node reward for a sample block.
pub fn node_reward(block: &SampleBlock, mode: PlannerMode, tv: TvEstimator) -> f64 {
    match mode {
        PlannerMode::Exploit => {
            let n: usize = block.rewards.iter().map(Vec::len).sum();
            block.rewards.iter().flatten().sum::<f64>() / n as f64
        }
        PlannerMode::Explore => {
            let e = block.states.len();
            let mut best = 0.0f64;
            match tv {
                TvEstimator::BitPattern => {
                    for i in 0..e {
                        for j in (i + 1)..e {
                            best = best.max(empirical_tv(&block.states[i], &block.states[j]));
                        }
                    }
                }
                TvEstimator::MeanL1 => {
                    let feats: Vec<Vec<f64>> = (0..e)
                        .map(|i| mean_features(&block.states[i], &block.rewards[i]))
                        .collect();
                    for i in 0..e {
                        for j in (i + 1)..e {
                            let d = feats[i]
                                .iter()
                                .zip(&feats[j])
                                .map(|(x, y)| (x - y).abs())
                                .sum::<f64>()
                                / feats[i].len() as f64;
                            best = best.max(d);
                        }
                    }
                }
            }
            best
        }
    }
}

/// Plans from `start_obs` at depth `current_depth`; playouts end once the
/// total depth reaches `max_horizon + 1` actions.
pub fn mcts_plan<M: StochasticModel>(
    start_obs: &[f64],
    models: &[M],
    config: &MctsConfig,
    max_horizon: usize,
    current_depth: usize,
    mode: PlannerMode,
    rng: &mut RunRng,
) -> MctsPlan {
    assert!(!models.is_empty(), "planner needs at least one model");
    let num_actions = models[0].num_actions();
    let k = config.samples_per_model.max(1);
    let root_block = SampleBlock {
        states: vec![vec![start_obs.to_vec(); k]; models.len()],
        rewards: vec![vec![0.0; k]; models.len()],
    };
    let mut nodes = vec![MctsNode {
        parent: None,
        action: 0,
        children: Vec::new(),
        explored_children: 0,
        visits: 0,
        value: 0.0,
        samples: Some(root_block),
        reward: 0.0,
    }];
    let is_terminal = |len: usize| current_depth + len > max_horizon;
    let mut best_actions = Vec::new();
    let mut best_return = f64::NEG_INFINITY;

    for _ in 0..config.playouts {
        let mut node = 0;
        let mut sum = 0.0;
        let mut actions = Vec::new();
        while !nodes[node].children.is_empty() {
            let child = if nodes[node].explored_children < nodes[node].children.len() {
                let c = nodes[node].children[nodes[node].explored_children];
                nodes[node].explored_children += 1;
                c
            } else {
                let parent_visits = nodes[node].visits.max(1) as f64;
                let mut pick = nodes[node].children[0];
                let mut best = f64::NEG_INFINITY;
                for &c in &nodes[node].children {
                    let ch = &nodes[c];
                    let score = if ch.visits == 0 {
                        f64::INFINITY
                    } else {
                        ch.value / ch.visits as f64
                            + config.ucb_c * (parent_visits.ln() / ch.visits as f64).sqrt()
                    };
                    if score > best {
                        best = score;
                        pick = c;
                    }
                }
                pick
            };
            if nodes[child].samples.is_none() {
                let parent_block = nodes[node]
                    .samples
                    .as_ref()
                    .expect("visited nodes hold samples");
                let block = advance(models, parent_block, nodes[child].action, rng);
                nodes[child].reward = node_reward(&block, mode, config.tv);
                nodes[child].samples = Some(block);
            }
            node = child;
            sum += nodes[node].reward;
            actions.push(nodes[node].action);
        }
        if !is_terminal(actions.len()) {
            let mut order: Vec<usize> = (0..num_actions).collect();
            order.shuffle(rng);
            let base = nodes.len();
            for (i, a) in order.into_iter().enumerate() {
                nodes.push(MctsNode {
                    parent: Some(node),
                    action: a,
                    children: Vec::new(),
                    explored_children: 0,
                    visits: 0,
                    value: 0.0,
                    samples: None,
                    reward: 0.0,
                });
                nodes[node].children.push(base + i);
            }
        }
        let mut block = nodes[node]
            .samples
            .clone()
            .expect("visited nodes hold samples");
        while !is_terminal(actions.len()) {
            let a = rng.gen_range(0..num_actions);
            block = advance(models, &block, a, rng);
            sum += node_reward(&block, mode, config.tv);
            actions.push(a);
        }
        if sum > best_return {
            best_return = sum;
            best_actions = actions;
        }
        let mut cur = Some(node);
        while let Some(c) = cur {
            nodes[c].visits += 1;
            nodes[c].value += sum;
            cur = nodes[c].parent;
        }
    }
    MctsPlan {
        actions: best_actions,
        best_return,
        nodes,
    }
}
