//! Priority-queue graph search over deterministic model ensembles.
//!
//! Nodes carry one propagated state per model. The node to expand is the one
//! with the highest priority, where a new node's priority is the distance of
//! its ensemble-mean state to the closest node already in the graph, so
//! states near explored ones are deferred. Each edge earns a utility (model
//! disagreement or mean predicted reward) and the returned plan maximizes
//! accumulated utility per action.

use super::{DeterministicModel, PlannerMode};

#[derive(Debug, Clone)]
pub struct SearchNode {
    pub per_model_states: Vec<Vec<f64>>,
    pub mean_state: Vec<f64>,
    pub priority: f64,
    pub utility: f64,
    pub action_seq: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DeterministicPlan {
    pub actions: Vec<usize>,
    /// Accumulated utility divided by plan length for the returned plan.
    pub utility_rate: f64,
    pub nodes: Vec<SearchNode>,
}

fn sq_dist_bounded(a: &[f64], b: &[f64], bound: f64) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
        if acc >= bound {
            return acc;
        }
    }
    acc
}

fn mean_of(states: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; states[0].len()];
    for s in states {
        for (acc, x) in m.iter_mut().zip(s) {
            *acc += x;
        }
    }
    let e = states.len() as f64;
    m.iter_mut().for_each(|x| *x /= e);
    m
}

/// Builds a search graph of at most `n_max` nodes from `start` and returns
/// the best action sequence. Returns an empty plan (with a warning) when
/// `n_max` cannot accommodate the root's children.
pub fn deterministic_plan<M: DeterministicModel>(
    start: &[f64],
    models: &[M],
    n_max: usize,
    mode: PlannerMode,
) -> DeterministicPlan {
    assert!(!models.is_empty(), "planner needs at least one model");
    let num_actions = models[0].num_actions();
    let root = SearchNode {
        per_model_states: vec![start.to_vec(); models.len()],
        mean_state: start.to_vec(),
        priority: f64::INFINITY,
        utility: 0.0,
        action_seq: Vec::new(),
    };
    let mut nodes = vec![root];
    if n_max < 1 + num_actions {
        log::warn!("graph budget {n_max} cannot expand the root ({num_actions} actions)");
        return DeterministicPlan {
            actions: Vec::new(),
            utility_rate: 0.0,
            nodes,
        };
    }
    while nodes.len() + num_actions <= n_max {
        let mut pick = 0;
        for (i, n) in nodes.iter().enumerate() {
            if n.priority > nodes[pick].priority {
                pick = i;
            }
        }
        if nodes[pick].priority == f64::NEG_INFINITY {
            break;
        }
        nodes[pick].priority = f64::NEG_INFINITY;
        for a in 0..num_actions {
            let parent = &nodes[pick];
            let outs: Vec<(Vec<f64>, f64)> = models
                .iter()
                .zip(&parent.per_model_states)
                .map(|(m, s)| m.predict(s, a))
                .collect();
            let u = match mode {
                PlannerMode::Explore => {
                    let mut best = 0.0f64;
                    for i in 0..outs.len() {
                        for j in (i + 1)..outs.len() {
                            best = best.max(sq_dist_bounded(&outs[i].0, &outs[j].0, f64::INFINITY));
                        }
                    }
                    best
                }
                PlannerMode::Exploit => outs.iter().map(|o| o.1).sum::<f64>() / outs.len() as f64,
            };
            let mut action_seq = parent.action_seq.clone();
            action_seq.push(a);
            let utility = parent.utility + u;
            let per_model_states: Vec<Vec<f64>> = outs.into_iter().map(|o| o.0).collect();
            let mean_state = mean_of(&per_model_states);
            let mut best = f64::INFINITY;
            for n in &nodes {
                best = best.min(sq_dist_bounded(&mean_state, &n.mean_state, best));
                if best == 0.0 {
                    break;
                }
            }
            nodes.push(SearchNode {
                per_model_states,
                mean_state,
                priority: best.sqrt(),
                utility,
                action_seq,
            });
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, n) in nodes.iter().enumerate().skip(1) {
        let rate = n.utility / n.action_seq.len() as f64;
        match best {
            Some((_, b)) if rate <= b => {}
            _ => best = Some((i, rate)),
        }
    }
    let (idx, utility_rate) = best.expect("root was expanded");
    DeterministicPlan {
        actions: nodes[idx].action_seq.clone(),
        utility_rate,
        nodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Walk on the integer line, absorbing beyond ±3, paying 1 for stepping
    /// from 2 to 3. `bias` perturbs only that transition.
    struct Line {
        bias: f64,
    }

    impl DeterministicModel for Line {
        fn num_actions(&self) -> usize {
            2
        }
        fn predict(&self, obs: &[f64], action: usize) -> (Vec<f64>, f64) {
            if obs[0].abs() >= 3.0 {
                return (obs.to_vec(), 0.0);
            }
            let x = obs[0] + if action == 0 { -1.0 } else { 1.0 };
            let shift = if obs[0] == 2.0 && action == 1 {
                self.bias
            } else {
                0.0
            };
            (vec![x + shift], if x == 3.0 { 1.0 } else { 0.0 })
        }
    }

    #[test]
    fn identical_models_have_zero_explore_utility() {
        let models = [Line { bias: 0.0 }, Line { bias: 0.0 }];
        let plan = deterministic_plan(&[0.0], &models, 50, PlannerMode::Explore);
        assert!(!plan.actions.is_empty());
        assert_eq!(plan.utility_rate, 0.0);
    }

    #[test]
    fn exploit_reaches_reward() {
        let models = [Line { bias: 0.0 }];
        let plan = deterministic_plan(&[0.0], &models, 40, PlannerMode::Exploit);
        assert_eq!(plan.actions, vec![1, 1, 1]);
    }

    #[test]
    fn explore_finds_disagreement() {
        let models = [Line { bias: 0.0 }, Line { bias: 0.5 }];
        let plan = deterministic_plan(&[0.0], &models, 40, PlannerMode::Explore);
        assert_eq!(plan.actions[..3], [1, 1, 1]);
        assert!(plan.utility_rate > 0.0);
    }

    #[test]
    fn budget_respected_and_no_double_expansion() {
        let models = [Line { bias: 0.0 }];
        for n_max in [3, 7, 20, 51] {
            let plan = deterministic_plan(&[0.0], &models, n_max, PlannerMode::Exploit);
            assert!(plan.nodes.len() <= n_max);
        }
        let tiny = deterministic_plan(&[0.0], &models, 2, PlannerMode::Exploit);
        assert!(tiny.actions.is_empty());
    }
}
