//! Fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector; each dense layer stores its weight
//! matrix row-major (`out × in`) followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const PROB_CLAMP: f64 = 1e-6;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    offset: usize,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.outputs * self.inputs];
        let b = &params[self.offset + self.outputs * self.inputs..self.offset + self.len()];
        w.chunks_exact(self.inputs)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let wlen = self.outputs * self.inputs;
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = self.offset + o * self.inputs;
            let w = &params[row..row + self.inputs];
            let g = &mut grad[row..row + self.inputs];
            for i in 0..self.inputs {
                g[i] += d * x[i];
                dx[i] += d * w[i];
            }
            grad[self.offset + wlen + o] += d;
        }
        dx
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.inputs as f64).sqrt();
        for p in &mut params[self.offset..self.offset + self.len()] {
            *p = rng.gen_range(-bound..bound);
        }
    }
}

/// Multilayer perceptron with leaky-rectifier hidden layers and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "invalid layer sizes {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let mut net = Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; Self::param_count(layer_sizes)],
        };
        for l in net.layers() {
            l.init(&mut net.params, rng);
        }
        Ok(net)
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let expected = Self::param_count(layer_sizes);
        if params.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    fn layers(&self) -> Vec<Dense> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let d = Dense {
                    offset,
                    inputs: w[0],
                    outputs: w[1],
                };
                offset += d.len();
                d
            })
            .collect()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input_dim() {
            return Err(Error::SizeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let layers = self.layers();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pres = Vec::with_capacity(layers.len());
        let mut h = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let pre = l.forward(&self.params, &h);
            let next = if i + 1 < layers.len() {
                pre.iter().map(|&v| leaky(v)).collect()
            } else {
                pre.clone()
            };
            inputs.push(h);
            pres.push(pre);
            h = next;
        }
        Ok(MlpCache {
            inputs,
            pres,
            output: h,
        })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`; returns `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let layers = self.layers();
        let mut d = d_output.to_vec();
        for (i, l) in layers.iter().enumerate().rev() {
            if i + 1 < layers.len() {
                for (dv, &p) in d.iter_mut().zip(&cache.pres[i]) {
                    *dv *= leaky_grad(p);
                }
            }
            d = l.backward(&self.params, &cache.inputs[i], &d, grad);
        }
        d
    }
}

/// How the state head of a [`DynamicsNet`] is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Real-valued next state; with `residual` the head predicts the change.
    Deterministic { residual: bool },
    /// Per-bit logits squashed to clamped Bernoulli parameters.
    Bernoulli,
}

/// Dynamics model `(s, a) ↦ (s', r)`. The first hidden layer's activation
/// is multiplied component-wise by a learned embedding of the action; a
/// linear state head and a linear reward head read the last hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsNet {
    /// `[input, hidden.., output]`.
    layer_sizes: Vec<usize>,
    num_actions: usize,
    kind: OutputKind,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DynamicsCache {
    action: usize,
    x: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pres: Vec<Vec<f64>>,
    /// Inputs to each hidden layer after the first, then the head input.
    hidden_inputs: Vec<Vec<f64>>,
    first_act: Vec<f64>,
    /// Head output: the predicted state, or the logits for Bernoulli nets.
    pub head: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsOutput {
    /// Next state, or clamped Bernoulli parameters.
    pub state: Vec<f64>,
    pub reward: f64,
}

struct DynLayout {
    first: Dense,
    embedding: usize,
    hidden: Vec<Dense>,
    state_head: Dense,
    reward_head: Dense,
    total: usize,
}

impl DynamicsNet {
    fn layout(layer_sizes: &[usize], num_actions: usize) -> DynLayout {
        let n = layer_sizes.len();
        let first = Dense {
            offset: 0,
            inputs: layer_sizes[0],
            outputs: layer_sizes[1],
        };
        let embedding = first.len();
        let mut offset = embedding + num_actions * layer_sizes[1];
        let mut hidden = Vec::new();
        for w in layer_sizes[1..n - 1].windows(2) {
            let d = Dense {
                offset,
                inputs: w[0],
                outputs: w[1],
            };
            offset += d.len();
            hidden.push(d);
        }
        let last_hidden = layer_sizes[n - 2];
        let state_head = Dense {
            offset,
            inputs: last_hidden,
            outputs: layer_sizes[n - 1],
        };
        offset += state_head.len();
        let reward_head = Dense {
            offset,
            inputs: last_hidden,
            outputs: 1,
        };
        offset += reward_head.len();
        DynLayout {
            first,
            embedding,
            hidden,
            state_head,
            reward_head,
            total: offset,
        }
    }

    fn check(layer_sizes: &[usize], num_actions: usize, kind: OutputKind) -> Result<()> {
        if layer_sizes.len() < 3 || layer_sizes.contains(&0) || num_actions == 0 {
            return Err(Error::Config(format!(
                "dynamics net needs [input, hidden.., output] with positive sizes and actions, got {layer_sizes:?}"
            )));
        }
        if let OutputKind::Deterministic { residual: true } = kind {
            if layer_sizes[0] != layer_sizes[layer_sizes.len() - 1] {
                return Err(Error::Config(
                    "a residual state head needs equal input and output sizes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn param_count(layer_sizes: &[usize], num_actions: usize) -> usize {
        Self::layout(layer_sizes, num_actions).total
    }

    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        num_actions: usize,
        kind: OutputKind,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check(layer_sizes, num_actions, kind)?;
        let layout = Self::layout(layer_sizes, num_actions);
        let mut params = vec![0.0; layout.total];
        layout.first.init(&mut params, rng);
        for p in &mut params[layout.embedding..layout.embedding + num_actions * layer_sizes[1]] {
            *p = rng.gen_range(0.0..2.0);
        }
        for d in &layout.hidden {
            d.init(&mut params, rng);
        }
        layout.state_head.init(&mut params, rng);
        layout.reward_head.init(&mut params, rng);
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            num_actions,
            kind,
            params,
        })
    }

    pub fn from_params(
        layer_sizes: &[usize],
        num_actions: usize,
        kind: OutputKind,
        params: Vec<f64>,
    ) -> Result<Self> {
        Self::check(layer_sizes, num_actions, kind)?;
        let expected = Self::param_count(layer_sizes, num_actions);
        if params.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            num_actions,
            kind,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn kind(&self) -> OutputKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn forward_cached(&self, x: &[f64], action: usize) -> Result<DynamicsCache> {
        if x.len() != self.input_dim() {
            return Err(Error::SizeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if action >= self.num_actions {
            return Err(Error::Index {
                what: "action",
                index: action,
                limit: self.num_actions,
            });
        }
        let layout = Self::layout(&self.layer_sizes, self.num_actions);
        let h1 = self.layer_sizes[1];
        let pre1 = layout.first.forward(&self.params, x);
        let first_act: Vec<f64> = pre1.iter().map(|&v| leaky(v)).collect();
        let emb =
            &self.params[layout.embedding + action * h1..layout.embedding + (action + 1) * h1];
        let mut h: Vec<f64> = first_act.iter().zip(emb).map(|(a, e)| a * e).collect();
        let mut pres = vec![pre1];
        let mut hidden_inputs = Vec::with_capacity(layout.hidden.len() + 1);
        for d in &layout.hidden {
            let pre = d.forward(&self.params, &h);
            let next = pre.iter().map(|&v| leaky(v)).collect();
            hidden_inputs.push(h);
            pres.push(pre);
            h = next;
        }
        let head = layout.state_head.forward(&self.params, &h);
        let head = match self.kind {
            OutputKind::Deterministic { residual: true } => {
                head.iter().zip(x).map(|(o, xi)| o + xi).collect()
            }
            _ => head,
        };
        let reward = layout.reward_head.forward(&self.params, &h)[0];
        hidden_inputs.push(h);
        Ok(DynamicsCache {
            action,
            x: x.to_vec(),
            pres,
            hidden_inputs,
            first_act,
            head,
            reward,
        })
    }

    pub fn forward(&self, x: &[f64], action: usize) -> Result<DynamicsOutput> {
        let c = self.forward_cached(x, action)?;
        let state = match self.kind {
            OutputKind::Bernoulli => c
                .head
                .iter()
                .map(|&z| sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
                .collect(),
            OutputKind::Deterministic { .. } => c.head,
        };
        Ok(DynamicsOutput {
            state,
            reward: c.reward,
        })
    }

    /// Accumulates `∂L/∂θ` into `grad` given the loss gradient with respect
    /// to the head output (the predicted state, or the logits) and the
    /// predicted reward; returns `∂L/∂x`.
    pub fn backward(
        &self,
        cache: &DynamicsCache,
        d_head: &[f64],
        d_reward: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let layout = Self::layout(&self.layer_sizes, self.num_actions);
        let h1 = self.layer_sizes[1];
        let top = cache.hidden_inputs.last().expect("head input cached");
        let mut dh = layout.state_head.backward(&self.params, top, d_head, grad);
        let dr = layout
            .reward_head
            .backward(&self.params, top, &[d_reward], grad);
        dh.iter_mut().zip(&dr).for_each(|(a, b)| *a += b);
        for (i, d) in layout.hidden.iter().enumerate().rev() {
            for (dv, &p) in dh.iter_mut().zip(&cache.pres[i + 1]) {
                *dv *= leaky_grad(p);
            }
            dh = d.backward(&self.params, &cache.hidden_inputs[i], &dh, grad);
        }
        let emb_off = layout.embedding + cache.action * h1;
        let mut d_pre1 = vec![0.0; h1];
        for j in 0..h1 {
            grad[emb_off + j] += dh[j] * cache.first_act[j];
            d_pre1[j] = dh[j] * self.params[emb_off + j] * leaky_grad(cache.pres[0][j]);
        }
        let mut dx = layout.first.backward(&self.params, &cache.x, &d_pre1, grad);
        if let OutputKind::Deterministic { residual: true } = self.kind {
            dx.iter_mut().zip(d_head).for_each(|(a, b)| *a += b);
        }
        dx
    }

    /// Independent Bernoulli draws from the per-bit parameters; for
    /// deterministic nets every sample is the prediction.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        action: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, f64)> {
        let out = self.forward(x, action)?;
        let samples = match self.kind {
            OutputKind::Bernoulli => (0..count)
                .map(|_| {
                    out.state
                        .iter()
                        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
            OutputKind::Deterministic { .. } => vec![out.state.clone(); count],
        };
        Ok((samples, out.reward))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_weights_give_bias_output() {
        let sizes = [3, 4, 2];
        let n = Mlp::param_count(&sizes);
        let mut params = vec![0.0; n];
        params[n - 2] = 0.7;
        params[n - 1] = -1.5;
        let net = Mlp::from_params(&sizes, params).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -1.5]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn dynamics_shapes_and_clamp() {
        let mut rng = seeded(0);
        let net = DynamicsNet::new(&[6, 8, 8, 6], 3, OutputKind::Bernoulli, &mut rng).unwrap();
        assert_eq!(
            net.params().len(),
            DynamicsNet::param_count(&[6, 8, 8, 6], 3)
        );
        let mut big = net.clone();
        big.params_mut().iter_mut().for_each(|p| *p *= 100.0);
        let out = big.forward(&[1.0, 0.0, 1.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert!(out
            .state
            .iter()
            .all(|&p| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)));
        assert!(net.forward(&[0.0; 6], 3).is_err());
        assert!(DynamicsNet::new(
            &[4, 8, 3],
            2,
            OutputKind::Deterministic { residual: true },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn bernoulli_sampling_matches_parameters() {
        let mut rng = seeded(5);
        let net = DynamicsNet::new(&[2, 4, 3], 2, OutputKind::Bernoulli, &mut rng).unwrap();
        let p = net.forward(&[0.3, -0.2], 1).unwrap().state;
        let (samples, _) = net.sample(&[0.3, -0.2], 1, 10_000, &mut rng).unwrap();
        for (i, &pi) in p.iter().enumerate() {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / 10_000.0;
            assert!((mean - pi).abs() < 0.02);
        }
        assert!(net
            .sample(&[0.3, -0.2], 1, 0, &mut rng)
            .unwrap()
            .0
            .is_empty());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
