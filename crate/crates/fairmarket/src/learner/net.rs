//! Small feed-forward policy/value network with hand-derived backprop.
//!
//! Shared tanh trunk (two hidden layers), one categorical head per action
//! component, and a scalar value head. Parameters live in one flat vector so
//! the optimizer, gradient clipping, checkpoints, and finite-difference
//! probes all see the same layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub head_sizes: Vec<usize>,
}

impl NetShape {
    pub fn new(input: usize, hidden: usize, head_sizes: Vec<usize>) -> NetShape {
        NetShape {
            input,
            hidden,
            head_sizes,
        }
    }

    /// Named parameter blocks and their ranges in the flat vector.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, offset: &mut usize| {
            blocks.push((name, *offset..*offset + len));
            *offset += len;
        };
        push("w1".into(), self.hidden * self.input, &mut offset);
        push("b1".into(), self.hidden, &mut offset);
        push("w2".into(), self.hidden * self.hidden, &mut offset);
        push("b2".into(), self.hidden, &mut offset);
        for (h, &size) in self.head_sizes.iter().enumerate() {
            push(format!("head{h}_w"), size * self.hidden, &mut offset);
            push(format!("head{h}_b"), size, &mut offset);
        }
        push("value_w".into(), self.hidden, &mut offset);
        push("value_b".into(), 1, &mut offset);
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks().last().map(|(_, r)| r.end).unwrap_or(0)
    }
}

/// One forward pass with everything backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub obs: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub head_logits: Vec<Vec<f64>>,
    pub head_probs: Vec<Vec<f64>>,
    pub value: f64,
}

impl ForwardPass {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self
                .head_probs
                .iter()
                .all(|p| p.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub shape: NetShape,
    pub params: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

impl PolicyNet {
    /// Uniform Xavier init for the trunk and value head; policy heads start
    /// near-uniform (small scale) so early exploration is broad.
    pub fn init(shape: NetShape, rng: &mut ChaCha8Rng) -> PolicyNet {
        let mut params = vec![0.0; shape.param_count()];
        let blocks = shape.blocks();
        for (name, range) in &blocks {
            let (fan_in, scale) = match name.as_str() {
                "w1" => (shape.input, 1.0),
                "w2" => (shape.hidden, 1.0),
                "value_w" => (shape.hidden, 1.0),
                n if n.starts_with("head") && n.ends_with("_w") => (shape.hidden, 0.01),
                _ => continue, // biases stay zero
            };
            let bound = scale * (6.0 / (fan_in as f64 + shape.hidden as f64)).sqrt();
            for p in &mut params[range.clone()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        PolicyNet { shape, params }
    }

    pub fn forward(&self, obs: &[f64]) -> ForwardPass {
        debug_assert_eq!(obs.len(), self.shape.input);
        let hidden = self.shape.hidden;
        let blocks = self.shape.blocks();
        let w1 = &self.params[blocks[0].1.clone()];
        let b1 = &self.params[blocks[1].1.clone()];
        let w2 = &self.params[blocks[2].1.clone()];
        let b2 = &self.params[blocks[3].1.clone()];

        let mut a1 = vec![0.0; hidden];
        for i in 0..hidden {
            let mut z = b1[i];
            let row = &w1[i * self.shape.input..(i + 1) * self.shape.input];
            for (w, x) in row.iter().zip(obs) {
                z += w * x;
            }
            a1[i] = z.tanh();
        }
        let mut a2 = vec![0.0; hidden];
        for i in 0..hidden {
            let mut z = b2[i];
            let row = &w2[i * hidden..(i + 1) * hidden];
            for (w, x) in row.iter().zip(&a1) {
                z += w * x;
            }
            a2[i] = z.tanh();
        }

        let mut head_logits = Vec::with_capacity(self.shape.head_sizes.len());
        let mut head_probs = Vec::with_capacity(self.shape.head_sizes.len());
        for (h, &size) in self.shape.head_sizes.iter().enumerate() {
            let wh = &self.params[blocks[4 + 2 * h].1.clone()];
            let bh = &self.params[blocks[4 + 2 * h + 1].1.clone()];
            let mut logits = vec![0.0; size];
            for (i, logit) in logits.iter_mut().enumerate() {
                let mut z = bh[i];
                let row = &wh[i * hidden..(i + 1) * hidden];
                for (w, x) in row.iter().zip(&a2) {
                    z += w * x;
                }
                *logit = z;
            }
            head_probs.push(softmax(&logits));
            head_logits.push(logits);
        }

        let vw_idx = blocks.len() - 2;
        let value_w = &self.params[blocks[vw_idx].1.clone()];
        let value_b = self.params[blocks[vw_idx + 1].1.start];
        let mut value = value_b;
        for (w, x) in value_w.iter().zip(&a2) {
            value += w * x;
        }

        ForwardPass {
            obs: obs.to_vec(),
            a1,
            a2,
            head_logits,
            head_probs,
            value,
        }
    }

    /// Accumulate gradients for one sample given per-head logit gradients and
    /// the value gradient. `grad` has the flat parameter layout.
    pub fn backward(
        &self,
        fwd: &ForwardPass,
        dlogits: &[Vec<f64>],
        dvalue: f64,
        grad: &mut [f64],
    ) {
        let hidden = self.shape.hidden;
        let input = self.shape.input;
        let blocks = self.shape.blocks();
        let mut da2 = vec![0.0; hidden];

        for (h, dlogit) in dlogits.iter().enumerate() {
            let w_range = blocks[4 + 2 * h].1.clone();
            let b_range = blocks[4 + 2 * h + 1].1.clone();
            let wh = &self.params[w_range.clone()];
            for (i, &dz) in dlogit.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = i * hidden;
                for j in 0..hidden {
                    grad[w_range.start + row + j] += dz * fwd.a2[j];
                    da2[j] += dz * wh[row + j];
                }
                grad[b_range.start + i] += dz;
            }
        }

        let vw_idx = blocks.len() - 2;
        let vw_range = blocks[vw_idx].1.clone();
        let value_w = &self.params[vw_range.clone()];
        if dvalue != 0.0 {
            for j in 0..hidden {
                grad[vw_range.start + j] += dvalue * fwd.a2[j];
                da2[j] += dvalue * value_w[j];
            }
            grad[blocks[vw_idx + 1].1.start] += dvalue;
        }

        // Through the second tanh layer.
        let w2_range = blocks[2].1.clone();
        let b2_range = blocks[3].1.clone();
        let w2 = &self.params[w2_range.clone()];
        let mut da1 = vec![0.0; hidden];
        for i in 0..hidden {
            let dz = da2[i] * (1.0 - fwd.a2[i] * fwd.a2[i]);
            if dz == 0.0 {
                continue;
            }
            let row = i * hidden;
            for j in 0..hidden {
                grad[w2_range.start + row + j] += dz * fwd.a1[j];
                da1[j] += dz * w2[row + j];
            }
            grad[b2_range.start + i] += dz;
        }

        // Through the first tanh layer.
        let w1_range = blocks[0].1.clone();
        let b1_range = blocks[1].1.clone();
        for i in 0..hidden {
            let dz = da1[i] * (1.0 - fwd.a1[i] * fwd.a1[i]);
            if dz == 0.0 {
                continue;
            }
            let row = i * input;
            for j in 0..input {
                grad[w1_range.start + row + j] += dz * fwd.obs[j];
            }
            grad[b1_range.start + i] += dz;
        }
    }

    /// Sample one index per head; returns indices and the joint log-prob.
    pub fn sample_heads(&self, fwd: &ForwardPass, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
        let mut indices = Vec::with_capacity(fwd.head_probs.len());
        let mut logp = 0.0;
        for probs in &fwd.head_probs {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            logp += probs[chosen].max(1e-300).ln();
            indices.push(chosen);
        }
        (indices, logp)
    }

    pub fn argmax_heads(&self, fwd: &ForwardPass) -> Vec<usize> {
        fwd.head_probs
            .iter()
            .map(|probs| {
                probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }

    pub fn joint_log_prob(&self, fwd: &ForwardPass, indices: &[usize]) -> f64 {
        fwd.head_probs
            .iter()
            .zip(indices)
            .map(|(probs, &i)| probs[i].max(1e-300).ln())
            .sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invariant(
                "policy parameters contain NaN or Inf".into(),
            ));
        }
        Ok(())
    }
}

/// Plain Adam over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Clip the gradient to a maximum global L2 norm; returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], cap: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if cap > 0.0 && norm > cap {
        let scale = cap / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tiny_net(seed: u64) -> PolicyNet {
        let shape = NetShape::new(7, 16, vec![21, 5, 3]);
        PolicyNet::init(shape, &mut derive_rng(seed, &[1]))
    }

    #[test]
    fn softmax_heads_normalize() {
        let net = tiny_net(3);
        let fwd = net.forward(&[0.1, -0.2, 0.3, 0.0, 0.5, 1.0, 0.0]);
        for probs in &fwd.head_probs {
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sampling_matches_probabilities() {
        // Near-uniform head: frequencies within 1% of 1/21 over 100k draws.
        let shape = NetShape::new(2, 4, vec![21]);
        let net = PolicyNet {
            params: vec![0.0; shape.param_count()],
            shape,
        };
        let fwd = net.forward(&[0.0, 0.0]);
        let mut rng = derive_rng(4, &[2]);
        let mut counts = vec![0usize; 21];
        let draws = 100_000;
        for _ in 0..draws {
            let (idx, logp) = net.sample_heads(&fwd, &mut rng);
            counts[idx[0]] += 1;
            assert!(((1.0f64 / 21.0).ln() - logp).abs() < 1e-9);
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 21.0).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn saturated_head_dominates() {
        let shape = NetShape::new(1, 2, vec![3]);
        let mut net = PolicyNet {
            params: vec![0.0; shape.param_count()],
            shape,
        };
        // Push one logit far up through its bias.
        let blocks = net.shape.blocks();
        let head_b = blocks
            .iter()
            .find(|(n, _)| n == "head0_b")
            .unwrap()
            .1
            .clone();
        net.params[head_b.start + 1] = 30.0;
        let fwd = net.forward(&[0.0]);
        let mut rng = derive_rng(8, &[3]);
        let hits = (0..10_000)
            .filter(|_| net.sample_heads(&fwd, &mut rng).0[0] == 1)
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);
        assert_eq!(net.argmax_heads(&fwd), vec![1]);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let net = tiny_net(5);
        let fwd = net.forward(&[0.3; 7]);
        let draw = |seed: u64| -> Vec<Vec<usize>> {
            let mut rng = derive_rng(seed, &[9]);
            (0..32).map(|_| net.sample_heads(&fwd, &mut rng).0).collect()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn backward_matches_finite_differences_on_logit_loss() {
        // Loss = sum of chosen logits + value; gradient check on a few params.
        let net = tiny_net(7);
        let obs = [0.2, -0.4, 0.9, 0.0, 0.7, 1.0, 0.3];
        let chosen = [3usize, 1, 2];

        let loss = |net: &PolicyNet| -> f64 {
            let fwd = net.forward(&obs);
            let mut total = fwd.value;
            for (h, &c) in chosen.iter().enumerate() {
                total += fwd.head_logits[h][c];
            }
            total
        };

        let fwd = net.forward(&obs);
        let mut grad = vec![0.0; net.shape.param_count()];
        let dlogits: Vec<Vec<f64>> = net
            .shape
            .head_sizes
            .iter()
            .enumerate()
            .map(|(h, &s)| {
                let mut d = vec![0.0; s];
                d[chosen[h]] = 1.0;
                d
            })
            .collect();
        net.backward(&fwd, &dlogits, 1.0, &mut grad);

        let mut probe = net.clone();
        let eps = 1e-6;
        for idx in [0usize, 3, 120, 200, grad.len() - 1, grad.len() - 5] {
            let original = probe.params[idx];
            probe.params[idx] = original + eps;
            let up = loss(&probe);
            probe.params[idx] = original - eps;
            let down = loss(&probe);
            probe.params[idx] = original;
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - grad[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn grad_clip_caps_norm() {
        let mut grad = vec![3.0, 4.0];
        let norm = clip_grad_norm(&mut grad, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
