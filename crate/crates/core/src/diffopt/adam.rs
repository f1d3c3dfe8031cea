use serde::{Deserialize, Serialize};

use super::ParamBlock;
use crate::error::{Error, Result};

/// First and second moment estimates for every block, plus the step count.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(blocks: &[ParamBlock]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            second: blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// One Adam update that *descends* along `block.grad` for every block.
pub fn adam_step(blocks: &mut [ParamBlock], state: &mut AdamState, lr: f64) -> Result<()> {
    if blocks.len() != state.first.len() {
        return Err(Error::DimensionMismatch {
            context: "adam_step blocks",
            expected: state.first.len(),
            got: blocks.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, block) in blocks.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        if m.len() != block.len() || block.grad.len() != block.len() {
            return Err(Error::DimensionMismatch {
                context: "adam_step block length",
                expected: m.len(),
                got: block.len(),
            });
        }
        if !block.trainable {
            continue;
        }
        for i in 0..block.len() {
            let g = block.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            block.values[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(values: Vec<f64>, grad: Vec<f64>) -> ParamBlock {
        ParamBlock {
            name: "b".into(),
            values,
            grad,
            trainable: true,
        }
    }

    #[test]
    fn first_step_is_sign_step() {
        let mut blocks = vec![block(vec![1.0, -2.0, 0.5], vec![3.0, -0.001, 250.0])];
        let mut state = AdamState::new(&blocks);
        adam_step(&mut blocks, &mut state, 0.01).unwrap();
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (v, e) in blocks[0].values.iter().zip(expected) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
    }

    #[test]
    fn first_step_scale_equivariant() {
        let g = vec![0.3, -4.0, 1e-3];
        let mut a = vec![block(vec![0.0; 3], g.clone())];
        let mut b = vec![block(vec![0.0; 3], g.iter().map(|x| x * 1e4).collect())];
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        adam_step(&mut a, &mut sa, 0.01).unwrap();
        adam_step(&mut b, &mut sb, 0.01).unwrap();
        for (x, y) in a[0].values.iter().zip(&b[0].values) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_does_not_move() {
        let mut blocks = vec![block(vec![1.0, 2.0], vec![0.0, 0.0])];
        let mut state = AdamState::new(&blocks);
        for _ in 0..10 {
            adam_step(&mut blocks, &mut state, 0.01).unwrap();
        }
        assert_eq!(blocks[0].values, vec![1.0, 2.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -0.7, 0.2];
        let mut blocks = vec![block(vec![0.0; 3], vec![0.0; 3])];
        let mut state = AdamState::new(&blocks);
        let mut steps = 0;
        for _ in 0..5000 {
            let b = &mut blocks[0];
            for i in 0..3 {
                b.grad[i] = b.values[i] - target[i];
            }
            adam_step(&mut blocks, &mut state, 0.01).unwrap();
            steps += 1;
            let err = blocks[0]
                .values
                .iter()
                .zip(target)
                .map(|(v, t)| (v - t).abs())
                .fold(0.0, f64::max);
            if err < 1e-6 {
                break;
            }
        }
        assert!(steps < 5000, "did not converge");
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut blocks = vec![block(vec![0.0], vec![0.0])];
        let mut state = AdamState::new(&[]);
        assert!(adam_step(&mut blocks, &mut state, 0.01).is_err());
    }
}
