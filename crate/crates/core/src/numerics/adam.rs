use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8. Moment
    /// buffers are sized on the first step.
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// Applies one Adam update in place. Gradients are left untouched.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if state.first.is_empty() && state.t == 0 {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::State(format!(
            "{} moment buffers for {} parameters",
            state.first.len(),
            params.len()
        )));
    }
    if let Some((i, p)) = params
        .iter()
        .enumerate()
        .find(|(i, p)| state.first[*i].len() != p.len())
    {
        return Err(Error::State(format!(
            "parameter {i} has {} elements, moments have {}",
            p.len(),
            state.first[i].len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let n = p.len();
        for j in 0..n {
            let g = p.grad()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p.values_mut()[j] -= state.lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
