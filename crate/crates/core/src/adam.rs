//! Adam optimiser over [`ParamSet`]s.

use crate::nn::ParamSet;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: u32,
    // One (m, v) pair per tensor, keyed by slot then tensor index.
    moments: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Advances the shared step counter; call once per optimisation step
    /// before the per-slot [`Adam::update`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to `params` (registered under `slot`) from `grads`,
    /// given in the same order as the tensors of `params`.
    pub fn update(&mut self, slot: usize, params: &mut ParamSet, grads: &[Vec<f32>]) {
        assert!(self.step > 0, "begin_step must precede update");
        assert_eq!(grads.len(), params.len(), "one gradient per tensor");
        if self.moments.len() <= slot {
            self.moments.resize_with(slot + 1, Vec::new);
        }
        let moments = &mut self.moments[slot];
        if moments.is_empty() {
            *moments = params
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect();
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.learning_rate / bc1;
        for (i, ((_, tensor), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = &mut moments[i];
            assert_eq!(g.len(), tensor.len(), "gradient length");
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let denom = (v[j] / bc2).sqrt() + self.epsilon;
                tensor.data[j] -= step_size * m[j] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut opt = Adam::new(0.1);
        opt.begin_step();
        opt.update(0, &mut ps, &[vec![3.0, -0.5]]);
        let d = &ps.tensor(0).data;
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![1], vec![5.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = ps.tensor(0).data[0];
            opt.begin_step();
            opt.update(0, &mut ps, &[vec![2.0 * (w - 1.0)]]);
        }
        assert!((ps.tensor(0).data[0] - 1.0).abs() < 1e-2);
    }
}
