//! Parameter containers and the small set of layers shared by every network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named tensors owned by one module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter `{name}`"
        );
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.data.clone(), &t.shape)
                } else {
                    tape.constant(t.data.clone(), &t.shape)
                }
            })
            .collect()
    }
}

/// Fan-in scaled uniform sample in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// He-uniform weights for layers fed by ReLU activations.
pub(crate) fn uniform_he(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Layer sizes of a ReLU MLP whose last layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
}

impl MlpShape {
    /// `depth` linear layers mapping `input -> hidden -> ... -> output`.
    pub fn new(input: usize, hidden: usize, output: usize, depth: usize) -> Self {
        assert!(depth >= 1, "MLP needs at least one layer");
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat(hidden).take(depth - 1));
        sizes.push(output);
        Self { sizes }
    }

    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Appends `{prefix}l{i}.weight` / `{prefix}l{i}.bias` with fan-in init.
    pub fn init_into(&self, params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng) {
        for (i, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, out) = (w[0], w[1]);
            params.push(
                format!("{prefix}l{i}.weight"),
                Tensor::new(vec![out, fan_in], uniform_fan_in(rng, fan_in, out * fan_in)),
            );
            params.push(
                format!("{prefix}l{i}.bias"),
                Tensor::new(vec![out], uniform_fan_in(rng, fan_in, out)),
            );
        }
    }

    /// Forward pass; `vars` holds `[w0, b0, w1, b1, ...]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        assert_eq!(vars.len(), 2 * self.depth(), "MLP parameter count");
        let mut h = x;
        for l in 0..self.depth() {
            h = tape.linear(h, vars[2 * l], vars[2 * l + 1]);
            if l + 1 < self.depth() {
                h = tape.relu(h);
            }
        }
        h
    }
}
