//! Dense layer with seeded uniform initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tensor};
use crate::error::Result;

/// `x @ weight + bias` with `weight: (in, out)`, `bias: (out)`.
///
/// Entries start uniform in `±1/sqrt(in)`; draw order is fixed so model
/// construction is deterministic in the seed.
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
        Linear::build(name, in_dim, out_dim, true, rng)
    }

    /// A bias term on the key projection cancels inside row softmax; this
    /// variant omits the inert parameter.
    pub fn new_unbiased(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        Linear::build(name, in_dim, out_dim, false, rng)
    }

    fn build(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = if with_bias {
            let data: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            Some(Parameter::new(format!("{name}.bias"), vec![out_dim], data)?)
        } else {
            None
        };
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), vec![in_dim, out_dim], weight)?,
            bias,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.tensor)?;
        match &self.bias {
            Some(b) => y.add_rowvec(&b.tensor),
            None => Ok(y),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }
}
