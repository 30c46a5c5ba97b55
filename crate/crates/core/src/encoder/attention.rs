//! Pre-norm multi-head self-attention block with attention capture.

use rand_chacha::ChaCha8Rng;

use super::linear::Linear;
use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Detached per-head snapshot of one attention layer: the full row-stochastic
/// attention matrix and the Euclidean norm of each value row.
#[derive(Clone, Debug)]
pub struct HeadRecord {
    pub rows: usize,
    /// Row-major `rows x rows` attention weights.
    pub attention: Vec<f64>,
    /// Per-row value norms, length `rows`.
    pub value_norms: Vec<f64>,
}

impl HeadRecord {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.attention[i * self.rows + j]
    }
}

/// All layers of one forward pass, `layers[layer][head]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<HeadRecord>>,
}

/// One transformer block: pre-norm attention and a GELU feed-forward, both
/// with residual connections. Per-head logits are scaled by `1/sqrt(d/h)`.
pub struct AttentionBlock {
    dim: usize,
    heads: usize,
    eps: f64,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
}

impl AttentionBlock {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttentionBlock> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by head count {heads}"
            )));
        }
        Ok(AttentionBlock {
            dim,
            heads,
            eps,
            wq: Linear::new(&format!("{name}.wq"), dim, dim, rng)?,
            wk: Linear::new_unbiased(&format!("{name}.wk"), dim, dim, rng)?,
            wv: Linear::new(&format!("{name}.wv"), dim, dim, rng)?,
            wo: Linear::new(&format!("{name}.wo"), dim, dim, rng)?,
            ff1: Linear::new(&format!("{name}.ff1"), dim, ff_hidden, rng)?,
            ff2: Linear::new(&format!("{name}.ff2"), ff_hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<HeadRecord>)> {
        let rows = x.shape()[0];
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let h = x.layer_norm(self.eps)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&h)?;
        let v = self.wv.forward(&h)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut records = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let c0 = head * dh;
            let qh = q.slice_cols(c0, c0 + dh)?;
            let kh = k.slice_cols(c0, c0 + dh)?;
            let vh = v.slice_cols(c0, c0 + dh)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale).row_softmax()?;

            let value_norms = {
                let vd = vh.data();
                (0..rows)
                    .map(|i| vd[i * dh..(i + 1) * dh].iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect()
            };
            records.push(HeadRecord {
                rows,
                attention: attn.value(),
                value_norms,
            });
            head_outs.push(attn.matmul(&vh)?);
        }

        let merged = Tensor::concat_cols(&head_outs)?;
        let x1 = x.add(&self.wo.forward(&merged)?)?;

        let h2 = x1.layer_norm(self.eps)?;
        let f = self.ff2.forward(&self.ff1.forward(&h2)?.gelu())?;
        let out = x1.add(&f)?;
        Ok((out, records))
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.wq.collect_params(out);
        self.wk.collect_params(out);
        self.wv.collect_params(out);
        self.wo.collect_params(out);
        self.ff1.collect_params(out);
        self.ff2.collect_params(out);
    }

    #[cfg(test)]
    pub(crate) fn zero_query_key(&self) {
        for p in [
            &self.wq.weight,
            self.wq.bias.as_ref().unwrap(),
            &self.wk.weight,
        ] {
            p.tensor.set_data(&vec![0.0; p.tensor.len()]).unwrap();
        }
    }

    #[cfg(test)]
    pub(crate) fn projections(&self) -> [&Linear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}
