//! Token embedding, transformer encoding with a global feature token, and
//! per-patch significance scores.

mod attention;
mod embed;
mod linear;

pub use attention::{AttentionBlock, AttentionRecord, HeadRecord};
pub use embed::{PosEmbed, TokenEmbed};
pub use linear::Linear;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::geometry::PatchSet;

/// Token matrix for one cloud: row 0 is the learnable global feature token,
/// rows `1..=n_patches` are point tokens (patch embedding plus positional
/// term). `pos` keeps the positional components alone so masking can re-add
/// them; its global row is zero.
pub struct TokenSequence {
    pub tokens: Tensor,
    pub pos: Tensor,
    pub n_patches: usize,
    pub dim: usize,
}

/// Latent tokens after encoding plus the captured attention.
pub struct EncoderOutput {
    pub latent: Tensor,
    /// Row of `latent` at the global token position, shape `(1, d)`.
    pub global_feature: Tensor,
    pub records: AttentionRecord,
}

pub struct Encoder {
    pub dim: usize,
    pub heads: usize,
    eps: f64,
    pub token_embed: TokenEmbed,
    pub pos_embed: PosEmbed,
    pub global_token: Parameter,
    pub blocks: Vec<AttentionBlock>,
}

impl Encoder {
    pub fn new(
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Encoder> {
        if depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        let token_embed = TokenEmbed::new(&format!("{name}.token_embed"), dim, rng)?;
        let pos_embed = PosEmbed::new(&format!("{name}.pos_embed"), dim, rng)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let global: Vec<f64> = (0..dim)
            .map(|_| rand::Rng::gen_range(rng, -bound..bound))
            .collect();
        let global_token = Parameter::new(format!("{name}.global_token"), vec![1, dim], global)?;
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(&format!("{name}.block{i}"), dim, heads, ff_hidden, eps, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            dim,
            heads,
            eps,
            token_embed,
            pos_embed,
            global_token,
            blocks,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Embeds a patch set into a token sequence with the global token
    /// prepended.
    pub fn embed_tokens(&self, patches: &PatchSet) -> Result<TokenSequence> {
        if patches.n_patches() == 0 {
            return Err(Error::invalid("cannot embed an empty patch set"));
        }
        let locals = embed::locals_tensor(patches)?;
        let patch_tokens = self.token_embed.forward(&locals, patches.patch_size())?;
        let centers = embed::centers_tensor(patches)?;
        let pos = self.pos_embed.forward(&centers)?;
        let point_rows = patch_tokens.add(&pos)?;

        let tokens = Tensor::concat_rows(&[self.global_token.tensor.clone(), point_rows])?;
        let pos_full = Tensor::concat_rows(&[Tensor::zeros(vec![1, self.dim]), pos])?;
        Ok(TokenSequence {
            tokens,
            pos: pos_full,
            n_patches: patches.n_patches(),
            dim: self.dim,
        })
    }

    /// Runs the first `depth` blocks and the final normalization, capturing
    /// every layer's attention.
    pub fn encode_prefix(&self, seq: &TokenSequence, depth: usize) -> Result<EncoderOutput> {
        if depth == 0 || depth > self.blocks.len() {
            return Err(Error::invalid(format!(
                "depth {depth} out of range 1..={}",
                self.blocks.len()
            )));
        }
        let mut x = seq.tokens.clone();
        let mut records = AttentionRecord::default();
        for block in &self.blocks[..depth] {
            let (next, heads) = block.forward(&x)?;
            records.layers.push(heads);
            x = next;
        }
        let latent = x.layer_norm(self.eps)?;
        let global_feature = latent.slice_rows(0, 1)?;
        Ok(EncoderOutput {
            latent,
            global_feature,
            records,
        })
    }

    /// Full-depth encoding.
    pub fn encode(&self, seq: &TokenSequence) -> Result<EncoderOutput> {
        self.encode_prefix(seq, self.blocks.len())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.token_embed.collect_params(out);
        self.pos_embed.collect_params(out);
        out.push(self.global_token.clone());
        for b in &self.blocks {
            b.collect_params(out);
        }
    }
}

/// Per-patch significance of one layer: the global token's attention row
/// weighted by value norms, normalized per head over the point tokens
/// (the global token's self-attention entry is excluded), summed across
/// heads, then renormalized to a distribution of length `n_patches`.
pub fn significance(record: &AttentionRecord, layer: usize) -> Result<Vec<f64>> {
    let heads = record
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
    if heads.is_empty() {
        return Err(Error::DegenerateAttention("record has no heads".into()));
    }
    let rows = heads[0].rows;
    if rows < 2 {
        return Err(Error::DegenerateAttention(
            "record has no point tokens".into(),
        ));
    }
    let n = rows - 1;
    let mut scores = vec![0.0; n];
    for head in heads {
        let mut denom = 0.0;
        for j in 1..rows {
            denom += head.at(0, j) * head.value_norms[j];
        }
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::DegenerateAttention(format!(
                "head denominator {denom} is not positive"
            )));
        }
        for j in 1..rows {
            scores[j - 1] += head.at(0, j) * head.value_norms[j] / denom;
        }
    }
    let total: f64 = scores.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::DegenerateAttention(format!(
            "aggregate mass {total} is not positive"
        )));
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::geometry::{patchify, synth_shape, ShapeKind};
    use crate::seeds;

    fn tiny_encoder(depth: usize, dim: usize, heads: usize) -> Encoder {
        let mut rng = seeds::rng(7);
        Encoder::new("enc", depth, dim, heads, 2 * dim, 1e-5, &mut rng).unwrap()
    }

    fn patch_set(local: Vec<Vec<[f64; 3]>>, centers: Vec<[f64; 3]>) -> PatchSet {
        let k = local[0].len();
        PatchSet {
            center_indices: (0..centers.len()).collect(),
            center_coords: centers,
            neighbor_indices: local.iter().map(|p| vec![0; p.len()]).collect(),
            local_coords: local
                .into_iter()
                .map(|p| {
                    assert_eq!(p.len(), k);
                    p
                })
                .collect(),
        }
    }

    #[test]
    fn identical_patches_embed_identically() {
        let enc = tiny_encoder(1, 8, 2);
        let patch = vec![[0.1, 0.2, 0.3], [-0.1, 0.0, 0.05], [0.2, -0.3, 0.1]];
        let ps = patch_set(vec![patch.clone(), patch], vec![[0.5, 0.0, 0.0]; 2]);
        let seq = enc.embed_tokens(&ps).unwrap();
        let v = seq.tokens.value();
        assert_eq!(v[8..16], v[16..24]);
    }

    #[test]
    fn point_order_within_patch_is_irrelevant() {
        let enc = tiny_encoder(1, 8, 2);
        let patch = vec![[0.1, 0.2, 0.3], [-0.1, 0.0, 0.05], [0.2, -0.3, 0.1]];
        let mut permuted = patch.clone();
        permuted.rotate_left(1);
        let ps1 = patch_set(vec![patch], vec![[0.0; 3]]);
        let ps2 = patch_set(vec![permuted], vec![[0.0; 3]]);
        let t1 = enc.embed_tokens(&ps1).unwrap().tokens.value();
        let t2 = enc.embed_tokens(&ps2).unwrap().tokens.value();
        assert_eq!(t1, t2);
    }

    #[test]
    fn zero_patch_matches_manual_two_layer_trace() {
        let enc = tiny_encoder(1, 4, 2);
        let ps = patch_set(vec![vec![[0.0; 3]; 3]], vec![[0.0; 3]]);
        let locals = Tensor::constant(vec![3, 3], vec![0.0; 9]).unwrap();
        let token = enc.token_embed.forward(&locals, 3).unwrap().value();

        // manual: relu(0 @ W1 + b1) @ W2 + b2, identical rows so max-pool is a no-op
        let w2 = {
            let mut params = Vec::new();
            enc.token_embed.collect_params(&mut params);
            params
        };
        let b1 = w2.iter().find(|p| p.name.ends_with("l1.bias")).unwrap().tensor.value();
        let w2m = w2.iter().find(|p| p.name.ends_with("l2.weight")).unwrap().tensor.value();
        let b2 = w2.iter().find(|p| p.name.ends_with("l2.bias")).unwrap().tensor.value();
        let hidden: Vec<f64> = b1.iter().map(|&x| x.max(0.0)).collect();
        let mut manual = b2.clone();
        for (o, m) in manual.iter_mut().enumerate() {
            for (h, &hv) in hidden.iter().enumerate() {
                *m += hv * w2m[h * 4 + o];
            }
        }
        for (a, b) in token.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let _ = ps;
    }

    #[test]
    fn zeroed_query_key_gives_uniform_attention() {
        let enc = tiny_encoder(1, 8, 2);
        enc.blocks[0].zero_query_key();
        let sphere = synth_shape(ShapeKind::Sphere, 32, 1).unwrap();
        let ps = patchify(&sphere, 5, 4, 2).unwrap();
        let seq = enc.embed_tokens(&ps).unwrap();
        let out = enc.encode(&seq).unwrap();
        let rows = 6;
        for head in &out.records.layers[0] {
            for i in 0..rows {
                for j in 0..rows {
                    assert!((head.at(i, j) - 1.0 / rows as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_token_attention_matches_manual_softmax() {
        let enc = tiny_encoder(1, 2, 1);
        // hand-chosen projections
        let [wq, wk, wv, _wo] = enc.blocks[0].projections();
        wq.weight.tensor.set_data(&[0.6, -0.2, 0.3, 0.8]).unwrap();
        wq.bias.as_ref().unwrap().tensor.set_data(&[0.05, -0.1]).unwrap();
        wk.weight.tensor.set_data(&[-0.4, 0.7, 0.2, 0.1]).unwrap();
        wv.weight.tensor.set_data(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        wv.bias.as_ref().unwrap().tensor.set_data(&[0.0, 0.0]).unwrap();

        let x = [[0.9f64, -0.3], [0.2, 0.7]];
        let xt = Tensor::constant(vec![2, 2], x.concat()).unwrap();
        let (_, recs) = enc.blocks[0].forward(&xt).unwrap();

        // manual trace: pre-norm, projections, scaled dot product, softmax
        let eps = 1e-5;
        let mut h = [[0.0f64; 2]; 2];
        for (i, row) in x.iter().enumerate() {
            let mu = (row[0] + row[1]) / 2.0;
            let var = ((row[0] - mu).powi(2) + (row[1] - mu).powi(2)) / 2.0;
            let inv = 1.0 / (var + eps).sqrt();
            h[i] = [(row[0] - mu) * inv, (row[1] - mu) * inv];
        }
        let wqv = [[0.6, -0.2], [0.3, 0.8]];
        let bq = [0.05, -0.1];
        let wkv = [[-0.4, 0.7], [0.2, 0.1]];
        let bk = [0.0, 0.0];
        let lin = |m: &[[f64; 2]; 2], b: &[f64; 2], v: &[f64; 2]| {
            [
                v[0] * m[0][0] + v[1] * m[1][0] + b[0],
                v[0] * m[0][1] + v[1] * m[1][1] + b[1],
            ]
        };
        let q = [lin(&wqv, &bq, &h[0]), lin(&wqv, &bq, &h[1])];
        let k = [lin(&wkv, &bk, &h[0]), lin(&wkv, &bk, &h[1])];
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            assert!((recs[0].at(i, 0) - e0 / z).abs() < 1e-12);
            assert!((recs[0].at(i, 1) - e1 / z).abs() < 1e-12);
        }
    }

    #[test]
    fn block_preserves_shape() {
        for (n, d, h) in [(3, 8, 2), (6, 12, 3), (2, 4, 4)] {
            let enc = tiny_encoder(1, d, h);
            let x = Tensor::constant(
                vec![n, d],
                (0..n * d).map(|i| (i as f64) * 0.01 - 0.3).collect(),
            )
            .unwrap();
            let (y, _) = enc.blocks[0].forward(&x).unwrap();
            assert_eq!(y.shape(), &[n, d]);
        }
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut rng = seeds::rng(1);
        assert!(matches!(
            AttentionBlock::new("b", 10, 3, 20, 1e-5, &mut rng),
            Err(Error::Config(_))
        ));
    }

    fn record_from(attn_row: &[f64], vnorms: &[f64]) -> AttentionRecord {
        let rows = attn_row.len();
        // fill other rows uniformly; only row 0 matters for significance
        let mut attention = vec![1.0 / rows as f64; rows * rows];
        attention[..rows].copy_from_slice(attn_row);
        AttentionRecord {
            layers: vec![vec![HeadRecord {
                rows,
                attention,
                value_norms: vnorms.to_vec(),
            }]],
        }
    }

    #[test]
    fn uniform_attention_equal_norms_gives_uniform_significance() {
        let rec = record_from(&[0.25; 4], &[1.5; 4]);
        let s = significance(&rec, 0).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn significance_matches_direct_formula() {
        // A_{1,2..4} = (0.5, 0.3, 0.2), ||V|| = (2, 1, 1) → S = (10/15, 3/15, 2/15)
        let rec = record_from(&[0.0, 0.5, 0.3, 0.2], &[9.9, 2.0, 1.0, 1.0]);
        let s = significance(&rec, 0).unwrap();
        let want = [10.0 / 15.0, 3.0 / 15.0, 2.0 / 15.0];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn significance_ignores_global_self_attention() {
        // shifting mass onto A_{1,1} and rescaling the off-diagonal row
        // leaves S unchanged
        let rec1 = record_from(&[0.0, 0.5, 0.3, 0.2], &[1.0, 2.0, 1.0, 0.5]);
        let rec2 = record_from(&[0.6, 0.2, 0.12, 0.08], &[1.0, 2.0, 1.0, 0.5]);
        let s1 = significance(&rec1, 0).unwrap();
        let s2 = significance(&rec2, 0).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn significance_sums_to_one_on_real_records() {
        let enc = tiny_encoder(3, 8, 2);
        let cloud = synth_shape(ShapeKind::Torus, 64, 5).unwrap();
        let ps = patchify(&cloud, 8, 8, 3).unwrap();
        let out = enc.encode(&enc.embed_tokens(&ps).unwrap()).unwrap();
        for layer in 0..3 {
            let s = significance(&out.records, layer).unwrap();
            assert_eq!(s.len(), 8);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn degenerate_record_is_rejected() {
        let rec = record_from(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            significance(&rec, 0),
            Err(Error::DegenerateAttention(_))
        ));
        assert!(significance(&rec, 5).is_err());
    }

    #[test]
    fn permuting_point_tokens_permutes_significance() {
        let enc = tiny_encoder(2, 8, 2);
        let patches = vec![
            vec![[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]],
            vec![[0.3, -0.1, 0.0], [0.0, 0.0, 0.2]],
            vec![[-0.2, 0.2, 0.1], [0.1, 0.1, 0.1]],
        ];
        let centers = vec![[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
        let perm = [2usize, 0, 1];

        let ps = patch_set(patches.clone(), centers.clone());
        let ps_perm = patch_set(
            perm.iter().map(|&i| patches[i].clone()).collect(),
            perm.iter().map(|&i| centers[i]).collect(),
        );
        let s = significance(&enc.encode(&enc.embed_tokens(&ps).unwrap()).unwrap().records, 1).unwrap();
        let sp = significance(
            &enc.encode(&enc.embed_tokens(&ps_perm).unwrap()).unwrap().records,
            1,
        )
        .unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert!((sp[slot] - s[src]).abs() < 1e-9, "{sp:?} vs {s:?}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_everywhere() {
        let enc = tiny_encoder(3, 12, 3);
        let cloud = synth_shape(ShapeKind::Cube, 48, 9).unwrap();
        let ps = patchify(&cloud, 6, 6, 1).unwrap();
        let out = enc.encode(&enc.embed_tokens(&ps).unwrap()).unwrap();
        for layer in &out.records.layers {
            for head in layer {
                for i in 0..head.rows {
                    let s: f64 = (0..head.rows).map(|j| head.at(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
                assert!(head.value_norms.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn depth_one_equals_single_block_plus_norm() {
        let enc = tiny_encoder(2, 8, 2);
        let cloud = synth_shape(ShapeKind::Sphere, 32, 2).unwrap();
        let ps = patchify(&cloud, 4, 4, 8).unwrap();
        let seq = enc.embed_tokens(&ps).unwrap();
        let out = enc.encode_prefix(&seq, 1).unwrap();
        let (manual, _) = enc.blocks[0].forward(&seq.tokens).unwrap();
        let manual = manual.layer_norm(1e-5).unwrap();
        assert_eq!(out.latent.value(), manual.value());
    }

    #[test]
    fn doubling_inputs_changes_the_output() {
        let enc = tiny_encoder(2, 8, 2);
        let cloud = synth_shape(ShapeKind::Torus, 32, 4).unwrap();
        let ps = patchify(&cloud, 4, 4, 8).unwrap();
        let seq = enc.embed_tokens(&ps).unwrap();
        let out1 = enc.encode(&seq).unwrap();
        let doubled = TokenSequence {
            tokens: seq.tokens.scale(2.0),
            pos: seq.pos.clone(),
            n_patches: seq.n_patches,
            dim: seq.dim,
        };
        let out2 = enc.encode(&doubled).unwrap();
        assert_ne!(out1.latent.value(), out2.latent.value());
    }

    #[test]
    fn global_feature_gradient_passes_finite_differences() {
        let enc = tiny_encoder(2, 8, 2);
        let cloud = synth_shape(ShapeKind::Cube, 24, 3).unwrap();
        let ps = patchify(&cloud, 4, 4, 6).unwrap();
        let mut params = Vec::new();
        enc.collect_params(&mut params);
        let tensors: Vec<Tensor> = params.iter().map(|p| p.tensor.clone()).collect();
        // step 1e-3: tiny-gradient entries make smaller steps rounding-bound
        let err = finite_diff_check(
            || enc.encode(&enc.embed_tokens(&ps)?)?.global_feature.mean(),
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}

