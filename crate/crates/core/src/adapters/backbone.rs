//! Frozen toy transformer: token embedding followed by pre-norm encoder
//! layers (multi-head self-attention and a GELU FFN, no biases,
//! parameter-free layer norm, no positional encoding).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{AdapterError, Census, Phase, Tensor, ToyDims};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    dims: ToyDims,
    embedding: Tensor,
    layers: Vec<BackboneLayer>,
}

pub fn layer_norm(x: &Tensor) -> Tensor {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter().enumerate() {
            out.set(i, j, (v - mean) * inv);
        }
    }
    out
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}

impl Backbone {
    /// Gaussian weights: unit variance embeddings, `1/sqrt(fan_in)` for
    /// projections.
    pub fn seeded(dims: ToyDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(rows, cols, |_, _| n.sample(&mut rng))
        };
        let d = dims.hidden;
        let f = dims.ffn_mult * d;
        let embedding = gauss(dims.vocab, d, 1.0);
        let layers = (0..dims.num_layers)
            .map(|_| {
                let s = 1.0 / (d as f64).sqrt();
                BackboneLayer {
                    wq: gauss(d, d, s),
                    wk: gauss(d, d, s),
                    wv: gauss(d, d, s),
                    wo: gauss(d, d, s),
                    w1: gauss(d, f, s),
                    w2: gauss(f, d, 1.0 / (f as f64).sqrt()),
                }
            })
            .collect();
        Backbone { dims, embedding, layers }
    }

    pub fn from_parts(dims: ToyDims, embedding: Tensor, layers: Vec<BackboneLayer>) -> Result<Self, AdapterError> {
        let d = dims.hidden;
        let f = dims.ffn_mult * d;
        let ok = embedding.shape() == [dims.vocab, d]
            && layers.len() == dims.num_layers
            && layers.iter().all(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo].iter().all(|w| w.shape() == [d, d])
                    && l.w1.shape() == [d, f]
                    && l.w2.shape() == [f, d]
            });
        if !ok {
            return Err(AdapterError::Shape("backbone weights do not match dimensions".into()));
        }
        Ok(Backbone { dims, embedding, layers })
    }

    pub fn dims(&self) -> &ToyDims {
        &self.dims
    }

    pub fn layers(&self) -> &[BackboneLayer] {
        &self.layers
    }

    /// SHA-256 over dimensions and every weight, little-endian.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.dims.num_layers, self.dims.hidden, self.dims.heads, self.dims.ffn_mult, self.dims.vocab] {
            h.update((v as u64).to_le_bytes());
        }
        let mut put = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        put(&self.embedding);
        for l in &self.layers {
            for w in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                put(w);
            }
        }
        hex::encode(h.finalize())
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor, AdapterError> {
        if tokens.is_empty() {
            return Err(AdapterError::Shape("empty token sequence".into()));
        }
        let rows: Result<Vec<Tensor>, _> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.dims.vocab {
                    Ok(self.embedding.row_block(t as usize, t as usize + 1))
                } else {
                    Err(AdapterError::TokenOutOfVocab { token: t, vocab: self.dims.vocab })
                }
            })
            .collect();
        let rows = rows?;
        Ok(Tensor::vstack(&rows.iter().collect::<Vec<_>>()))
    }

    fn attention(&self, layer: &BackboneLayer, x: &Tensor, census: &mut Census) -> Tensor {
        let p = Phase::BackboneFwd;
        let q = census.matmul(p, x, &layer.wq);
        let k = census.matmul(p, x, &layer.wk);
        let v = census.matmul(p, x, &layer.wv);
        let dh = self.dims.hidden / self.dims.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Tensor> = (0..self.dims.heads)
            .map(|h| {
                let (qh, kh, vh) = (
                    q.col_block(h * dh, (h + 1) * dh),
                    k.col_block(h * dh, (h + 1) * dh),
                    v.col_block(h * dh, (h + 1) * dh),
                );
                let scores = census.matmul_nt(p, &qh, &kh).scale(scale);
                census.matmul(p, &softmax_rows(&scores), &vh)
            })
            .collect();
        census.matmul(p, &Tensor::hstack(&heads), &layer.wo)
    }

    pub fn layer_forward(&self, layer: &BackboneLayer, x: &Tensor, census: &mut Census) -> Tensor {
        let h = x.add(&self.attention(layer, &layer_norm(x), census));
        let inner = census.matmul(Phase::BackboneFwd, &layer_norm(&h), &layer.w1).map(gelu);
        h.add(&census.matmul(Phase::BackboneFwd, &inner, &layer.w2))
    }

    /// `[b_0 .. b_L]` for one sequence, each `n x d`.
    pub fn forward(&self, tokens: &[u32], census: &mut Census) -> Result<Vec<Tensor>, AdapterError> {
        let mut taps = vec![self.embed(tokens)?];
        for layer in &self.layers {
            let next = self.layer_forward(layer, taps.last().expect("b_0 present"), census);
            taps.push(next);
        }
        Ok(taps)
    }
}
