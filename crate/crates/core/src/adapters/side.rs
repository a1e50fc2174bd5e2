//! The side network.
//!
//! ```text
//! a_0 = b_0 W_down
//! u_i = a_{i-1} + b_i D_i
//! h_i = tanh(u_i G1_i + c1_i)
//! a_i = a_{i-1} + h_i G2_i + c2_i                i = 1..L
//! y   = a_L W_up + b_L
//! logits = mean_tokens(y) W_head + c_head
//! ```
//!
//! Backward never touches backbone weights: the taps `b_i` are constants, so
//! `W_down` and `D_i` only need weight gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AdapterError, Census, Phase, Tensor, ToyDims};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBlock {
    /// `d x r`, projects the backbone tap.
    pub d_proj: Tensor,
    pub g1: Tensor,
    pub c1: Tensor,
    pub g2: Tensor,
    pub c2: Tensor,
}

/// Trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub w_down: Tensor,
    pub blocks: Vec<AdapterBlock>,
    pub w_up: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

/// Tensors kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub batch: usize,
    pub seq_len: usize,
    pub b0: Tensor,
    /// `(b_i, u_i, h_i)` for `i = 1..L`.
    pub layers: Vec<(Tensor, Tensor, Tensor)>,
    pub a_last: Tensor,
    pub pooled: Tensor,
    pub probs: Tensor,
}

impl Tape {
    pub fn bytes(&self) -> u64 {
        self.b0.bytes()
            + self.layers.iter().map(|(b, u, h)| b.bytes() + u.bytes() + h.bytes()).sum::<u64>()
            + self.a_last.bytes()
            + self.pooled.bytes()
            + self.probs.bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `a_0 .. a_L`, each `(batch * n) x r`. Returned for inspection; only
    /// `a_L` is kept on the tape.
    pub a: Vec<Tensor>,
    pub logits: Tensor,
    pub tape: Tape,
}

impl AdapterState {
    pub fn seeded(dims: &ToyDims, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, std).expect("non-negative std");
        let mut g = |rows: usize, cols: usize| Tensor::from_fn(rows, cols, |_, _| n.sample(&mut rng));
        let (d, r, c) = (dims.hidden, dims.adapter_hidden(), dims.classes);
        let w_down = g(d, r);
        let blocks = (0..dims.num_layers)
            .map(|_| AdapterBlock { d_proj: g(d, r), g1: g(r, r), c1: g(1, r), g2: g(r, r), c2: g(1, r) })
            .collect();
        AdapterState { w_down, blocks, w_up: g(r, d), head: g(d, c), head_bias: g(1, c) }
    }

    pub fn zeros(dims: &ToyDims) -> Self {
        let mut s = Self::seeded(dims, 0, 0.0);
        s.visit_mut(|_, t| t.data_mut().fill(0.0));
        s
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_down".to_string(), &self.w_down)];
        for (i, b) in self.blocks.iter().enumerate() {
            let i = i + 1;
            out.push((format!("d_proj.{i}"), &b.d_proj));
            out.push((format!("g1.{i}"), &b.g1));
            out.push((format!("c1.{i}"), &b.c1));
            out.push((format!("g2.{i}"), &b.g2));
            out.push((format!("c2.{i}"), &b.c2));
        }
        out.push(("w_up".into(), &self.w_up));
        out.push(("head".into(), &self.head));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("w_down", &mut self.w_down);
        for b in &mut self.blocks {
            f("d_proj", &mut b.d_proj);
            f("g1", &mut b.g1);
            f("c1", &mut b.c1);
            f("g2", &mut b.g2);
            f("c2", &mut b.c2);
        }
        f("w_up", &mut self.w_up);
        f("head", &mut self.head);
        f("head_bias", &mut self.head_bias);
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters flattened in [`AdapterState::tensors`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// `self -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &AdapterState, lr: f64) {
        let g = grads.flat();
        let mut k = 0;
        self.visit_mut(|_, t| {
            for v in t.data_mut() {
                *v -= lr * g[k];
                k += 1;
            }
        });
    }

    fn check_taps(&self, taps: &[Tensor], batch: usize) -> Result<(usize, usize), AdapterError> {
        let (d, l) = (self.w_down.rows(), self.blocks.len());
        if taps.len() != l + 1 {
            return Err(AdapterError::Shape(format!("expected {} taps, got {}", l + 1, taps.len())));
        }
        let rows = taps[0].rows();
        if batch == 0 || !rows.is_multiple_of(batch) || rows == 0 {
            return Err(AdapterError::Shape(format!("{rows} tap rows do not split into {batch} sequences")));
        }
        if let Some(t) = taps.iter().find(|t| t.shape() != [rows, d]) {
            return Err(AdapterError::Shape(format!("tap shape {:?}, expected [{rows}, {d}]", t.shape())));
        }
        Ok((rows, rows / batch))
    }

    /// `taps[i]` stacks `b_i` of `batch` equal-length sequences.
    pub fn forward(&self, taps: &[Tensor], batch: usize, census: &mut Census) -> Result<ForwardPass, AdapterError> {
        let (rows, seq_len) = self.check_taps(taps, batch)?;
        let p = Phase::AdapterFwd;
        let mut a = vec![census.matmul(p, &taps[0], &self.w_down)];
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (blk, b) in self.blocks.iter().zip(&taps[1..]) {
            let prev = a.last().expect("a_0 present");
            let u = prev.add(&census.matmul(p, b, &blk.d_proj));
            let h = census.matmul(p, &u, &blk.g1).add_row(&blk.c1).map(f64::tanh);
            let next = prev.add(&census.matmul(p, &h, &blk.g2).add_row(&blk.c2));
            layers.push((b.clone(), u, h));
            a.push(next);
        }
        let a_last = a.last().expect("a_L present").clone();
        let y = census.matmul(p, &a_last, &self.w_up).add(&taps[taps.len() - 1]);
        let d = y.cols();
        let pooled = Tensor::from_fn(batch, d, |s, j| {
            (0..seq_len).map(|t| y.get(s * seq_len + t, j)).sum::<f64>() / seq_len as f64
        });
        debug_assert_eq!(rows, batch * seq_len);
        let logits = census.matmul(p, &pooled, &self.head).add_row(&self.head_bias);
        let probs = super::backbone::softmax_rows(&logits);
        let tape = Tape { batch, seq_len, b0: taps[0].clone(), layers, a_last, pooled, probs };
        census.retain(tape.bytes());
        Ok(ForwardPass { a, logits, tape })
    }

    /// `scale * mean_batch(-log p[label])`.
    pub fn loss(pass: &ForwardPass, labels: &[usize], scale: f64) -> Result<f64, AdapterError> {
        let probs = &pass.tape.probs;
        check_labels(labels, probs)?;
        let sum: f64 = labels.iter().enumerate().map(|(s, &y)| -probs.get(s, y).ln()).sum();
        Ok(scale * sum / labels.len() as f64)
    }

    /// Gradients of [`AdapterState::loss`] for every parameter. Consumes the
    /// tape and releases it from the census.
    pub fn backward(
        &self,
        pass: ForwardPass,
        labels: &[usize],
        scale: f64,
        census: &mut Census,
    ) -> Result<AdapterState, AdapterError> {
        let tape = pass.tape;
        check_labels(labels, &tape.probs)?;
        let p = Phase::AdapterBwd;
        let n = tape.batch as f64;
        let mut dlogits = tape.probs.clone();
        for (s, &y) in labels.iter().enumerate() {
            dlogits.set(s, y, dlogits.get(s, y) - 1.0);
        }
        let dlogits = dlogits.scale(scale / n);
        let head = census.matmul_tn(p, &tape.pooled, &dlogits);
        let head_bias = dlogits.col_sum();
        let dpooled = census.matmul_nt(p, &dlogits, &self.head);
        let seq = tape.seq_len;
        let dy = Tensor::from_fn(tape.batch * seq, dpooled.cols(), |i, j| dpooled.get(i / seq, j) / seq as f64);
        let w_up = census.matmul_tn(p, &tape.a_last, &dy);
        let mut da = census.matmul_nt(p, &dy, &self.w_up);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (blk, (b, u, h)) in self.blocks.iter().zip(&tape.layers).rev() {
            let g2 = census.matmul_tn(p, h, &da);
            let c2 = da.col_sum();
            let dh = census.matmul_nt(p, &da, &blk.g2);
            let dpre = dh.zip(h, |g, hv| g * (1.0 - hv * hv));
            let g1 = census.matmul_tn(p, u, &dpre);
            let c1 = dpre.col_sum();
            let du = census.matmul_nt(p, &dpre, &blk.g1);
            let d_proj = census.matmul_tn(p, b, &du);
            da.add_assign(&du);
            blocks.push(AdapterBlock { d_proj, g1, c1, g2, c2 });
        }
        blocks.reverse();
        let w_down = census.matmul_tn(p, &tape.b0, &da);
        census.release(tape.bytes());
        Ok(AdapterState { w_down, blocks, w_up, head, head_bias })
    }
}

fn check_labels(labels: &[usize], probs: &Tensor) -> Result<(), AdapterError> {
    if labels.len() != probs.rows() {
        return Err(AdapterError::Shape(format!("{} labels for {} sequences", labels.len(), probs.rows())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(AdapterError::Shape(format!("label {y} out of {} classes", probs.cols())));
    }
    Ok(())
}
