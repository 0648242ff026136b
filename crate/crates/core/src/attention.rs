//! Decoupled cross-attention: a text branch and an image branch share the
//! query projection, and the image branch is added with weight `lambda`:
//!
//! `X' = softmax(Q K_t^T / sqrt(d)) V_t + lambda * softmax(Q K_i^T / sqrt(d)) V_i`
//!
//! Single head; `d` is the head width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::conditioning::ConditionBundle;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Matrix,
    pub w_k_text: Matrix,
    pub w_v_text: Matrix,
    pub w_k_image: Matrix,
    pub w_v_image: Matrix,
}

fn seeded_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
    let scale = (3.0 / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

impl AttentionWeights {
    pub fn new(
        w_q: Matrix,
        w_k_text: Matrix,
        w_v_text: Matrix,
        w_k_image: Matrix,
        w_v_image: Matrix,
    ) -> Result<Self> {
        let d_head = w_q.cols();
        let checks = [
            ("W_k", &w_k_text),
            ("W_v", &w_v_text),
            ("W_k'", &w_k_image),
            ("W_v'", &w_v_image),
        ];
        for (name, m) in checks {
            if m.cols() != d_head {
                return Err(invalid(format!(
                    "{name} maps to width {}, but the query width is {d_head}",
                    m.cols()
                )));
            }
        }
        if w_k_text.rows() != w_v_text.rows() || w_k_image.rows() != w_v_image.rows() {
            return Err(invalid("key and value projections disagree on input width"));
        }
        if d_head == 0 || w_q.rows() == 0 {
            return Err(invalid("attention widths must be positive"));
        }
        Ok(Self {
            w_q,
            w_k_text,
            w_v_text,
            w_k_image,
            w_v_image,
        })
    }

    /// Fixed pseudo-random weights with unit-variance fan-in scaling.
    pub fn seeded(
        seed: u64,
        d_model: usize,
        d_head: usize,
        text_dim: usize,
        image_dim: usize,
    ) -> Result<Self> {
        if d_model == 0 || d_head == 0 || text_dim == 0 || image_dim == 0 {
            return Err(invalid("attention widths must be positive"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::new(
            seeded_matrix(&mut rng, d_model, d_head),
            seeded_matrix(&mut rng, text_dim, d_head),
            seeded_matrix(&mut rng, text_dim, d_head),
            seeded_matrix(&mut rng, image_dim, d_head),
            seeded_matrix(&mut rng, image_dim, d_head),
        )
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_head(&self) -> usize {
        self.w_q.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.w_k_text.rows()
    }

    pub fn image_dim(&self) -> usize {
        self.w_k_image.rows()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

/// `softmax(Q (C W_k)^T / sqrt(d)) (C W_v)`.
fn branch(q: &Matrix, cond: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    let k = cond.matmul(w_k)?;
    let v = cond.matmul(w_v)?;
    let inv_sqrt_d = 1.0 / (q.cols() as f64).sqrt();
    let logits = Matrix::from_fn(q.rows(), k.rows(), |i, j| {
        q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d
    });
    softmax_rows(&logits).matmul(&v)
}

/// The two attention terms before weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTerms {
    pub text: Matrix,
    pub image: Matrix,
}

pub fn attention_terms(
    x: &Matrix,
    bundle: &ConditionBundle,
    w: &AttentionWeights,
) -> Result<AttentionTerms> {
    if x.cols() != w.d_model() {
        return Err(invalid(format!(
            "query input width {} does not match d_model {}",
            x.cols(),
            w.d_model()
        )));
    }
    bundle.check_dims(w)?;
    let q = x.matmul(&w.w_q)?;
    Ok(AttentionTerms {
        text: branch(&q, &bundle.text.0, &w.w_k_text, &w.w_v_text)?,
        image: branch(&q, &bundle.image.0, &w.w_k_image, &w.w_v_image)?,
    })
}

/// Decoupled cross-attention output, `n x d_head`.
pub fn attend(x: &Matrix, bundle: &ConditionBundle, w: &AttentionWeights) -> Result<Matrix> {
    let terms = attention_terms(x, bundle, w)?;
    Ok(terms.text.add_scaled(&terms.image, bundle.lambda))
}
