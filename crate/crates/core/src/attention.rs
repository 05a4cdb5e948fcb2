//! Mask-separated self-attention: mask construction, the grouped multi-head
//! forward, the attention-entropy diagnostic, and the reconstruction-gradient
//! identity check.

use serde::{Deserialize, Serialize};

use crate::numeric::{Mask, NumericError, NumericResult, Tape, Tensor, Var};

/// Blocking mask over the concatenated per-group query sequence
/// [noisy block (K*C rows) | learnable block (N rows)].
///
/// Blocked entries (`true`): learnable rows looking at any noisy column, and
/// noisy rows looking at noisy columns of a different group, where noisy
/// group(x) = floor(x / K). Everything else is open.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub k: usize,
    pub c: usize,
    pub n: usize,
    mask: Mask,
}

impl AttentionMask {
    pub fn s(&self) -> usize {
        self.k * self.c + self.n
    }

    pub fn blocked(&self, i: usize, j: usize) -> bool {
        self.mask.blocked(i, j)
    }

    pub fn numeric(&self) -> &Mask {
        &self.mask
    }
}

/// Builds the mask for K objects, C noisy groups and N learnable queries.
pub fn build_mask(k: usize, c: usize, n: usize) -> NumericResult<AttentionMask> {
    if k == 0 || c == 0 || n == 0 {
        return Err(NumericError::Invalid {
            op: "build_mask",
            msg: format!("K, C, N must all be >= 1 (got {}, {}, {})", k, c, n),
        });
    }
    let kc = k * c;
    let s = kc + n;
    let mut blocked = vec![false; s * s];
    for i in 0..s {
        for j in 0..kc {
            let row_blocks = if i >= kc {
                true // learnable rows never see noisy columns
            } else {
                i / k != j / k // noisy rows never see other noisy groups
            };
            blocked[i * s + j] = row_blocks;
        }
    }
    Ok(AttentionMask { k, c, n, mask: Mask::new(s, s, blocked)? })
}

/// Per-head attention probabilities captured from one group's self-attention.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// One S x S row-stochastic map per head; masked entries are exactly 0.
    pub probs: Vec<Tensor>,
    pub k: usize,
    pub c: usize,
    pub n: usize,
}

/// Region of the attention map the entropy diagnostic averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyRegion {
    Full,
    NoisyToLearnable,
}

/// Mean over selected rows of -sum_j A[i][j] ln A[i][j] (0 ln 0 = 0),
/// averaged over heads.
pub fn attention_entropy(record: &AttentionRecord, region: EntropyRegion) -> f64 {
    let kc = record.k * record.c;
    let s = kc + record.n;
    let mut total = 0.0;
    for head in &record.probs {
        let (rows, cols): (std::ops::Range<usize>, std::ops::Range<usize>) = match region {
            EntropyRegion::Full => (0..s, 0..s),
            EntropyRegion::NoisyToLearnable => (0..kc, kc..s),
        };
        let mut head_sum = 0.0;
        let mut n_rows = 0usize;
        for i in rows {
            let mut row_h = 0.0;
            for j in cols.clone() {
                let a = head.get2(i, j);
                if a > 0.0 {
                    row_h -= a * a.ln();
                }
            }
            head_sum += row_h;
            n_rows += 1;
        }
        total += head_sum / n_rows as f64;
    }
    total / record.probs.len() as f64
}

/// Entropy of a bare row-stochastic matrix over all rows (helper for tests
/// and diagnostics on raw maps).
pub fn row_entropy_mean(probs: &Tensor) -> f64 {
    let rows = probs.shape()[0];
    let cols = probs.shape()[1];
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let a = probs.get2(i, j);
            if a > 0.0 {
                total -= a * a.ln();
            }
        }
    }
    total / rows as f64
}

/// One attention layer's projection weights.
#[derive(Clone)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

/// Multi-head attention of `x_q` over `x_kv` with an optional blocking mask.
/// Returns the output and the per-head probability maps.
pub fn multi_head_attention(
    x_q: &Var,
    x_kv: &Var,
    w: &AttentionWeights,
    mask: Option<&Mask>,
) -> NumericResult<(Var, Vec<Tensor>)> {
    let d = x_q.shape()[1];
    if d % w.heads != 0 {
        return Err(NumericError::Invalid {
            op: "multi_head_attention",
            msg: format!("dim {} not divisible by {} heads", d, w.heads),
        });
    }
    let dh = d / w.heads;
    let q = x_q.matmul(&w.wq)?.add_row(&w.bq)?;
    let k = x_kv.matmul(&w.wk)?.add_row(&w.bk)?;
    let v = x_kv.matmul(&w.wv)?.add_row(&w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(w.heads);
    let mut head_probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = qh.matmul_nt(&kh)?.scale(scale);
        let probs = scores.masked_softmax(mask)?;
        head_probs.push(probs.value());
        head_outputs.push(probs.attend(&vh, mask)?);
    }
    let merged = Var::concat_cols(&head_outputs)?;
    let out = merged.matmul(&w.wo)?.add_row(&w.bo)?;
    Ok((out, head_probs))
}

/// Output of one grouped mask-separated self-attention application.
pub struct GroupedAttentionOutput {
    /// Per group: (C*K, D) noisy-track outputs (empty when no noisy queries).
    pub noisy: Vec<Var>,
    /// Per group: (N, D) learnable-track outputs.
    pub learnable: Vec<Var>,
    /// Per group attention record (training mode only).
    pub records: Vec<AttentionRecord>,
}

/// Runs self-attention per group over concat(noisy_1..noisy_C, learnable),
/// then splits the outputs back, exactly inverting the concatenation.
/// With `noisy_groups` empty (inference / no-denoising), each group attends
/// only over its learnable queries and no mask is applied.
pub fn masked_grouped_attention(
    learnable: &[Var],
    noisy_groups: &[Var],
    w: &AttentionWeights,
    mask: Option<&AttentionMask>,
) -> NumericResult<GroupedAttentionOutput> {
    let g = learnable.len();
    let mut out_noisy = Vec::with_capacity(g);
    let mut out_learnable = Vec::with_capacity(g);
    let mut records = Vec::with_capacity(g);
    for i in 0..g {
        if noisy_groups.is_empty() {
            let (out, _) = multi_head_attention(&learnable[i], &learnable[i], w, None)?;
            out_learnable.push(out);
            continue;
        }
        let mask = mask.ok_or(NumericError::Invalid {
            op: "masked_grouped_attention",
            msg: "noisy queries present but no mask given".into(),
        })?;
        let kc = mask.k * mask.c;
        let n = mask.n;
        if noisy_groups[i].shape()[0] != kc || learnable[i].shape()[0] != n {
            return Err(NumericError::ShapeMismatch {
                op: "masked_grouped_attention",
                left: noisy_groups[i].shape().to_vec(),
                right: learnable[i].shape().to_vec(),
            });
        }
        let x = Var::concat_rows(&[noisy_groups[i].clone(), learnable[i].clone()])?;
        let (out, probs) = multi_head_attention(&x, &x, w, Some(mask.numeric()))?;
        let parts = out.split_rows(&[kc, n])?;
        out_noisy.push(parts[0].clone());
        out_learnable.push(parts[1].clone());
        records.push(AttentionRecord { probs, k: mask.k, c: mask.c, n: mask.n });
    }
    Ok(GroupedAttentionOutput { noisy: out_noisy, learnable: out_learnable, records })
}

/// Result of checking the reconstruction-loss gradient identity
/// dL/dq_L[m] = sum_u dL/do_N[u] * A(u, w_m) on a single projection-free
/// attention application where L depends only on the noisy outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFlowReport {
    /// Max relative discrepancy between tape gradient and the hand formula.
    pub max_discrepancy: f64,
    /// Max |dL/dq_L| reported by the tape.
    pub max_grad_magnitude: f64,
}

/// Verifies the backward identity with a constant attention map `a` (S x S,
/// rows = queries) and given upstream gradients on the noisy outputs
/// (K*C x D). The forward is o = a . q with identity value/output
/// projections; the loss is the inner product of the noisy rows of `o` with
/// `upstream`.
pub fn gradient_flow_check(
    a: &Tensor,
    upstream: &Tensor,
    k: usize,
    c: usize,
    n: usize,
) -> NumericResult<GradientFlowReport> {
    let kc = k * c;
    let s = kc + n;
    if a.shape() != [s, s] {
        return Err(NumericError::ShapeMismatch {
            op: "gradient_flow_check",
            left: a.shape().to_vec(),
            right: vec![s, s],
        });
    }
    let d = upstream.shape()[1];
    if upstream.shape()[0] != kc {
        return Err(NumericError::ShapeMismatch {
            op: "gradient_flow_check",
            left: upstream.shape().to_vec(),
            right: vec![kc, d],
        });
    }

    let tape = Tape::new();
    // values are irrelevant for a linear map's gradient; zeros suffice
    let q_noisy = tape.constant(Tensor::zeros(vec![kc, d]));
    let q_learn = tape.var(Tensor::zeros(vec![n, d]));
    let q = Var::concat_rows(&[q_noisy, q_learn.clone()])?;
    let probs = tape.constant(a.clone());
    let o = probs.attend(&q, None)?;
    let o_noisy = o.split_rows(&[kc, n])?[0].clone();
    let loss = o_noisy.mul_const(upstream)?.sum();
    tape.backward(&loss)?;
    let grad = q_learn.grad().unwrap_or_else(|| Tensor::zeros(vec![n, d]));

    let mut max_disc = 0.0f64;
    let mut max_mag = 0.0f64;
    for m in 0..n {
        let col = kc + m;
        for dd in 0..d {
            let mut analytic = 0.0;
            for u in 0..kc {
                analytic += upstream.get2(u, dd) * a.get2(u, col);
            }
            let tape_grad = grad.get2(m, dd);
            let rel = (tape_grad - analytic).abs() / analytic.abs().max(1.0);
            max_disc = max_disc.max(rel);
            max_mag = max_mag.max(tape_grad.abs());
        }
    }
    Ok(GradientFlowReport { max_discrepancy: max_disc, max_grad_magnitude: max_mag })
}
