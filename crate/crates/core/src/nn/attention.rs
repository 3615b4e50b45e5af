//! Fused multi-head attention kernels used by the sequence encoder.
//!
//! Two kernels operate on batches of equal-length sequences stacked row-wise
//! into `(n_seq * len) × d` matrices:
//!
//! * [`local_forward`]: every token attends to the tokens within a centered
//!   band of half-width `window`, plus a learnable bias per
//!   `(head, relative offset)`.
//! * [`global_forward`]: one summary query per sequence attends to every
//!   valid token, plus a learnable bias per `(head, distance bucket)`.
//!
//! Padded positions are never attended to. A query with no admissible key
//! produces a zero output row.

/// Row layout of a batch of sequences.
#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub n_seq: usize,
    pub len: usize,
    /// `n_seq * len` flags; `false` marks a padded position.
    pub valid: Vec<bool>,
}

impl SeqLayout {
    pub fn all_valid(n_seq: usize, len: usize) -> Self {
        Self {
            n_seq,
            len,
            valid: vec![true; n_seq * len],
        }
    }

    #[inline]
    fn is_valid(&self, seq: usize, pos: usize) -> bool {
        self.valid[seq * self.len + pos]
    }
}

/// Admissibility of key `tau` for query `t` under the banded local mask.
#[inline]
pub fn local_admissible(t: usize, tau: usize, window: usize, key_valid: bool) -> bool {
    key_valid && t.abs_diff(tau) <= window
}

/// Dense `len × len` admissibility mask of the local attention for one sequence.
pub fn local_mask(len: usize, window: usize, valid: &[bool]) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for t in 0..len {
        for tau in 0..len {
            mask[t * len + tau] = local_admissible(t, tau, window, valid[tau]);
        }
    }
    mask
}

/// Log-spaced distance bucket of position `pos` relative to the end of a
/// sequence of length `len`: bucket 0 is the last step, bucket `b ≥ 1`
/// covers distances `[2^(b-1), 2^b)`, clipped to `n_buckets - 1`.
pub fn distance_bucket(pos: usize, len: usize, n_buckets: usize) -> usize {
    let k = len - 1 - pos;
    let b = if k == 0 {
        0
    } else {
        1 + (usize::BITS - 1 - k.leading_zeros()) as usize
    };
    b.min(n_buckets - 1)
}

/// Number of buckets needed to give every distance in a length-`len`
/// sequence its own log-spaced bucket.
pub fn buckets_for_len(len: usize) -> usize {
    distance_bucket(0, len.max(1), usize::MAX) + 1
}

/// Dense attention logits of one head of the local kernel, `-inf` where the
/// mask forbids attention. Used for diagnostics and mask checks.
#[allow(clippy::too_many_arguments)]
pub fn local_logits_dense(
    q: &[f64],
    k: &[f64],
    d: usize,
    bias: &[f64],
    head: usize,
    heads: usize,
    window: usize,
    valid: &[bool],
) -> Vec<f64> {
    let len = valid.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let width = 2 * window + 1;
    let mut out = vec![f64::NEG_INFINITY; len * len];
    for t in 0..len {
        for tau in 0..len {
            if local_admissible(t, tau, window, valid[tau]) {
                let qo = t * d + head * dh;
                let ko = tau * d + head * dh;
                let dot: f64 = (0..dh).map(|j| q[qo + j] * k[ko + j]).sum();
                out[t * len + tau] = dot * scale + bias[head * width + (tau + window - t)];
            }
        }
    }
    out
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        logits.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

/// Banded local attention. Returns the output and the attention
/// probabilities, laid out as `[(row * heads + h) * (2w+1) + offset]`.
pub fn local_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    bias: &[f64],
    layout: &SeqLayout,
    heads: usize,
    window: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let width = 2 * window + 1;
    let len = layout.len;
    let rows = layout.n_seq * len;
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; rows * heads * width];
    let mut logits = vec![0.0; width];
    for s in 0..layout.n_seq {
        for t in 0..len {
            let row = s * len + t;
            for h in 0..heads {
                let qo = row * d + h * dh;
                for (o, l) in logits.iter_mut().enumerate() {
                    let tau = t as isize + o as isize - window as isize;
                    *l = if tau >= 0 && (tau as usize) < len && layout.is_valid(s, tau as usize) {
                        let ko = (s * len + tau as usize) * d + h * dh;
                        let dot: f64 = (0..dh).map(|j| q[qo + j] * k[ko + j]).sum();
                        dot * scale + bias[h * width + o]
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(&mut logits);
                let pbase = (row * heads + h) * width;
                probs[pbase..pbase + width].copy_from_slice(&logits);
                for (o, &p) in logits.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let tau = t + o - window;
                    let vo = (s * len + tau) * d + h * dh;
                    for j in 0..dh {
                        out[qo + j] += p * v[vo + j];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv, dbias)` of the local kernel.
#[allow(clippy::too_many_arguments)]
pub fn local_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &SeqLayout,
    heads: usize,
    window: usize,
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let width = 2 * window + 1;
    let len = layout.len;
    let rows = layout.n_seq * len;
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dbias = vec![0.0; heads * width];
    let mut dp = vec![0.0; width];
    for s in 0..layout.n_seq {
        for t in 0..len {
            let row = s * len + t;
            for h in 0..heads {
                let qo = row * d + h * dh;
                let pbase = (row * heads + h) * width;
                let p = &probs[pbase..pbase + width];
                let mut weighted = 0.0;
                for o in 0..width {
                    dp[o] = 0.0;
                    if p[o] == 0.0 {
                        continue;
                    }
                    let tau = t + o - window;
                    let vo = (s * len + tau) * d + h * dh;
                    let mut acc = 0.0;
                    for j in 0..dh {
                        acc += dout[qo + j] * v[vo + j];
                        dv[vo + j] += p[o] * dout[qo + j];
                    }
                    dp[o] = acc;
                    weighted += p[o] * acc;
                }
                for o in 0..width {
                    if p[o] == 0.0 {
                        continue;
                    }
                    let dl = p[o] * (dp[o] - weighted);
                    let tau = t + o - window;
                    let ko = (s * len + tau) * d + h * dh;
                    for j in 0..dh {
                        dq[qo + j] += dl * k[ko + j] * scale;
                        dk[ko + j] += dl * q[qo + j] * scale;
                    }
                    dbias[h * width + o] += dl;
                }
            }
        }
    }
    (dq, dk, dv, dbias)
}

/// Summary-token attention: one query row per sequence over all valid
/// tokens. Probabilities laid out as `[(seq * heads + h) * len + pos]`.
#[allow(clippy::too_many_arguments)]
pub fn global_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    bias: &[f64],
    n_buckets: usize,
    layout: &SeqLayout,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = layout.len;
    let mut out = vec![0.0; layout.n_seq * d];
    let mut probs = vec![0.0; layout.n_seq * heads * len];
    let mut logits = vec![0.0; len];
    for s in 0..layout.n_seq {
        for h in 0..heads {
            let qo = s * d + h * dh;
            for (pos, l) in logits.iter_mut().enumerate() {
                *l = if layout.is_valid(s, pos) {
                    let ko = (s * len + pos) * d + h * dh;
                    let dot: f64 = (0..dh).map(|j| q[qo + j] * k[ko + j]).sum();
                    dot * scale + bias[h * n_buckets + distance_bucket(pos, len, n_buckets)]
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(&mut logits);
            let pbase = (s * heads + h) * len;
            probs[pbase..pbase + len].copy_from_slice(&logits);
            for (pos, &p) in logits.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let vo = (s * len + pos) * d + h * dh;
                for j in 0..dh {
                    out[qo + j] += p * v[vo + j];
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn global_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    n_buckets: usize,
    layout: &SeqLayout,
    heads: usize,
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = layout.len;
    let mut dq = vec![0.0; layout.n_seq * d];
    let mut dk = vec![0.0; layout.n_seq * len * d];
    let mut dv = vec![0.0; layout.n_seq * len * d];
    let mut dbias = vec![0.0; heads * n_buckets];
    let mut dp = vec![0.0; len];
    for s in 0..layout.n_seq {
        for h in 0..heads {
            let qo = s * d + h * dh;
            let pbase = (s * heads + h) * len;
            let p = &probs[pbase..pbase + len];
            let mut weighted = 0.0;
            for pos in 0..len {
                dp[pos] = 0.0;
                if p[pos] == 0.0 {
                    continue;
                }
                let vo = (s * len + pos) * d + h * dh;
                let mut acc = 0.0;
                for j in 0..dh {
                    acc += dout[qo + j] * v[vo + j];
                    dv[vo + j] += p[pos] * dout[qo + j];
                }
                dp[pos] = acc;
                weighted += p[pos] * acc;
            }
            for pos in 0..len {
                if p[pos] == 0.0 {
                    continue;
                }
                let dl = p[pos] * (dp[pos] - weighted);
                let ko = (s * len + pos) * d + h * dh;
                for j in 0..dh {
                    dq[qo + j] += dl * k[ko + j] * scale;
                    dk[ko + j] += dl * q[qo + j] * scale;
                }
                dbias[h * n_buckets + distance_bucket(pos, len, n_buckets)] += dl;
            }
        }
    }
    (dq, dk, dv, dbias)
}
