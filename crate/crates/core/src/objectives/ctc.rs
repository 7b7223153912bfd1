//! CTC loss by log-space forward-backward over the blank-augmented target.

use crate::error::{Error, Result};
use crate::tensor::{log_add, Tensor};

pub const BLANK: usize = 0;
/// Blank, `a`-`z`, space, apostrophe.
pub const CHAR_VOCAB: usize = 29;
pub const SPACE: usize = 27;
pub const APOSTROPHE: usize = 28;

/// Maps text to character ids (case-insensitive). Runs of whitespace become
/// one space and leading/trailing whitespace is dropped.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(SPACE);
        }
        for ch in word.chars() {
            let id = match ch.to_ascii_lowercase() {
                c @ 'a'..='z' => c as usize - 'a' as usize + 1,
                '\'' => APOSTROPHE,
                c => return Err(Error::invalid(format!("character {c:?} is outside the CTC vocabulary"))),
            };
            out.push(id);
        }
    }
    Ok(out)
}

pub fn decode_ids(ids: &[usize]) -> String {
    ids.iter()
        .filter_map(|&i| match i {
            1..=26 => Some((b'a' + (i - 1) as u8) as char),
            SPACE => Some(' '),
            APOSTROPHE => Some('\''),
            _ => None,
        })
        .collect()
}

/// Minimum frames for a target: its length plus one per adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    /// `-log p(target)`, `+inf` when no alignment fits.
    pub loss: f64,
    /// `d loss / d log_post`, absent when infeasible.
    pub grad: Option<Tensor>,
}

impl CtcResult {
    pub fn feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

/// CTC over `T x V` log-posteriors with blank id 0.
pub fn ctc_forward_backward(log_post: &Tensor, target: &[usize]) -> Result<CtcResult> {
    let (t_len, v) = log_post.dims2()?;
    if t_len == 0 {
        return Err(Error::shape("ctc", "no frames"));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= v) {
        return Err(Error::invalid(format!("target symbol {bad} invalid for vocab {v}")));
    }
    if min_frames(target) > t_len {
        return Ok(CtcResult {
            loss: f64::INFINITY,
            grad: None,
        });
    }
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] }).collect();
    let lp = |t: usize, k: usize| log_post.data()[t * v + k];
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok(CtcResult {
            loss: f64::INFINITY,
            grad: None,
        });
    }

    // beta[t][s]: log-probability of frames t+1.. given state s at frame t.
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * v + ext[s]] -= occ.exp();
            }
        }
    }
    Ok(CtcResult {
        loss: -log_p,
        grad: Some(Tensor::new(vec![t_len, v], grad)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use crate::tensor::{log_softmax_rows, logsumexp};
    use rand::Rng as _;

    /// Collapse repeats, then drop blanks.
    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &p in path {
            if Some(p) != prev && p != BLANK {
                out.push(p);
            }
            prev = Some(p);
        }
        out
    }

    fn enumerate(lp: &Tensor, target: &[usize]) -> f64 {
        let (t, v) = lp.dims2().unwrap();
        let mut terms = Vec::new();
        let mut path = vec![0usize; t];
        loop {
            if collapse(&path) == target {
                terms.push((0..t).map(|i| lp.data()[i * v + path[i]]).sum::<f64>());
            }
            let mut i = 0;
            loop {
                if i == t {
                    return -logsumexp(&terms);
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_lp(t: usize, v: usize, seed: u64) -> Tensor {
        let mut r = keyed(seed, &[]);
        let raw = Tensor::matrix(t, v, (0..t * v).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        log_softmax_rows(&raw).unwrap()
    }

    #[test]
    fn single_frame() {
        let lp = random_lp(1, 4, 1);
        let r = ctc_forward_backward(&lp, &[2]).unwrap();
        assert!((r.loss + lp.data()[2]).abs() < 1e-14);
    }

    #[test]
    fn matches_enumeration() {
        let mut seed = 0;
        for t in 1..=6 {
            for target in [vec![], vec![1], vec![1, 2], vec![2, 2], vec![1, 2, 1], vec![3, 3, 1, 2]] {
                seed += 1;
                let lp = random_lp(t, 4, seed);
                let dp = ctc_forward_backward(&lp, &target).unwrap().loss;
                let brute = enumerate(&lp, &target);
                if brute.is_infinite() {
                    assert!(dp.is_infinite());
                } else {
                    assert!((dp - brute).abs() < 1e-10, "T={t} {target:?}: {dp} vs {brute}");
                }
            }
        }
    }

    #[test]
    fn uniform_posteriors() {
        let lp = Tensor::full(&[5, 3], -(3f64.ln()));
        let dp = ctc_forward_backward(&lp, &[1, 2]).unwrap().loss;
        assert!((dp - enumerate(&lp, &[1, 2])).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lp = random_lp(6, 4, 99);
        let target = [1, 3, 3];
        let r = ctc_forward_backward(&lp, &target).unwrap();
        let g = r.grad.unwrap();
        let eps = 1e-6;
        for i in 0..lp.len() {
            let mut a = lp.clone();
            a.data_mut()[i] += eps;
            let mut b = lp.clone();
            b.data_mut()[i] -= eps;
            let fd = (ctc_forward_backward(&a, &target).unwrap().loss - ctc_forward_backward(&b, &target).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn infeasible_and_invalid() {
        let lp = random_lp(2, 4, 3);
        assert!(!ctc_forward_backward(&lp, &[1, 1]).unwrap().feasible());
        assert!(!ctc_forward_backward(&lp, &[1, 2, 3]).unwrap().feasible());
        assert!(ctc_forward_backward(&lp, &[0]).is_err());
        assert!(ctc_forward_backward(&lp, &[4]).is_err());
        assert_eq!(min_frames(&[1, 1, 2, 2]), 6);
    }

    #[test]
    fn raising_a_target_probability_never_raises_the_loss() {
        let lp = random_lp(5, 4, 8);
        let base = ctc_forward_backward(&lp, &[2, 3]).unwrap().loss;
        let mut raw = lp.clone();
        raw.data_mut()[2 * 4 + 2] += 1.0;
        let bumped = ctc_forward_backward(&raw, &[2, 3]).unwrap().loss;
        assert!(bumped <= base);
    }

    #[test]
    fn text_round_trip() {
        let ids = encode_text("  Don't  stop ").unwrap();
        assert_eq!(decode_ids(&ids), "don't stop");
        assert_eq!(ids[0], 4);
        assert!(encode_text("café").is_err());
        assert!(encode_text("").unwrap().is_empty());
    }
}
