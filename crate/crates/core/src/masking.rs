//! Span masking over local-feature frames.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub span_len: usize,
    pub p_start: f64,
    /// Spans are forced at random starts until at least this many frames are masked.
    pub min_masked: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            span_len: 10,
            p_start: 0.08,
            min_masked: 1,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.span_len == 0 || self.min_masked == 0 || !(self.p_start > 0.0 && self.p_start < 1.0) {
            return Err(Error::invalid(format!(
                "mask spec span_len={} p_start={} min_masked={}",
                self.span_len, self.p_start, self.min_masked
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub masked: Vec<bool>,
}

impl MaskSet {
    pub fn none(t: usize) -> Self {
        Self {
            masked: vec![false; t],
        }
    }

    pub fn all(t: usize) -> Self {
        Self { masked: vec![true; t] }
    }

    pub fn from_indices(t: usize, idx: &[usize]) -> Self {
        let mut masked = vec![false; t];
        for &i in idx {
            masked[i] = true;
        }
        Self { masked }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

fn mark(masked: &mut [bool], start: usize, span: usize) {
    let end = (start + span).min(masked.len());
    masked[start..end].iter_mut().for_each(|m| *m = true);
}

/// Each `t <= T - span_len` starts a span with probability `p_start`. Spans
/// may overlap. If fewer than `min_masked` frames end up masked, spans are
/// forced at uniform starts (clipped to `T` when `T < span_len`).
pub fn sample_mask(t: usize, spec: &MaskSpec, rng: &mut Rng) -> Result<MaskSet> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    let mut masked = vec![false; t];
    if t >= spec.span_len {
        for s in 0..=t - spec.span_len {
            if rng.random::<f64>() < spec.p_start {
                mark(&mut masked, s, spec.span_len);
            }
        }
    }
    let target = spec.min_masked.min(t);
    while masked.iter().filter(|&&m| m).count() < target {
        let start = if t > spec.span_len {
            rng.random_range(0..=t - spec.span_len)
        } else {
            0
        };
        mark(&mut masked, start, spec.span_len);
    }
    Ok(MaskSet { masked })
}

/// Replaces masked rows of `features` (T x d) with the mask embedding.
pub fn apply_mask(g: &mut Graph, features: Var, mask: &MaskSet, embedding: Var) -> Result<Var> {
    g.row_replace(features, embedding, &mask.masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ParamStore;
    use crate::rng::keyed;
    use crate::tensor::Tensor;

    #[test]
    fn forced_span_when_nothing_sampled() {
        let spec = MaskSpec {
            p_start: 1e-12,
            ..Default::default()
        };
        for seed in 0..20 {
            let m = sample_mask(50, &spec, &mut keyed(seed, &[])).unwrap();
            let idx = m.indices();
            assert_eq!(idx.len(), 10);
            assert_eq!(idx[9] - idx[0], 9);
        }
        let m = sample_mask(4, &spec, &mut keyed(0, &[])).unwrap();
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn exact_length_single_span_covers_everything() {
        let spec = MaskSpec {
            p_start: 0.5,
            ..Default::default()
        };
        let m = sample_mask(10, &spec, &mut keyed(1, &[])).unwrap();
        assert_eq!(m.count(), 10);
    }

    #[test]
    fn coverage_matches_closed_form() {
        let spec = MaskSpec::default();
        let t = 1000;
        let draws = 10_000;
        let mut total = 0usize;
        let mut interior = 0usize;
        for i in 0..draws {
            let m = sample_mask(t, &spec, &mut keyed(3, &[i])).unwrap();
            total += m.count();
            interior += m.masked[20..980].iter().filter(|&&b| b).count();
        }
        let frac = total as f64 / (t * draws as usize) as f64;
        let want = 1.0 - 0.92f64.powi(10);
        // Edge frames have fewer covering starts, so the whole-sequence fraction sits a little below.
        assert!((frac - want).abs() < 0.01, "{frac} vs {want}");
        let inner = interior as f64 / (960 * draws as usize) as f64;
        assert!((inner - want).abs() < 0.002, "{inner} vs {want}");
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = MaskSpec::default();
        let a = sample_mask(300, &spec, &mut keyed(9, &[1])).unwrap();
        let b = sample_mask(300, &spec, &mut keyed(9, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_mask_replaces_rows_and_routes_gradient() {
        let mut store = ParamStore::new();
        store.insert("msk", Tensor::vector(vec![0.5, -1.0]));
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.3, -0.2, 1.1, 0.7, -0.4, 2.0]).unwrap();
        let mask = MaskSet::from_indices(3, &[0, 2]);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let e = g.param(&store, "msk").unwrap();
        let out = apply_mask(&mut g, xv, &mask, e).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 3.0, 4.0, 0.5, -1.0]);
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        // d loss / d msk = sum of upstream gradients at masked rows.
        assert_eq!(grads.param("msk").unwrap().data(), &[0.3 - 0.4, -0.2 + 2.0]);
        assert_eq!(grads.of(xv).unwrap().data(), &[0.0, 0.0, 1.1, 0.7, 0.0, 0.0]);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let e = g.param(&store, "msk").unwrap();
        let out = apply_mask(&mut g, xv, &MaskSet::none(3), e).unwrap();
        assert_eq!(g.value(out), &x);
    }
}
