//! End-to-end finite-difference checks of the three training losses through a
//! tiny encoder (under 5k parameters, diarization probe included).

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::audio::Waveform;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::{Gradients, Graph};
use crate::labels::UnitSequence;
use crate::masking::MaskSet;
use crate::model::{contextual_encode, forward_pretrain, init_params, local_encode, project_heads, ModelConfig};
use crate::objectives::{masked_pss_loss, pit_ctc_loss, PitMethod};
use crate::optim::ParamStore;
use crate::probes::diar::{diar_probe_forward_vars, init_probe, pit_bce_loss, DiarProbeConfig};
use crate::probes::metrics::ActivityMatrix;
use crate::rng::{self, domain};

pub const TINY_VOCAB: usize = 5;
pub const TINY_K: usize = 2;
pub const PROBE_HIDDEN: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl LossCheck {
    fn new(loss: &str, params: usize, r: GradCheckReport) -> Self {
        Self {
            loss: loss.to_string(),
            params,
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            checked: r.checked,
        }
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny(TINY_K, TINY_VOCAB)
}

/// A random waveform giving `frames` frames under `cfg`.
fn random_wave(cfg: &ModelConfig, frames: usize, seed: u64) -> Result<Waveform> {
    let n = cfg.receptive_field() + (frames - 1) * cfg.hop();
    let mut r = rng::keyed(seed, &[domain::GRADCHECK, 0]);
    let dist = Normal::new(0.0, 0.3).expect("std");
    Waveform::new((0..n).map(|_| dist.sample(&mut r)).collect(), crate::audio::SAMPLE_RATE)
}

/// Finite-difference reports for the masked PIT unit loss, PIT-CTC and PIT-BCE.
pub fn end_to_end_gradchecks(seed: u64, n_coords: usize, epsilon: f64) -> Result<Vec<LossCheck>> {
    let cfg = tiny_config();
    let frames = 6;
    let y = random_wave(&cfg, frames, seed)?;
    let mut r = rng::keyed(seed, &[domain::GRADCHECK, 1]);
    let sil = (TINY_VOCAB - 1) as u32;
    let mut out = Vec::new();

    let store = init_params(&cfg, seed)?;
    let targets: Vec<UnitSequence> = (0..TINY_K)
        .map(|_| UnitSequence::new((0..frames).map(|_| r.random_range(0..=sil)).collect(), sil))
        .collect();
    let mask = MaskSet::from_indices(frames, &[1, 2, 4]);
    let pss = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let f = forward_pretrain(&mut g, s, &cfg, &y, &mask)?;
        let l = masked_pss_loss(&mut g, &f.log_posts, &targets, &mask, 1.0, PitMethod::Brute)?;
        Ok((g.scalar(l.loss), g.backward(l.loss)?))
    };
    let rep = finite_diff_check(pss, &store, epsilon, n_coords, seed)?;
    out.push(LossCheck::new("masked_pss_loss", store.num_values(), rep));

    // Heads reused as a 5-symbol CTC alphabet; the mask embedding is unused.
    let mut store = init_params(&cfg, seed)?;
    store.freeze("msk");
    let transcripts = vec![vec![1, 2], vec![3]];
    let ctc = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let x = local_encode(&mut g, s, &cfg, &y)?;
        let layers = contextual_encode(&mut g, s, &cfg, x)?;
        let lps = project_heads(&mut g, s, "head", cfg.k, *layers.last().expect("layers"))?;
        let l = pit_ctc_loss(&mut g, &lps, &transcripts, PitMethod::Brute)?;
        Ok((g.scalar(l.loss), g.backward(l.loss)?))
    };
    let rep = finite_diff_check(ctc, &store, epsilon, n_coords, seed)?;
    out.push(LossCheck::new("pit_ctc_loss", store.num_values(), rep));

    // Probe on top of the unfrozen encoder; heads and mask embedding unused.
    let pcfg = DiarProbeConfig {
        layers: cfg.layers,
        input_dim: cfg.d,
        hidden: PROBE_HIDDEN,
        speakers: 2,
    };
    let mut store = init_params(&cfg, seed)?;
    for (name, t) in init_probe(&pcfg, seed)?.iter() {
        store.insert(name, t.clone());
    }
    store.freeze_prefix("head");
    store.freeze("msk");
    let reference = ActivityMatrix::from_frames(frames, &[&[0, 1, 2, 3], &[2, 3, 4, 5]])?;
    let bce = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let x = local_encode(&mut g, s, &cfg, &y)?;
        let layers = contextual_encode(&mut g, s, &cfg, x)?;
        let fwd = diar_probe_forward_vars(&mut g, s, &pcfg, &layers)?;
        let l = pit_bce_loss(&mut g, fwd.probs, &reference, PitMethod::Brute)?;
        Ok((g.scalar(l.loss), g.backward(l.loss)?))
    };
    let rep = finite_diff_check(bce, &store, epsilon, n_coords, seed)?;
    out.push(LossCheck::new("pit_bce_loss", store.num_values(), rep));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_losses_pass_gradcheck() {
        for c in end_to_end_gradchecks(3, 30, 1e-5).unwrap() {
            assert!(c.params <= 5000, "{c:?}");
            assert!(c.max_rel_error < 1e-4, "{c:?}");
        }
    }
}
