//! Multi-speaker ASR fine-tuning: fresh per-stream character heads on top of
//! the pre-trained encoder, trained with PIT-CTC while `f` stays fixed.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::model::{contextual_encode, local_encode, project_heads, replace_heads, ModelConfig};
use crate::objectives::ctc::{encode_text, CHAR_VOCAB};
use crate::objectives::{pit_ctc_loss, Assignment, PitMethod};
use crate::optim::ParamStore;
use crate::par::Exec;
use crate::probes::decode::{greedy_ctc_decode, prefix_beam_decode};
use crate::train::batch_loss_grad;

pub const CTC_HEAD: &str = "ctc";

/// Drops the unit heads, attaches `K` character heads, freezes `f` together
/// with the (unused) mask embedding and restarts the optimiser.
pub fn prepare_for_finetune(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    replace_heads(store, cfg, CTC_HEAD, CHAR_VOCAB, seed);
    store.freeze_prefix("f.");
    store.freeze("msk");
    store.reset_optimizer();
}

pub fn forward_asr(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, y: &Waveform) -> Result<Vec<Var>> {
    let x = local_encode(g, store, cfg, y)?;
    let layers = contextual_encode(g, store, cfg, x)?;
    project_heads(g, store, CTC_HEAD, cfg.k, *layers.last().expect("layers"))
}

/// One fine-tuning example: a mixture and one transcript per stream (empty
/// for silent streams).
#[derive(Clone, Debug, PartialEq)]
pub struct AsrExample {
    pub wave: Waveform,
    pub transcripts: Vec<String>,
}

impl AsrExample {
    pub fn targets(&self, k: usize) -> Result<Vec<Vec<usize>>> {
        if self.transcripts.len() > k {
            return Err(Error::invalid(format!("{} transcripts for K={k}", self.transcripts.len())));
        }
        let mut out = self
            .transcripts
            .iter()
            .map(|t| encode_text(t))
            .collect::<Result<Vec<_>>>()?;
        out.resize(k, Vec::new());
        Ok(out)
    }
}

pub fn asr_loss_grad(store: &ParamStore, cfg: &ModelConfig, ex: &AsrExample) -> Result<(f64, Gradients, Assignment)> {
    let mut g = Graph::new();
    let lps = forward_asr(&mut g, store, cfg, &ex.wave)?;
    let out = pit_ctc_loss(&mut g, &lps, &ex.targets(cfg.k)?, PitMethod::Auto)?;
    Ok((g.scalar(out.loss), g.backward(out.loss)?, out.assignment))
}

/// PIT-CTC loss on a batch without updating anything.
pub fn asr_batch_loss(store: &ParamStore, cfg: &ModelConfig, batch: &[AsrExample], exec: Exec) -> Result<f64> {
    let losses = crate::par::map(exec, batch, |ex| -> Result<f64> {
        let mut g = Graph::new();
        let lps = forward_asr(&mut g, store, cfg, &ex.wave)?;
        let out = pit_ctc_loss(&mut g, &lps, &ex.targets(cfg.k)?, PitMethod::Auto)?;
        Ok(g.scalar(out.loss))
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// One Adam step on the mean PIT-CTC loss of `batch`. Returns that loss.
pub fn finetune_step(store: &mut ParamStore, cfg: &ModelConfig, batch: &[AsrExample], lr: f64, exec: Exec) -> Result<f64> {
    if !store.is_frozen("f.proj.w") {
        return Err(Error::invalid("fine-tuning expects a prepared store with `f` frozen"));
    }
    let (loss, grads) = batch_loss_grad(exec, batch, |ex| {
        let (l, g, _) = asr_loss_grad(store, cfg, ex)?;
        Ok((l, g))
    })?;
    store.adam_step(&grads, lr)?;
    Ok(loss)
}

/// Decoded text per stream; greedy unless a beam width is given.
pub fn transcribe(store: &ParamStore, cfg: &ModelConfig, y: &Waveform, beam: Option<usize>) -> Result<Vec<String>> {
    let mut g = Graph::new();
    let lps = forward_asr(&mut g, store, cfg, y)?;
    lps.iter()
        .map(|&v| match beam {
            Some(w) => prefix_beam_decode(g.value(v), w),
            None => greedy_ctc_decode(g.value(v)),
        })
        .collect()
}
