//! Training loops: masked PIT pre-training on simulated mixtures, PIT-CTC
//! fine-tuning and the diarization probe.
//!
//! Every random choice is drawn from a stream keyed by `(seed, domain, step,
//! item)`, so a run resumed from a checkpoint at step `s` repeats exactly the
//! batches, mixtures and masks an uninterrupted run would have used.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::labels::UnitSequence;
use crate::masking::{sample_mask, MaskSet, MaskSpec};
use crate::mixture::{simulate, simulate_full_overlap, MixSpec, MixtureSample, Utterance};
use crate::model::{forward_pretrain, ModelConfig};
use crate::objectives::{masked_pss_loss, PitMethod};
use crate::optim::{LrSchedule, ParamStore};
use crate::par::{self, Exec};
use crate::probes::asr::{asr_batch_loss, finetune_step, AsrExample};
use crate::probes::diar::{activity_from_targets, probe_loss_grad, probe_predict, DiarProbeConfig};
use crate::probes::metrics::{der, ActivityMatrix, DerReport};
use crate::rng::{self, domain, Rng};
use crate::tensor::Tensor;

/// Mean loss and mean gradient over `items`, reduced in input order.
pub fn batch_loss_grad<T, F>(exec: Exec, items: &[T], f: F) -> Result<(f64, Gradients)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Gradients)> + Sync + Send,
{
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results = par::map(exec, items, f);
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.accumulate(&g);
    }
    let n = items.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Random utterance indices, drawn without replacement until they hold
/// `batch_seconds` of audio and at least `min_items` utterances.
pub fn select_batch(durations: &[f64], batch_seconds: f64, min_items: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if durations.len() < min_items.max(1) {
        return Err(Error::BatchTooSmall {
            batch: durations.len(),
            k: min_items,
        });
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    let mut secs = 0.0;
    for i in order {
        if secs >= batch_seconds && out.len() >= min_items.max(1) {
            break;
        }
        secs += durations[i];
        out.push(i);
    }
    Ok(out)
}

fn durations(corpus: &[Utterance]) -> Vec<f64> {
    corpus.iter().map(|u| u.wave.seconds()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub mix: MixSpec,
    pub mask: MaskSpec,
    pub sil_weight: f64,
    pub pit: PitMethod,
    pub schedule: LrSchedule,
    pub batch_seconds: f64,
    pub seed: u64,
}

/// One training example: a mixture with its targets and mask.
#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub sample: MixtureSample,
    pub mask: MaskSet,
}

fn make_item(
    cfg: &PretrainConfig,
    batch: &[Utterance],
    primary: usize,
    noise: &[Waveform],
    mix_rng: &mut Rng,
    mask_rng: &mut Rng,
) -> Result<PretrainItem> {
    let sample = simulate(batch, primary, noise, &cfg.mix, mix_rng)?;
    let t = cfg.model.frames(sample.y_mix.len());
    if sample.num_frames() != t {
        return Err(Error::shape(
            "pretrain",
            format!("targets have {} frames, encoder gives {t}", sample.num_frames()),
        ));
    }
    let mask = sample_mask(t, &cfg.mask, mask_rng)?;
    Ok(PretrainItem { sample, mask })
}

/// The mixtures and masks seen at `step`: one mixture per batch member, each
/// member acting once as the primary.
pub fn pretrain_batch(cfg: &PretrainConfig, corpus: &[Utterance], noise: &[Waveform], step: u64) -> Result<Vec<PretrainItem>> {
    let idx = select_batch(&durations(corpus), cfg.batch_seconds, cfg.mix.k, &mut rng::keyed(cfg.seed, &[domain::BATCH, step]))?;
    let batch: Vec<Utterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
    (0..batch.len())
        .map(|i| {
            let key = [step, i as u64];
            make_item(
                cfg,
                &batch,
                i,
                noise,
                &mut rng::keyed(cfg.seed, &[domain::MIX, key[0], key[1]]),
                &mut rng::keyed(cfg.seed, &[domain::MASK, key[0], key[1]]),
            )
        })
        .collect()
}

/// Fixed evaluation mixtures, independent of the training stream.
pub fn eval_items(cfg: &PretrainConfig, corpus: &[Utterance], noise: &[Waveform], count: usize) -> Result<Vec<PretrainItem>> {
    let d = durations(corpus);
    (0..count as u64)
        .map(|n| {
            let idx = select_batch(&d, 0.0, cfg.mix.k, &mut rng::keyed(cfg.seed, &[domain::EVAL, 0, n]))?;
            let batch: Vec<Utterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
            make_item(
                cfg,
                &batch,
                0,
                noise,
                &mut rng::keyed(cfg.seed, &[domain::EVAL, 1, n]),
                &mut rng::keyed(cfg.seed, &[domain::EVAL, 2, n]),
            )
        })
        .collect()
}

/// Mixtures drawn like pre-training ones from their own stream, for the
/// diarization probe.
pub fn probe_mixtures(corpus: &[Utterance], spec: &MixSpec, noise: &[Waveform], count: usize, seed: u64) -> Result<Vec<MixtureSample>> {
    let d = durations(corpus);
    (0..count as u64)
        .map(|n| {
            let idx = select_batch(&d, 0.0, spec.k, &mut rng::keyed(seed, &[domain::PROBE, 0, n]))?;
            let batch: Vec<Utterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
            simulate(&batch, 0, noise, spec, &mut rng::keyed(seed, &[domain::PROBE, 1, n]))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCount {
    pub correct: usize,
    pub total: usize,
}

impl AccuracyCount {
    pub fn add(&mut self, o: AccuracyCount) {
        self.correct += o.correct;
        self.total += o.total;
    }

    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |b, (k, &v)| if v > row[b] { k } else { b })
}

/// Masked frames whose argmax unit matches the target under `pi`.
pub fn masked_accuracy(log_posts: &[&Tensor], targets: &[UnitSequence], mask: &MaskSet, pi: &[usize]) -> AccuracyCount {
    let mut acc = AccuracyCount::default();
    for (j, lp) in log_posts.iter().enumerate() {
        let z = &targets[pi[j]];
        for t in mask.indices() {
            acc.total += 1;
            acc.correct += usize::from(argmax(lp.row(t)) == z.units[t] as usize);
        }
    }
    acc
}

/// Loss, gradients and accuracy for one item.
pub fn pretrain_loss_grad(store: &ParamStore, cfg: &PretrainConfig, item: &PretrainItem) -> Result<(f64, Gradients, AccuracyCount)> {
    let mut g = Graph::new();
    let fwd = forward_pretrain(&mut g, store, &cfg.model, &item.sample.y_mix, &item.mask)?;
    let out = masked_pss_loss(&mut g, &fwd.log_posts, &item.sample.targets, &item.mask, cfg.sil_weight, cfg.pit)?;
    let lps: Vec<&Tensor> = fwd.log_posts.iter().map(|&v| g.value(v)).collect();
    let acc = masked_accuracy(&lps, &item.sample.targets, &item.mask, &out.assignment.pi);
    Ok((g.scalar(out.loss), g.backward(out.loss)?, acc))
}

/// Loss and accuracy without a backward pass.
pub fn evaluate_pretrain(store: &ParamStore, cfg: &PretrainConfig, items: &[PretrainItem], exec: Exec) -> Result<(f64, AccuracyCount)> {
    let results = par::map(exec, items, |item| -> Result<(f64, AccuracyCount)> {
        let mut g = Graph::new();
        let fwd = forward_pretrain(&mut g, store, &cfg.model, &item.sample.y_mix, &item.mask)?;
        let out = masked_pss_loss(&mut g, &fwd.log_posts, &item.sample.targets, &item.mask, cfg.sil_weight, cfg.pit)?;
        let lps: Vec<&Tensor> = fwd.log_posts.iter().map(|&v| g.value(v)).collect();
        Ok((g.scalar(out.loss), masked_accuracy(&lps, &item.sample.targets, &item.mask, &out.assignment.pi)))
    });
    let mut loss = 0.0;
    let mut acc = AccuracyCount::default();
    for r in results {
        let (l, a) = r?;
        loss += l;
        acc.add(a);
    }
    Ok((loss / items.len().max(1) as f64, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub masked_acc: f64,
    pub n_mixtures: usize,
    pub masked_frames: usize,
}

/// One optimiser step at `store.step() + 1`.
pub fn pretrain_step(
    store: &mut ParamStore,
    cfg: &PretrainConfig,
    corpus: &[Utterance],
    noise: &[Waveform],
    exec: Exec,
) -> Result<StepLog> {
    let step = store.step();
    let items = pretrain_batch(cfg, corpus, noise, step)?;
    let results = par::map(exec, &items, |item| pretrain_loss_grad(store, cfg, item));
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    let mut acc = AccuracyCount::default();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok((l, g, a)) => {
                loss += l;
                grads.accumulate(&g);
                acc.add(a);
            }
            Err(Error::NonFinite(op)) => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite value in {op}; mixture {:?}", item.sample.record),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let n = items.len() as f64;
    grads.scale(1.0 / n);
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss {loss}"),
        });
    }
    let lr = cfg.schedule.lr_at(step as usize + 1)?;
    store.adam_step(&grads, lr)?;
    Ok(StepLog {
        step: step + 1,
        lr,
        loss,
        masked_acc: acc.rate(),
        n_mixtures: items.len(),
        masked_frames: items.iter().map(|i| i.mask.count()).sum(),
    })
}

/// Runs until `store.step() == until`, calling `on_step` after each update.
pub fn pretrain<F>(
    store: &mut ParamStore,
    cfg: &PretrainConfig,
    corpus: &[Utterance],
    noise: &[Waveform],
    until: u64,
    exec: Exec,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepLog, &ParamStore) -> Result<()>,
{
    cfg.model.validate()?;
    cfg.mix.validate()?;
    while store.step() < until {
        let log = pretrain_step(store, cfg, corpus, noise, exec)?;
        on_step(&log, store)?;
    }
    Ok(())
}

/// Fully overlapped `K`-speaker mixtures with transcripts (each member starts
/// at sample 0; relative energies log-uniform on `r_e_range`).
pub fn full_overlap_set(
    corpus: &[Utterance],
    k: usize,
    count: usize,
    r_e_range: (f64, f64),
    seed: u64,
) -> Result<Vec<MixtureSample>> {
    if corpus.len() < k {
        return Err(Error::BatchTooSmall { batch: corpus.len(), k });
    }
    (0..count)
        .map(|n| {
            let mut r = rng::keyed(seed, &[domain::FINETUNE, n as u64]);
            let mut members: Vec<usize> = rand::seq::index::sample(&mut r, corpus.len(), k).into_vec();
            // The longest member leads so every other one fits whole.
            members.sort_by_key(|&i| std::cmp::Reverse(corpus[i].wave.len()));
            simulate_full_overlap(corpus, &members, k, r_e_range, crate::audio::WINDOW, crate::audio::HOP, &mut r)
        })
        .collect()
}

pub fn asr_examples(set: &[MixtureSample]) -> Result<Vec<AsrExample>> {
    set.iter()
        .map(|m| {
            let transcripts = m
                .transcripts
                .clone()
                .ok_or_else(|| Error::invalid(format!("mixture around `{}` lacks transcripts", m.record.primary)))?;
            Ok(AsrExample {
                wave: m.y_mix.clone(),
                transcripts,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Batch of example indices for a fine-tuning or probe step.
fn step_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(seed, &[domain::FINETUNE, 1 << 32, step]));
    order.truncate(batch.min(n).max(1));
    order
}

/// PIT-CTC fine-tuning until `store.step() == until`. `store` must already
/// carry the character heads (see [`crate::probes::asr::prepare_for_finetune`]).
pub fn finetune<F>(
    store: &mut ParamStore,
    model: &ModelConfig,
    cfg: &FinetuneConfig,
    data: &[AsrExample],
    until: u64,
    exec: Exec,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&FinetuneLog, &ParamStore) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::invalid("no fine-tuning data"));
    }
    while store.step() < until {
        let step = store.step();
        let idx = step_indices(data.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<AsrExample> = idx.iter().map(|&i| data[i].clone()).collect();
        let lr = cfg.schedule.lr_at(step as usize + 1)?;
        let loss = finetune_step(store, model, &batch, lr, exec)?;
        on_step(&FinetuneLog { step: step + 1, lr, loss }, store)?;
    }
    Ok(())
}

/// Mean PIT-CTC loss over the whole set.
pub fn finetune_eval_loss(store: &ParamStore, model: &ModelConfig, data: &[AsrExample], exec: Exec) -> Result<f64> {
    asr_batch_loss(store, model, data, exec)
}

/// Cached frozen-encoder layers and reference activity for one mixture.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub layers: Vec<Tensor>,
    pub reference: ActivityMatrix,
}

/// Unmasked encoder layers per mixture, computed once. The encoder store is
/// only read.
pub fn probe_items(encoder: &ParamStore, model: &ModelConfig, set: &[MixtureSample], speakers: usize, exec: Exec) -> Result<Vec<ProbeItem>> {
    let out = par::map(exec, set, |m| -> Result<ProbeItem> {
        let layers = crate::model::encode_layers(encoder, model, &m.y_mix)?;
        let reference = activity_from_targets(&m.targets[..speakers.min(m.targets.len())])?;
        Ok(ProbeItem { layers, reference })
    });
    out.into_iter().collect()
}

/// Trains the probe until `probe.step() == until`.
pub fn train_probe<F>(
    probe: &mut ParamStore,
    cfg: &DiarProbeConfig,
    schedule: &LrSchedule,
    data: &[ProbeItem],
    batch_size: usize,
    seed: u64,
    until: u64,
    exec: Exec,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&FinetuneLog, &ParamStore) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::invalid("no probe data"));
    }
    while probe.step() < until {
        let step = probe.step();
        let idx = step_indices(data.len(), batch_size, seed, step);
        let batch: Vec<&ProbeItem> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = batch_loss_grad(exec, &batch, |it| probe_loss_grad(probe, cfg, &it.layers, &it.reference))?;
        let lr = schedule.lr_at(step as usize + 1)?;
        probe.adam_step(&grads, lr)?;
        on_step(&FinetuneLog { step: step + 1, lr, loss }, probe)?;
    }
    Ok(())
}

/// DER per item (min-DER speaker mapping).
pub fn probe_der(probe: &ParamStore, cfg: &DiarProbeConfig, data: &[ProbeItem], exec: Exec) -> Result<Vec<DerReport>> {
    let out = par::map(exec, data, |it| -> Result<DerReport> {
        let probs = probe_predict(probe, cfg, &it.layers)?;
        der(&ActivityMatrix::from_probs(&probs)?, &it.reference)
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_selection_is_keyed_and_sized() {
        let d = vec![3.0; 20];
        let r = |step| rng::keyed(1, &[domain::BATCH, step]);
        let a = select_batch(&d, 10.0, 2, &mut r(5)).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, select_batch(&d, 10.0, 2, &mut r(5)).unwrap());
        assert_ne!(a, select_batch(&d, 10.0, 2, &mut r(6)).unwrap());
        assert_eq!(select_batch(&d, 0.0, 3, &mut r(0)).unwrap().len(), 3);
        assert!(select_batch(&d[..1], 1.0, 2, &mut r(0)).is_err());
    }
}
