//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use pss_core::audio::{frame_count, save_wav, MfccConfig, Waveform, HOP, WINDOW};
use pss_core::checkpoint;
use pss_core::checks::end_to_end_gradchecks;
use pss_core::labels::{assign_all, kmeans_fit, mfcc_labels, pool_frames, Codebook, FeatureSource, UnitSequence};
use pss_core::mixture::{MixtureSample, StreamKind, Utterance};
use pss_core::model::{extract_layer_features, init_params, ModelConfig};
use pss_core::objectives::ctc::CHAR_VOCAB;
use pss_core::objectives::PitMethod;
use pss_core::optim::ParamStore;
use pss_core::probes::asr::{prepare_for_finetune, transcribe, AsrExample, CTC_HEAD};
use pss_core::probes::diar::{init_probe, DiarProbeConfig};
use pss_core::probes::metrics::{pit_wer, DerReport};
use pss_core::synth::generate;
use pss_core::train::{
    asr_examples, full_overlap_set, pretrain, pretrain_batch, probe_der, probe_items, probe_mixtures, train_probe,
    finetune, PretrainConfig,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{self, Entry};
use crate::rundir::RunDir;

pub const MODEL_META: &str = "model.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const PROBE_META: &str = "probe.json";
pub const PROBE_CKPT: &str = "probe.ckpt";
pub const SUMMARY: &str = "summary.json";

/// Which heads a stored model carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    /// Head name prefix: `head` for unit heads, `ctc` for character heads.
    pub heads: String,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub probe: DiarProbeConfig,
    pub encoder: ModelMeta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LabelsMeta {
    n_clusters: usize,
    sil: u32,
    source: String,
    utterances: usize,
}

/// Carries a CLI error through a core callback.
fn to_core(e: CliError) -> pss_core::Error {
    match e {
        CliError::Core(c) => c,
        other => pss_core::Error::invalid(other.to_string()),
    }
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_model(dir: &str) -> Result<(ModelMeta, ParamStore), CliError> {
    if dir.is_empty() {
        return Err(CliError::Config("`init` must name a run directory with a model".into()));
    }
    let dir = Path::new(dir);
    let meta: ModelMeta = read_json(&dir.join(MODEL_META))?;
    let store = checkpoint::load(dir.join(MODEL_CKPT))?;
    Ok((meta, store))
}

fn save_model(rd: &RunDir, meta: &ModelMeta, store: &ParamStore) -> Result<(), CliError> {
    rd.write(MODEL_CKPT, &checkpoint::encode(store))?;
    rd.write_json(MODEL_META, meta)
}

struct Labels {
    codebook: Codebook,
    units: BTreeMap<String, UnitSequence>,
}

fn load_labels(dir: &str) -> Result<Labels, CliError> {
    let dir = Path::new(dir);
    let meta: LabelsMeta = read_json(&dir.join("labels.json"))?;
    let source = if meta.source == "mfcc" {
        FeatureSource::Mfcc
    } else {
        let l = meta
            .source
            .strip_prefix("model-layer-")
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| CliError::Data(format!("unknown label source `{}`", meta.source)))?;
        FeatureSource::ModelLayer(l)
    };
    let codebook = Codebook::load(dir.join("codebook.bin"), source)?;
    let p = dir.join("units.tsv");
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let units = manifest::parse_units(&text, codebook.sil())?;
    Ok(Labels { codebook, units })
}

/// Manifest utterances joined with their units. Without labels every
/// utterance gets an all-SIL placeholder of the right length.
fn load_corpus(path: &str, labels: Option<&Labels>) -> Result<Vec<Utterance>, CliError> {
    if path.is_empty() {
        return Err(CliError::Config("manifest path must be set".into()));
    }
    manifest::load(Path::new(path))?
        .into_iter()
        .map(|l| {
            let frames = frame_count(l.wave.len(), WINDOW, HOP);
            let units = match labels {
                Some(lb) => {
                    let u = lb
                        .units
                        .get(&l.entry.id)
                        .ok_or_else(|| CliError::Data(format!("no units for `{}`", l.entry.id)))?;
                    if u.len() != frames {
                        return Err(CliError::Data(format!(
                            "`{}`: {} units for {frames} frames",
                            l.entry.id,
                            u.len()
                        )));
                    }
                    u.clone()
                }
                None => UnitSequence::silent(frames, 0),
            };
            Ok(Utterance {
                id: l.entry.id,
                wave: l.wave,
                units,
                transcript: l.entry.transcript,
            })
        })
        .collect()
}

fn noise_pool(cfg: &RunConfig) -> Result<Vec<Waveform>, CliError> {
    if cfg.noise_manifest.is_empty() {
        return Ok(Vec::new());
    }
    Ok(manifest::load(Path::new(&cfg.noise_manifest))?
        .into_iter()
        .map(|l| l.wave)
        .collect())
}

fn require_transcripts(corpus: &[Utterance], what: &str) -> Result<(), CliError> {
    if let Some(u) = corpus.iter().find(|u| u.transcript.is_none()) {
        return Err(CliError::Data(format!("{what} needs transcripts; `{}` has none", u.id)));
    }
    Ok(())
}

/// Synthetic corpus: WAV files plus a manifest with transcripts.
pub fn synth_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    let corpus = generate(&cfg.synth())?;
    let wav_dir = rd.subdir("wav")?;
    let mut entries = Vec::new();
    for u in &corpus {
        save_wav(wav_dir.join(format!("{}.wav", u.id)), &u.wave)?;
        entries.push(Entry {
            id: u.id.clone(),
            path: PathBuf::from("wav").join(format!("{}.wav", u.id)),
            n_samples: u.wave.len(),
            transcript: Some(u.transcript.clone()),
        });
    }
    rd.write("manifest.tsv", manifest::render(&entries).as_bytes())?;
    let secs: f64 = corpus.iter().map(|u| u.wave.seconds()).sum();
    rd.write_json(SUMMARY, &json!({ "utterances": corpus.len(), "seconds": secs }))?;
    progress(&format!("wrote {} utterances ({secs:.1} s)", corpus.len()));
    Ok(())
}

pub fn build_labels(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    cfg.require("manifest", &cfg.manifest)?;
    let loaded = manifest::load(Path::new(&cfg.manifest))?;
    let waves: Vec<Waveform> = loaded.iter().map(|l| l.wave.clone()).collect();
    let exec = cfg.exec();
    let (codebook, units) = if cfg.label_layer == 0 {
        mfcc_labels(exec, &waves, &MfccConfig::default(), cfg.n_clusters, cfg.seed, cfg.kmeans_iters)?
    } else {
        let (meta, store) = load_model(&cfg.init)?;
        let feats = pss_core::par::map(exec, &waves, |w| extract_layer_features(&store, &meta.model, w, cfg.label_layer))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let fit = kmeans_fit(&pool_frames(&feats)?, cfg.n_clusters, cfg.seed, cfg.kmeans_iters)?;
        let mut cb = fit.codebook;
        cb.source = FeatureSource::ModelLayer(cfg.label_layer);
        let units = assign_all(exec, &feats, &cb)?;
        (cb, units)
    };
    rd.write("codebook.bin", &codebook.to_bytes())?;
    let rows: Vec<(String, UnitSequence)> = loaded.iter().map(|l| l.entry.id.clone()).zip(units).collect();
    rd.write("units.tsv", manifest::render_units(&rows).as_bytes())?;
    rd.write_json(
        "labels.json",
        &LabelsMeta {
            n_clusters: codebook.n_clusters(),
            sil: codebook.sil(),
            source: codebook.source.to_string(),
            utterances: rows.len(),
        },
    )?;
    progress(&format!("labelled {} utterances with {} clusters", rows.len(), codebook.n_clusters()));
    Ok(())
}

fn pretrain_config(cfg: &RunConfig, labels: &Labels) -> Result<PretrainConfig, CliError> {
    let model = cfg.model(labels.codebook.n_clusters() + 1)?;
    model.check_alignment(WINDOW, HOP)?;
    Ok(PretrainConfig {
        model,
        mix: cfg.mix()?,
        mask: cfg.mask()?,
        sil_weight: cfg.sil_weight,
        pit: PitMethod::Auto,
        schedule: cfg.schedule()?,
        batch_seconds: cfg.batch_seconds,
        seed: cfg.seed,
    })
}

#[derive(Serialize)]
struct SimSummary {
    mixtures: usize,
    n_histogram: Vec<usize>,
    extras: usize,
    noise_extras: usize,
    noise_fraction: f64,
    clipped: usize,
    clipping_rate: f64,
}

/// Materialises the mixtures pre-training would draw at steps `0, 1, ...`
/// until `count` have been written.
pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    cfg.require("labels", &cfg.labels)?;
    let labels = load_labels(&cfg.labels)?;
    let corpus = load_corpus(&cfg.manifest, Some(&labels))?;
    let noise = noise_pool(cfg)?;
    let pcfg = pretrain_config(cfg, &labels)?;
    let dir = rd.subdir("mixtures")?;
    let mut provenance = String::new();
    let mut entries = Vec::new();
    let mut hist = vec![0; cfg.k];
    let (mut extras, mut noise_extras, mut clipped) = (0, 0, 0);
    let mut step = 0u64;
    while entries.len() < cfg.count {
        for (i, item) in pretrain_batch(&pcfg, &corpus, &noise, step)?.into_iter().enumerate() {
            if entries.len() == cfg.count {
                break;
            }
            let id = format!("mix{step:06}_{i:02}");
            let s = &item.sample;
            save_wav(dir.join(format!("{id}.wav")), &s.y_mix)?;
            let targets: String = s.targets.iter().map(|t| t.to_line() + "\n").collect();
            rd.write(&format!("mixtures/{id}.targets"), targets.as_bytes())?;
            provenance.push_str(&serde_json::to_string(&json!({ "id": id, "step": step, "index": i, "record": s.record }))?);
            provenance.push('\n');
            hist[s.record.n] += 1;
            extras += s.record.extras.len();
            noise_extras += s.record.extras.iter().filter(|e| e.is_noise).count();
            clipped += usize::from(s.record.clipped);
            entries.push(Entry {
                id: id.clone(),
                path: PathBuf::from(format!("{id}.wav")),
                n_samples: s.y_mix.len(),
                transcript: None,
            });
        }
        step += 1;
    }
    rd.write("provenance.jsonl", provenance.as_bytes())?;
    rd.write("mixtures/manifest.tsv", manifest::render(&entries).as_bytes())?;
    let n = entries.len();
    rd.write_json(
        SUMMARY,
        &SimSummary {
            mixtures: n,
            n_histogram: hist,
            extras,
            noise_extras,
            noise_fraction: noise_extras as f64 / extras.max(1) as f64,
            clipped,
            clipping_rate: clipped as f64 / n.max(1) as f64,
        },
    )?;
    progress(&format!("wrote {n} mixtures from {step} steps"));
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    cfg.require("labels", &cfg.labels)?;
    let labels = load_labels(&cfg.labels)?;
    let corpus = load_corpus(&cfg.manifest, Some(&labels))?;
    let noise = noise_pool(cfg)?;
    let pcfg = pretrain_config(cfg, &labels)?;
    let meta = ModelMeta {
        model: pcfg.model.clone(),
        heads: "head".into(),
        vocab: pcfg.model.vocab,
    };
    let last = rd.path(LAST_CKPT);
    let mut store = if last.exists() {
        let s = checkpoint::load(&last)?;
        progress(&format!("resuming at step {}", s.step()));
        s
    } else {
        init_params(&pcfg.model, cfg.seed)?
    };
    rd.write_json(MODEL_META, &meta)?;
    let mut metrics = rd.metrics(store.step() == 0)?;
    if store.step() > 0 {
        metrics = rd.truncate_metrics(store.step())?;
    }
    let ckpt_dir = rd.subdir("checkpoints")?;
    let every = cfg.checkpoint_every.max(1) as u64;
    let stop = cfg.stop_step();
    let result = pretrain(&mut store, &pcfg, &corpus, &noise, stop, cfg.exec(), |log, s| {
        metrics.log(log).map_err(to_core)?;
        if log.step % every == 0 || log.step == stop {
            let bytes = checkpoint::encode(s);
            crate::rundir::write_atomic(&ckpt_dir.join(format!("step{:06}.ckpt", log.step)), &bytes)
                .map_err(to_core)?;
            crate::rundir::write_atomic(&last, &bytes).map_err(to_core)?;
        }
        if log.step % 10 == 0 {
            progress(&format!("step {} loss {:.4} acc {:.3}", log.step, log.loss, log.masked_acc));
        }
        Ok(())
    });
    if let Err(pss_core::Error::Diverged { step, detail }) = &result {
        rd.write_json("diverged.json", &json!({ "step": step, "detail": detail }))?;
    }
    result?;
    save_model(&rd, &meta, &store)?;
    Ok(())
}

/// Fully overlapped training and dev sets with transcripts.
fn asr_sets(cfg: &RunConfig) -> Result<(Vec<AsrExample>, Vec<AsrExample>), CliError> {
    let corpus = load_corpus(&cfg.manifest, None)?;
    require_transcripts(&corpus, "fine-tuning")?;
    let train = asr_examples(&full_overlap_set(&corpus, cfg.k, cfg.ft_mixtures, (cfg.ft_r_e_min, cfg.ft_r_e_max), cfg.seed)?)?;
    let (dev_corpus, dev_seed) = if cfg.dev_manifest.is_empty() {
        (corpus, cfg.seed ^ 0xDE7)
    } else {
        let c = load_corpus(&cfg.dev_manifest, None)?;
        require_transcripts(&c, "fine-tuning dev set")?;
        (c, cfg.seed)
    };
    let dev = asr_examples(&full_overlap_set(&dev_corpus, cfg.k, cfg.dev_mixtures, (cfg.ft_r_e_min, cfg.ft_r_e_max), dev_seed)?)?;
    Ok((train, dev))
}

fn beam(cfg: &RunConfig) -> Option<usize> {
    (cfg.beam > 0).then_some(cfg.beam)
}

#[derive(Serialize)]
struct PitWerRow {
    id: String,
    pit_wer: f64,
    errors: usize,
    ref_words: usize,
    pi: Vec<usize>,
    per_stream_errors: Vec<usize>,
    hyps: Vec<String>,
    refs: Vec<String>,
}

fn score_msasr(store: &ParamStore, model: &ModelConfig, set: &[AsrExample], cfg: &RunConfig) -> Result<Vec<PitWerRow>, CliError> {
    let rows = pss_core::par::map_range(cfg.exec(), set.len(), |n| -> Result<PitWerRow, CliError> {
        let ex = &set[n];
        let hyps = transcribe(store, model, &ex.wave, beam(cfg))?;
        let mut refs = ex.transcripts.clone();
        refs.resize(model.k, String::new());
        let w = pit_wer(&hyps, &refs)?;
        Ok(PitWerRow {
            id: format!("mix{n:04}"),
            pit_wer: w.wer,
            errors: w.errors,
            ref_words: w.ref_words,
            pi: w.pi.clone(),
            per_stream_errors: w.per_stream,
            hyps,
            refs,
        })
    });
    rows.into_iter().collect()
}

fn corpus_wer(rows: &[PitWerRow]) -> f64 {
    let e: usize = rows.iter().map(|r| r.errors).sum();
    let w: usize = rows.iter().map(|r| r.ref_words).sum();
    e as f64 / w.max(1) as f64
}

pub fn finetune_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    let (meta, mut store) = load_model(&cfg.init)?;
    let model = meta.model.clone();
    if model.k != cfg.k {
        return Err(CliError::Config(format!("model has K={}, config asks for K={}", model.k, cfg.k)));
    }
    match meta.heads.as_str() {
        "head" => prepare_for_finetune(&mut store, &model, cfg.seed),
        CTC_HEAD if meta.vocab == CHAR_VOCAB => {
            store.freeze_prefix("f.");
            store.freeze("msk");
            store.reset_optimizer();
        }
        _ => {
            return Err(CliError::Config(format!(
                "cannot fine-tune `{}` heads with vocab {} (expected unit heads or {CHAR_VOCAB} characters)",
                meta.heads, meta.vocab
            )))
        }
    }
    let (train, dev) = asr_sets(cfg)?;
    let ft = pss_core::train::FinetuneConfig {
        schedule: cfg.schedule()?,
        batch_size: cfg.ft_batch,
        seed: cfg.seed,
    };
    let per_epoch = train.len().div_ceil(cfg.ft_batch.max(1)) as u64;
    let stop = cfg.stop_step();
    let mut metrics = rd.metrics(true)?;
    let mut epoch_loss = Vec::new();
    let front: Vec<(String, pss_core::Tensor)> = store
        .iter()
        .filter(|(n, _)| n.starts_with("f."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    finetune(&mut store, &model, &ft, &train, stop, cfg.exec(), |log, s| {
        if front.iter().any(|(n, t)| s.get(n) != Some(t)) {
            return Err(to_core(CliError::Check(format!("front end changed at step {}", log.step))));
        }
        metrics.log(log).map_err(to_core)?;
        epoch_loss.push(log.loss);
        if log.step % per_epoch == 0 || log.step == stop {
            let rows = score_msasr(s, &model, &dev, cfg).map_err(to_core)?;
            let mean = epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64;
            epoch_loss.clear();
            let line = json!({
                "epoch": log.step.div_ceil(per_epoch),
                "step": log.step,
                "train_loss": mean,
                "dev_pit_wer": corpus_wer(&rows),
            });
            metrics.log(&line).map_err(to_core)?;
            progress(&line.to_string());
        }
        Ok(())
    })?;
    save_model(
        &rd,
        &ModelMeta {
            model,
            heads: CTC_HEAD.into(),
            vocab: CHAR_VOCAB,
        },
        &store,
    )
}

fn der_summary(reports: &[DerReport]) -> serde_json::Value {
    let sum = |f: fn(&DerReport) -> usize| reports.iter().map(f).sum::<usize>();
    let (miss, fa, conf, speech) = (
        sum(|r| r.miss),
        sum(|r| r.false_alarm),
        sum(|r| r.confusion),
        sum(|r| r.ref_speech),
    );
    json!({
        "der": (miss + fa + conf) as f64 / speech.max(1) as f64,
        "miss": miss,
        "false_alarm": fa,
        "confusion": conf,
        "ref_speech": speech,
        "mixtures": reports.len(),
    })
}

/// Probe mixtures: pre-training style, speech only, at least two sources.
fn probe_sets(cfg: &RunConfig) -> Result<(Vec<MixtureSample>, Vec<MixtureSample>), CliError> {
    cfg.require("labels", &cfg.labels)?;
    let labels = load_labels(&cfg.labels)?;
    let corpus = load_corpus(&cfg.manifest, Some(&labels))?;
    let mut spec = cfg.mix()?;
    spec.p_noise = 0.0;
    let train = probe_mixtures(&corpus, &spec, &[], cfg.probe_mixtures, cfg.seed)?;
    let dev = if cfg.dev_manifest.is_empty() {
        probe_mixtures(&corpus, &spec, &[], cfg.dev_mixtures, cfg.seed ^ 0xDE7)?
    } else {
        let c = load_corpus(&cfg.dev_manifest, Some(&labels))?;
        probe_mixtures(&c, &spec, &[], cfg.dev_mixtures, cfg.seed)?
    };
    Ok((train, dev))
}

/// Keeps mixtures whose first `speakers` streams contain some speech.
fn with_speech(set: Vec<MixtureSample>, speakers: usize) -> Vec<MixtureSample> {
    set.into_iter()
        .filter(|m| m.record.streams.iter().take(speakers).any(|k| *k != StreamKind::Silent))
        .collect()
}

pub fn probe_sd(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    let (meta, encoder) = load_model(&cfg.init)?;
    let before = checkpoint::encode(&encoder);
    let pcfg = DiarProbeConfig {
        layers: meta.model.layers,
        input_dim: meta.model.d,
        hidden: cfg.probe_hidden,
        speakers: cfg.probe_speakers,
    };
    let (train, dev) = probe_sets(cfg)?;
    let exec = cfg.exec();
    let train = probe_items(&encoder, &meta.model, &with_speech(train, pcfg.speakers), pcfg.speakers, exec)?;
    let dev = probe_items(&encoder, &meta.model, &with_speech(dev, pcfg.speakers), pcfg.speakers, exec)?;
    let mut probe = init_probe(&pcfg, cfg.seed)?;
    let mut metrics = rd.metrics(true)?;
    let stop = cfg.stop_step();
    train_probe(&mut probe, &pcfg, &cfg.schedule()?, &train, cfg.probe_batch, cfg.seed, stop, exec, |log, _| {
        metrics.log(log).map_err(to_core)
    })?;
    if checkpoint::encode(&encoder) != before {
        return Err(CliError::Check("encoder changed during probe training".into()));
    }
    let reports = probe_der(&probe, &pcfg, &dev, exec)?;
    let summary = der_summary(&reports);
    progress(&summary.to_string());
    rd.write_json(SUMMARY, &summary)?;
    rd.write(PROBE_CKPT, &checkpoint::encode(&probe))?;
    rd.write(MODEL_CKPT, &before)?;
    rd.write_json(MODEL_META, &meta)?;
    rd.write_json(PROBE_META, &ProbeMeta { probe: pcfg, encoder: meta })
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let rd = RunDir::open(cfg)?;
    let mut metrics = rd.metrics(true)?;
    let exec = cfg.exec();
    let summary = match cfg.task.as_str() {
        "msasr" => {
            let (meta, store) = load_model(&cfg.init)?;
            if meta.heads != CTC_HEAD {
                return Err(CliError::Config("msasr needs a fine-tuned model".into()));
            }
            let corpus = load_corpus(&cfg.manifest, None)?;
            require_transcripts(&corpus, "msasr")?;
            let set = asr_examples(&full_overlap_set(
                &corpus,
                meta.model.k.min(cfg.k.max(1)),
                cfg.eval_mixtures,
                (cfg.ft_r_e_min, cfg.ft_r_e_max),
                cfg.seed ^ 0xE7A1,
            )?)?;
            let rows = score_msasr(&store, &meta.model, &set, cfg)?;
            for r in &rows {
                metrics.log(r)?;
            }
            json!({ "task": "msasr", "pit_wer": corpus_wer(&rows), "mixtures": rows.len(),
                    "errors": rows.iter().map(|r| r.errors).sum::<usize>(),
                    "ref_words": rows.iter().map(|r| r.ref_words).sum::<usize>() })
        }
        "asr" => {
            let (meta, store) = load_model(&cfg.init)?;
            if meta.heads != CTC_HEAD {
                return Err(CliError::Config("asr needs a fine-tuned model".into()));
            }
            let corpus = load_corpus(&cfg.manifest, None)?;
            require_transcripts(&corpus, "asr")?;
            let rows = pss_core::par::map(exec, &corpus, |u| -> Result<PitWerRow, CliError> {
                let hyps = transcribe(&store, &meta.model, &u.wave, beam(cfg))?;
                let mut refs = vec![u.transcript.clone().unwrap_or_default()];
                refs.resize(meta.model.k, String::new());
                let w = pit_wer(&hyps, &refs)?;
                Ok(PitWerRow {
                    id: u.id.clone(),
                    pit_wer: w.wer,
                    errors: w.errors,
                    ref_words: w.ref_words,
                    pi: w.pi.clone(),
                    per_stream_errors: w.per_stream,
                    hyps,
                    refs,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
            for r in &rows {
                metrics.log(r)?;
            }
            json!({ "task": "asr", "wer": corpus_wer(&rows), "utterances": rows.len() })
        }
        "sd" => {
            if cfg.init.is_empty() {
                return Err(CliError::Config("`init` must name a probe-sd run".into()));
            }
            let dir = Path::new(&cfg.init);
            let pm: ProbeMeta = read_json(&dir.join(PROBE_META))?;
            let probe = checkpoint::load(dir.join(PROBE_CKPT))?;
            let encoder = checkpoint::load(dir.join(MODEL_CKPT))?;
            let (_, dev) = probe_sets(cfg)?;
            let dev = probe_items(&encoder, &pm.encoder.model, &with_speech(dev, pm.probe.speakers), pm.probe.speakers, exec)?;
            let reports = probe_der(&probe, &pm.probe, &dev, exec)?;
            for (n, r) in reports.iter().enumerate() {
                metrics.log(&json!({ "id": format!("mix{n:04}"), "report": r }))?;
            }
            let mut s = der_summary(&reports);
            s["task"] = json!("sd");
            s
        }
        other => return Err(CliError::Config(format!("unknown task `{other}` (msasr, asr or sd)"))),
    };
    progress(&summary.to_string());
    rd.write_json(SUMMARY, &summary)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let checks = end_to_end_gradchecks(cfg.seed, cfg.grad_coords, cfg.grad_epsilon)?;
    let report = json!({ "checks": checks, "threshold": 1e-4 });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !cfg.out.is_empty() {
        RunDir::open(cfg)?.write_json("gradcheck.json", &report)?;
    }
    if let Some(bad) = checks.iter().find(|c| !(c.max_rel_error < 1e-4)) {
        return Err(CliError::Check(format!(
            "{}: relative error {:e} at {:?}",
            bad.loss, bad.max_rel_error, bad.worst
        )));
    }
    Ok(())
}

/// One row per eval run: its `k`, `p_mix` and summary.
pub fn grid(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.require("runs", &cfg.runs)?;
    let rd = RunDir::open(cfg)?;
    let mut rows = String::new();
    for dir in cfg.runs.split(',').map(str::trim).filter(|d| !d.is_empty()) {
        let dir = Path::new(dir);
        let p = dir.join(crate::rundir::CONFIG_FILE);
        let run = RunConfig::parse(&std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?)?;
        let summary: serde_json::Value = read_json(&dir.join(SUMMARY))?;
        // the model's own pre-training config carries k and p_mix
        let pm = Path::new(&run.init).join(crate::rundir::CONFIG_FILE);
        let origin = match std::fs::read_to_string(&pm) {
            Ok(t) => origin_config(RunConfig::parse(&t)?)?,
            Err(_) => run.clone(),
        };
        let row = json!({ "run": dir.display().to_string(), "k": origin.k, "p_mix": origin.p_mix, "summary": summary });
        rows.push_str(&serde_json::to_string(&row)?);
        rows.push('\n');
    }
    rd.write("grid.jsonl", rows.as_bytes())
}

/// Follows `init` links back to the pre-training run.
fn origin_config(mut c: RunConfig) -> Result<RunConfig, CliError> {
    for _ in 0..8 {
        if c.stage == "pretrain" || c.init.is_empty() {
            break;
        }
        let p = Path::new(&c.init).join(crate::rundir::CONFIG_FILE);
        match std::fs::read_to_string(&p) {
            Ok(t) => c = RunConfig::parse(&t)?,
            Err(_) => break,
        }
    }
    Ok(c)
}
