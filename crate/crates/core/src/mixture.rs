//! Overlapped-speech simulation with frame-aligned multi-stream unit targets.
//!
//! A primary utterance receives `n` extra sources (other utterances from the
//! batch, or noise). Each extra is chunked, energy-scaled relative to the
//! primary and shifted by a hop-aligned offset before summation. Stream `i`
//! of the targets holds the units of source `i` padded with SIL wherever that
//! source is silent; noise and unused streams are entirely SIL.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{energy, frame_count, Waveform, HOP, WINDOW};
use crate::error::{Error, Result};
use crate::labels::UnitSequence;
use crate::rng::Rng;

pub const MIN_CHUNK_ENERGY: f64 = 1e-10;
pub const CHUNK_ATTEMPTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Maximum number of sources (and target streams).
    pub k: usize,
    pub p_mix: f64,
    pub p_noise: f64,
    /// Length ratio, uniform on the range.
    pub r_l_range: (f64, f64),
    /// Linear energy ratio, log-uniform on the range.
    pub r_e_range: (f64, f64),
    /// Offsets are uniform on `[0, max_offset_frac * len(primary)]`, floored to a hop multiple.
    pub max_offset_frac: f64,
    pub window: usize,
    pub hop: usize,
    pub seed: u64,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            k: 2,
            p_mix: 1.0,
            p_noise: 0.1,
            r_l_range: (0.3, 1.0),
            r_e_range: (0.1, 10.0),
            max_offset_frac: 0.5,
            window: WINDOW,
            hop: HOP,
            seed: 0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("mix spec: {m}")));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p_mix) || !(0.0..=1.0).contains(&self.p_noise) {
            return bad("probabilities must lie in [0, 1]");
        }
        let (l0, l1) = self.r_l_range;
        if !(l0 > 0.0 && l0 <= l1 && l1 <= 1.0) {
            return bad("r_l range must satisfy 0 < lo <= hi <= 1");
        }
        let (e0, e1) = self.r_e_range;
        if !(e0 > 0.0 && e0 <= e1) {
            return bad("r_e range must satisfy 0 < lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.max_offset_frac) {
            return bad("max offset fraction must lie in [0, 1]");
        }
        if self.hop == 0 || self.window < self.hop {
            return bad("frame geometry");
        }
        Ok(())
    }
}

/// One utterance available for mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform,
    pub units: UnitSequence,
    pub transcript: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Primary,
    ExtraSpeech,
    Noise,
    Silent,
}

/// Which pool an extra source was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "pool", content = "index")]
pub enum ExtraChoice {
    Speech(usize),
    Noise(usize),
}

/// `(r_l, r_e, o)` for one extra source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraDraw {
    pub choice: ExtraChoice,
    pub r_l: f64,
    pub r_e: f64,
    pub offset: usize,
}

impl ExtraDraw {
    pub fn is_noise(&self) -> bool {
        matches!(self.choice, ExtraChoice::Noise(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDraw {
    pub n: usize,
    pub extras: Vec<ExtraDraw>,
}

/// An extra source after chunking, scaling and shifting.
#[derive(Clone, Debug, PartialEq)]
pub struct Positioned {
    pub samples: Vec<f64>,
    pub offset: usize,
    pub chunk_start: usize,
    pub scale: f64,
}

impl Positioned {
    pub fn end(&self) -> usize {
        self.offset + self.samples.len()
    }
}

/// Per-extra provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraRecord {
    pub source: String,
    pub is_noise: bool,
    pub r_l: f64,
    pub r_e: f64,
    pub offset: usize,
    pub chunk_start: usize,
    pub chunk_len: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub primary: String,
    pub n: usize,
    pub extras: Vec<ExtraRecord>,
    pub streams: Vec<StreamKind>,
    pub clipped: bool,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub y_mix: Waveform,
    pub targets: Vec<UnitSequence>,
    pub record: MixRecord,
    /// Transcript per stream when every speech source carried one and was used whole.
    pub transcripts: Option<Vec<String>>,
}

impl MixtureSample {
    pub fn num_frames(&self) -> usize {
        self.targets.first().map(UnitSequence::len).unwrap_or(0)
    }
}

/// Draws the number of extra sources: `P(0) = 1 - p_mix`, `P(k) = p_mix / (K - 1)`.
pub fn sample_num_extra(spec: &MixSpec, rng: &mut Rng) -> Result<usize> {
    if spec.k == 1 {
        if spec.p_mix > 0.0 {
            return Err(Error::invalid("K = 1 leaves no room for extra sources with p_mix > 0"));
        }
        return Ok(0);
    }
    if rng.random::<f64>() >= spec.p_mix {
        return Ok(0);
    }
    Ok(1 + rng.random_range(0..spec.k - 1))
}

/// Chooses `n` extras: noise with probability `p_noise`, otherwise a distinct
/// batch utterance other than the primary.
pub fn pick_sources(
    batch_len: usize,
    primary: usize,
    noise_pool_len: usize,
    n: usize,
    spec: &MixSpec,
    rng: &mut Rng,
) -> Result<Vec<ExtraChoice>> {
    if batch_len < spec.k {
        return Err(Error::BatchTooSmall {
            batch: batch_len,
            k: spec.k,
        });
    }
    if primary >= batch_len {
        return Err(Error::invalid("primary index outside batch"));
    }
    let is_noise: Vec<bool> = (0..n)
        .map(|_| noise_pool_len > 0 && rng.random::<f64>() < spec.p_noise)
        .collect();
    let n_speech = is_noise.iter().filter(|&&b| !b).count();
    let others: Vec<usize> = sample(rng, batch_len - 1, n_speech)
        .into_iter()
        .map(|i| if i >= primary { i + 1 } else { i })
        .collect();
    let mut speech = others.into_iter();
    Ok(is_noise
        .into_iter()
        .map(|noise| {
            if noise {
                ExtraChoice::Noise(rng.random_range(0..noise_pool_len))
            } else {
                ExtraChoice::Speech(speech.next().expect("sampled enough"))
            }
        })
        .collect())
}

/// Draws `(r_l, r_e, o)` for an extra mixed onto a primary of `primary_len` samples.
pub fn draw_extra(choice: ExtraChoice, primary_len: usize, spec: &MixSpec, rng: &mut Rng) -> ExtraDraw {
    let (l0, l1) = spec.r_l_range;
    let r_l = if l1 > l0 { rng.random_range(l0..=l1) } else { l0 };
    let (e0, e1) = spec.r_e_range;
    let r_e = if e1 > e0 {
        (rng.random_range(e0.ln()..=e1.ln())).exp()
    } else {
        e0
    };
    let max_off = (spec.max_offset_frac * primary_len as f64).floor() as usize;
    let raw = if max_off > 0 { rng.random_range(0..=max_off) } else { 0 };
    ExtraDraw {
        choice,
        r_l,
        r_e,
        offset: raw / spec.hop * spec.hop,
    }
}

/// Chunk length for a length ratio: whole source at `r_l >= 1`, otherwise
/// `ceil(r_l * len)` rounded up to a hop multiple and capped at the longest
/// hop multiple that fits.
pub fn chunk_len(r_l: f64, len: usize, hop: usize) -> usize {
    if r_l >= 1.0 {
        return len;
    }
    let want = (r_l * len as f64).ceil() as usize;
    let rounded = want.div_ceil(hop) * hop;
    let cap = len / hop * hop;
    if cap == 0 {
        len
    } else {
        rounded.clamp(hop, cap)
    }
}

/// Takes a hop-aligned random chunk of `extra`, scales it so its energy is
/// `r_e * energy(primary)`, and places it at `offset`.
pub fn chunk_scale_shift(
    extra: &[f64],
    primary: &[f64],
    r_l: f64,
    r_e: f64,
    offset: usize,
    hop: usize,
    rng: &mut Rng,
) -> Result<Positioned> {
    if !(r_l > 0.0 && r_l <= 1.0) || !(r_e > 0.0) {
        return Err(Error::invalid(format!("r_l={r_l}, r_e={r_e}")));
    }
    if hop == 0 || !offset.is_multiple_of(hop) {
        return Err(Error::invalid(format!("offset {offset} is not a multiple of hop {hop}")));
    }
    let len = chunk_len(r_l, extra.len(), hop);
    let slots = (extra.len() - len) / hop;
    let e_primary = energy(primary)?;
    for _ in 0..CHUNK_ATTEMPTS {
        let start = if slots > 0 { rng.random_range(0..=slots) * hop } else { 0 };
        let chunk = &extra[start..start + len];
        let e_chunk = energy(chunk)?;
        if e_chunk < MIN_CHUNK_ENERGY {
            continue;
        }
        let scale = (r_e * e_primary / e_chunk).sqrt();
        return Ok(Positioned {
            samples: chunk.iter().map(|v| v * scale).collect(),
            offset,
            chunk_start: start,
            scale,
        });
    }
    Err(Error::SilentChunk(CHUNK_ATTEMPTS))
}

/// An extra ready to be summed, with its unit stream when it is speech.
#[derive(Clone, Debug)]
pub struct PlacedExtra {
    pub draw: ExtraDraw,
    pub source: String,
    pub positioned: Positioned,
    /// Units of the chunk, already cut from the source's units.
    pub units: Option<Vec<u32>>,
    pub transcript: Option<String>,
}

/// Sums the primary and the extras and builds the K SIL-padded target streams.
pub fn mix(
    primary_id: &str,
    primary: &Waveform,
    primary_units: &UnitSequence,
    primary_transcript: Option<&str>,
    extras: &[PlacedExtra],
    k: usize,
    window: usize,
    hop: usize,
) -> Result<MixtureSample> {
    if extras.len() >= k {
        return Err(Error::invalid(format!("{} extras for K={k}", extras.len())));
    }
    let sil = primary_units.sil;
    let expected = frame_count(primary.len(), window, hop);
    if primary_units.len() != expected {
        return Err(Error::shape(
            "mix",
            format!("primary has {} units for {expected} frames", primary_units.len()),
        ));
    }
    let total = extras
        .iter()
        .map(|e| e.positioned.end())
        .chain(std::iter::once(primary.len()))
        .max()
        .unwrap();

    // Fixed summation order: primary, then extras sorted by origin and placement.
    let mut order: Vec<usize> = (0..extras.len()).collect();
    order.sort_by(|&a, &b| {
        let ka = (extras[a].draw.choice, extras[a].positioned.offset, extras[a].positioned.chunk_start);
        let kb = (extras[b].draw.choice, extras[b].positioned.offset, extras[b].positioned.chunk_start);
        ka.cmp(&kb)
    });
    let mut y = vec![0.0; total];
    y[..primary.len()].copy_from_slice(primary.samples());
    for &i in &order {
        let p = &extras[i].positioned;
        for (o, v) in y[p.offset..p.end()].iter_mut().zip(&p.samples) {
            *o += v;
        }
    }
    let clipped = y.iter().any(|v| v.abs() > 1.0);

    let t = frame_count(total, window, hop);
    let mut targets = Vec::with_capacity(k);
    let mut streams = Vec::with_capacity(k);
    let mut first = primary_units.units.clone();
    first.resize(t, sil);
    targets.push(UnitSequence::new(first, sil));
    streams.push(StreamKind::Primary);

    let mut records = Vec::with_capacity(extras.len());
    for e in extras {
        let p = &e.positioned;
        match &e.units {
            Some(u) if !e.draw.is_noise() => {
                let lead = p.offset / hop;
                let mut s = vec![sil; t];
                if lead + u.len() > t {
                    return Err(Error::shape("mix", "extra units overrun the mixture"));
                }
                s[lead..lead + u.len()].copy_from_slice(u);
                targets.push(UnitSequence::new(s, sil));
                streams.push(StreamKind::ExtraSpeech);
            }
            _ => {
                targets.push(UnitSequence::silent(t, sil));
                streams.push(StreamKind::Noise);
            }
        }
        records.push(ExtraRecord {
            source: e.source.clone(),
            is_noise: e.draw.is_noise(),
            r_l: e.draw.r_l,
            r_e: e.draw.r_e,
            offset: p.offset,
            chunk_start: p.chunk_start,
            chunk_len: p.samples.len(),
            scale: p.scale,
        });
    }
    while targets.len() < k {
        targets.push(UnitSequence::silent(t, sil));
        streams.push(StreamKind::Silent);
    }

    let transcripts = primary_transcript.and_then(|first| {
        let mut out = vec![first.to_string()];
        for e in extras {
            if e.draw.is_noise() {
                out.push(String::new());
            } else {
                out.push(e.transcript.clone()?);
            }
        }
        out.resize(k, String::new());
        Some(out)
    });

    Ok(MixtureSample {
        y_mix: Waveform::new(y, primary.sample_rate())?,
        targets,
        record: MixRecord {
            primary: primary_id.to_string(),
            n: extras.len(),
            extras: records,
            streams,
            clipped,
            n_samples: total,
        },
        transcripts,
    })
}

fn place(
    draw: ExtraDraw,
    primary: &Utterance,
    batch: &[Utterance],
    noise_pool: &[Waveform],
    spec: &MixSpec,
    rng: &mut Rng,
) -> Result<PlacedExtra> {
    match draw.choice {
        ExtraChoice::Speech(i) => {
            let u = &batch[i];
            let p = chunk_scale_shift(
                u.wave.samples(),
                primary.wave.samples(),
                draw.r_l,
                draw.r_e,
                draw.offset,
                spec.hop,
                rng,
            )?;
            let first = p.chunk_start / spec.hop;
            let n = frame_count(p.samples.len(), spec.window, spec.hop);
            if first + n > u.units.len() {
                return Err(Error::shape(
                    "place",
                    format!("utterance `{}` has {} units, chunk needs {}", u.id, u.units.len(), first + n),
                ));
            }
            let whole = p.samples.len() == u.wave.len();
            Ok(PlacedExtra {
                draw,
                source: u.id.clone(),
                units: Some(u.units.units[first..first + n].to_vec()),
                transcript: if whole { u.transcript.clone() } else { None },
                positioned: p,
            })
        }
        ExtraChoice::Noise(j) => {
            let p = chunk_scale_shift(
                noise_pool[j].samples(),
                primary.wave.samples(),
                draw.r_l,
                draw.r_e,
                draw.offset,
                spec.hop,
                rng,
            )?;
            Ok(PlacedExtra {
                draw,
                source: format!("noise:{j}"),
                units: None,
                transcript: None,
                positioned: p,
            })
        }
    }
}

/// Draws `n`, the extras and their placement for one primary.
pub fn draw_sources(
    batch_len: usize,
    primary: usize,
    primary_len: usize,
    noise_pool_len: usize,
    spec: &MixSpec,
    rng: &mut Rng,
) -> Result<SourceDraw> {
    let n = sample_num_extra(spec, rng)?;
    let choices = pick_sources(batch_len, primary, noise_pool_len, n, spec, rng)?;
    let extras = choices
        .into_iter()
        .map(|c| draw_extra(c, primary_len, spec, rng))
        .collect();
    Ok(SourceDraw { n, extras })
}

/// Full simulation of one mixture around `batch[primary]`.
pub fn simulate(
    batch: &[Utterance],
    primary: usize,
    noise_pool: &[Waveform],
    spec: &MixSpec,
    rng: &mut Rng,
) -> Result<MixtureSample> {
    spec.validate()?;
    let p = batch.get(primary).ok_or_else(|| Error::invalid("primary index outside batch"))?;
    let draw = draw_sources(batch.len(), primary, p.wave.len(), noise_pool.len(), spec, rng)?;
    let placed = draw
        .extras
        .iter()
        .map(|&d| place(d, p, batch, noise_pool, spec, rng))
        .collect::<Result<Vec<_>>>()?;
    mix(
        &p.id,
        &p.wave,
        &p.units,
        p.transcript.as_deref(),
        &placed,
        spec.k,
        spec.window,
        spec.hop,
    )
}

/// Fully overlapped mixture of whole utterances starting together, the
/// shorter ones right-padded (fine-tuning and diarization corpora).
/// `members[0]` is the energy reference.
pub fn simulate_full_overlap(
    batch: &[Utterance],
    members: &[usize],
    k: usize,
    r_e_range: (f64, f64),
    window: usize,
    hop: usize,
    rng: &mut Rng,
) -> Result<MixtureSample> {
    if members.is_empty() || members.len() > k {
        return Err(Error::invalid(format!("{} sources for K={k}", members.len())));
    }
    let spec = MixSpec {
        k,
        p_mix: 1.0,
        p_noise: 0.0,
        r_l_range: (1.0, 1.0),
        r_e_range,
        max_offset_frac: 0.0,
        window,
        hop,
        seed: 0,
    };
    spec.validate()?;
    let p = &batch[members[0]];
    let placed = members[1..]
        .iter()
        .map(|&i| {
            let draw = draw_extra(ExtraChoice::Speech(i), p.wave.len(), &spec, rng);
            place(draw, p, batch, &[], &spec, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    mix(
        &p.id,
        &p.wave,
        &p.units,
        p.transcript.as_deref(),
        &placed,
        k,
        window,
        hop,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
}

/// Zero-mean noise peak-normalised to 0.95. Pink noise is white Gaussian
/// noise shaped by `1/sqrt(f)` in the frequency domain.
pub fn synth_noise(kind: NoiseKind, length: usize, sample_rate: u32, rng: &mut Rng) -> Result<Waveform> {
    if length == 0 {
        return Err(Error::EmptySegment);
    }
    let white: Vec<f64> = (0..length).map(|_| StandardNormal.sample(rng)).collect();
    let mut x = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            let mut planner = FftPlanner::<f64>::new();
            let mut buf: Vec<Complex<f64>> = white.iter().map(|&v| Complex::new(v, 0.0)).collect();
            planner.plan_fft_forward(length).process(&mut buf);
            for (i, c) in buf.iter_mut().enumerate() {
                let bin = i.min(length - i);
                *c = if bin == 0 {
                    Complex::new(0.0, 0.0)
                } else {
                    *c / (bin as f64).sqrt()
                };
            }
            planner.plan_fft_inverse(length).process(&mut buf);
            buf.iter().map(|c| c.re / length as f64).collect()
        }
    };
    let mean = x.iter().sum::<f64>() / length as f64;
    for v in &mut x {
        *v -= mean;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut x {
            *v *= 0.95 / peak;
        }
    }
    Waveform::new(x, sample_rate)
}

/// Sine helper used by tests and the synthetic corpus.
pub fn tone(hz: f64, amp: f64, start: usize, len: usize, sample_rate: u32) -> impl Iterator<Item = f64> {
    (start..start + len).map(move |i| amp * (2.0 * PI * hz * i as f64 / sample_rate as f64).sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;

    fn utt(id: &str, len: usize, hz: f64, sil: u32) -> Utterance {
        let wave = Waveform::new(tone(hz, 0.5, 0, len, 16_000).collect(), 16_000).unwrap();
        let t = frame_count(len, WINDOW, HOP);
        Utterance {
            id: id.into(),
            wave,
            units: UnitSequence::new((0..t as u32).map(|i| i % sil).collect(), sil),
            transcript: Some(format!("{id} words")),
        }
    }

    #[test]
    fn num_extra_distribution_examples() {
        let spec = MixSpec {
            k: 5,
            p_mix: 0.6,
            ..Default::default()
        };
        let mut r = keyed(1, &[]);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_num_extra(&spec, &mut r).unwrap()] += 1;
        }
        let want = [0.4, 0.15, 0.15, 0.15, 0.15];
        for (c, w) in counts.iter().zip(want) {
            assert!((*c as f64 / n as f64 - w).abs() < 0.01);
        }
        let k3 = MixSpec {
            k: 3,
            p_mix: 1.0,
            ..Default::default()
        };
        for _ in 0..1000 {
            let v = sample_num_extra(&k3, &mut r).unwrap();
            assert!(v == 1 || v == 2);
        }
        let k1 = MixSpec {
            k: 1,
            p_mix: 0.5,
            ..Default::default()
        };
        assert!(sample_num_extra(&k1, &mut r).is_err());
        let k1 = MixSpec {
            k: 1,
            p_mix: 0.0,
            ..Default::default()
        };
        assert_eq!(sample_num_extra(&k1, &mut r).unwrap(), 0);
    }

    #[test]
    fn pick_sources_rules() {
        let mut r = keyed(2, &[]);
        let mut spec = MixSpec {
            k: 4,
            p_noise: 0.0,
            ..Default::default()
        };
        for _ in 0..200 {
            let c = pick_sources(6, 2, 3, 3, &spec, &mut r).unwrap();
            let mut ids: Vec<usize> = c
                .iter()
                .map(|c| match c {
                    ExtraChoice::Speech(i) => *i,
                    ExtraChoice::Noise(_) => panic!("no noise expected"),
                })
                .collect();
            assert!(!ids.contains(&2));
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 3);
        }
        spec.p_noise = 1.0;
        let c = pick_sources(6, 0, 3, 3, &spec, &mut r).unwrap();
        assert!(c.iter().all(|c| matches!(c, ExtraChoice::Noise(_))));
        assert!(matches!(
            pick_sources(3, 0, 3, 1, &spec, &mut r),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn caption_exemplar_chunk_scale_shift() {
        let mut r = keyed(3, &[]);
        let extra: Vec<f64> = tone(440.0, 0.3, 0, 12_800, 16_000).collect();
        let primary: Vec<f64> = tone(200.0, 0.6, 0, 16_000, 16_000).collect();
        let p = chunk_scale_shift(&extra, &primary, 0.75, 2.0, 640, 320, &mut r).unwrap();
        assert_eq!(p.samples.len(), 9600);
        assert_eq!(p.offset, 640);
        let ratio = energy(&p.samples).unwrap() / energy(&primary).unwrap();
        assert!((ratio / 2.0 - 1.0).abs() < 1e-6);
        assert_eq!(p.chunk_start % 320, 0);
    }

    #[test]
    fn unit_energy_ratio_on_identical_signals_is_unscaled() {
        let mut r = keyed(3, &[]);
        let x: Vec<f64> = tone(300.0, 0.4, 0, 6400, 16_000).collect();
        let p = chunk_scale_shift(&x, &x, 1.0, 1.0, 0, 320, &mut r).unwrap();
        assert!((p.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn silent_chunk_is_an_error() {
        let mut r = keyed(3, &[]);
        let x = vec![0.0; 6400];
        let y = vec![0.5; 6400];
        assert!(matches!(
            chunk_scale_shift(&x, &y, 0.5, 1.0, 0, 320, &mut r),
            Err(Error::SilentChunk(_))
        ));
        assert!(chunk_scale_shift(&y, &y, 0.5, 1.0, 100, 320, &mut r).is_err());
    }

    #[test]
    fn no_extras_leaves_primary_and_silent_streams() {
        let u = utt("a", 8000, 250.0, 16);
        let m = mix("a", &u.wave, &u.units, None, &[], 3, WINDOW, HOP).unwrap();
        assert_eq!(m.y_mix, u.wave);
        assert_eq!(m.targets[0], u.units);
        assert!(m.targets[1].is_all_sil() && m.targets[2].is_all_sil());
        assert_eq!(m.record.streams, vec![StreamKind::Primary, StreamKind::Silent, StreamKind::Silent]);
    }

    #[test]
    fn constant_sources_add_samplewise() {
        let sil = 4;
        let a = Waveform::new(vec![1.0; 3200], 16_000).unwrap();
        let ua = UnitSequence::new(vec![0; frame_count(3200, WINDOW, HOP)], sil);
        let mut r = keyed(0, &[]);
        let p = chunk_scale_shift(&[1.0; 3200], a.samples(), 1.0, 1.0, 0, HOP, &mut r).unwrap();
        let extra = PlacedExtra {
            draw: ExtraDraw {
                choice: ExtraChoice::Speech(1),
                r_l: 1.0,
                r_e: 1.0,
                offset: 0,
            },
            source: "b".into(),
            units: Some(vec![1; frame_count(3200, WINDOW, HOP)]),
            transcript: None,
            positioned: p,
        };
        let m = mix("a", &a, &ua, None, &[extra], 2, WINDOW, HOP).unwrap();
        assert!(m.y_mix.samples().iter().all(|&v| v == 2.0));
        assert!(m.record.clipped);
    }

    #[test]
    fn simulated_samples_keep_alignment_invariants() {
        let sil = 16;
        let batch: Vec<Utterance> = (0..6)
            .map(|i| utt(&format!("u{i}"), 9600 + 1600 * i, 150.0 + 100.0 * i as f64, sil))
            .collect();
        let mut noise_rng = keyed(9, &[]);
        let noise = vec![synth_noise(NoiseKind::White, 20_000, 16_000, &mut noise_rng).unwrap()];
        let spec = MixSpec {
            k: 5,
            p_mix: 0.6,
            p_noise: 0.3,
            ..Default::default()
        };
        for i in 0..300 {
            let mut r = keyed(7, &[i]);
            let m = simulate(&batch, (i % 6) as usize, &noise, &spec, &mut r).unwrap();
            let t = frame_count(m.y_mix.len(), WINDOW, HOP);
            assert_eq!(m.targets.len(), 5);
            assert!(m.targets.iter().all(|s| s.len() == t));
            assert!(!m.targets.iter().all(UnitSequence::is_all_sil));
            for (s, kind) in m.targets.iter().zip(&m.record.streams) {
                if matches!(kind, StreamKind::Noise | StreamKind::Silent) {
                    assert!(s.is_all_sil());
                }
            }
            for (e, s) in m.record.extras.iter().zip(&m.targets[1..]) {
                if !e.is_noise {
                    let lead = s.units.iter().take_while(|&&u| u == sil).count();
                    // Leading SIL run is at least the offset; the chunk itself never starts with SIL.
                    assert_eq!(lead, e.offset / HOP);
                }
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let batch: Vec<Utterance> = (0..4).map(|i| utt(&format!("u{i}"), 8000, 200.0 + 50.0 * i as f64, 16)).collect();
        let spec = MixSpec {
            k: 3,
            ..Default::default()
        };
        let a = simulate(&batch, 1, &[], &spec, &mut keyed(5, &[42])).unwrap();
        let b = simulate(&batch, 1, &[], &spec, &mut keyed(5, &[42])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_overlap_keeps_transcripts() {
        let batch: Vec<Utterance> = (0..3).map(|i| utt(&format!("u{i}"), 6400 + 3200 * i, 200.0, 16)).collect();
        let m = simulate_full_overlap(&batch, &[0, 2], 2, (0.5, 2.0), WINDOW, HOP, &mut keyed(1, &[])).unwrap();
        assert_eq!(
            m.transcripts.unwrap(),
            vec!["u0 words".to_string(), "u2 words".to_string()]
        );
        assert_eq!(m.y_mix.len(), 12_800);
        assert_eq!(m.record.extras[0].offset, 0);
    }

    #[test]
    fn white_noise_is_zero_mean_and_deterministic() {
        let a = synth_noise(NoiseKind::White, 16_000, 16_000, &mut keyed(1, &[])).unwrap();
        let b = synth_noise(NoiseKind::White, 16_000, 16_000, &mut keyed(1, &[])).unwrap();
        assert_eq!(a, b);
        let mean = a.samples().iter().sum::<f64>() / 16_000.0;
        assert!(mean.abs() < 0.01);
        assert!((a.peak() - 0.95).abs() < 1e-12);
    }
}
