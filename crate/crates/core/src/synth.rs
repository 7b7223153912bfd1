//! Synthetic speech-like corpus: letters are steady two-tone "phones",
//! words are letter strings from a small lexicon spoken in a fixed cyclic
//! order, and speakers differ by gain and a low pitch component. Every tone
//! is a multiple of 50 Hz, so each 320-sample hop holds whole periods and
//! frames inside one phone are identical.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, HOP, SAMPLE_RATE, WINDOW};
use crate::error::{Error, Result};
use crate::rng;

pub const LEXICON: [&str; 6] = ["bag", "dice", "elf", "jack", "hid", "leg"];

/// Tone pair for a letter `a`..`l`.
pub fn letter_tones(c: char) -> Option<(f64, f64)> {
    let i = (c as u32).checked_sub('a' as u32)? as usize;
    if i >= 12 {
        return None;
    }
    Some((300.0 + 150.0 * (i % 4) as f64, 1400.0 + 600.0 * (i / 4) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub phone_frames: usize,
    pub pause_frames: usize,
    pub n_speakers: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_utterances: 40,
            min_words: 6,
            max_words: 9,
            phone_frames: 5,
            pause_frames: 4,
            n_speakers: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: usize,
    pub wave: Waveform,
    pub transcript: String,
    /// Letter index per frame, `None` in pauses.
    pub frame_letters: Vec<Option<u8>>,
}

fn speaker_voice(s: usize) -> (f64, f64) {
    let gain = 0.25 + 0.1 * (s % 4) as f64;
    let f0 = 100.0 + 50.0 * (s % 3) as f64;
    (gain, f0)
}

/// Samples for `frames` hops of one letter (or silence), phase-continuous
/// by construction since every tone completes whole periods per hop.
fn render(letter: Option<char>, frames: usize, speaker: usize, out: &mut Vec<f64>) {
    let (gain, f0) = speaker_voice(speaker);
    let n = frames * HOP;
    let Some((f1, f2)) = letter.and_then(letter_tones) else {
        out.extend(std::iter::repeat_n(0.0, n));
        return;
    };
    let sr = SAMPLE_RATE as f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let v = 0.6 * (2.0 * PI * f1 * t).sin() + 0.4 * (2.0 * PI * f2 * t).sin() + 0.2 * (2.0 * PI * f0 * t).sin();
        out.push(gain * v);
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    if spec.n_utterances == 0 || spec.min_words == 0 || spec.min_words > spec.max_words || spec.phone_frames == 0 || spec.n_speakers == 0 {
        return Err(Error::invalid("synthetic corpus spec"));
    }
    let mut out = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let mut r = rng::keyed(spec.seed, &[rng::domain::CORPUS, u as u64]);
        let speaker = u % spec.n_speakers;
        let n_words = r.random_range(spec.min_words..=spec.max_words);
        let start = r.random_range(0..LEXICON.len());
        let words: Vec<&str> = (0..n_words).map(|w| LEXICON[(start + w) % LEXICON.len()]).collect();
        let mut samples = Vec::new();
        let mut frame_letters = Vec::new();
        render(None, spec.pause_frames, speaker, &mut samples);
        frame_letters.extend(std::iter::repeat_n(None, spec.pause_frames));
        for w in &words {
            for c in w.chars() {
                render(Some(c), spec.phone_frames, speaker, &mut samples);
                frame_letters.extend(std::iter::repeat_n(Some(c as u8 - b'a'), spec.phone_frames));
            }
            render(None, spec.pause_frames, speaker, &mut samples);
            frame_letters.extend(std::iter::repeat_n(None, spec.pause_frames));
        }
        // Pad so the frame count equals the number of rendered hops.
        samples.extend(std::iter::repeat_n(0.0, WINDOW - HOP));
        out.push(SynthUtterance {
            id: format!("syn{u:04}"),
            speaker,
            wave: Waveform::new(samples, SAMPLE_RATE)?,
            transcript: words.join(" "),
            frame_letters,
        });
    }
    Ok(out)
}

pub fn total_seconds(corpus: &[SynthUtterance]) -> f64 {
    corpus.iter().map(|u| u.wave.seconds()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::frame_count;

    #[test]
    fn letters_have_distinct_tones() {
        let mut seen: Vec<(f64, f64)> = ('a'..='l').map(|c| letter_tones(c).unwrap()).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 12);
        assert!(letter_tones('m').is_none());
        for w in LEXICON {
            assert!(w.chars().all(|c| letter_tones(c).is_some()));
        }
    }

    #[test]
    fn frames_line_up_with_letters() {
        let spec = SynthSpec {
            n_utterances: 5,
            ..Default::default()
        };
        let c = generate(&spec).unwrap();
        for u in &c {
            assert_eq!(frame_count(u.wave.len(), WINDOW, HOP), u.frame_letters.len());
            let letters: usize = u.transcript.split(' ').map(str::len).sum();
            assert_eq!(u.frame_letters.iter().flatten().count(), letters * spec.phone_frames);
        }
        assert_eq!(generate(&spec).unwrap(), c);
    }

    #[test]
    fn default_corpus_is_about_two_minutes() {
        let s = total_seconds(&generate(&SynthSpec::default()).unwrap());
        assert!((100.0..=140.0).contains(&s), "{s}");
    }
}
