//! WER, PIT-WER and frame-level DER.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::pit::{pit_assign, PairLossMatrix, PitMethod};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word edit distance over `max(1, reference words)`.
pub fn wer(hyp: &str, reference: &str) -> f64 {
    let r = words(reference);
    edit_distance(&words(hyp), &r) as f64 / r.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitWer {
    pub wer: f64,
    /// Hypothesis stream `j` is scored against reference `pi[j]`.
    pub pi: Vec<usize>,
    pub errors: usize,
    pub ref_words: usize,
    pub per_stream: Vec<usize>,
}

/// WER under the stream permutation minimising total edits.
pub fn pit_wer(hyps: &[String], refs: &[String]) -> Result<PitWer> {
    let k = hyps.len();
    if refs.len() != k || k == 0 {
        return Err(Error::shape("pit_wer", format!("{k} hypotheses, {} references", refs.len())));
    }
    let hw: Vec<Vec<&str>> = hyps.iter().map(|h| words(h)).collect();
    let rw: Vec<Vec<&str>> = refs.iter().map(|r| words(r)).collect();
    let mut values = Vec::with_capacity(k * k);
    for h in &hw {
        for r in &rw {
            values.push(edit_distance(h, r) as f64);
        }
    }
    let m = PairLossMatrix::new(k, values)?;
    let a = pit_assign(&m, PitMethod::Auto)?;
    let per_stream: Vec<usize> = a.pi.iter().enumerate().map(|(j, &i)| m.get(j, i) as usize).collect();
    let errors = per_stream.iter().sum();
    let ref_words: usize = rw.iter().map(Vec::len).sum();
    Ok(PitWer {
        wer: errors as f64 / ref_words.max(1) as f64,
        pi: a.pi,
        errors,
        ref_words,
        per_stream,
    })
}

/// `T x S` speaker activity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityMatrix {
    pub frames: usize,
    pub speakers: usize,
    pub active: Vec<bool>,
}

impl ActivityMatrix {
    pub fn new(frames: usize, speakers: usize, active: Vec<bool>) -> Result<Self> {
        if active.len() != frames * speakers {
            return Err(Error::shape("ActivityMatrix", format!("{} cells for {frames}x{speakers}", active.len())));
        }
        Ok(Self {
            frames,
            speakers,
            active,
        })
    }

    /// Activity per speaker given as lists of active frames.
    pub fn from_frames(frames: usize, per_speaker: &[&[usize]]) -> Result<Self> {
        let s = per_speaker.len();
        let mut active = vec![false; frames * s];
        for (j, idx) in per_speaker.iter().enumerate() {
            for &t in *idx {
                if t >= frames {
                    return Err(Error::invalid(format!("frame {t} outside {frames}")));
                }
                active[t * s + j] = true;
            }
        }
        Self::new(frames, s, active)
    }

    /// Thresholds `T x S` probabilities at 0.5.
    pub fn from_probs(probs: &crate::tensor::Tensor) -> Result<Self> {
        let (t, s) = probs.dims2()?;
        Self::new(t, s, probs.data().iter().map(|&p| p >= 0.5).collect())
    }

    pub fn get(&self, t: usize, s: usize) -> bool {
        self.active[t * self.speakers + s]
    }

    pub fn count_at(&self, t: usize) -> usize {
        (0..self.speakers).filter(|&s| self.get(t, s)).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.active.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub der: f64,
    pub miss: usize,
    pub false_alarm: usize,
    pub confusion: usize,
    pub ref_speech: usize,
    /// Hypothesis speaker `j` is mapped to reference speaker `pi[j]`.
    pub pi: Vec<usize>,
}

/// DER components under a fixed speaker mapping.
pub fn der_with_mapping(hyp: &ActivityMatrix, reference: &ActivityMatrix, pi: &[usize]) -> Result<DerReport> {
    if hyp.frames != reference.frames || hyp.speakers != reference.speakers || pi.len() != hyp.speakers {
        return Err(Error::shape("der", "hypothesis and reference differ in shape"));
    }
    let (mut miss, mut fa, mut conf, mut total) = (0, 0, 0, 0);
    for t in 0..reference.frames {
        let nr = reference.count_at(t);
        let nh = hyp.count_at(t);
        let correct = (0..hyp.speakers)
            .filter(|&j| hyp.get(t, j) && reference.get(t, pi[j]))
            .count();
        miss += nr.saturating_sub(nh);
        fa += nh.saturating_sub(nr);
        conf += nr.min(nh) - correct;
        total += nr;
    }
    if total == 0 {
        return Err(Error::invalid("reference contains no speech"));
    }
    Ok(DerReport {
        der: (miss + fa + conf) as f64 / total as f64,
        miss,
        false_alarm: fa,
        confusion: conf,
        ref_speech: total,
        pi: pi.to_vec(),
    })
}

/// Frame-level DER with no collar under the speaker mapping that minimises it.
pub fn der(hyp: &ActivityMatrix, reference: &ActivityMatrix) -> Result<DerReport> {
    if hyp.speakers != reference.speakers {
        return Err(Error::shape("der", "speaker counts differ"));
    }
    let s = hyp.speakers;
    // Minimising DER over mappings is maximising matched speaker-frames.
    let mut values = Vec::with_capacity(s * s);
    for j in 0..s {
        for i in 0..s {
            let overlap = (0..hyp.frames.min(reference.frames))
                .filter(|&t| hyp.get(t, j) && reference.get(t, i))
                .count();
            values.push(-(overlap as f64));
        }
    }
    let a = pit_assign(&PairLossMatrix::new(s, values)?, PitMethod::Auto)?;
    der_with_mapping(hyp, reference, &a.pi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c"), 0.0);
        assert!((wer("a x c", "a b c") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("", "a"), 1.0);
        assert_eq!(wer("x y", ""), 2.0);
        assert_eq!(edit_distance(&["a", "b"], &["b"]), 1);
    }

    #[test]
    fn pit_wer_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let r = pit_wer(&s(&["c", "a b"]), &s(&["a b", "c"])).unwrap();
        assert_eq!(r.wer, 0.0);
        assert_eq!(r.pi, vec![1, 0]);
        let r = pit_wer(&s(&["a x", ""]), &s(&["", "a b"])).unwrap();
        assert_eq!((r.errors, r.ref_words), (1, 2));
    }

    #[test]
    fn der_examples() {
        let reference = ActivityMatrix::from_frames(4, &[&[1, 2], &[3]]).unwrap();
        let hyp = ActivityMatrix::from_frames(4, &[&[1], &[3]]).unwrap();
        let r = der(&hyp, &reference).unwrap();
        assert_eq!((r.miss, r.false_alarm, r.confusion, r.ref_speech), (1, 0, 0, 3));
        assert!((r.der - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(der(&reference, &reference).unwrap().der, 0.0);
        let silent = ActivityMatrix::from_frames(4, &[&[], &[]]).unwrap();
        assert_eq!(der(&silent, &reference).unwrap().der, 1.0);
        assert!(der(&reference, &silent).is_err());

        let swapped = ActivityMatrix::from_frames(4, &[&[3], &[1, 2]]).unwrap();
        let r = der(&swapped, &reference).unwrap();
        assert_eq!((r.der, r.pi.clone()), (0.0, vec![1, 0]));
        // Fixed identity mapping turns the swap into confusion.
        let c = der_with_mapping(&swapped, &reference, &[0, 1]).unwrap();
        assert_eq!(c.confusion, 3);
    }
}
