//! CTC decoding without a language model.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::objectives::ctc::{decode_ids, BLANK};
use crate::tensor::{log_add, Tensor};

pub const MAX_BEAM: usize = 16;

/// Frame-wise argmax (lowest id on ties) with repeats collapsed and blanks removed.
pub fn greedy_ids(log_post: &Tensor) -> Result<Vec<usize>> {
    let (t, _) = log_post.dims2()?;
    let mut out = Vec::new();
    let mut prev = None;
    for i in 0..t {
        let row = log_post.row(i);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    Ok(out)
}

pub fn greedy_ctc_decode(log_post: &Tensor) -> Result<String> {
    Ok(decode_ids(&greedy_ids(log_post)?))
}

/// Prefix beam search over `T x V` log-posteriors.
pub fn prefix_beam_ids(log_post: &Tensor, width: usize) -> Result<Vec<usize>> {
    if width == 0 || width > MAX_BEAM {
        return Err(Error::invalid(format!("beam width {width} outside 1..={MAX_BEAM}")));
    }
    let (t_len, v) = log_post.dims2()?;
    let ninf = f64::NEG_INFINITY;
    // prefix -> (log p ending in blank, log p ending in non-blank)
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for t in 0..t_len {
        let row = log_post.row(t);
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, pb, pnb) in &beams {
            let total = log_add(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = log_add(e.0, total + row[BLANK]);
            if let Some(&last) = prefix.last() {
                // Repeating the last symbol without a blank stays on the same prefix.
                e.1 = log_add(e.1, pnb + row[last]);
            }
            for c in 1..v {
                let mut ext = prefix.clone();
                ext.push(c);
                let add = if prefix.last() == Some(&c) { pb + row[c] } else { total + row[c] };
                let e = next.entry(ext).or_insert((ninf, ninf));
                e.1 = log_add(e.1, add);
            }
        }
        let mut cand: Vec<(Vec<usize>, f64, f64)> = next.into_iter().map(|(p, (b, nb))| (p, b, nb)).collect();
        cand.sort_by(|a, b| {
            let sa = log_add(a.1, a.2);
            let sb = log_add(b.1, b.2);
            sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
        });
        cand.truncate(width);
        beams = cand;
    }
    Ok(beams.into_iter().next().map(|b| b.0).unwrap_or_default())
}

pub fn prefix_beam_decode(log_post: &Tensor, width: usize) -> Result<String> {
    Ok(decode_ids(&prefix_beam_ids(log_post, width)?))
}
