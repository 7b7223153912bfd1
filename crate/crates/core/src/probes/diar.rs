//! Speaker-activity probe on frozen encoder layers: softmax-weighted layer
//! sum, one LSTM layer, per-speaker sigmoid outputs, PIT binary cross-entropy.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::labels::UnitSequence;
use crate::objectives::pit::{pit_assign, PairLossMatrix, PitMethod};
use crate::objectives::PitLoss;
use crate::optim::ParamStore;
use crate::probes::metrics::ActivityMatrix;
use crate::rng;
use crate::tensor::Tensor;

pub const PROB_CLIP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiarProbeConfig {
    /// Encoder layers being combined.
    pub layers: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub speakers: usize,
}

impl DiarProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.input_dim == 0 || self.hidden == 0 || self.speakers == 0 {
            return Err(Error::invalid("diarization probe sizes must be positive"));
        }
        Ok(())
    }
}

pub fn init_probe(cfg: &DiarProbeConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, h, s) = (cfg.input_dim, cfg.hidden, cfg.speakers);
    let mut store = ParamStore::new();
    let mut r = rng::keyed(seed, &[rng::domain::INIT, 0x5d]);
    let mut normal = |rows: usize, cols: usize| {
        let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("std");
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut r)).collect()).expect("shape")
    };
    store.insert("probe.layer_w", Tensor::zeros(&[1, cfg.layers]));
    store.insert("probe.lstm.wx", normal(d, 4 * h));
    store.insert("probe.lstm.wh", normal(h, 4 * h));
    let mut b = vec![0.0; 4 * h];
    // Forget-gate bias starts at 1.
    b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
    store.insert("probe.lstm.b", Tensor::vector(b));
    store.insert("probe.out.w", normal(h, s));
    store.insert("probe.out.b", Tensor::zeros(&[s]));
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct DiarForward {
    /// `1 x L` normalised layer weights.
    pub weights: Var,
    /// `T x d` weighted layer sum.
    pub input: Var,
    /// `T x S` activity probabilities.
    pub probs: Var,
}

/// Probe pass over `L` layer matrices (`T x d`), used as constants.
pub fn diar_probe_forward(g: &mut Graph, store: &ParamStore, cfg: &DiarProbeConfig, layers: &[Tensor]) -> Result<DiarForward> {
    let vars: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
    diar_probe_forward_vars(g, store, cfg, &vars)
}

/// Probe pass over layers already in the graph, so gradients can reach the
/// encoder when it is not frozen.
pub fn diar_probe_forward_vars(g: &mut Graph, store: &ParamStore, cfg: &DiarProbeConfig, layers: &[Var]) -> Result<DiarForward> {
    if layers.len() != cfg.layers {
        return Err(Error::shape("diar_probe", format!("{} layers, expected {}", layers.len(), cfg.layers)));
    }
    let shape = g.value(layers[0]).shape().to_vec();
    let (t_len, d) = g.value(layers[0]).dims2()?;
    if d != cfg.input_dim || layers.iter().any(|&l| g.value(l).shape() != shape.as_slice()) {
        return Err(Error::shape("diar_probe", "layer shapes differ"));
    }
    let logits = g.param(store, "probe.layer_w")?;
    let weights = g.softmax(logits)?;
    let mut input = None;
    for (l, &c) in layers.iter().enumerate() {
        let w = g.element(weights, l)?;
        let term = g.scale_by(c, w)?;
        input = Some(match input {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let input = input.expect("at least one layer");

    let h_dim = cfg.hidden;
    let wx = g.param(store, "probe.lstm.wx")?;
    let wh = g.param(store, "probe.lstm.wh")?;
    let b = g.param(store, "probe.lstm.b")?;
    let xw = g.matmul(input, wx)?;
    let xw = g.add_row(xw, b)?;
    let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
    let mut c = g.constant(Tensor::zeros(&[1, h_dim]));
    let mut hs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = g.slice_rows(xw, t, t + 1)?;
        let rec = g.matmul(h, wh)?;
        let z = g.add(x_t, rec)?;
        let zi = g.slice_cols(z, 0, h_dim)?;
        let zf = g.slice_cols(z, h_dim, 2 * h_dim)?;
        let zg = g.slice_cols(z, 2 * h_dim, 3 * h_dim)?;
        let zo = g.slice_cols(z, 3 * h_dim, 4 * h_dim)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        h = g.mul(o, tc)?;
        hs.push(h);
    }
    let hseq = g.concat_rows(&hs)?;
    let w = g.param(store, "probe.out.w")?;
    let bo = g.param(store, "probe.out.b")?;
    let z = g.matmul(hseq, w)?;
    let z = g.add_row(z, bo)?;
    let probs = g.sigmoid(z)?;
    Ok(DiarForward { weights, input, probs })
}

fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Entry `(j, i)`: mean BCE of hypothesis speaker `j` against reference speaker `i`.
pub fn bce_matrix(probs: &Tensor, reference: &ActivityMatrix) -> Result<PairLossMatrix> {
    let (t, s) = probs.dims2()?;
    if t != reference.frames || s != reference.speakers {
        return Err(Error::shape("pit_bce", format!("{t}x{s} vs {}x{}", reference.frames, reference.speakers)));
    }
    let mut values = Vec::with_capacity(s * s);
    for j in 0..s {
        for i in 0..s {
            let total: f64 = (0..t).map(|f| bce(probs.data()[f * s + j], reference.get(f, i))).sum();
            values.push(total / t as f64);
        }
    }
    PairLossMatrix::new(s, values)
}

/// PIT binary cross-entropy on clipped probabilities.
pub fn pit_bce_loss(g: &mut Graph, probs: Var, reference: &ActivityMatrix, method: PitMethod) -> Result<PitLoss> {
    let matrix = bce_matrix(g.value(probs), reference)?;
    let assignment = pit_assign(&matrix, method)?;
    let (t, s) = (reference.frames, reference.speakers);
    let clipped = g.clamp(probs, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let log_p = g.log(clipped)?;
    let neg = g.scale(clipped, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_q = g.log(one_minus)?;
    let w = -1.0 / (t * s) as f64;
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (j, &i) in assignment.pi.iter().enumerate() {
        for f in 0..t {
            if reference.get(f, i) {
                on.push((f * s + j, w));
            } else {
                off.push((f * s + j, w));
            }
        }
    }
    let a = g.pick_sum(log_p, on)?;
    let b = g.pick_sum(log_q, off)?;
    let loss = g.add(a, b)?;
    Ok(PitLoss {
        loss,
        assignment,
        matrix,
    })
}

/// Reference activity: stream `i` is active at `t` iff its unit is not SIL.
pub fn activity_from_targets(targets: &[UnitSequence]) -> Result<ActivityMatrix> {
    let s = targets.len();
    let t = targets.first().map(UnitSequence::len).unwrap_or(0);
    if targets.iter().any(|z| z.len() != t) {
        return Err(Error::shape("activity_from_targets", "streams differ in length"));
    }
    let mut active = Vec::with_capacity(t * s);
    for f in 0..t {
        for z in targets {
            active.push(z.units[f] != z.sil);
        }
    }
    ActivityMatrix::new(t, s, active)
}

/// Loss and probe gradients for one utterance.
pub fn probe_loss_grad(
    store: &ParamStore,
    cfg: &DiarProbeConfig,
    layers: &[Tensor],
    reference: &ActivityMatrix,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let fwd = diar_probe_forward(&mut g, store, cfg, layers)?;
    let out = pit_bce_loss(&mut g, fwd.probs, reference, PitMethod::Auto)?;
    Ok((g.scalar(out.loss), g.backward(out.loss)?))
}

/// Activity probabilities without gradient bookkeeping.
pub fn probe_predict(store: &ParamStore, cfg: &DiarProbeConfig, layers: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let fwd = diar_probe_forward(&mut g, store, cfg, layers)?;
    Ok(g.value(fwd.probs).clone())
}
