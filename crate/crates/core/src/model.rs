//! Encoder: strided conv front end `f`, pre-LN transformer `g` with learned
//! positions, and `K` linear + log-softmax prediction heads.
//!
//! Parameter names:
//!
//! ```text
//! f.conv{i}.w  [kernel * c_in, c_out]   f.conv{i}.b  [c_out]
//! f.ln.g / f.ln.b  [c_last]             f.proj.w [c_last, d]  f.proj.b [d]
//! msk          [d]                      mask embedding
//! g.pos        [max_positions, d]
//! g.l{l}.ln1.{g,b}  g.l{l}.attn.{wq,wk,wv,wo} [d, d]  g.l{l}.attn.{bq,bv,bo} [d]
//! g.l{l}.ln2.{g,b}  g.l{l}.ffn.w1 [d, d*m]  g.l{l}.ffn.b1  g.l{l}.ffn.w2 [d*m, d]  g.l{l}.ffn.b2
//! g.ln_f.{g,b}
//! head{j}.w [d, vocab]  head{j}.b [vocab]
//! ```

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{apply_mask, MaskSet};
use crate::optim::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv: Vec<ConvLayer>,
    pub d: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Number of prediction streams.
    pub k: usize,
    /// Output classes per head (units plus SIL).
    pub vocab: usize,
    pub max_positions: usize,
    /// Standardise each waveform to zero mean and unit variance before `f`.
    pub normalize_input: bool,
}

pub fn default_conv(channels: usize) -> Vec<ConvLayer> {
    [(5, 5), (4, 4), (4, 4), (3, 2), (2, 2)]
        .into_iter()
        .map(|(kernel, stride)| ConvLayer {
            channels,
            kernel,
            stride,
        })
        .collect()
}

impl ModelConfig {
    /// Desk-scale default: width 64, four layers, four heads.
    pub fn small(k: usize, vocab: usize) -> Self {
        Self {
            conv: default_conv(32),
            d: 64,
            layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            k,
            vocab,
            max_positions: 1024,
            normalize_input: true,
        }
    }

    /// A model under 5k parameters for gradient checks.
    pub fn tiny(k: usize, vocab: usize) -> Self {
        Self {
            conv: default_conv(4),
            d: 16,
            layers: 2,
            n_heads: 2,
            ffn_mult: 1,
            k,
            vocab,
            max_positions: 8,
            normalize_input: true,
        }
    }

    pub fn hop(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    pub fn receptive_field(&self) -> usize {
        let mut r = 1;
        let mut jump = 1;
        for c in &self.conv {
            r += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.conv.is_empty() || self.conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv layers need positive channels, kernel and stride".into());
        }
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad(format!("d={} not divisible by n_heads={}", self.d, self.n_heads));
        }
        if self.layers == 0 || self.ffn_mult == 0 || self.k == 0 || self.vocab < 2 || self.max_positions == 0 {
            return bad("layers, ffn_mult, K, max_positions must be positive and vocab >= 2".into());
        }
        Ok(())
    }

    /// Frames of `f` must line up with label frames.
    pub fn check_alignment(&self, window: usize, hop: usize) -> Result<()> {
        if self.receptive_field() != window || self.hop() != hop {
            return Err(Error::invalid(format!(
                "conv geometry (receptive field {}, hop {}) does not match label framing ({window}, {hop})",
                self.receptive_field(),
                self.hop()
            )));
        }
        Ok(())
    }

    pub fn frames(&self, n_samples: usize) -> usize {
        crate::audio::frame_count(n_samples, self.receptive_field(), self.hop())
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Every parameter name with its shape.
    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("f.conv{i}.w"), vec![c.kernel * c_in, c.channels]));
            out.push((format!("f.conv{i}.b"), vec![c.channels]));
            c_in = c.channels;
        }
        out.push(("f.ln.g".into(), vec![c_in]));
        out.push(("f.ln.b".into(), vec![c_in]));
        out.push(("f.proj.w".into(), vec![c_in, self.d]));
        out.push(("f.proj.b".into(), vec![self.d]));
        out.push(("msk".into(), vec![self.d]));
        out.push(("g.pos".into(), vec![self.max_positions, self.d]));
        let d = self.d;
        let h = d * self.ffn_mult;
        for l in 0..self.layers {
            let p = format!("g.l{l}");
            for n in ["ln1", "ln2"] {
                out.push((format!("{p}.{n}.g"), vec![d]));
                out.push((format!("{p}.{n}.b"), vec![d]));
            }
            for n in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.w{n}"), vec![d, d]));
                // a key bias shifts every score in a row equally, so it is left out
                if n != "k" {
                    out.push((format!("{p}.attn.b{n}"), vec![d]));
                }
            }
            out.push((format!("{p}.ffn.w1"), vec![d, h]));
            out.push((format!("{p}.ffn.b1"), vec![h]));
            out.push((format!("{p}.ffn.w2"), vec![h, d]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
        }
        out.push(("g.ln_f.g".into(), vec![d]));
        out.push(("g.ln_f.b".into(), vec![d]));
        for j in 0..self.k {
            out.extend(head_shapes(&format!("head{j}"), d, self.vocab));
        }
        out
    }
}

fn head_shapes(prefix: &str, d: usize, vocab: usize) -> Vec<(String, Vec<usize>)> {
    vec![(format!("{prefix}.w"), vec![d, vocab]), (format!("{prefix}.b"), vec![vocab])]
}

fn init_tensor(name: &str, shape: &[usize], r: &mut Rng) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let n: usize = shape.iter().product();
    let normal = |std: f64, r: &mut Rng| {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(r)).collect()).expect("shape")
    };
    match leaf {
        "g" => Tensor::full(shape, 1.0),
        "msk" => normal(1.0, r),
        "pos" => sinusoid_table(shape[0], shape[1]),
        _ if name.starts_with("head") && leaf == "w" => normal(0.02, r),
        _ if shape.len() == 2 => normal(1.0 / (shape[0] as f64).sqrt(), r),
        _ => Tensor::zeros(shape),
    }
}

/// Starting point for the learned position table: sines and cosines over
/// geometrically spaced wavelengths, so nearby rows start out similar.
fn sinusoid_table(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for t in 0..rows {
        for i in 0..d {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = t as f64 * freq;
            data[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![rows, d], data).expect("shape")
}

/// FNV-1a of the parameter name.
fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Fresh parameters. Each name draws from its own keyed stream, so adding or
/// removing parameters never shifts the init of the others.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in cfg.shapes() {
        let mut r = rng::keyed(seed, &[rng::domain::INIT, name_key(&name)]);
        let t = init_tensor(&name, &shape, &mut r);
        store.insert(name, t);
    }
    Ok(store)
}

/// Replaces the `K` heads with fresh `prefix{j}` heads of a new vocabulary.
pub fn replace_heads(store: &mut ParamStore, cfg: &ModelConfig, prefix: &str, vocab: usize, seed: u64) {
    let old: Vec<String> = store.names().filter(|n| n.starts_with("head")).map(String::from).collect();
    for n in old {
        store.remove(&n);
    }
    for j in 0..cfg.k {
        for (name, shape) in head_shapes(&format!("{prefix}{j}"), cfg.d, vocab) {
            let mut r = rng::keyed(seed, &[rng::domain::INIT, name_key(&name)]);
            let t = if name.ends_with(".w") {
                init_tensor("head.w", &shape, &mut r)
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, t);
        }
    }
}

/// Binds a parameter, as a constant when the store marks it frozen.
pub fn bind(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    if store.is_frozen(name) {
        g.frozen(store, name)
    } else {
        g.param(store, name)
    }
}

pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, prefix_w: &str, prefix_b: &str) -> Result<Var> {
    let w = bind(g, store, prefix_w)?;
    let b = bind(g, store, prefix_b)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn layer_norm_affine(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let gain = bind(g, store, &format!("{prefix}.g"))?;
    let bias = bind(g, store, &format!("{prefix}.b"))?;
    let y = g.mul_row(n, gain)?;
    g.add_row(y, bias)
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-8).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// `f(y)`: T x d local features.
pub fn local_encode(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, y: &Waveform) -> Result<Var> {
    let rf = cfg.receptive_field();
    if y.len() < rf {
        return Err(Error::TooShort {
            len: y.len(),
            window: rf,
        });
    }
    let samples = if cfg.normalize_input {
        standardize(y.samples())
    } else {
        y.samples().to_vec()
    };
    let mut x = g.constant(Tensor::new(vec![y.len(), 1], samples)?);
    for (i, c) in cfg.conv.iter().enumerate() {
        let patches = g.unfold(x, c.kernel, c.stride)?;
        let z = linear(g, store, patches, &format!("f.conv{i}.w"), &format!("f.conv{i}.b"))?;
        x = g.gelu(z)?;
    }
    let x = layer_norm_affine(g, store, x, "f.ln")?;
    linear(g, store, x, "f.proj.w", "f.proj.b")
}

fn attention(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, x: Var, p: &str) -> Result<Var> {
    let q = linear(g, store, x, &format!("{p}.attn.wq"), &format!("{p}.attn.bq"))?;
    let wk = bind(g, store, &format!("{p}.attn.wk"))?;
    let k = g.matmul(x, wk)?;
    let v = linear(g, store, x, &format!("{p}.attn.wv"), &format!("{p}.attn.bv"))?;
    let dh = cfg.d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let w = g.softmax(s)?;
        heads.push(g.matmul(w, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    linear(g, store, cat, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"))
}

/// `g(x)`: the output of every layer. The last entry has the final layer norm applied.
pub fn contextual_encode(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, x: Var) -> Result<Vec<Var>> {
    let (t, d) = g.value(x).dims2()?;
    if d != cfg.d {
        return Err(Error::shape("contextual_encode", format!("width {d}, expected {}", cfg.d)));
    }
    if t > cfg.max_positions {
        return Err(Error::invalid(format!(
            "{t} frames exceed max_positions {}",
            cfg.max_positions
        )));
    }
    let pos = bind(g, store, "g.pos")?;
    let pos = g.slice_rows(pos, 0, t)?;
    let mut h = g.add(x, pos)?;
    let mut out = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("g.l{l}");
        let n1 = layer_norm_affine(g, store, h, &format!("{p}.ln1"))?;
        let a = attention(g, store, cfg, n1, &p)?;
        h = g.add(h, a)?;
        let n2 = layer_norm_affine(g, store, h, &format!("{p}.ln2"))?;
        let f1 = linear(g, store, n2, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"))?;
        let f1 = g.gelu(f1)?;
        let f2 = linear(g, store, f1, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"))?;
        h = g.add(h, f2)?;
        if l + 1 == cfg.layers {
            h = layer_norm_affine(g, store, h, "g.ln_f")?;
        }
        out.push(h);
    }
    Ok(out)
}

/// `K` log-posterior matrices from the final layer through heads named `{prefix}{j}`.
pub fn project_heads(g: &mut Graph, store: &ParamStore, prefix: &str, k: usize, c_last: Var) -> Result<Vec<Var>> {
    (0..k)
        .map(|j| {
            let z = linear(g, store, c_last, &format!("{prefix}{j}.w"), &format!("{prefix}{j}.b"))?;
            g.log_softmax(z)
        })
        .collect()
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub local: Var,
    pub masked: Var,
    pub layers: Vec<Var>,
    pub log_posts: Vec<Var>,
}

/// Concrete values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub local: Tensor,
    pub layers: Vec<Tensor>,
    pub posteriors: Vec<Tensor>,
}

impl Forward {
    pub fn values(&self, g: &Graph) -> EncoderOutput {
        EncoderOutput {
            local: g.value(self.local).clone(),
            layers: self.layers.iter().map(|&v| g.value(v).clone()).collect(),
            posteriors: self.log_posts.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

/// `heads(g(MASK(f(y))))`.
pub fn forward_pretrain(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    y: &Waveform,
    mask: &MaskSet,
) -> Result<Forward> {
    let local = local_encode(g, store, cfg, y)?;
    let t = g.value(local).dims2()?.0;
    if mask.len() != t {
        return Err(Error::shape("forward_pretrain", format!("mask {} vs {t} frames", mask.len())));
    }
    let emb = bind(g, store, "msk")?;
    let masked = apply_mask(g, local, mask, emb)?;
    let layers = contextual_encode(g, store, cfg, masked)?;
    let log_posts = project_heads(g, store, "head", cfg.k, *layers.last().expect("at least one layer"))?;
    Ok(Forward {
        local,
        masked,
        layers,
        log_posts,
    })
}

/// Unmasked encoder pass returning every layer as plain tensors.
pub fn encode_layers(store: &ParamStore, cfg: &ModelConfig, y: &Waveform) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let local = local_encode(&mut g, store, cfg, y)?;
    let layers = contextual_encode(&mut g, store, cfg, local)?;
    Ok(layers.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Features of transformer layer `layer` (1-based) for re-clustering.
pub fn extract_layer_features(store: &ParamStore, cfg: &ModelConfig, y: &Waveform, layer: usize) -> Result<FeatureMatrix> {
    if layer == 0 || layer > cfg.layers {
        return Err(Error::invalid(format!("layer {layer} outside 1..={}", cfg.layers)));
    }
    let mut layers = encode_layers(store, cfg, y)?;
    Ok(FeatureMatrix {
        frames: layers.swap_remove(layer - 1),
        window: cfg.receptive_field(),
        hop: cfg.hop(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{frame_count, HOP, WINDOW};
    use crate::mixture::tone;

    fn wave(n: usize, hz: f64) -> Waveform {
        Waveform::new(tone(hz, 0.3, 0, n, 16_000).collect(), 16_000).unwrap()
    }

    #[test]
    fn default_geometry_matches_label_framing() {
        let cfg = ModelConfig::small(2, 17);
        assert_eq!(cfg.hop(), 320);
        assert_eq!(cfg.receptive_field(), 400);
        cfg.check_alignment(WINDOW, HOP).unwrap();
        assert!(ModelConfig::tiny(2, 5).num_params() <= 5000);
    }

    #[test]
    fn local_encode_frame_count() {
        let cfg = ModelConfig::tiny(2, 5);
        let p = init_params(&cfg, 0).unwrap();
        for n in [400, 719, 720, 2000, 2560] {
            let mut g = Graph::new();
            let x = local_encode(&mut g, &p, &cfg, &wave(n, 300.0)).unwrap();
            assert_eq!(g.value(x).shape(), &[frame_count(n, 400, 320), 16]);
        }
        let mut g = Graph::new();
        assert!(matches!(
            local_encode(&mut g, &p, &cfg, &wave(399, 300.0)),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn sixteen_thousand_samples_give_49_frames() {
        let cfg = ModelConfig::small(1, 9);
        let p = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = local_encode(&mut g, &p, &cfg, &wave(16_000, 300.0)).unwrap();
        assert_eq!(g.value(x).shape(), &[49, 64]);
    }

    #[test]
    fn shapes_and_normalised_posteriors() {
        let cfg = ModelConfig::tiny(3, 5);
        let p = init_params(&cfg, 1).unwrap();
        let y = wave(2560, 440.0);
        let t = frame_count(2560, 400, 320);
        let mut g = Graph::new();
        let f = forward_pretrain(&mut g, &p, &cfg, &y, &MaskSet::from_indices(t, &[1, 2])).unwrap();
        let out = f.values(&g);
        assert_eq!(out.layers.len(), 2);
        assert!(out.layers.iter().all(|l| l.shape() == [t, 16]));
        assert_eq!(out.posteriors.len(), 3);
        for lp in &out.posteriors {
            for r in 0..t {
                assert!(crate::tensor::logsumexp(lp.row(r)).abs() < 1e-9);
            }
        }
        // Heads start out distinct.
        assert!(out.posteriors[0].max_abs_diff(&out.posteriors[1]) > 1e-6);
    }

    #[test]
    fn zero_heads_give_uniform_posteriors() {
        let cfg = ModelConfig::tiny(1, 5);
        let mut p = init_params(&cfg, 1).unwrap();
        *p.get_mut("head0.w").unwrap() = Tensor::zeros(&[16, 5]);
        let mut g = Graph::new();
        let t = frame_count(1040, 400, 320);
        let f = forward_pretrain(&mut g, &p, &cfg, &wave(1040, 200.0), &MaskSet::none(t)).unwrap();
        let lp = g.value(f.log_posts[0]);
        assert!(lp.data().iter().all(|v| (v + 5f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn mask_embedding_only_affects_masked_path() {
        let cfg = ModelConfig::tiny(2, 5);
        let p = init_params(&cfg, 2).unwrap();
        let y = wave(2560, 330.0);
        let t = frame_count(2560, 400, 320);
        let run = |p: &ParamStore, m: &MaskSet| {
            let mut g = Graph::new();
            let f = forward_pretrain(&mut g, p, &cfg, &y, m).unwrap();
            f.values(&g)
        };
        let plain = {
            let mut g = Graph::new();
            let x = local_encode(&mut g, &p, &cfg, &y).unwrap();
            let layers = contextual_encode(&mut g, &p, &cfg, x).unwrap();
            let lp = project_heads(&mut g, &p, "head", 2, *layers.last().unwrap()).unwrap();
            g.value(lp[0]).clone()
        };
        assert_eq!(run(&p, &MaskSet::none(t)).posteriors[0], plain);

        let m = MaskSet::from_indices(t, &[3]);
        let a = run(&p, &m);
        let mut p2 = p.clone();
        p2.get_mut("msk").unwrap().data_mut()[0] += 0.5;
        let b = run(&p2, &m);
        assert_eq!(a.local, b.local);
        assert!(a.posteriors[0].row(3) != b.posteriors[0].row(3));
    }

    #[test]
    fn deterministic_and_per_sample_independent() {
        let cfg = ModelConfig::tiny(2, 5);
        let p = init_params(&cfg, 4).unwrap();
        let a = encode_layers(&p, &cfg, &wave(2000, 250.0)).unwrap();
        let _ = encode_layers(&p, &cfg, &wave(2400, 600.0)).unwrap();
        let b = encode_layers(&p, &cfg, &wave(2000, 250.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(init_params(&cfg, 4).unwrap(), p);
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let cfg = ModelConfig::tiny(1, 5);
        let p = init_params(&cfg, 0).unwrap();
        assert!(encode_layers(&p, &cfg, &wave(400 + 320 * 8, 100.0)).is_err());
    }
}
