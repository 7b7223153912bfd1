//! Flat `key = value` run configuration.
//!
//! Every key has a default. A config file and command-line overrides are
//! applied in that order; unknown keys and unparsable values are errors. The
//! resolved config is rendered with every key in a fixed order, and parsing
//! that rendering gives back the same config.

use std::path::Path;

use pss_core::masking::MaskSpec;
use pss_core::mixture::MixSpec;
use pss_core::model::{default_conv, ModelConfig};
use pss_core::optim::LrSchedule;
use pss_core::synth::SynthSpec;

use crate::error::CliError;

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, bool);

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        // `{:?}` prints the shortest string that parses back to the same bits.
        format!("{self:?}")
    }
}

impl Value for String {
    fn parse_value(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as Value>::parse_value(value).ok_or_else(|| {
                            CliError::Config(format!("bad value `{value}` for `{key}`"))
                        })?;
                    })*
                    _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Every key in declaration order, one `key = value` per line.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(stringify!($key));
                    out.push_str(" = ");
                    out.push_str(&self.$key.render());
                    out.push('\n');
                )*
                out
            }
        }
    };
}

run_config! {
    /// Subcommand this file is meant for; empty accepts any.
    stage: String = String::new();
    seed: u64 = 0;
    /// Run directory.
    out: String = String::new();
    manifest: String = String::new();
    dev_manifest: String = String::new();
    noise_manifest: String = String::new();
    /// Output directory of `build-labels`.
    labels: String = String::new();
    /// Run directory holding the model to start from.
    init: String = String::new();

    n_clusters: usize = 16;
    kmeans_iters: usize = 100;
    /// 0 clusters MFCCs; `l >= 1` clusters layer `l` of the `init` model.
    label_layer: usize = 0;

    k: usize = 2;
    p_mix: f64 = 1.0;
    p_noise: f64 = 0.1;
    r_l_min: f64 = 0.3;
    r_l_max: f64 = 1.0;
    r_e_min: f64 = 0.1;
    r_e_max: f64 = 10.0;
    max_offset_frac: f64 = 0.5;
    /// Mixtures written by `simulate`.
    count: usize = 100;

    mask_span: usize = 10;
    mask_p: f64 = 0.08;
    mask_min: usize = 1;

    conv_channels: usize = 32;
    d: usize = 64;
    layers: usize = 4;
    n_heads: usize = 4;
    ffn_mult: usize = 4;
    max_positions: usize = 1024;
    normalize_input: bool = true;

    peak_lr: f64 = 2e-3;
    warmup_steps: usize = 50;
    total_steps: usize = 500;
    /// Stop after this many steps; 0 runs the whole schedule.
    steps: usize = 0;
    batch_seconds: f64 = 20.0;
    sil_weight: f64 = 1.0;
    checkpoint_every: usize = 100;

    ft_mixtures: usize = 32;
    ft_batch: usize = 4;
    ft_r_e_min: f64 = 0.5;
    ft_r_e_max: f64 = 2.0;
    dev_mixtures: usize = 8;
    /// Prefix beam width for decoding; 0 decodes greedily.
    beam: usize = 0;

    probe_hidden: usize = 64;
    probe_speakers: usize = 2;
    probe_mixtures: usize = 32;
    probe_batch: usize = 4;

    /// `msasr`, `asr` or `sd`.
    task: String = "msasr".to_string();
    eval_mixtures: usize = 16;

    /// Comma-separated eval run directories for `grid`.
    runs: String = String::new();

    grad_coords: usize = 50;
    grad_epsilon: f64 = 1e-5;

    synth_utterances: usize = 40;
    synth_min_words: usize = 6;
    synth_max_words: usize = 9;
    synth_phone_frames: usize = 5;
    synth_pause_frames: usize = 4;
    synth_speakers: usize = 4;

    parallel: bool = true;
}

impl RunConfig {
    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Defaults, then `file`, then `KEY=VALUE` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut c = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not KEY=VALUE")))?;
            c.set(k.trim().trim_start_matches("--"), v.trim())?;
        }
        Ok(c)
    }

    pub fn require(&self, key: &str, value: &str) -> Result<(), CliError> {
        if value.is_empty() {
            return Err(CliError::Config(format!("`{key}` must be set")));
        }
        Ok(())
    }

    pub fn model(&self, vocab: usize) -> Result<ModelConfig, CliError> {
        let m = ModelConfig {
            conv: default_conv(self.conv_channels),
            d: self.d,
            layers: self.layers,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            k: self.k,
            vocab,
            max_positions: self.max_positions,
            normalize_input: self.normalize_input,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn mix(&self) -> Result<MixSpec, CliError> {
        let m = MixSpec {
            k: self.k,
            p_mix: self.p_mix,
            p_noise: self.p_noise,
            r_l_range: (self.r_l_min, self.r_l_max),
            r_e_range: (self.r_e_min, self.r_e_max),
            max_offset_frac: self.max_offset_frac,
            seed: self.seed,
            ..MixSpec::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn mask(&self) -> Result<MaskSpec, CliError> {
        let m = MaskSpec {
            span_len: self.mask_span,
            p_start: self.mask_p,
            min_masked: self.mask_min,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn schedule(&self) -> Result<LrSchedule, CliError> {
        Ok(LrSchedule::new(self.peak_lr, self.warmup_steps, self.total_steps)?)
    }

    /// Step count at which this invocation stops.
    pub fn stop_step(&self) -> u64 {
        if self.steps == 0 {
            self.total_steps as u64
        } else {
            self.steps.min(self.total_steps) as u64
        }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            n_utterances: self.synth_utterances,
            min_words: self.synth_min_words,
            max_words: self.synth_max_words,
            phone_frames: self.synth_phone_frames,
            pause_frames: self.synth_pause_frames,
            n_speakers: self.synth_speakers,
            seed: self.seed,
        }
    }

    pub fn exec(&self) -> pss_core::par::Exec {
        if self.parallel {
            pss_core::par::Exec::Parallel
        } else {
            pss_core::par::Exec::Sequential
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("p_mix = 0.6\n# comment\nk=5  # trailing\nout = runs/a b\npeak_lr = 1e-4\n")
            .unwrap();
        assert_eq!((c.k, c.p_mix, c.out.as_str()), (5, 0.6, "runs/a b"));
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        assert_eq!(c.render().lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("k = two").is_err());
        assert!(RunConfig::parse("p_mix = nan").is_err());
        assert!(RunConfig::parse("k 2").is_err());
        let o = vec!["--k=3".to_string(), "seed=9".to_string()];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!((c.k, c.seed), (3, 9));
    }
}
