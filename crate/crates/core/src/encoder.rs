//! Modality context encoder.
//!
//! Per modality: temporal convolution to the common width, positional and
//! speaker embeddings, one intra-modal and two inter-modal contextual
//! transformers, a sigmoid gate on each of the three streams, and a linear
//! unification of their concatenation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vega_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::{layer_norm, layer_norm_specs, linear};
use crate::params::{linear_specs, Bound, Init, ParamSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Common hidden width.
    pub d: usize,
    /// Temporal half-window; the convolution kernel spans `2k + 1` utterances.
    pub k: usize,
    pub heads: usize,
    pub transformer_layers: usize,
    /// Feed-forward inner width as a multiple of `d`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub use_positional: bool,
    pub use_speaker: bool,
    pub use_intra: bool,
    pub use_inter: bool,
    /// Active modalities. Streams whose source modality is inactive fall
    /// back to the modality's own embedded input.
    pub modalities: Vec<Modality>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 1280,
            k: 1,
            heads: 8,
            transformer_layers: 1,
            ffn_mult: 1,
            dropout: 0.5,
            max_positions: 1024,
            use_positional: true,
            use_speaker: true,
            use_intra: true,
            use_inter: true,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("encoder dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.transformer_layers == 0 {
            return bad("transformer_layers must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be at least 1".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality must be active".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return bad(format!("modality {m} listed twice"));
            }
        }
        Ok(())
    }

    /// Active modalities in canonical T, A, V order.
    pub fn active(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.modalities.contains(m))
            .collect()
    }

    pub fn is_active(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// Context sources of the three streams of `m`: itself, then the two
    /// other modalities in canonical order.
    pub fn sources(m: Modality) -> [Modality; 3] {
        let mut others = Modality::ALL.into_iter().filter(|&o| o != m);
        [m, others.next().unwrap(), others.next().unwrap()]
    }

    /// Whether stream `(m, src)` runs a transformer rather than passing the
    /// embedded input through.
    pub fn has_transformer(&self, m: Modality, src: Modality) -> bool {
        if m == src {
            self.use_intra
        } else {
            self.use_inter && self.is_active(src)
        }
    }
}

fn stream_prefix(m: Modality, src: Modality) -> String {
    format!("encoder.{m}.ctx_{src}")
}

fn transformer_specs(prefix: &str, d: usize, ffn: usize, layers: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        for name in ["q", "k", "v", "o"] {
            specs.extend(linear_specs(&format!("{p}.attn.{name}"), d, d));
        }
        specs.extend(layer_norm_specs(&format!("{p}.ln1"), d));
        specs.extend(linear_specs(&format!("{p}.ff1"), d, ffn));
        specs.extend(linear_specs(&format!("{p}.ff2"), ffn, d));
        specs.extend(layer_norm_specs(&format!("{p}.ln2"), d));
    }
    specs
}

pub fn encoder_specs(cfg: &EncoderConfig, input_dims: &PerModality<usize>, num_speakers: usize) -> Vec<ParamSpec> {
    let d = cfg.d;
    let mut specs = Vec::new();
    if cfg.use_speaker {
        specs.push(ParamSpec::new(
            "encoder.speaker",
            [num_speakers, d],
            Init::Normal { std: 0.02 },
        ));
    }
    for m in cfg.active() {
        specs.extend(linear_specs(
            &format!("encoder.{m}.tcb"),
            (2 * cfg.k + 1) * input_dims[m],
            d,
        ));
        for src in EncoderConfig::sources(m) {
            if cfg.has_transformer(m, src) {
                specs.extend(transformer_specs(&stream_prefix(m, src), d, cfg.ffn_mult * d, cfg.transformer_layers));
            }
            specs.push(ParamSpec::new(
                format!("encoder.{m}.gate_{src}.w"),
                [d, d],
                Init::KaimingUniform,
            ));
        }
        specs.extend(linear_specs(&format!("encoder.{m}.unify"), 3 * d, d));
    }
    specs
}

/// Fixed sinusoidal position table, `n × d` row-major:
/// `p[t, 2i] = sin(t / 10000^(2i/d))`, `p[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn sinusoid_table(n: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0f32; n * d];
    for t in 0..n {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            out[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Encoder input for one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvInput {
    /// Row-major `N × d_m` features per modality.
    pub features: PerModality<Vec<f32>>,
    pub speakers: Vec<usize>,
}

impl ConvInput {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Graph-building context shared by encoder and heads.
pub struct Fwd<'a, T: Scalar, R: Rng + ?Sized> {
    pub g: &'a mut Graph<T>,
    pub p: &'a Bound,
    pub train: bool,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Fwd<'_, T, R> {
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        Ok(self.g.dropout(x, p, self.rng, true)?)
    }
}

/// `h̃ = [shift(h, -k) | … | shift(h, k)] · W + b`, zero padded at the
/// conversation boundaries.
pub fn temporal_conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, h: Var, k: usize) -> Result<Var> {
    let k = k as isize;
    let taps = (-k..=k)
        .map(|o| g.shift_rows(h, o))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stacked = if taps.len() == 1 { taps[0] } else { g.concat(&taps, 1)? };
    linear(g, p, prefix, stacked)
}

/// Multi-head attention with queries from `x` and keys/values from `ctx`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, ctx: Var, heads: usize) -> Result<Var> {
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), ctx)?;
    let v = linear(g, p, &format!("{prefix}.v"), ctx)?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s, 1)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, p, &format!("{prefix}.o"), cat)
}

/// One post-norm transformer block: attention, residual, layer norm, then a
/// SiLU feed-forward of width `ffn_mult·d`, residual, layer norm.
pub fn transformer_block<T: Scalar, R: Rng + ?Sized>(
    f: &mut Fwd<'_, T, R>,
    prefix: &str,
    x: Var,
    ctx: Var,
    heads: usize,
    dropout: f64,
) -> Result<Var> {
    let a = attention(f.g, f.p, &format!("{prefix}.attn"), x, ctx, heads)?;
    let a = f.dropout(a, dropout)?;
    let r = f.g.add(x, a)?;
    let x1 = layer_norm(f.g, f.p, &format!("{prefix}.ln1"), r)?;
    let h = linear(f.g, f.p, &format!("{prefix}.ff1"), x1)?;
    let h = f.g.silu(h);
    let h = linear(f.g, f.p, &format!("{prefix}.ff2"), h)?;
    let h = f.dropout(h, dropout)?;
    let r = f.g.add(x1, h)?;
    layer_norm(f.g, f.p, &format!("{prefix}.ln2"), r)
}

/// `z = σ(z̃ · W) ⊙ z̃`.
pub fn gate<T: Scalar>(g: &mut Graph<T>, w: Var, z: Var) -> Result<Var> {
    let s = g.matmul(z, w)?;
    let s = g.sigmoid(s);
    Ok(g.mul(s, z)?)
}

/// Encodes one conversation, returning `N × d` per active modality.
pub fn encode_conversation<T: Scalar, R: Rng + ?Sized>(
    f: &mut Fwd<'_, T, R>,
    cfg: &EncoderConfig,
    input: &ConvInput,
) -> Result<Vec<(Modality, Var)>> {
    let n = input.len();
    let d = cfg.d;
    if n == 0 {
        return Err(Error::Argument("conversation has no utterances".into()));
    }
    if cfg.use_positional && n > cfg.max_positions {
        return Err(Error::Argument(format!(
            "conversation length {n} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let pos = if cfg.use_positional {
        Some(f.g.constant(Tensor::from_f32([n, d], &sinusoid_table(n, d))?))
    } else {
        None
    };
    let spk = if cfg.use_speaker {
        let table = f.p.get("encoder.speaker")?;
        let rows = f.g.shape(table)[0];
        if let Some(&s) = input.speakers.iter().find(|&&s| s >= rows) {
            return Err(Error::Argument(format!("speaker id {s} out of range for {rows} speakers")));
        }
        Some(f.g.embedding(table, &input.speakers)?)
    } else {
        None
    };

    let active = cfg.active();
    let mut embedded = Vec::with_capacity(active.len());
    for &m in &active {
        let feats = &input.features[m];
        let dm = feats.len() / n;
        let h = f.g.constant(Tensor::from_f32([n, dm], feats)?);
        let mut x = temporal_conv(f.g, f.p, &format!("encoder.{m}.tcb"), h, cfg.k)?;
        if let Some(pos) = pos {
            x = f.g.add(x, pos)?;
        }
        if let Some(spk) = spk {
            x = f.g.add(x, spk)?;
        }
        let x = f.dropout(x, cfg.dropout)?;
        embedded.push((m, x));
    }
    let lookup = |m: Modality| embedded.iter().find(|(e, _)| *e == m).map(|&(_, v)| v);

    let mut out = Vec::with_capacity(active.len());
    for &m in &active {
        let own = lookup(m).expect("active modality was embedded");
        let mut gated = Vec::with_capacity(3);
        for src in EncoderConfig::sources(m) {
            let z = if cfg.has_transformer(m, src) {
                let prefix = stream_prefix(m, src);
                let ctx = lookup(src).expect("transformer source is active");
                let mut x = own;
                for l in 0..cfg.transformer_layers {
                    // Intra streams attend to their own current state, inter
                    // streams to the fixed embedded source modality.
                    let c = if src == m { x } else { ctx };
                    x = transformer_block(f, &format!("{prefix}.l{l}"), x, c, cfg.heads, cfg.dropout)?;
                }
                x
            } else {
                own
            };
            let w = f.p.get(&format!("encoder.{m}.gate_{src}.w"))?;
            gated.push(gate(f.g, w, z)?);
        }
        let cat = f.g.concat(&gated, 1)?;
        out.push((m, linear(f.g, f.p, &format!("encoder.{m}.unify"), cat)?));
    }
    Ok(out)
}
