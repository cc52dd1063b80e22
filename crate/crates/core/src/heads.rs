//! Supervision branch (unimodal classifiers, gated fusion, fusion
//! classifier) and the anchoring branch's projection heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vega_autodiff::{Graph, Scalar, Var};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::linear;
use crate::params::{linear_specs, Bound, ParamSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Dropout on classifier inputs during training.
    pub cls_dropout: f64,
    /// Dropout after the first projection layer.
    pub proj_dropout: f64,
    /// Inner projection width; derived from `d` and `d_anc` when absent.
    pub proj_hidden: Option<usize>,
    /// One unimodal projection shared by all modalities, or one each.
    pub shared_projection: bool,
    /// One gate scorer shared by all modalities, or one each.
    pub shared_gate: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            cls_dropout: 0.5,
            proj_dropout: 0.4,
            proj_hidden: None,
            shared_projection: true,
            shared_gate: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("cls_dropout", self.cls_dropout), ("proj_dropout", self.proj_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.proj_hidden == Some(0) {
            return Err(Error::Config("proj_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self, d: usize, d_anc: usize) -> usize {
        self.proj_hidden.unwrap_or_else(|| projection_width(d, d_anc))
    }
}

/// `(d + d_anc) / 2` rounded to the nearest multiple of 64, at least 64.
pub fn projection_width(d: usize, d_anc: usize) -> usize {
    let mid = (d + d_anc) as f64 / 2.0;
    ((mid / 64.0).round() as usize).max(1) * 64
}

/// Shape information the heads need beyond their config.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub modalities: Vec<Modality>,
    pub d: usize,
    pub d_anc: usize,
    pub num_classes: usize,
    /// Whether the anchoring projections exist at all.
    pub vega: bool,
    /// Classify in anchor space (projections feed the classifiers).
    pub single_branch: bool,
}

fn uni_proj_prefix(cfg: &HeadConfig, m: Modality) -> String {
    if cfg.shared_projection {
        "vega.uni".to_string()
    } else {
        format!("vega.uni_{m}")
    }
}

fn gate_prefix(cfg: &HeadConfig, m: Modality) -> String {
    if cfg.shared_gate {
        "sup.gate".to_string()
    } else {
        format!("sup.gate_{m}")
    }
}

fn projection_specs(prefix: &str, d: usize, hidden: usize, d_anc: usize) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&format!("{prefix}.l1"), d, hidden).to_vec();
    specs.extend(linear_specs(&format!("{prefix}.l2"), hidden, d_anc));
    specs
}

pub fn head_specs(cfg: &HeadConfig, layout: &HeadLayout) -> Vec<ParamSpec> {
    let HeadLayout { d, d_anc, num_classes: c, .. } = *layout;
    let cls_in = if layout.single_branch { d_anc } else { d };
    let mut specs = Vec::new();
    for &m in &layout.modalities {
        specs.extend(linear_specs(&format!("sup.{m}.cls"), cls_in, c));
        if !cfg.shared_gate {
            specs.extend(linear_specs(&gate_prefix(cfg, m), d, 1));
        }
    }
    if cfg.shared_gate {
        specs.extend(linear_specs("sup.gate", d, 1));
    }
    specs.extend(linear_specs("sup.fuse.cls", cls_in, c));
    if layout.vega || layout.single_branch {
        let hidden = cfg.hidden(d, d_anc);
        if cfg.shared_projection {
            specs.extend(projection_specs("vega.uni", d, hidden, d_anc));
        } else {
            for &m in &layout.modalities {
                specs.extend(projection_specs(&uni_proj_prefix(cfg, m), d, hidden, d_anc));
            }
        }
        specs.extend(projection_specs("vega.fuse", d, hidden, d_anc));
    }
    specs
}

/// `W₂ · SiLU(dropout(W₁ x + b₁)) + b₂`.
pub fn project<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.l1"), x)?;
    let h = if train && dropout > 0.0 { g.dropout(h, dropout, rng, true)? } else { h };
    let h = g.silu(h);
    linear(g, p, &format!("{prefix}.l2"), h)
}

/// Softmax-weighted sum of modality streams.
///
/// Returns `(f, weights)` with `weights: [R, M]`, one row per utterance.
pub fn gated_fusion<T: Scalar>(g: &mut Graph<T>, scores: &[Var], streams: &[Var]) -> Result<(Var, Var)> {
    let s = if scores.len() == 1 { scores[0] } else { g.concat(scores, 1)? };
    let w = g.softmax(s, 1)?;
    let mut f = None;
    for (i, &z) in streams.iter().enumerate() {
        let wi = g.narrow(w, 1, i, 1)?;
        let term = g.mul(z, wi)?;
        f = Some(match f {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let f = f.ok_or_else(|| Error::Argument("gated fusion needs at least one stream".into()))?;
    Ok((f, w))
}

/// Everything the objective and evaluation read from one forward pass.
/// Row `r` of every matrix is the `r`-th utterance of the batch.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub modalities: Vec<Modality>,
    pub uni_logits: Vec<Var>,
    pub fused_logits: Var,
    pub gate_weights: Var,
    /// Unimodal projections into anchor space, present with the anchoring head.
    pub uni_proj: Vec<Var>,
    pub fused_proj: Option<Var>,
}

/// Runs both branches on encoder streams `[R, d]` (one per active modality,
/// same order as `layout.modalities`).
#[allow(clippy::too_many_arguments)]
pub fn heads_forward<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &HeadConfig,
    layout: &HeadLayout,
    streams: &[Var],
    train: bool,
    rng: &mut R1,
    vega_rng: &mut R2,
) -> Result<HeadOutputs> {
    let mut drop = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        if train && cfg.cls_dropout > 0.0 {
            Ok(g.dropout(x, cfg.cls_dropout, rng, true)?)
        } else {
            Ok(x)
        }
    };

    let mut scores = Vec::with_capacity(streams.len());
    for (&m, &z) in layout.modalities.iter().zip(streams) {
        scores.push(linear(g, p, &gate_prefix(cfg, m), z)?);
    }
    let (f, gate_weights) = gated_fusion(g, &scores, streams)?;

    let mut uni_proj = Vec::new();
    let mut fused_proj = None;
    if layout.vega || layout.single_branch {
        for (&m, &z) in layout.modalities.iter().zip(streams) {
            uni_proj.push(project(g, p, &uni_proj_prefix(cfg, m), z, cfg.proj_dropout, train, vega_rng)?);
        }
        fused_proj = Some(project(g, p, "vega.fuse", f, cfg.proj_dropout, train, vega_rng)?);
    }

    let (cls_inputs, fused_in) = if layout.single_branch {
        (uni_proj.clone(), fused_proj.expect("single branch builds projections"))
    } else {
        (streams.to_vec(), f)
    };
    let mut uni_logits = Vec::with_capacity(streams.len());
    for (&m, &x) in layout.modalities.iter().zip(&cls_inputs) {
        let x = drop(g, x)?;
        uni_logits.push(linear(g, p, &format!("sup.{m}.cls"), x)?);
    }
    let x = drop(g, fused_in)?;
    let fused_logits = linear(g, p, "sup.fuse.cls", x)?;

    Ok(HeadOutputs {
        modalities: layout.modalities.clone(),
        uni_logits,
        fused_logits,
        gate_weights,
        uni_proj,
        fused_proj,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vega_autodiff::Tensor;

    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn projection_width_rule() {
        assert_eq!(projection_width(1280, 768), 1024);
        assert_eq!(projection_width(64, 32), 64);
        assert_eq!(projection_width(8, 6), 64);
        assert_eq!(projection_width(100, 60), 64);
        assert_eq!(projection_width(200, 60), 128);
    }

    #[test]
    fn fusion_examples() {
        let mut g = Graph::<f64>::new();
        let zs: Vec<Var> = [[1.0, 2.0], [3.0, -1.0], [-1.0, 5.0]]
            .iter()
            .map(|v| g.constant(Tensor::new([1, 2], v.to_vec()).unwrap()))
            .collect();
        let zero: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros([1, 1]))).collect();
        let (f, w) = gated_fusion(&mut g, &zero, &zs).unwrap();
        assert!((g.values(f)[0] - 1.0).abs() < 1e-12 && (g.values(f)[1] - 2.0).abs() < 1e-12);
        assert!((g.values(w).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let sat: Vec<Var> = [10.0, -10.0, -10.0]
            .iter()
            .map(|&s| g.constant(Tensor::new([1, 1], vec![s]).unwrap()))
            .collect();
        let (f, _) = gated_fusion(&mut g, &sat, &zs).unwrap();
        let norm = 5f64.sqrt();
        assert!((g.values(f)[0] - 1.0).abs() < 1e-4 * norm);
        assert!((g.values(f)[1] - 2.0).abs() < 1e-4 * norm);

        // Adding a constant to every score leaves the weights unchanged.
        let shifted: Vec<Var> = [110.0, 90.0, 90.0]
            .iter()
            .map(|&s| g.constant(Tensor::new([1, 1], vec![s]).unwrap()))
            .collect();
        let (_, w1) = gated_fusion(&mut g, &sat, &zs).unwrap();
        let (_, w2) = gated_fusion(&mut g, &shifted, &zs).unwrap();
        for (a, b) in g.values(w1).iter().zip(g.values(w2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn eye(n: usize) -> Vec<f32> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn projection_examples() {
        let specs = projection_specs("p", 3, 3, 3);
        let mut s = ParamStore::initialize(&specs, 2);
        s.set("p.l1.w", eye(3)).unwrap();
        s.set("p.l2.w", eye(3)).unwrap();
        let mut g = Graph::<f64>::new();
        let p = s.bind(&mut g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = [0.0, 0.5, 3.0];
        let x = g.constant(Tensor::new([1, 3], xs.to_vec()).unwrap());
        let y = project(&mut g, &p, "p", x, 0.4, false, &mut rng).unwrap();
        for (a, &x) in g.values(y).iter().zip(&xs) {
            assert!((a - x / (1.0 + (-x).exp())).abs() < 1e-12);
        }

        // Zero input leaves only the bias path.
        let mut s = ParamStore::initialize(&specs, 2);
        s.set("p.l1.b", vec![0.2, -0.3, 1.0]).unwrap();
        s.set("p.l2.b", vec![0.1, 0.1, 0.1]).unwrap();
        let mut g = Graph::<f64>::new();
        let p = s.bind(&mut g).unwrap();
        let x = g.constant(Tensor::zeros([1, 3]));
        let y = project(&mut g, &p, "p", x, 0.4, false, &mut rng).unwrap();
        let w2 = &s.get("p.l2.w").unwrap().values;
        let h: Vec<f64> = [0.2f64, -0.3, 1.0].iter().map(|&b| b / (1.0 + (-b).exp())).collect();
        for j in 0..3 {
            let expect = 0.1 + (0..3).map(|i| h[i] * w2[i * 3 + j] as f64).sum::<f64>();
            assert!((g.values(y)[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_partition_by_branch() {
        let layout = HeadLayout {
            modalities: Modality::ALL.to_vec(),
            d: 16,
            d_anc: 8,
            num_classes: 4,
            vega: true,
            single_branch: false,
        };
        let cfg = HeadConfig::default();
        let specs = head_specs(&cfg, &layout);
        let hidden = projection_width(16, 8);
        let vega: usize = specs.iter().filter(|s| s.path.starts_with("vega.")).map(ParamSpec::numel).sum();
        assert_eq!(vega, 2 * (16 * hidden + hidden + hidden * 8 + 8));
        let absent = head_specs(&cfg, &HeadLayout { vega: false, ..layout });
        assert!(absent.iter().all(|s| !s.path.starts_with("vega.")));
    }
}
