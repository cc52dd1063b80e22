//! Training objective: supervision terms, anchoring terms, their weighted
//! totals, and the ablation plans that select terms and teachers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vega_autodiff::{Graph, Scalar, Var};

use crate::error::{Error, Result};
use crate::heads::HeadOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// Cross-entropy of the fused classifier.
    ClsFuse,
    /// Cross-entropy of each unimodal classifier, summed over modalities.
    ClsUni,
    /// KL self-distillation of unimodal predictions, summed over modalities.
    Dist,
    /// Cross-entropy of the fused anchor prediction.
    AncFuse,
    /// Cross-entropy of each unimodal anchor prediction.
    AncUni,
    /// KL self-distillation of unimodal anchor predictions.
    AncDist,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::ClsFuse,
        Term::ClsUni,
        Term::Dist,
        Term::AncFuse,
        Term::AncUni,
        Term::AncDist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::ClsFuse => "cls_fuse",
            Term::ClsUni => "cls_uni",
            Term::Dist => "dist",
            Term::AncFuse => "anc_fuse",
            Term::AncUni => "anc_uni",
            Term::AncDist => "anc_dist",
        }
    }

    pub fn is_anchor(self) -> bool {
        matches!(self, Term::AncFuse | Term::AncUni | Term::AncDist)
    }
}

/// Which fused distribution teaches a distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Teacher {
    /// The fused classifier prediction ŷ.
    Fused,
    /// The fused anchor prediction ŷ_anc^fuse.
    AnchorFused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    NoAncFuse,
    NoAncUni,
    NoAncDist,
    ClsOnly,
    AnchorOnly,
    /// Anchoring distillation taught by the fused classifier.
    AncTeacherCls,
    /// Classification distillation taught by the fused anchor prediction.
    ClsTeacherAnc,
    /// Project into anchor space before classifying.
    SingleBranch,
}

impl AblationMode {
    pub const ALL: [AblationMode; 9] = [
        AblationMode::Full,
        AblationMode::NoAncFuse,
        AblationMode::NoAncUni,
        AblationMode::NoAncDist,
        AblationMode::ClsOnly,
        AblationMode::AnchorOnly,
        AblationMode::AncTeacherCls,
        AblationMode::ClsTeacherAnc,
        AblationMode::SingleBranch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoAncFuse => "no-anc-fuse",
            AblationMode::NoAncUni => "no-anc-uni",
            AblationMode::NoAncDist => "no-anc-dist",
            AblationMode::ClsOnly => "cls-only",
            AblationMode::AnchorOnly => "anchor-only",
            AblationMode::AncTeacherCls => "anc-teacher-cls",
            AblationMode::ClsTeacherAnc => "cls-teacher-anc",
            AblationMode::SingleBranch => "single-branch",
        }
    }

    pub fn plan(self) -> ObjectivePlan {
        use Term::*;
        let mut plan = ObjectivePlan {
            terms: Term::ALL.to_vec(),
            dist_teacher: Teacher::Fused,
            anc_dist_teacher: Teacher::AnchorFused,
            single_branch: false,
        };
        let drop = |plan: &mut ObjectivePlan, t: Term| plan.terms.retain(|&x| x != t);
        match self {
            AblationMode::Full => {}
            AblationMode::NoAncFuse => drop(&mut plan, AncFuse),
            AblationMode::NoAncUni => drop(&mut plan, AncUni),
            AblationMode::NoAncDist => drop(&mut plan, AncDist),
            AblationMode::ClsOnly => plan.terms = vec![ClsFuse, ClsUni, Dist],
            AblationMode::AnchorOnly => plan.terms = vec![AncFuse, AncUni, AncDist],
            AblationMode::AncTeacherCls => plan.anc_dist_teacher = Teacher::Fused,
            AblationMode::ClsTeacherAnc => plan.dist_teacher = Teacher::AnchorFused,
            AblationMode::SingleBranch => plan.single_branch = true,
        }
        plan
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = AblationMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown ablation mode {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// Active terms and distillation teachers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectivePlan {
    pub terms: Vec<Term>,
    pub dist_teacher: Teacher,
    pub anc_dist_teacher: Teacher,
    pub single_branch: bool,
}

impl ObjectivePlan {
    pub fn has(&self, t: Term) -> bool {
        self.terms.contains(&t)
    }

    /// Whether anchors are consumed: by an anchoring term or by a teacher.
    pub fn uses_anchors(&self) -> bool {
        self.terms.iter().any(|t| t.is_anchor())
            || (self.has(Term::Dist) && self.dist_teacher == Teacher::AnchorFused)
    }

    pub fn without(&self, t: Term) -> Self {
        let mut p = self.clone();
        p.terms.retain(|&x| x != t);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls_fuse: f64,
    pub cls_uni: f64,
    pub anc_fuse: f64,
    pub anc_uni: f64,
    pub anc_dist: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls_fuse: 0.5,
            cls_uni: 0.5,
            anc_fuse: 0.6,
            anc_uni: 0.6,
            anc_dist: 0.6,
            dist: 0.9,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cls_fuse: 0.0,
            cls_uni: 0.0,
            anc_fuse: 0.0,
            anc_uni: 0.0,
            anc_dist: 0.0,
            dist: 0.0,
        }
    }

    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::ClsFuse => self.cls_fuse,
            Term::ClsUni => self.cls_uni,
            Term::Dist => self.dist,
            Term::AncFuse => self.anc_fuse,
            Term::AncUni => self.anc_uni,
            Term::AncDist => self.anc_dist,
        }
    }

    pub fn set(&mut self, t: Term, v: f64) {
        let slot = match t {
            Term::ClsFuse => &mut self.cls_fuse,
            Term::ClsUni => &mut self.cls_uni,
            Term::Dist => &mut self.dist,
            Term::AncFuse => &mut self.anc_fuse,
            Term::AncUni => &mut self.anc_uni,
            Term::AncDist => &mut self.anc_dist,
        };
        *slot = v;
    }

    pub fn validate(&self) -> Result<()> {
        for t in Term::ALL {
            let w = self.get(t);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {} must be finite and >= 0, got {w}", t.name())));
            }
        }
        Ok(())
    }
}

/// Mean over rows of `-log(probs[r, labels[r]])`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.shape(probs).last().copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
    }
    let picked = g.gather(probs, labels)?;
    let logp = g.log(picked);
    let m = g.mean(logp);
    Ok(g.neg(m))
}

/// Mean over rows of `KL(teacher ‖ student)`; the teacher is detached.
pub fn distill_loss<T: Scalar>(g: &mut Graph<T>, teacher: Var, student: Var) -> Result<Var> {
    let rows = g.shape(student).first().copied().unwrap_or(1).max(1);
    let t = g.detach(teacher);
    let kl = g.kl_div(t, student)?;
    Ok(g.scale(kl, 1.0 / rows as f64))
}

/// Teacher distributions held fixed at given values instead of being
/// detached from the graph. Finite-difference checks need this: perturbing a
/// parameter moves a detached teacher, which the analytic gradient ignores
/// by design.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTeachers<T> {
    pub fused: Vec<T>,
    pub anc_fused: Option<Vec<T>>,
}

/// Graph handles of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveVars {
    /// Fused classifier distribution ŷ.
    pub fused_probs: Var,
    /// Fused anchor distribution, when anchors are used.
    pub anc_fused_probs: Option<Var>,
    pub terms: Vec<(Term, Var)>,
    pub sup: Option<Var>,
    pub vega: Option<Var>,
    pub total: Var,
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    Ok(acc)
}

/// Builds the weighted objective. `anchors: [C, d_anc]` is required
/// whenever the plan uses anchors.
pub fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    out: &HeadOutputs,
    anchors: Option<Var>,
    labels: &[usize],
    plan: &ObjectivePlan,
    weights: &LossWeights,
) -> Result<ObjectiveVars> {
    build_objective_with(g, out, anchors, labels, plan, weights, None)
}

/// [`build_objective`] with optionally frozen teacher values.
pub fn build_objective_with<T: Scalar>(
    g: &mut Graph<T>,
    out: &HeadOutputs,
    anchors: Option<Var>,
    labels: &[usize],
    plan: &ObjectivePlan,
    weights: &LossWeights,
    frozen: Option<&FrozenTeachers<T>>,
) -> Result<ObjectiveVars> {
    let fused = g.softmax(out.fused_logits, 1)?;
    let uni: Vec<Var> = out
        .uni_logits
        .iter()
        .map(|&l| g.softmax(l, 1))
        .collect::<std::result::Result<_, _>>()?;

    let (anc_fused, anc_uni) = if plan.uses_anchors() {
        let anchors = anchors.ok_or_else(|| Error::Config("objective uses anchors but none were given".into()))?;
        let fp = out
            .fused_proj
            .ok_or_else(|| Error::Config("objective uses anchors but the model has no anchoring head".into()))?;
        let s = g.row_cosine(fp, anchors)?;
        let af = g.softmax(s, 1)?;
        let mut au = Vec::with_capacity(out.uni_proj.len());
        for &z in &out.uni_proj {
            let s = g.row_cosine(z, anchors)?;
            au.push(g.softmax(s, 1)?);
        }
        (Some(af), au)
    } else {
        (None, Vec::new())
    };
    let (t_fused, t_anc) = match frozen {
        None => (fused, anc_fused),
        Some(fz) => {
            let shape = g.shape(fused).to_vec();
            let tf = g.constant(vega_autodiff::Tensor::new(shape.clone(), fz.fused.clone())?);
            let ta = match &fz.anc_fused {
                Some(v) => Some(g.constant(vega_autodiff::Tensor::new(shape, v.clone())?)),
                None => anc_fused,
            };
            (tf, ta)
        }
    };
    let teacher = |t: Teacher| match t {
        Teacher::Fused => Some(t_fused),
        Teacher::AnchorFused => t_anc,
    };

    let mut terms = Vec::with_capacity(plan.terms.len());
    for &t in &Term::ALL {
        if !plan.has(t) {
            continue;
        }
        let v = match t {
            Term::ClsFuse => ce_loss(g, fused, labels)?,
            Term::ClsUni => {
                let parts = uni.iter().map(|&p| ce_loss(g, p, labels)).collect::<Result<Vec<_>>>()?;
                sum_vars(g, &parts)?.expect("at least one modality")
            }
            Term::Dist => {
                let tv = teacher(plan.dist_teacher).expect("plan consumes anchors for this teacher");
                let parts = uni.iter().map(|&p| distill_loss(g, tv, p)).collect::<Result<Vec<_>>>()?;
                sum_vars(g, &parts)?.expect("at least one modality")
            }
            Term::AncFuse => ce_loss(g, anc_fused.expect("anchors enabled"), labels)?,
            Term::AncUni => {
                let parts = anc_uni.iter().map(|&p| ce_loss(g, p, labels)).collect::<Result<Vec<_>>>()?;
                sum_vars(g, &parts)?.expect("at least one modality")
            }
            Term::AncDist => {
                let tv = teacher(plan.anc_dist_teacher).expect("anchors enabled");
                let parts = anc_uni.iter().map(|&p| distill_loss(g, tv, p)).collect::<Result<Vec<_>>>()?;
                sum_vars(g, &parts)?.expect("at least one modality")
            }
        };
        terms.push((t, v));
    }

    let mut weighted = |is_anchor: bool| -> Result<Option<Var>> {
        let parts: Vec<Var> = terms
            .iter()
            .filter(|(t, _)| t.is_anchor() == is_anchor)
            .map(|&(t, v)| g.scale(v, weights.get(t)))
            .collect();
        sum_vars(g, &parts)
    };
    let sup = weighted(false)?;
    let vega = weighted(true)?;
    let total = match (sup, vega) {
        (Some(s), Some(v)) => g.add(s, v)?,
        (Some(s), None) => s,
        (None, Some(v)) => v,
        (None, None) => g.constant(vega_autodiff::Tensor::scalar(T::zero())),
    };
    Ok(ObjectiveVars {
        fused_probs: fused,
        anc_fused_probs: anc_fused,
        terms,
        sup,
        vega,
        total,
    })
}

/// Scalar values of every active term and the branch totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub sup: f64,
    pub vega: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_vars<T: Scalar>(g: &Graph<T>, v: &ObjectiveVars) -> Self {
        let val = |x: Var| g.values(x)[0].as_f64();
        Self {
            terms: v.terms.iter().map(|&(t, x)| (t.name().to_string(), val(x))).collect(),
            sup: v.sup.map_or(0.0, val),
            vega: v.vega.map_or(0.0, val),
            total: val(v.total),
        }
    }

    /// First non-finite entry, naming the term.
    pub fn non_finite(&self) -> Option<(String, f64)> {
        self.terms
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .chain([("total".to_string(), self.total)])
            .find(|(_, v)| !v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
