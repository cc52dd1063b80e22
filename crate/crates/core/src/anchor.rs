//! Visual emotion anchors: class centers, stochastic sampling and
//! cosine-similarity anchoring distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vega_autodiff::{Graph, Scalar, Tensor, Var};

use crate::data::AnchorFile;
use crate::error::{Error, Result};

/// Per-class instance embeddings and their means. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    classes: Vec<String>,
    dim: usize,
    instances: Vec<Vec<Vec<f32>>>,
    centers: Vec<Vec<f32>>,
}

/// Componentwise mean of each class's instances.
pub fn build_centers(classes: &[String], instances: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    instances
        .iter()
        .zip(classes)
        .map(|(vecs, name)| {
            let first = vecs.first().ok_or_else(|| Error::EmptyAnchorClass(name.clone()))?;
            let mut acc = vec![0f64; first.len()];
            for v in vecs {
                acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
            }
            let n = vecs.len() as f64;
            Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
        })
        .collect()
}

impl AnchorSet {
    pub fn new(classes: Vec<String>, instances: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        if classes.len() != instances.len() {
            return Err(Error::Argument(format!(
                "{} class names for {} instance lists",
                classes.len(),
                instances.len()
            )));
        }
        let centers = build_centers(&classes, &instances)?;
        let dim = centers.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Argument("anchor dimension must be positive".into()));
        }
        if instances.iter().flatten().any(|v| v.len() != dim) {
            return Err(Error::Argument("anchor vectors differ in dimension".into()));
        }
        Ok(Self {
            classes,
            dim,
            instances,
            centers,
        })
    }

    /// Builds the set from a VEA1 file, optionally keeping only the first
    /// `per_class` instances of each class.
    pub fn from_file(file: &AnchorFile, per_class: Option<usize>) -> Result<Self> {
        let instances = (0..file.classes.len())
            .map(|c| {
                let n = file.class_count(c);
                let keep = per_class.map_or(n, |k| k.min(n));
                (0..keep).map(|i| file.vector(c, i).to_vec()).collect()
            })
            .collect();
        let classes = file.classes.iter().map(|c| c.name.clone()).collect();
        Self::new(classes, instances)
    }

    /// Reorders classes to match `names`, failing if any is missing.
    pub fn aligned_to(&self, names: &[String]) -> Result<Self> {
        let mut instances = Vec::with_capacity(names.len());
        for name in names {
            let c = self
                .classes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Argument(format!("anchor file has no class {name:?}")))?;
            instances.push(self.instances[c].clone());
        }
        Self::new(names.to_vec(), instances)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn instances(&self, class: usize) -> &[Vec<f32>] {
        &self.instances[class]
    }

    pub fn center(&self, class: usize) -> &[f32] {
        &self.centers[class]
    }

    pub fn centers(&self) -> &[Vec<f32>] {
        &self.centers
    }

    pub fn resolve(&self, class: usize, choice: AnchorChoice) -> &[f32] {
        match choice {
            AnchorChoice::Center => &self.centers[class],
            AnchorChoice::Instance(j) => &self.instances[class][j],
        }
    }

    /// Writes the centers as a file with one vector per class.
    pub fn centers_file(&self) -> AnchorFile {
        AnchorFile {
            dim: self.dim,
            classes: self
                .classes
                .iter()
                .zip(&self.centers)
                .map(|(name, c)| crate::data::AnchorClass {
                    name: name.clone(),
                    vectors: c.clone(),
                })
                .collect(),
        }
    }

    /// Draws one anchor per class, in class order.
    pub fn sample_all<R: Rng + ?Sized>(&self, policy: &SamplingPolicy, rng: &mut R) -> Vec<AnchorChoice> {
        (0..self.num_classes())
            .map(|c| sample_anchor(self, c, policy, rng))
            .collect()
    }

    /// `[num_classes, dim]` matrix of the chosen anchors.
    pub fn matrix(&self, choices: &[AnchorChoice]) -> Vec<f32> {
        choices
            .iter()
            .enumerate()
            .flat_map(|(c, &ch)| self.resolve(c, ch).iter().copied())
            .collect()
    }

    pub fn center_matrix(&self) -> Vec<f32> {
        self.centers.iter().flatten().copied().collect()
    }
}

/// Stochastic anchor sampling.
///
/// `q` is the probability of drawing a uniformly random *instance* anchor;
/// with probability `1 - q` the class center is used. `q = 0` therefore
/// always selects centers and `q = 1` always selects instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub q: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self { q: 0.2 }
    }
}

impl SamplingPolicy {
    pub fn new(q: f64) -> Result<Self> {
        let p = Self { q };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::Config(format!("sampling q must lie in [0, 1], got {}", self.q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnchorChoice {
    Center,
    Instance(usize),
}

/// Consumes one Bernoulli draw, plus one uniform index draw when the
/// instance branch is taken.
pub fn sample_anchor<R: Rng + ?Sized>(
    set: &AnchorSet,
    class: usize,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> AnchorChoice {
    if rng.random::<f64>() < policy.q {
        AnchorChoice::Instance(rng.random_range(0..set.instances[class].len()))
    } else {
        AnchorChoice::Center
    }
}

/// Cosine similarity of each row of `x: [N, d_anc]` with each anchor row of
/// `anchors: [C, d_anc]`, giving `[N, C]`.
pub fn anchor_scores_graph<T: Scalar>(g: &mut Graph<T>, x: Var, anchors: Var) -> Result<Var> {
    Ok(g.row_cosine(x, anchors)?)
}

/// Softmax of anchor scores over classes.
pub fn anchor_distribution_graph<T: Scalar>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    let axis = g.shape(scores).len().saturating_sub(1);
    Ok(g.softmax(scores, axis)?)
}

/// Scores of a single vector against one anchor per class. A zero-norm
/// `x` yields all zeros and a warning string.
pub fn anchor_scores(x: &[f32], anchors: &[&[f32]]) -> Result<(Vec<f32>, Vec<String>)> {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::new([1, x.len()], x.to_vec())?);
    let flat: Vec<f32> = anchors.iter().flat_map(|a| a.iter().copied()).collect();
    let av = g.constant(Tensor::new([anchors.len(), x.len()], flat)?);
    let s = anchor_scores_graph(&mut g, xv, av)?;
    Ok((g.values(s).to_vec(), g.warnings().to_vec()))
}

pub fn anchor_distribution(scores: &[f32]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let s = g.constant(Tensor::new([scores.len()], scores.to_vec())?);
    let d = anchor_distribution_graph(&mut g, s)?;
    Ok(g.values(d).to_vec())
}

/// Mean pairwise cosine between distinct instances of one class; 1.0 for a
/// single instance.
pub fn mean_intra_class_cosine(set: &AnchorSet, class: usize) -> f64 {
    let inst = set.instances(class);
    if inst.len() < 2 {
        return 1.0;
    }
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..inst.len() {
        for j in i + 1..inst.len() {
            let dot: f64 = inst[i].iter().zip(&inst[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
            total += dot / (norm(&inst[i]) * norm(&inst[j])).max(vega_autodiff::EPS);
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn two_point_and_single_centers() {
        let set = AnchorSet::new(
            names(2),
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.3, -0.7]]],
        )
        .unwrap();
        assert_eq!(set.center(0), &[0.5, 0.5]);
        assert_eq!(set.center(1), &[0.3, -0.7]);
    }

    #[test]
    fn empty_class_is_named() {
        let err = AnchorSet::new(names(2), vec![vec![vec![1.0]], vec![]]).unwrap_err();
        assert!(matches!(err, Error::EmptyAnchorClass(ref n) if n == "c1"));
    }

    #[test]
    fn extreme_q_values() {
        let set = AnchorSet::new(names(1), vec![vec![vec![1.0], vec![2.0], vec![3.0]]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let center = SamplingPolicy::new(0.0).unwrap();
        let random = SamplingPolicy::new(1.0).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_anchor(&set, 0, &center, &mut rng), AnchorChoice::Center);
            assert!(matches!(
                sample_anchor(&set, 0, &random, &mut rng),
                AnchorChoice::Instance(j) if j < 3
            ));
        }
        assert!(SamplingPolicy::new(1.5).is_err());
        assert!(SamplingPolicy::new(-0.1).is_err());
    }

    #[test]
    fn orthogonal_anchor_scores() {
        let a0 = [1.0, 0.0, 0.0];
        let a1 = [0.0, 1.0, 0.0];
        let a2 = [0.0, 0.0, 1.0];
        let (s, w) = anchor_scores(&[0.0, 1.0, 0.0], &[&a0, &a1, &a2]).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 0.0]);
        assert!(w.is_empty());
        let (s, _) = anchor_scores(&[0.0, 0.0, 0.0, 1.0], &[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        let (s, w) = anchor_scores(&[0.0, 0.0, 0.0], &[&a0, &a1]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn distribution_examples() {
        let d = anchor_distribution(&[0.3, 0.3, 0.3, 0.3]).unwrap();
        assert!(d.iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let d = anchor_distribution(&[1.0, 0.0]).unwrap();
        assert!((d[0] - 0.7311).abs() < 1e-4 && (d[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn intra_class_cosine_of_duplicates_is_one() {
        let v = vec![0.2, -0.4, 0.9];
        let set = AnchorSet::new(names(1), vec![vec![v.clone(), v.clone(), v]]).unwrap();
        assert!((mean_intra_class_cosine(&set, 0) - 1.0).abs() < 1e-9);
    }
}
