//! Random-forest classifier shared by the title, stage and pattern models.
//!
//! CART trees on bootstrap samples, Gini impurity, `ceil(sqrt(arity))`
//! candidate attributes per split, plurality vote across trees. Split
//! thresholds are actual training values (`x <= a` goes left), so a model
//! trained on a strictly increasing transform of an attribute makes the
//! same predictions on transformed inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};

pub const MODEL_FORMAT: &str = "cglens-forest";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub rng_seed: u64,
}

impl ForestParams {
    pub fn new(n_trees: usize, max_depth: usize, rng_seed: u64) -> Self {
        ForestParams {
            n_trees,
            max_depth,
            rng_seed,
        }
    }
}

/// Training rows with class indices into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

impl Dataset {
    /// Build from string labels with an explicit class order (the order
    /// decides vote ties). Labels outside `classes` are a validation error.
    pub fn with_classes<S: AsRef<str>>(classes: Vec<String>, rows: Vec<Vec<f64>>, labels: &[S]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let targets = labels
            .iter()
            .map(|l| {
                index
                    .get(l.as_ref())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("label `{}` is not a known class", l.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { classes, rows, targets })
    }

    /// Build from string labels; classes are the sorted distinct labels.
    pub fn from_labels<S: AsRef<str>>(rows: Vec<Vec<f64>>, labels: &[S]) -> Result<Self> {
        let mut classes: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        classes.sort();
        classes.dedup();
        Dataset::with_classes(classes, rows, labels)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let arity = self.arity();
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != arity {
                return Err(Error::Validation(format!("row {i} has {} attributes, expected {arity}", r.len())));
            }
            if let Some(j) = r.iter().position(|v| v.is_nan()) {
                return Err(Error::Validation(format!("row {i} attribute {j} is NaN")));
            }
        }
        if let Some(t) = self.targets.iter().find(|t| **t >= self.classes.len()) {
            return Err(Error::Validation(format!("target {t} out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        #[serde(rename = "f")]
        feature: u32,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "l")]
        left: u32,
        #[serde(rename = "r")]
        right: u32,
    },
    Leaf {
        #[serde(rename = "c")]
        class: u32,
    },
}

/// One tree as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { class } => return class as usize,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left as usize).max(go(t, right as usize)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub label: String,
    /// Share of trees voting for `label`.
    pub confidence: f64,
    /// Vote share per class, in class order.
    pub votes: Vec<f64>,
}

/// Trained ensemble; also the on-disk JSON model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format: String,
    pub version: u32,
    /// Free-form description of what the model classifies, e.g. `title`.
    #[serde(default)]
    pub task: String,
    pub classes: Vec<String>,
    pub arity: usize,
    #[serde(default)]
    pub feature_names: Vec<String>,
    pub n_trees: usize,
    pub max_depth: usize,
    pub rng_seed: u64,
    pub trees: Vec<Tree>,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

struct Builder<'a> {
    data: &'a Dataset,
    n_classes: usize,
    mtry: usize,
    max_depth: usize,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    features: Vec<usize>,
    scratch: Vec<(f64, usize)>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Builder<'_> {
    /// Leaf label; tied counts are broken at random so identical rows with
    /// different labels do not all fall to the first class.
    fn leaf_class(&mut self, counts: &[usize]) -> usize {
        let top = counts.iter().copied().max().unwrap_or(0);
        let tied: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == top).collect();
        if tied.len() == 1 {
            tied[0]
        } else {
            tied[self.rng.random_range(0..tied.len())]
        }
    }

    fn class_counts(&self, samples: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &s in samples {
            c[self.data.targets[s]] += 1;
        }
        c
    }

    fn best_split(&mut self, samples: &[usize], parent: &[usize]) -> Option<BestSplit> {
        self.features.shuffle(&mut self.rng);
        let mut best: Option<BestSplit> = None;
        let mut tried = 0;
        let n = samples.len();
        for fi in 0..self.features.len() {
            if tried >= self.mtry {
                break;
            }
            let f = self.features[fi];
            self.scratch.clear();
            self.scratch
                .extend(samples.iter().map(|&s| (self.data.rows[s][f], self.data.targets[s])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if self.scratch[0].0 == self.scratch[n - 1].0 {
                continue;
            }
            tried += 1;
            let mut left = vec![0usize; self.n_classes];
            for k in 0..n - 1 {
                left[self.scratch[k].1] += 1;
                if self.scratch[k].0 == self.scratch[k + 1].0 {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                let right: Vec<usize> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
                let imp = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.as_ref().is_none_or(|b| imp < b.impurity) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: self.scratch[k].0,
                        impurity: imp,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let counts = self.class_counts(&samples);
        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        let split = if pure || depth >= self.max_depth || samples.len() < 2 {
            None
        } else {
            self.best_split(&samples, &counts)
        };
        let Some(split) = split else {
            let class = self.leaf_class(&counts) as u32;
            self.nodes.push(Node::Leaf { class });
            return id;
        };
        self.nodes.push(Node::Leaf { class: 0 });
        let (l, r): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&s| self.data.rows[s][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

fn tree_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fit_tree(data: &Dataset, params: &ForestParams, index: usize) -> Tree {
    let mut rng = tree_rng(params.rng_seed, index as u64);
    let n = data.len();
    let samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let arity = data.arity();
    let mut b = Builder {
        data,
        n_classes: data.classes.len(),
        mtry: (arity as f64).sqrt().ceil().max(1.0) as usize,
        max_depth: params.max_depth,
        nodes: Vec::new(),
        rng,
        features: (0..arity).collect(),
        scratch: Vec::with_capacity(n),
    };
    b.grow(samples, 0);
    Tree { nodes: b.nodes }
}

/// Fit a forest. Trees are independent and joined by index, so the result
/// does not depend on `exec`.
pub fn train(data: &Dataset, params: &ForestParams, exec: Exec) -> Result<Forest> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let mut seen = data.targets.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 classes, dataset has {}",
            seen.len()
        )));
    }
    if params.n_trees == 0 {
        return Err(Error::Training("n_trees must be positive".into()));
    }
    let trees = map_indexed(exec, params.n_trees, |i| fit_tree(data, params, i));
    Ok(Forest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        task: String::new(),
        classes: data.classes.clone(),
        arity: data.arity(),
        feature_names: Vec::new(),
        n_trees: params.n_trees,
        max_depth: params.max_depth,
        rng_seed: params.rng_seed,
        trees,
    })
}

impl Forest {
    pub fn with_task(mut self, task: &str, feature_names: Vec<String>) -> Self {
        self.task = task.to_string();
        self.feature_names = feature_names;
        self
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arity {
            return Err(Error::ArityMismatch {
                expected: self.arity,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("NaN attribute".into()));
        }
        Ok(())
    }

    fn vote(&self, x: &[f64]) -> Vec<usize> {
        let mut votes = vec![0usize; self.classes.len()];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        votes
    }

    /// Plurality vote; ties go to the earlier class.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.check(x)?;
        let votes = self.vote(x);
        let class = majority(&votes);
        let n = self.trees.len() as f64;
        let shares: Vec<f64> = votes.iter().map(|&v| v as f64 / n).collect();
        Ok(Prediction {
            class,
            label: self.classes[class].clone(),
            confidence: shares[class],
            votes: shares,
        })
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        self.check(x)?;
        Ok(majority(&self.vote(x)))
    }

    /// Fraction of rows predicted correctly.
    pub fn accuracy(&self, rows: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("accuracy over an empty set".into()));
        }
        let mut hits = 0usize;
        for (x, &t) in rows.iter().zip(targets) {
            if self.predict_class(x)? == t {
                hits += 1;
            }
        }
        Ok(hits as f64 / rows.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Forest> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        match probe.get("format").and_then(|f| f.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => return Err(Error::ModelFormat(format!("format tag {other:?}"))),
        }
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version == 0 || version > MODEL_VERSION as u64 {
            return Err(Error::ModelFormat(format!(
                "version {version} (this build reads up to {MODEL_VERSION})"
            )));
        }
        let f: Forest = serde_json::from_value(probe)?;
        f.validate_structure()?;
        Ok(f)
    }

    fn validate_structure(&self) -> Result<()> {
        if self.classes.is_empty() || self.trees.is_empty() {
            return Err(Error::ModelFormat("model has no classes or no trees".into()));
        }
        for (ti, t) in self.trees.iter().enumerate() {
            let n = t.nodes.len();
            if n == 0 {
                return Err(Error::ModelFormat(format!("tree {ti} is empty")));
            }
            for (i, node) in t.nodes.iter().enumerate() {
                let ok = match *node {
                    Node::Leaf { class } => (class as usize) < self.classes.len(),
                    Node::Split {
                        feature, left, right, ..
                    } => {
                        (feature as usize) < self.arity
                            && (left as usize) > i
                            && (left as usize) < n
                            && (right as usize) > i
                            && (right as usize) < n
                    }
                };
                if !ok {
                    return Err(Error::ModelFormat(format!("tree {ti} node {i} is malformed")));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Forest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Forest::from_json(&text)
    }
}

/// Accuracy drop when one attribute column is shuffled, averaged over
/// `n_repeats` shuffles. Each (attribute, repeat) pair has its own RNG
/// stream, so results do not depend on `exec`.
pub fn permutation_importance(
    model: &Forest,
    rows: &[Vec<f64>],
    targets: &[usize],
    rng_seed: u64,
    n_repeats: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    let base = model.accuracy(rows, targets)?;
    let n_repeats = n_repeats.max(1);
    let per_attr = map_indexed(exec, model.arity, |a| -> Result<f64> {
        let mut shuffled: Vec<Vec<f64>> = rows.to_vec();
        let mut column: Vec<f64> = rows.iter().map(|r| r[a]).collect();
        let mut total = 0.0;
        for r in 0..n_repeats {
            let mut rng = tree_rng(rng_seed, (a * n_repeats + r) as u64);
            column.shuffle(&mut rng);
            for (row, v) in shuffled.iter_mut().zip(&column) {
                row[a] = *v;
            }
            total += model.accuracy(&shuffled, targets)?;
        }
        Ok(base - total / n_repeats as f64)
    });
    per_attr.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor() -> Dataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                let x = i as f64 / 9.0;
                let y = j as f64 / 9.0;
                rows.push(vec![x, y]);
                labels.push(if (x < 0.5) ^ (y < 0.5) { "one" } else { "zero" });
            }
        }
        Dataset::from_labels(rows, &labels).unwrap()
    }

    #[test]
    fn fits_xor() {
        let d = xor();
        let f = train(&d, &ForestParams::new(100, 4, 1), Exec::Parallel).unwrap();
        assert_eq!(f.accuracy(&d.rows, &d.targets).unwrap(), 1.0);
        assert!(f.trees.iter().all(|t| t.depth() <= 4));
    }

    #[test]
    fn deterministic_across_exec_modes() {
        let d = xor();
        let a = train(&d, &ForestParams::new(20, 4, 9), Exec::Sequential).unwrap();
        let b = train(&d, &ForestParams::new(20, 4, 9), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_and_nan_are_rejected() {
        let d = Dataset::from_labels(vec![vec![1.0], vec![2.0]], &["a", "a"]).unwrap();
        assert!(matches!(train(&d, &ForestParams::new(5, 3, 0), Exec::Sequential), Err(Error::Training(_))));
        let d = Dataset::from_labels(vec![vec![f64::NAN], vec![2.0]], &["a", "b"]).unwrap();
        assert!(matches!(train(&d, &ForestParams::new(5, 3, 0), Exec::Sequential), Err(Error::Validation(_))));
    }

    fn stump_forest(votes: &[(u32, usize)]) -> Forest {
        let trees = votes
            .iter()
            .flat_map(|&(c, n)| std::iter::repeat_n(Tree { nodes: vec![Node::Leaf { class: c }] }, n))
            .collect::<Vec<_>>();
        Forest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            task: String::new(),
            classes: vec!["c".into(), "d".into(), "e".into()],
            arity: 1,
            feature_names: vec![],
            n_trees: trees.len(),
            max_depth: 0,
            rng_seed: 0,
            trees,
        }
    }

    #[test]
    fn vote_shares_and_ties() {
        let p = stump_forest(&[(0, 40), (1, 35), (2, 25)]).predict(&[0.0]).unwrap();
        assert_eq!(p.label, "c");
        assert!((p.confidence - 0.40).abs() < 1e-12);
        assert!((p.votes.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = stump_forest(&[(1, 50), (0, 50)]).predict(&[0.0]).unwrap();
        assert_eq!(p.label, "c");
        let p = stump_forest(&[(2, 7)]).predict(&[0.0]).unwrap();
        assert_eq!((p.label.as_str(), p.confidence), ("e", 1.0));
        assert!(matches!(
            stump_forest(&[(0, 1)]).predict(&[0.0, 1.0]),
            Err(Error::ArityMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn json_roundtrip_and_version_gate() {
        let d = xor();
        let f = train(&d, &ForestParams::new(5, 3, 2), Exec::Sequential).unwrap();
        let back = Forest::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(f, back);
        let future = f.to_json().unwrap().replace("\"version\":1", "\"version\":99");
        assert!(matches!(Forest::from_json(&future), Err(Error::ModelFormat(_))));
        assert!(matches!(Forest::from_json("{\"format\":\"other\"}"), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn constant_attribute_has_zero_importance() {
        let mut d = xor();
        for r in &mut d.rows {
            r.push(3.0);
        }
        let f = train(&d, &ForestParams::new(30, 5, 4), Exec::Sequential).unwrap();
        let imp = permutation_importance(&f, &d.rows, &d.targets, 7, 3, Exec::Parallel).unwrap();
        assert_eq!(imp[2], 0.0);
        assert!(imp[0] > 0.1 && imp[1] > 0.1);
    }
}
