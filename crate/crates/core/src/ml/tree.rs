//! CART decision trees and bagged forests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitter {
    Best,
    Random,
}

/// Number of features considered at each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    Sqrt,
    Log2,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        let k = match self {
            MaxFeatures::All => d,
            MaxFeatures::Sqrt => (d as f64).sqrt().floor() as usize,
            MaxFeatures::Log2 => (d as f64).log2().floor() as usize,
            MaxFeatures::Count(k) => k,
        };
        k.clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeParams {
    pub criterion: Criterion,
    pub splitter: Splitter,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            criterion: Criterion::Gini,
            splitter: Splitter::Best,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        /// Fraction of label-1 samples in the leaf.
        p1: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
}

fn impurity(criterion: Criterion, n1: f64, n: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    let p = n1 / n;
    match criterion {
        Criterion::Gini => 2.0 * p * (1.0 - p),
        Criterion::Entropy => {
            let h = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
            h(p) + h(1.0 - p)
        }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    params: &'a TreeParams,
    n_try: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let n1 = idx.iter().filter(|&&i| self.y[i] == 1).count();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            p1: n1 as f64 / n.max(1) as f64,
        });
        let pure = n1 == 0 || n1 == n;
        let depth_ok = self.params.max_depth.map_or(true, |m| depth < m);
        if pure || !depth_ok || n < self.params.min_samples_split || n < 2 * self.params.min_samples_leaf {
            return id;
        }
        let Some(best) = self.find_split(idx, n1) else {
            return id;
        };
        let (mut l, mut r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][best.feature] <= best.threshold);
        let left = self.build(&mut l, depth + 1);
        let right = self.build(&mut r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn find_split(&mut self, idx: &[usize], n1: usize) -> Option<BestSplit> {
        let d = self.x[0].len();
        let n = idx.len() as f64;
        let parent = impurity(self.params.criterion, n1 as f64, n);
        let min_leaf = self.params.min_samples_leaf.max(1);
        let mut features: Vec<usize> = (0..d).collect();
        if self.n_try < d {
            features.shuffle(&mut self.rng);
        }
        let mut best: Option<BestSplit> = None;
        let mut tried = 0;
        let mut order: Vec<usize> = idx.to_vec();
        for &f in &features {
            if tried >= self.n_try && best.is_some() {
                break;
            }
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let lo = self.x[order[0]][f];
            let hi = self.x[order[order.len() - 1]][f];
            tried += 1;
            if hi <= lo {
                continue;
            }
            let consider = |k: usize, threshold: f64, best: &mut Option<BestSplit>, left1: usize| {
                let nl = k as f64;
                let nr = n - nl;
                let child = (nl * impurity(self.params.criterion, left1 as f64, nl)
                    + nr * impurity(self.params.criterion, (n1 - left1) as f64, nr))
                    / n;
                let gain = parent - child;
                if gain > -1e-12 && best.as_ref().map_or(true, |b| gain > b.score + 1e-15) {
                    *best = Some(BestSplit {
                        feature: f,
                        threshold,
                        score: gain,
                    });
                }
            };
            match self.params.splitter {
                Splitter::Best => {
                    let mut left1 = 0;
                    for k in 1..order.len() {
                        left1 += self.y[order[k - 1]] as usize;
                        let (a, b) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                        if b <= a || k < min_leaf || order.len() - k < min_leaf {
                            continue;
                        }
                        let mut t = 0.5 * (a + b);
                        if t >= b {
                            t = a;
                        }
                        consider(k, t, &mut best, left1);
                    }
                }
                Splitter::Random => {
                    let t = self.rng.gen_range(lo..hi);
                    let k = order.partition_point(|&i| self.x[i][f] <= t);
                    if k >= min_leaf && order.len() - k >= min_leaf {
                        let left1 = order[..k].iter().filter(|&&i| self.y[i] == 1).count();
                        consider(k, t, &mut best, left1);
                    }
                }
            }
        }
        best
    }
}

impl DecisionTree {
    pub fn fit(x: &[Vec<f64>], y: &[u8], params: &TreeParams) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let mut builder = Builder {
            x,
            y,
            params,
            n_try: params.max_features.resolve(d),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            nodes: Vec::new(),
        };
        let mut idx: Vec<usize> = (0..x.len()).collect();
        builder.build(&mut idx, 0);
        Self {
            nodes: builder.nodes,
            n_features: d,
        }
    }

    /// Fraction of label-1 training samples in the leaf reached by `row`.
    pub fn proba(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { p1 } => return *p1,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub criterion: Criterion,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            criterion: Criterion::Gini,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[u8], params: &ForestParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let n = x.len();
        let trees = (0..params.n_estimators.max(1))
            .map(|_| {
                let tree_params = TreeParams {
                    criterion: params.criterion,
                    splitter: Splitter::Best,
                    max_depth: params.max_depth,
                    min_samples_split: params.min_samples_split,
                    min_samples_leaf: params.min_samples_leaf,
                    max_features: params.max_features,
                    seed: rng.gen(),
                };
                if params.bootstrap {
                    let pick: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                    let bx: Vec<Vec<f64>> = pick.iter().map(|&i| x[i].clone()).collect();
                    let by: Vec<u8> = pick.iter().map(|&i| y[i]).collect();
                    DecisionTree::fit(&bx, &by, &tree_params)
                } else {
                    DecisionTree::fit(x, y, &tree_params)
                }
            })
            .collect();
        Self { trees }
    }

    /// Mean of the trees' leaf fractions.
    pub fn proba(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.proba(row)).sum::<f64>() / self.trees.len() as f64
    }
}
