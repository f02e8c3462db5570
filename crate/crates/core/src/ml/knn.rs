//! k-nearest-neighbour voting.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Uniform,
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnParams {
    pub n_neighbors: usize,
    pub weights: Weights,
    /// Minkowski exponent.
    pub p: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            n_neighbors: 5,
            weights: Weights::Uniform,
            p: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub params: KnnParams,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
}

fn minkowski(a: &[f64], b: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    if p == 1.0 {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum::<f64>()
        .powf(1.0 / p)
}

impl Knn {
    pub fn fit(x: &[Vec<f64>], y: &[u8], params: &KnnParams) -> Self {
        Self {
            params: params.clone(),
            x: x.to_vec(),
            y: y.to_vec(),
        }
    }

    /// Weighted vote share of label 1 among the nearest neighbours. Equal
    /// distances are resolved by training order.
    pub fn proba(&self, row: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| (minkowski(r, row, self.params.p), i))
            .collect();
        let k = self.params.n_neighbors.clamp(1, d.len());
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nearest = d[..k].to_vec();
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let weight = |dist: f64| match self.params.weights {
            Weights::Uniform => 1.0,
            Weights::Distance => 1.0 / dist,
        };
        let exact: Vec<&(f64, usize)> = nearest.iter().filter(|(dist, _)| *dist == 0.0).collect();
        let (w1, w) = if self.params.weights == Weights::Distance && !exact.is_empty() {
            let n1 = exact.iter().filter(|(_, i)| self.y[*i] == 1).count();
            (n1 as f64, exact.len() as f64)
        } else {
            nearest.iter().fold((0.0, 0.0), |(w1, w), &(dist, i)| {
                let wi = weight(dist);
                (w1 + if self.y[i] == 1 { wi } else { 0.0 }, w + wi)
            })
        };
        w1 / w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbour_of_a_training_row_is_itself() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.5]];
        let y = vec![0, 1, 0];
        let m = Knn::fit(
            &x,
            &y,
            &KnnParams {
                n_neighbors: 1,
                ..KnnParams::default()
            },
        );
        for (r, l) in x.iter().zip(&y) {
            assert_eq!((m.proba(r) > 0.5) as u8, *l);
        }
    }

    #[test]
    fn even_split_is_a_tie() {
        let m = Knn::fit(
            &[vec![0.0], vec![2.0]],
            &[0, 1],
            &KnnParams {
                n_neighbors: 2,
                ..KnnParams::default()
            },
        );
        assert_eq!(m.proba(&[1.0]), 0.5);
    }

    #[test]
    fn minkowski_orders() {
        assert_eq!(minkowski(&[0.0, 0.0], &[3.0, 4.0], 2.0), 5.0);
        assert_eq!(minkowski(&[0.0, 0.0], &[3.0, 4.0], 1.0), 7.0);
        assert!((minkowski(&[0.0, 0.0], &[3.0, 4.0], 3.0) - 91f64.powf(1.0 / 3.0)).abs() < 1e-12);
    }
}
