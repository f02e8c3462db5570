//! Regularized logistic regression by proximal gradient descent.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    L1,
    L2,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    None,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticParams {
    pub penalty: Penalty,
    /// Inverse regularization strength.
    #[serde(rename = "C")]
    pub c: f64,
    pub fit_intercept: bool,
    pub class_weight: ClassWeight,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            penalty: Penalty::L2,
            c: 1.0,
            fit_intercept: true,
            class_weight: ClassWeight::None,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    sample_w: Vec<f64>,
    params: &'a LogisticParams,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.x.len() as f64
    }

    fn margin(&self, w: &[f64], b: f64, r: &[f64]) -> f64 {
        b + w.iter().zip(r).map(|(a, c)| a * c).sum::<f64>()
    }

    /// Mean weighted log-loss plus the smooth (L2) part of the penalty.
    fn smooth_loss(&self, w: &[f64], b: f64) -> f64 {
        let mut loss = 0.0;
        for ((r, &y), sw) in self.x.iter().zip(self.y).zip(&self.sample_w) {
            let z = self.margin(w, b, r);
            loss += sw * if y == 1 { softplus(-z) } else { softplus(z) };
        }
        loss /= self.n();
        if self.params.penalty == Penalty::L2 {
            loss += 0.5 * w.iter().map(|v| v * v).sum::<f64>() / (self.params.c * self.n());
        }
        loss
    }

    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for ((r, &y), sw) in self.x.iter().zip(self.y).zip(&self.sample_w) {
            let e = sw * (sigmoid(self.margin(w, b, r)) - y as f64);
            gb += e;
            for (g, v) in gw.iter_mut().zip(r) {
                *g += e * v;
            }
        }
        let n = self.n();
        gw.iter_mut().for_each(|g| *g /= n);
        if self.params.penalty == Penalty::L2 {
            for (g, v) in gw.iter_mut().zip(w) {
                *g += v / (self.params.c * n);
            }
        }
        (gw, if self.params.fit_intercept { gb / n } else { 0.0 })
    }

    fn prox(&self, w: &mut [f64], step: f64) {
        if self.params.penalty == Penalty::L1 {
            let t = step / (self.params.c * self.n());
            for v in w.iter_mut() {
                *v = v.signum() * (v.abs() - t).max(0.0);
            }
        }
    }
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[u8], params: &LogisticParams) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n1 = y.iter().filter(|&&l| l == 1).count() as f64;
        let n0 = y.len() as f64 - n1;
        let sample_w: Vec<f64> = y
            .iter()
            .map(|&l| match params.class_weight {
                ClassWeight::None => 1.0,
                ClassWeight::Balanced => {
                    let count = if l == 1 { n1 } else { n0 };
                    y.len() as f64 / (2.0 * count.max(1.0))
                }
            })
            .collect();
        let prob = Problem {
            x,
            y,
            sample_w,
            params,
        };
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut step = 1.0;
        let mut f = prob.smooth_loss(&w, b);
        for _ in 0..params.max_iter {
            let (gw, gb) = prob.gradient(&w, b);
            // Backtracking on the smooth part with the proximal step.
            let mut accepted = None;
            for _ in 0..60 {
                let mut nw: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - step * g).collect();
                prob.prox(&mut nw, step);
                let nb = b - step * gb;
                let nf = prob.smooth_loss(&nw, nb);
                let diff: f64 = nw.iter().zip(&w).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() + (nb - b) * (nb - b);
                let lin: f64 = nw.iter().zip(&w).zip(&gw).map(|((a, c), g)| g * (a - c)).sum::<f64>() + gb * (nb - b);
                if nf <= f + lin + diff / (2.0 * step) + 1e-15 {
                    accepted = Some((nw, nb, nf, diff.sqrt()));
                    break;
                }
                step *= 0.5;
            }
            let Some((nw, nb, nf, moved)) = accepted else {
                break;
            };
            w = nw;
            b = nb;
            f = nf;
            if moved / step <= params.tol {
                break;
            }
            step *= 1.5;
        }
        Self {
            weights: w,
            intercept: b,
        }
    }

    pub fn proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.intercept + self.weights.iter().zip(row).map(|(a, c)| a * c).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_threshold_data() {
        let x: Vec<Vec<f64>> = (-10..=10).filter(|&i| i != 0).map(|i| vec![i as f64 * 0.5]).collect();
        let y: Vec<u8> = x.iter().map(|r| (r[0] > 0.0) as u8).collect();
        let m = LogisticRegression::fit(&x, &y, &LogisticParams::default());
        for (r, l) in x.iter().zip(&y) {
            assert_eq!((m.proba(r) > 0.5) as u8, *l);
        }
    }

    #[test]
    fn zero_model_sits_on_the_tie() {
        let m = LogisticRegression {
            weights: vec![0.0; 3],
            intercept: 0.0,
        };
        assert_eq!(m.proba(&[1.0, -2.0, 3.0]), 0.5);
    }

    #[test]
    fn strong_l1_zeroes_weights() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64, (i % 3) as f64]).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let m = LogisticRegression::fit(
            &x,
            &y,
            &LogisticParams {
                penalty: Penalty::L1,
                c: 1e-4,
                ..LogisticParams::default()
            },
        );
        assert!(m.weights.iter().all(|w| *w == 0.0));
    }
}
