//! Analysis of single-gate characterization sweeps.
//!
//! A measured I-V curve is normalized by the saturation current, sorted into
//! ascending voltage order, smoothed with a Gaussian kernel and fitted to
//! `a (1 + tanh(b x + c))` on the normalized voltage `x in [0, 1]`. The
//! transition voltages `v_L < v_T < v_H` bound the region in which the gate
//! partially depletes the channel.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::device::{Gate, RawSweep};
use crate::{Error, Result};

/// Minimum number of samples in a trace.
pub const MIN_TRACE_LEN: usize = 8;
/// Default Gaussian smoothing width in samples.
pub const DEFAULT_SMOOTHING: f64 = 2.0;
/// Samples in the moving variance window used to locate `v_T`.
pub const VARIANCE_WINDOW: usize = 5;

/// A normalized 1D trace in ascending voltage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub gate: Gate,
    pub setpoints: Vec<f64>,
    pub currents: Vec<f64>,
    pub v_min: f64,
    pub v_max: f64,
}

impl Trace {
    pub fn from_raw(raw: &RawSweep, a_max: f64) -> Result<Self> {
        normalize_and_canonicalize(raw.gate, &raw.setpoints, &raw.currents, a_max)
    }

    pub fn len(&self) -> usize {
        self.setpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.setpoints.is_empty()
    }

    /// Normalized voltage `x = (v - v_min) / (v_max - v_min)` of every setpoint.
    pub fn normalized_voltages(&self) -> Vec<f64> {
        let span = self.v_max - self.v_min;
        self.setpoints.iter().map(|v| (v - self.v_min) / span).collect()
    }

    /// Currents linearly resampled onto `n` equidistant voltages.
    pub fn resampled(&self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut j = 0;
        for i in 0..n {
            let v = self.v_min + (self.v_max - self.v_min) * i as f64 / (n - 1).max(1) as f64;
            while j + 2 < self.setpoints.len() && self.setpoints[j + 1] < v {
                j += 1;
            }
            let (s0, s1) = (self.setpoints[j], self.setpoints[j + 1]);
            let t = ((v - s0) / (s1 - s0)).clamp(0.0, 1.0);
            out.push(self.currents[j] * (1.0 - t) + self.currents[j + 1] * t);
        }
        out
    }

    /// `setpoint,current` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setpoint,current\n");
        for (v, i) in self.setpoints.iter().zip(&self.currents) {
            s.push_str(&format!("{v},{i}\n"));
        }
        s
    }
}

/// Divides by `a_max` and sorts the points into ascending voltage order.
pub fn normalize_and_canonicalize(
    gate: Gate,
    setpoints: &[f64],
    currents: &[f64],
    a_max: f64,
) -> Result<Trace> {
    if !(a_max > 0.0) || !a_max.is_finite() {
        return Err(Error::InvalidNormalization(a_max));
    }
    if setpoints.len() != currents.len() {
        return Err(Error::Shape(format!(
            "{} setpoints but {} currents",
            setpoints.len(),
            currents.len()
        )));
    }
    if setpoints.len() < MIN_TRACE_LEN {
        return Err(Error::Shape(format!(
            "trace has {} points, need at least {MIN_TRACE_LEN}",
            setpoints.len()
        )));
    }
    if currents.iter().chain(setpoints).any(|x| !x.is_finite()) {
        return Err(Error::Shape("trace contains non-finite values".into()));
    }
    let mut pts: Vec<(f64, f64)> = setpoints
        .iter()
        .zip(currents)
        .map(|(&v, &i)| (v, i / a_max))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Shape("setpoints are not distinct".into()));
    }
    let (setpoints, currents): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Ok(Trace {
        gate,
        v_min: setpoints[0],
        v_max: *setpoints.last().unwrap(),
        setpoints,
        currents,
    })
}

/// Reflect-padded index (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Gaussian smoothing along the sample axis, kernel truncated at 4 sigma.
pub fn smooth(trace: &Trace, sigma_samples: f64) -> Result<Trace> {
    Ok(Trace {
        currents: gaussian_filter(&trace.currents, sigma_samples)?,
        ..trace.clone()
    })
}

pub(crate) fn gaussian_filter(data: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("smoothing sigma must be > 0, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let n = data.len();
    Ok((0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * data[reflect(i + j as isize - radius, n)])
                .sum()
        })
        .collect())
}

/// Parameters of `a (1 + tanh(b x + c))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TanhFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Root-mean-square of `data - fit`.
    pub residual_norm: f64,
    /// Set when no start converged; parameters are the best found so far.
    pub degraded: bool,
}

impl TanhFit {
    pub fn eval(&self, x: f64) -> f64 {
        tanh_model(self.a, self.b, self.c, x)
    }

    /// Normalized voltage where the fitted curve reaches `level`, if any.
    pub fn inverse(&self, level: f64) -> Option<f64> {
        if self.a <= 0.0 || self.b == 0.0 {
            return None;
        }
        let t = level / self.a - 1.0;
        if !(t > -1.0 && t < 1.0) {
            return None;
        }
        Some((t.atanh() - self.c) / self.b)
    }
}

fn tanh_model(a: f64, b: f64, c: f64, x: f64) -> f64 {
    a * (1.0 + (b * x + c).tanh())
}

struct Lm<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

impl Lm<'_> {
    fn cost(&self, p: &Vector3<f64>) -> f64 {
        self.x
            .iter()
            .zip(self.y)
            .map(|(&x, &y)| {
                let r = y - tanh_model(p[0], p[1], p[2], x);
                r * r
            })
            .sum()
    }

    fn normal_equations(&self, p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&x, &y) in self.x.iter().zip(self.y) {
            let t = (p[1] * x + p[2]).tanh();
            let s = p[0] * (1.0 - t * t);
            let j = Vector3::new(1.0 + t, s * x, s);
            let r = y - p[0] * (1.0 + t);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        (jtj, jtr)
    }

    /// Damped Gauss-Newton from `p0`. Returns the final parameters, cost and
    /// whether a convergence criterion was met.
    fn run(&self, p0: Vector3<f64>) -> (Vector3<f64>, f64, bool) {
        let mut p = p0;
        let mut cost = self.cost(&p);
        let mut lambda = 1e-3;
        for _ in 0..500 {
            if cost < 1e-30 {
                return (p, cost, true);
            }
            let (jtj, jtr) = self.normal_equations(&p);
            if jtr.amax() < 1e-15 {
                return (p, cost, true);
            }
            let mut accepted = false;
            for _ in 0..30 {
                let mut a = jtj;
                for k in 0..3 {
                    a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
                }
                let Some(step) = a.cholesky().map(|ch| ch.solve(&jtr)) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial = p + step;
                let trial_cost = self.cost(&trial);
                if trial_cost.is_finite() && trial_cost <= cost {
                    let converged = step.norm() <= 1e-12 * (p.norm() + 1e-12)
                        || (cost - trial_cost) <= 1e-16 * cost.max(1e-300);
                    p = trial;
                    cost = trial_cost;
                    lambda = (lambda * 0.3).max(1e-12);
                    accepted = true;
                    if converged {
                        return (p, cost, true);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // Damping exhausted: no descent direction left at this precision.
                return (p, cost, lambda > 1e20 || cost < 1e-20);
            }
        }
        (p, cost, false)
    }
}

/// Least-squares fit of `a (1 + tanh(b x + c))` against the normalized voltage.
///
/// Multi-start damped Gauss-Newton: `a0 = (max - min) / 2`, `c0` from the
/// half-maximum crossing and `b0 in {4, 10, 25}`. A fit that fails to
/// converge is returned with `degraded = true`.
pub fn fit_tanh(trace: &Trace) -> TanhFit {
    let x = trace.normalized_voltages();
    let y = &trace.currents;
    let lm = Lm { x: &x, y };

    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let a0 = (hi - lo) / 2.0;
    let half = lo + a0;
    let x_half = y
        .iter()
        .zip(&x)
        .min_by(|p, q| (p.0 - half).abs().total_cmp(&(q.0 - half).abs()))
        .map(|(_, &xv)| xv)
        .unwrap_or(0.5);

    let mut best: Option<(Vector3<f64>, f64, bool)> = None;
    for b0 in [4.0, 10.0, 25.0] {
        let (p, cost, ok) = lm.run(Vector3::new(a0, b0, -b0 * x_half));
        let better = match &best {
            None => true,
            Some((_, c, bok)) => (ok && !bok) || (ok == *bok && cost < *c),
        };
        if better && cost.is_finite() {
            best = Some((p, cost, ok));
        }
    }
    let (p, cost, ok) = best.unwrap_or((Vector3::new(a0, 4.0, -4.0 * x_half), f64::INFINITY, false));
    let degraded = !ok || p[0] < 0.0 || !p.iter().all(|v| v.is_finite());
    TanhFit {
        a: p[0],
        b: p[1],
        c: p[2],
        residual_norm: (cost / x.len() as f64).sqrt(),
        degraded,
    }
}

/// Cut-off, transition and saturation voltages of a pinch-off curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionVoltages {
    pub v_l: f64,
    pub v_t: f64,
    pub v_h: f64,
}

/// `v_T` maximizes the moving variance of the current, `v_L` is the zero
/// crossing of the tangent at `v_T` and `v_H` minimizes the second
/// difference of the current. All three are clamped to the swept range.
pub fn extract_voltages(trace: &Trace) -> Result<TransitionVoltages> {
    extract_voltages_with_window(trace, VARIANCE_WINDOW)
}

pub fn extract_voltages_with_window(trace: &Trace, window: usize) -> Result<TransitionVoltages> {
    let n = trace.len();
    if window == 0 || window > n || n < 3 {
        return Err(Error::Shape(format!(
            "variance window {window} does not fit a trace of {n} points"
        )));
    }
    let s = &trace.setpoints;
    let y = &trace.currents;

    let half = window / 2;
    let mut best_var = f64::NEG_INFINITY;
    let mut it = half;
    for start in 0..=(n - window) {
        let w = &y[start..start + window];
        let mean = w.iter().sum::<f64>() / window as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64;
        if var > best_var {
            best_var = var;
            it = start + half;
        }
    }

    let slope = if it == 0 {
        (y[1] - y[0]) / (s[1] - s[0])
    } else if it == n - 1 {
        (y[n - 1] - y[n - 2]) / (s[n - 1] - s[n - 2])
    } else {
        (y[it + 1] - y[it - 1]) / (s[it + 1] - s[it - 1])
    };
    let v_t = s[it];
    let v_l = if slope > 0.0 {
        v_t - y[it] / slope
    } else {
        trace.v_min
    };

    let mut ih = 1;
    let mut best_d2 = f64::INFINITY;
    for i in 1..n - 1 {
        let (h0, h1) = (s[i] - s[i - 1], s[i + 1] - s[i]);
        let d2 = 2.0 * (h0 * y[i + 1] - (h0 + h1) * y[i] + h1 * y[i - 1]) / (h0 * h1 * (h0 + h1));
        if d2 < best_d2 {
            best_d2 = d2;
            ih = i;
        }
    }

    let clamp = |v: f64| v.clamp(trace.v_min, trace.v_max);
    Ok(TransitionVoltages {
        v_l: clamp(v_l),
        v_t: clamp(v_t),
        v_h: clamp(s[ih]),
    })
}

/// Fit result plus derived voltages and region currents of one trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinchoffFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub residual_norm: f64,
    pub degraded: bool,
    pub v_l: f64,
    pub v_t: f64,
    pub v_h: f64,
    /// Mean current below `v_L`.
    pub a_l: f64,
    /// Mean current above `v_H`.
    pub a_h: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl PinchoffFit {
    pub fn tanh(&self) -> TanhFit {
        TanhFit {
            a: self.a,
            b: self.b,
            c: self.c,
            residual_norm: self.residual_norm,
            degraded: self.degraded,
        }
    }

    /// Maps a normalized voltage back to volts.
    pub fn to_volts(&self, x: f64) -> f64 {
        self.v_min + x * (self.v_max - self.v_min)
    }

    pub fn ordered(&self) -> bool {
        self.v_l < self.v_t && self.v_t < self.v_h
    }

    /// Transition voltages of the fitted curve itself: centre, tangent
    /// intercept and second-derivative minimum, clamped to the sweep. `None`
    /// for degraded or falling fits.
    pub fn fitted_voltages(&self) -> Option<TransitionVoltages> {
        if self.degraded || !(self.a > 0.0 && self.b > 0.0) {
            return None;
        }
        let clamp = |x: f64| self.to_volts(x).clamp(self.v_min, self.v_max);
        let u_h = (1.0 / 3f64.sqrt()).atanh();
        Some(TransitionVoltages {
            v_l: clamp((-1.0 - self.c) / self.b),
            v_t: clamp(-self.c / self.b),
            v_h: clamp((u_h - self.c) / self.b),
        })
    }
}

/// Smooths, fits and extracts everything downstream code needs from a
/// normalized trace.
pub fn analyze(trace: &Trace, sigma_samples: f64) -> Result<PinchoffFit> {
    let smoothed = smooth(trace, sigma_samples)?;
    let fit = fit_tanh(&smoothed);
    let tv = extract_voltages(&smoothed)?;
    let mean_where = |pred: &dyn Fn(f64) -> bool, fallback: f64| {
        let (sum, count) = smoothed
            .setpoints
            .iter()
            .zip(&smoothed.currents)
            .filter(|(v, _)| pred(**v))
            .fold((0.0, 0usize), |(s, c), (_, i)| (s + i, c + 1));
        if count == 0 {
            fallback
        } else {
            sum / count as f64
        }
    };
    let a_l = mean_where(&|v| v < tv.v_l, smoothed.currents[0]);
    let a_h = mean_where(&|v| v > tv.v_h, *smoothed.currents.last().unwrap());
    Ok(PinchoffFit {
        a: fit.a,
        b: fit.b,
        c: fit.c,
        residual_norm: fit.residual_norm,
        degraded: fit.degraded,
        v_l: tv.v_l,
        v_t: tv.v_t,
        v_h: tv.v_h,
        a_l,
        a_h,
        v_min: trace.v_min,
        v_max: trace.v_max,
    })
}

/// Classifier input for one gate characterization: `(a, b, residual_norm, A_L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; 4]);

impl FeatureVector {
    pub const NAMES: [&'static str; 4] = ["amplitude", "slope", "residual_norm", "pinch_off_current"];

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn features(fit: &PinchoffFit) -> FeatureVector {
    FeatureVector([fit.a, fit.b, fit.residual_norm, fit.a_l])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from(f: impl Fn(f64) -> f64, n: usize) -> Trace {
        let s: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let c: Vec<f64> = s.iter().map(|&x| f(x)).collect();
        normalize_and_canonicalize(Gate::LB, &s, &c, 1.0).unwrap()
    }

    #[test]
    fn fitted_voltages_match_the_analytic_curve() {
        let t = trace_from(|x| 0.5 * (1.0 + (10.0 * x - 5.0).tanh()), 201);
        let f = analyze(&t, 1e-3).unwrap();
        let v = f.fitted_voltages().unwrap();
        assert!((v.v_t - 0.5).abs() < 1e-6);
        assert!((v.v_l - 0.4).abs() < 1e-6);
        assert!((v.v_h - (0.5 + (1.0 / 3f64.sqrt()).atanh() / 10.0)).abs() < 1e-6);
    }

    #[test]
    fn normalization_divides_by_a_max() {
        let s: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut c = vec![4e-9; 8];
        c[0] = 2e-9;
        let t = normalize_and_canonicalize(Gate::LB, &s, &c, 4e-9).unwrap();
        assert_eq!(t.currents[0], 0.5);
        assert_eq!(t.currents[1], 1.0);
    }

    #[test]
    fn descending_input_is_reordered() {
        let s: Vec<f64> = (0..10).map(|i| -(i as f64) * 0.1).collect();
        let c: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let t = normalize_and_canonicalize(Gate::CB, &s, &c, 1.0).unwrap();
        assert!(t.setpoints.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.currents[0], 1.0);
        assert_eq!(*t.currents.last().unwrap(), 10.0);
        assert_eq!(t.v_min, -0.9);
        assert_eq!(t.v_max, 0.0);
    }

    #[test]
    fn bad_normalization_and_shapes() {
        let s = vec![0.0; 8];
        assert!(matches!(
            normalize_and_canonicalize(Gate::LB, &s, &s, 0.0),
            Err(Error::InvalidNormalization(_))
        ));
        assert!(matches!(
            normalize_and_canonicalize(Gate::LB, &s, &s[..7], 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn renormalizing_with_unit_a_max_is_identity() {
        let t = trace_from(|x| 0.3 * (1.0 + (9.0 * x - 4.0).tanh()), 40);
        let again = normalize_and_canonicalize(t.gate, &t.setpoints, &t.currents, 1.0).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn smoothing_keeps_constants_and_mass() {
        let t = trace_from(|_| 0.37, 30);
        let s = smooth(&t, 2.0).unwrap();
        assert!(s.currents.iter().all(|v| (v - 0.37).abs() < 1e-15));

        let mut imp = trace_from(|_| 0.0, 41);
        imp.currents[20] = 1.0;
        let s = smooth(&imp, 1.0).unwrap();
        assert!((s.currents.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k0 = s.currents[20];
        assert!((s.currents[21] / k0 - (-0.5f64).exp()).abs() < 1e-12);
        assert!(smooth(&imp, 0.0).is_err());
    }

    #[test]
    fn exact_model_is_recovered() {
        let t = trace_from(|x| tanh_model(0.45, 12.0, -6.0, x), 200);
        let f = fit_tanh(&t);
        assert!(!f.degraded);
        for (got, want) in [(f.a, 0.45), (f.b, 12.0), (f.c, -6.0)] {
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(f.residual_norm < 1e-9);
    }

    #[test]
    fn zero_trace_fits_zero_amplitude() {
        let f = fit_tanh(&trace_from(|_| 0.0, 50));
        assert!(f.a.abs() <= 1e-6);
        assert!(f.residual_norm <= 1e-9);
    }

    #[test]
    fn transition_voltages_of_reference_curve() {
        let t = trace_from(|x| 0.5 * (1.0 + (10.0 * (x - 0.5)).tanh()), 2001);
        let v = extract_voltages(&t).unwrap();
        let h = 1.0 / 2000.0;
        assert!((v.v_t - 0.5).abs() <= h);
        assert!((v.v_l - 0.4).abs() <= h);
        let u = (1.0 / 3f64.sqrt()).atanh();
        assert!((v.v_h - (0.5 + u / 10.0)).abs() <= h);
    }

    #[test]
    fn variance_window_must_fit() {
        let t = trace_from(|x| x, 8);
        assert!(extract_voltages_with_window(&t, 9).is_err());
    }

    #[test]
    fn fitted_inverse_matches_closed_form() {
        let f = TanhFit {
            a: 0.5,
            b: 8.0,
            c: -4.0,
            residual_norm: 0.0,
            degraded: false,
        };
        let x = f.inverse(0.75).unwrap();
        assert!((x - (0.5f64.atanh() + 4.0) / 8.0).abs() < 1e-12);
        assert!(f.inverse(1.0).is_none());
    }

    #[test]
    fn flat_saturated_trace_has_high_pinch_off_current() {
        let t = trace_from(|_| 1.0, 100);
        let fit = analyze(&t, DEFAULT_SMOOTHING).unwrap();
        assert!((features(&fit).0[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn feature_projection() {
        let fit = PinchoffFit {
            a: 0.5,
            b: 10.0,
            c: -5.0,
            residual_norm: 1e-6,
            degraded: false,
            v_l: 0.4,
            v_t: 0.5,
            v_h: 0.57,
            a_l: 0.0,
            a_h: 1.0,
            v_min: 0.0,
            v_max: 1.0,
        };
        let fv = features(&fit);
        assert_eq!(fv.0, [0.5, 10.0, 1e-6, 0.0]);
        let json = serde_json::to_string(&fv).unwrap();
        assert_eq!(json, serde_json::to_string(&features(&fit)).unwrap());
        assert_eq!(json, "[0.5,10.0,1e-6,0.0]");
    }
}
