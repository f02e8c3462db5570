//! Input representations, PCA and feature scaling.

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::InputKind;
use crate::{Error, Result};

/// Magnitude of the 2D DFT of a `side × side` image, DC moved to the centre
/// and flattened row-major.
pub fn fft_magnitude(pixels: &[f64], side: usize) -> Result<Vec<f64>> {
    if pixels.len() != side * side {
        return Err(Error::Shape(format!(
            "expected {} pixels for a {side}×{side} image, got {}",
            side * side,
            pixels.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(side);
    let mut buf: Vec<Complex<f64>> = pixels.iter().map(|&p| Complex::new(p, 0.0)).collect();
    for row in buf.chunks_mut(side) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); side];
    for c in 0..side {
        for r in 0..side {
            col[r] = buf[r * side + c];
        }
        fft.process(&mut col);
        for r in 0..side {
            buf[r * side + c] = col[r];
        }
    }
    let shift = side / 2;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            out[((r + shift) % side) * side + (c + shift) % side] = buf[r * side + c].norm();
        }
    }
    Ok(out)
}

/// Magnitude of the 1D DFT with DC moved to the centre.
pub fn fft_magnitude_1d(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&p| Complex::new(p, 0.0)).collect();
    fft.process(&mut buf);
    let shift = n / 2;
    let mut out = vec![0.0; n];
    for (k, z) in buf.iter().enumerate() {
        out[(k + shift) % n] = z.norm();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Raw,
    Fourier,
    RawFourier,
    Features,
}

impl Representation {
    pub const ALL: [Representation; 4] = [
        Representation::Raw,
        Representation::Fourier,
        Representation::RawFourier,
        Representation::Features,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Raw => "raw",
            Representation::Fourier => "fourier",
            Representation::RawFourier => "raw+fourier",
            Representation::Features => "features",
        }
    }

    pub fn compatible(self, kind: InputKind) -> bool {
        matches!(
            (self, kind),
            (Representation::Features, InputKind::Features { .. })
                | (Representation::Raw | Representation::Fourier | Representation::RawFourier, InputKind::Trace { .. })
                | (Representation::Raw | Representation::Fourier | Representation::RawFourier, InputKind::Image { .. })
        )
    }

    /// Applies the representation to one input row.
    pub fn apply(self, kind: InputKind, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != kind.width() {
            return Err(Error::Shape(format!(
                "row has {} values, input expects {}",
                row.len(),
                kind.width()
            )));
        }
        if !self.compatible(kind) {
            return Err(Error::InvalidArgument(format!(
                "representation {} does not apply to {kind:?}",
                self.name()
            )));
        }
        let fourier = |row: &[f64]| match kind {
            InputKind::Image { side } => fft_magnitude(row, side),
            _ => Ok(fft_magnitude_1d(row)),
        };
        Ok(match self {
            Representation::Raw | Representation::Features => row.to_vec(),
            Representation::Fourier => fourier(row)?,
            Representation::RawFourier => {
                let mut v = row.to_vec();
                v.extend(fourier(row)?);
                v
            }
        })
    }

    pub fn output_width(self, kind: InputKind) -> usize {
        match self {
            Representation::RawFourier => 2 * kind.width(),
            _ => kind.width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub representation: Representation,
    #[serde(default)]
    pub pca: Option<usize>,
}

impl PreprocessSpec {
    pub fn new(representation: Representation, pca: Option<usize>) -> Self {
        Self { representation, pca }
    }

    pub fn validate(&self, kind: InputKind) -> Result<()> {
        if !self.representation.compatible(kind) {
            return Err(Error::InvalidArgument(format!(
                "representation {} does not apply to {kind:?}",
                self.representation.name()
            )));
        }
        if let Some(k) = self.pca {
            let width = self.representation.output_width(kind);
            if k == 0 || k > width {
                return Err(Error::InvalidArgument(format!(
                    "PCA needs 1 ≤ k ≤ {width}, got {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.pca {
            Some(k) => format!("{}+pca{k}", self.representation.name()),
            None => self.representation.name().to_string(),
        }
    }
}

/// Principal axes of a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit-norm components, each of the input width, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (sample covariance, `n - 1` denominator).
    pub explained_variance: Vec<f64>,
    /// Total variance of the training data.
    pub total_variance: f64,
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if k == 0 || k > n.min(d) {
            return Err(Error::InvalidArgument(format!(
                "PCA with k={k} on a {n}×{d} matrix"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidArgument("PCA needs at least 2 rows".into()));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let denom = (n - 1) as f64;
        // With fewer rows than columns the n×n Gram matrix shares the nonzero
        // spectrum of the covariance and is far cheaper to decompose.
        let dual = n < d && k < n;
        let (eig, total_variance) = if dual {
            let gram = (&centered * centered.transpose()) / denom;
            let t = gram.trace();
            (SymmetricEigen::new(gram), t)
        } else {
            let cov = (centered.transpose() * &centered) / denom;
            let t = cov.trace();
            (SymmetricEigen::new(cov), t)
        };
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &i in order.iter().take(k) {
            let mut c: Vec<f64> = if dual {
                let v = centered.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    vec![0.0; d]
                }
            } else {
                eig.eigenvectors.column(i).iter().copied().collect()
            };
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = c
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if pivot < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
            explained_variance.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "PCA expects width {}, got {}",
                self.mean.len(),
                row.len()
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect())
    }

    pub fn reconstruct(&self, amplitudes: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (a, c) in amplitudes.iter().zip(&self.components) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += a * w;
            }
        }
        out
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }
}

/// Per-column standardization to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.len().max(1) as f64;
        let d = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }
}

/// Preprocessing fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub spec: PreprocessSpec,
    pub input: InputKind,
    pub pca: Option<Pca>,
    pub scaler: Option<StandardScaler>,
}

impl Pipeline {
    /// Fits PCA (if requested) and, when `scale` is set, a standard scaler on
    /// the represented training rows. Returns the pipeline and the transformed
    /// training rows.
    pub fn fit(spec: PreprocessSpec, input: InputKind, rows: &[Vec<f64>], scale: bool) -> Result<(Self, Vec<Vec<f64>>)> {
        spec.validate(input)?;
        let mut data: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| spec.representation.apply(input, r))
            .collect::<Result<_>>()?;
        let pca = match spec.pca {
            Some(k) => {
                let p = Pca::fit(&data, k)?;
                data = data.iter().map(|r| p.project(r)).collect::<Result<_>>()?;
                Some(p)
            }
            None => None,
        };
        let scaler = scale.then(|| StandardScaler::fit(&data));
        if let Some(s) = &scaler {
            data.iter_mut().for_each(|r| s.transform(r));
        }
        Ok((
            Self {
                spec,
                input,
                pca,
                scaler,
            },
            data,
        ))
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.spec.representation.apply(self.input, row)?;
        if let Some(p) = &self.pca {
            v = p.project(&v)?;
        }
        if let Some(s) = &self.scaler {
            s.transform(&mut v);
        }
        Ok(v)
    }
}
