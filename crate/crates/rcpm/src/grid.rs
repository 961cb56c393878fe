//! Chart coordinates, quadrature grids, and chart-aligned binning.
//!
//! Charts: the sphere `S^2` uses (colatitude `theta` in `[0, pi]`,
//! longitude `phi` in `[0, 2pi)`); every circle factor uses its angle in
//! `[0, 2pi)`. Quadrature grids carry cell-center nodes and volume weights
//! (`sin(theta)` weighting on the sphere, uniform on circles), which is all
//! the densities, verification oracles, and CSV exports need.

use crate::error::{Error, Result};
use crate::manifold::{Manifold, ManifoldPoint};
use std::f64::consts::PI;

const TWO_PI: f64 = 2.0 * PI;

/// Shape of a manifold's chart, used to pick grid layouts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChartKind {
    /// A single circle: chart `[theta]`.
    Circle,
    /// The 2-sphere: chart `[theta, phi]`.
    Sphere2,
    /// A product of circles: chart `[theta_1, ..., theta_k]`.
    Circles(usize),
}

pub fn chart_kind(m: &Manifold) -> Result<ChartKind> {
    let dims: Vec<usize> = m.factor_slices().map(|(_, d)| d).collect();
    if dims == [2] {
        Ok(ChartKind::Circle)
    } else if dims == [3] {
        Ok(ChartKind::Sphere2)
    } else if dims.iter().all(|&d| d == 2) {
        Ok(ChartKind::Circles(dims.len()))
    } else {
        Err(Error::InvalidConfig(
            "charts are available for S^1, S^2, and products of circles".into(),
        ))
    }
}

/// Chart coordinates of a point.
pub fn point_to_chart(m: &Manifold, p: &ManifoldPoint) -> Result<Vec<f64>> {
    let c = p.coords();
    match chart_kind(m)? {
        ChartKind::Circle => Ok(vec![angle_of(c[0], c[1])]),
        ChartKind::Sphere2 => {
            let theta = c[2].clamp(-1.0, 1.0).acos();
            let phi = angle_of(c[0], c[1]);
            Ok(vec![theta, phi])
        }
        ChartKind::Circles(_) => Ok(m
            .factor_slices()
            .map(|(off, _)| angle_of(c[off], c[off + 1]))
            .collect()),
    }
}

/// Point for given chart coordinates.
pub fn chart_to_point(m: &Manifold, chart: &[f64]) -> Result<ManifoldPoint> {
    let coords = match chart_kind(m)? {
        ChartKind::Circle => vec![chart[0].cos(), chart[0].sin()],
        ChartKind::Sphere2 => {
            let (theta, phi) = (chart[0], chart[1]);
            vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
        }
        ChartKind::Circles(k) => {
            let mut v = Vec::with_capacity(2 * k);
            for t in &chart[..k] {
                v.push(t.cos());
                v.push(t.sin());
            }
            v
        }
    };
    ManifoldPoint::new(m, coords)
}

fn angle_of(x: f64, y: f64) -> f64 {
    let a = y.atan2(x);
    if a < 0.0 {
        a + TWO_PI
    } else {
        a
    }
}

/// Cell-center quadrature nodes with volume weights.
pub struct QuadratureGrid {
    pub chart: Vec<Vec<f64>>,
    pub points: Vec<ManifoldPoint>,
    pub weights: Vec<f64>,
    /// Nodes per chart dimension.
    pub shape: Vec<usize>,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `sum_i w_i f(x_i)`.
    pub fn integrate(&self, mut f: impl FnMut(&ManifoldPoint) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }
}

/// Builds the canonical quadrature grid at resolution `res`:
/// `res` nodes on `S^1`, `res x 2res` (colatitude x longitude, sin-theta
/// weights) on `S^2`, and `res` per angle on products of circles.
pub fn quadrature(m: &Manifold, res: usize) -> Result<QuadratureGrid> {
    if res < 2 {
        return Err(Error::InvalidConfig("quadrature resolution must be >= 2".into()));
    }
    match chart_kind(m)? {
        ChartKind::Circle => {
            let w = TWO_PI / res as f64;
            let mut g = empty_grid(vec![res]);
            for i in 0..res {
                let t = (i as f64 + 0.5) * w;
                push_node(m, &mut g, vec![t], w)?;
            }
            Ok(g)
        }
        ChartKind::Sphere2 => {
            let (nt, np) = (res, 2 * res);
            let (dt, dp) = (PI / nt as f64, TWO_PI / np as f64);
            let mut g = empty_grid(vec![nt, np]);
            for i in 0..nt {
                let theta = (i as f64 + 0.5) * dt;
                let w = theta.sin() * dt * dp;
                for j in 0..np {
                    let phi = (j as f64 + 0.5) * dp;
                    push_node(m, &mut g, vec![theta, phi], w)?;
                }
            }
            Ok(g)
        }
        ChartKind::Circles(k) => {
            let n_total = res.checked_pow(k as u32).filter(|&n| n <= 4_000_000).ok_or_else(
                || Error::InvalidConfig("quadrature grid too large for this product".into()),
            )?;
            let d = TWO_PI / res as f64;
            let w = d.powi(k as i32);
            let mut g = empty_grid(vec![res; k]);
            for flat in 0..n_total {
                let mut idx = flat;
                let mut chart = Vec::with_capacity(k);
                for _ in 0..k {
                    chart.push((idx % res) as f64 * d + 0.5 * d);
                    idx /= res;
                }
                chart.reverse();
                push_node(m, &mut g, chart, w)?;
            }
            Ok(g)
        }
    }
}

fn empty_grid(shape: Vec<usize>) -> QuadratureGrid {
    QuadratureGrid { chart: Vec::new(), points: Vec::new(), weights: Vec::new(), shape }
}

fn push_node(m: &Manifold, g: &mut QuadratureGrid, chart: Vec<f64>, w: f64) -> Result<()> {
    g.points.push(chart_to_point(m, &chart)?);
    g.chart.push(chart);
    g.weights.push(w);
    Ok(())
}

/// Probabilities over a chart-aligned rectangular binning, used for
/// pushforward/target comparisons in total variation.
pub struct ChartBins {
    pub shape: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ChartBins {
    fn domain(m: &Manifold) -> Result<Vec<f64>> {
        Ok(match chart_kind(m)? {
            ChartKind::Circle => vec![TWO_PI],
            ChartKind::Sphere2 => vec![PI, TWO_PI],
            ChartKind::Circles(k) => vec![TWO_PI; k],
        })
    }

    pub fn n_bins(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bin_of(m: &Manifold, shape: &[usize], p: &ManifoldPoint) -> Result<usize> {
        let chart = point_to_chart(m, p)?;
        let domain = Self::domain(m)?;
        let mut flat = 0;
        for k in 0..shape.len() {
            let i = ((chart[k] / domain[k]) * shape[k] as f64).floor() as usize;
            flat = flat * shape[k] + i.min(shape[k] - 1);
        }
        Ok(flat)
    }

    /// Bin probabilities of a density by quadrature on a refinement of the
    /// binning (each bin split `oversample` times per dimension).
    pub fn from_log_density(
        m: &Manifold,
        shape: &[usize],
        oversample: usize,
        mut log_density: impl FnMut(&ManifoldPoint) -> f64,
    ) -> Result<Self> {
        // A multiple of every bin count keeps quadrature cells aligned with
        // bin boundaries.
        let res = shape.iter().copied().max().unwrap_or(2) * oversample;
        let grid = quadrature(m, res)?;
        let mut probs = vec![0.0; shape.iter().product()];
        for (p, w) in grid.points.iter().zip(&grid.weights) {
            let ld = log_density(p);
            if ld > f64::NEG_INFINITY {
                probs[Self::bin_of(m, shape, p)?] += w * ld.exp();
            }
        }
        let total: f64 = probs.iter().sum();
        if total > 0.0 {
            for p in &mut probs {
                *p /= total;
            }
        }
        Ok(Self { shape: shape.to_vec(), probs })
    }

    /// Empirical bin probabilities of a sample set.
    pub fn from_samples(m: &Manifold, shape: &[usize], points: &[ManifoldPoint]) -> Result<Self> {
        let mut probs = vec![0.0; shape.iter().product()];
        for p in points {
            probs[Self::bin_of(m, shape, p)?] += 1.0;
        }
        let n = points.len().max(1) as f64;
        for q in &mut probs {
            *q /= n;
        }
        Ok(Self { shape: shape.to_vec(), probs })
    }

    /// Total variation distance between two binned distributions.
    pub fn total_variation(&self, other: &ChartBins) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}
