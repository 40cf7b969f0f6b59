//! Cubic convolution interpolation on uniform grids.
//!
//! A point `x` gets, per dimension, four weights on the nodes surrounding
//! it (Keys' kernel with a = −1/2). Across dimensions the weights form the
//! rank-1 Kronecker vector `w = w_1 ⊗ … ⊗ w_D` used to approximate
//! cross-covariances as `K_mm w`.

use crate::error::{Error, Result};
use crate::tt::KronFactor;

pub const STENCIL: usize = 4;

/// Keys cubic convolution kernel, a = −1/2.
pub fn keys_kernel(s: f64) -> f64 {
    let u = s.abs();
    if u <= 1.0 {
        1.5 * u * u * u - 2.5 * u * u + 1.0
    } else if u <= 2.0 {
        -0.5 * u * u * u + 2.5 * u * u - 4.0 * u + 2.0
    } else {
        0.0
    }
}

/// d/ds of [`keys_kernel`].
pub fn keys_kernel_deriv(s: f64) -> f64 {
    let u = s.abs();
    let du = if u <= 1.0 {
        4.5 * u * u - 5.0 * u
    } else if u <= 2.0 {
        -1.5 * u * u + 5.0 * u - 4.0
    } else {
        0.0
    };
    du * s.signum()
}

/// One uniform axis: nodes `start + i · spacing`, `i < size`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    start: f64,
    spacing: f64,
    size: usize,
}

impl GridAxis {
    pub fn new(start: f64, spacing: f64, size: usize) -> Result<Self> {
        if size < STENCIL {
            return Err(Error::InvalidInput(format!(
                "grid axis needs at least {STENCIL} points, got {size}"
            )));
        }
        if !start.is_finite() || !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidInput(format!(
                "bad grid axis start {start} spacing {spacing}"
            )));
        }
        Ok(GridAxis {
            start,
            spacing,
            size,
        })
    }

    /// Accepts explicit nodes if they are uniformly spaced.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput("grid axis needs at least 2 points".into()));
        }
        let h = (points[points.len() - 1] - points[0]) / (points.len() - 1) as f64;
        for (i, p) in points.iter().enumerate() {
            let expected = points[0] + i as f64 * h;
            if (p - expected).abs() > 1e-12 * expected.abs().max(h.abs()) {
                return Err(Error::InvalidInput(format!(
                    "grid point {i} = {p} breaks uniform spacing"
                )));
            }
        }
        GridAxis::new(points[0], h, points.len())
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn point(&self, i: usize) -> f64 {
        self.start + i as f64 * self.spacing
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.point(i)).collect()
    }

    /// Range in which every point has a full interior stencil.
    pub fn interior(&self) -> (f64, f64) {
        (self.point(1), self.point(self.size - 2))
    }
}

/// Cartesian product grid `Z = Z^1 × … × Z^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    axes: Vec<GridAxis>,
}

impl Grid {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidInput("grid needs at least one axis".into()));
        }
        Ok(Grid { axes })
    }

    /// Uniform grid on `[lo − h, hi + h]` with `h = (hi − lo)/(m0 − 3)`, so
    /// `[lo, hi]` is exactly the interior where stencils fit.
    pub fn build(ranges: &[(f64, f64)], m0: usize) -> Result<Self> {
        if m0 < STENCIL {
            return Err(Error::InvalidInput(format!(
                "need at least {STENCIL} points per dimension, got {m0}"
            )));
        }
        let axes = ranges
            .iter()
            .enumerate()
            .map(|(d, &(lo, hi))| {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "dimension {d}: range [{lo}, {hi}] is empty"
                    )));
                }
                let h = (hi - lo) / (m0 - 3) as f64;
                GridAxis::new(lo - h, h, m0)
            })
            .collect::<Result<Vec<_>>>()?;
        Grid::new(axes)
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn num_dims(&self) -> usize {
        self.axes.len()
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.size).collect()
    }

    /// Total number of inducing points, as a float since it can be huge.
    pub fn num_points(&self) -> f64 {
        self.axes.iter().map(|a| a.size as f64).product()
    }
}

/// Weights of one point on one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    /// Index of the first of the four nodes.
    pub start: usize,
    pub weights: [f64; STENCIL],
    /// Derivatives of the weights with respect to the coordinate; zero when
    /// the coordinate was clamped.
    pub dweights: [f64; STENCIL],
    pub clamped: bool,
}

/// Interpolation weights of one point on one axis. Coordinates outside the
/// axis interior are clamped onto it.
pub fn weights_1d(axis: &GridAxis, x: f64) -> Result<Stencil> {
    if axis.size < STENCIL {
        return Err(Error::InvalidInput(format!(
            "grid axis has {} points, cubic stencil needs {STENCIL}",
            axis.size
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("coordinate {x} is not finite")));
    }
    let h = axis.spacing;
    let upper = (axis.size - 2) as f64;
    let raw = (x - axis.start) / h;
    // round-off at the interior ends is not clamping
    let clamped = raw < 1.0 - 1e-9 || raw > upper + 1e-9;
    let pos = raw.clamp(1.0, upper);
    let cell = (pos.floor() as usize).clamp(1, axis.size - 3);
    let t = pos - cell as f64;

    let mut weights = [0.0; STENCIL];
    let mut dweights = [0.0; STENCIL];
    for k in 0..STENCIL {
        let s = t + 1.0 - k as f64;
        weights[k] = keys_kernel(s);
        if !clamped {
            dweights[k] = keys_kernel_deriv(s) / h;
        }
    }
    Ok(Stencil {
        start: cell - 1,
        weights,
        dweights,
        clamped,
    })
}

/// Per-dimension stencils of one point; the implicit weight vector is their
/// Kronecker product.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpWeights {
    stencils: Vec<Stencil>,
    sizes: Vec<usize>,
}

impl InterpWeights {
    pub fn stencils(&self) -> &[Stencil] {
        &self.stencils
    }

    pub fn any_clamped(&self) -> bool {
        self.stencils.iter().any(|s| s.clamped)
    }

    pub fn factors(&self) -> Vec<KronFactor<'_>> {
        self.stencils
            .iter()
            .zip(&self.sizes)
            .map(|(s, &n)| KronFactor::window(n, s.start, &s.weights))
            .collect()
    }

    /// Dense per-dimension weight vectors (mostly for checks).
    pub fn dense_factors(&self) -> Vec<Vec<f64>> {
        self.factors().iter().map(|f| f.to_dense()).collect()
    }
}

pub fn weights_nd(grid: &Grid, x: &[f64]) -> Result<InterpWeights> {
    if x.len() != grid.num_dims() {
        return Err(Error::Shape(format!(
            "point has {} coordinates, grid has {} dimensions",
            x.len(),
            grid.num_dims()
        )));
    }
    let stencils = grid
        .axes
        .iter()
        .zip(x)
        .map(|(axis, &xi)| weights_1d(axis, xi))
        .collect::<Result<Vec<_>>>()?;
    Ok(InterpWeights {
        stencils,
        sizes: grid.mode_sizes(),
    })
}
