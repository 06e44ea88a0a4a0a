//! Exact grid dynamic programming for the discounted safety value function
//!
//! ```text
//! V(x) = (1 - gamma) h(x) + gamma * min(h(x), max_u V(f(x, u)))
//! ```
//!
//! Off-grid successor states are evaluated by multilinear interpolation,
//! clamped to the grid hull. The backup is a gamma-contraction in the sup
//! norm, so value iteration from `V_0 = h` converges geometrically.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::system::{Bounds, Control, ControlGrid, ControlSystem};
use crate::value::{greedy_control, ValueFunction};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + self.spacing() * i as f64
        }
    }
}

/// Regular tensor-product grid, nodes enumerated row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
}

impl StateGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Empty("grid axes"));
        }
        for a in &axes {
            if a.nodes < 2 {
                return Err(Error::Config(alloc::format!(
                    "grid axes need at least 2 nodes, got {}",
                    a.nodes
                )));
            }
            if !(a.lo < a.hi) {
                return Err(Error::Config(alloc::format!(
                    "grid axis requires lo < hi, got [{}, {}]",
                    a.lo,
                    a.hi
                )));
            }
        }
        let mut strides = vec![1; axes.len()];
        for i in (0..axes.len() - 1).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].nodes;
        }
        Ok(Self { axes, strides })
    }

    /// Grid over `bounds` with `nodes` points per axis.
    pub fn uniform(bounds: &[Bounds], nodes: &[usize]) -> Result<Self> {
        check_len("grid node counts", bounds.len(), nodes.len())?;
        Self::new(
            bounds
                .iter()
                .zip(nodes)
                .map(|(b, &n)| Axis {
                    lo: b.lo,
                    hi: b.hi,
                    nodes: n,
                })
                .collect(),
        )
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.strides[0] * self.axes[0].nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(index, &mut out);
        out
    }

    pub fn node_into(&self, index: usize, out: &mut [f64]) {
        let mut rem = index;
        for (k, axis) in self.axes.iter().enumerate() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            out[k] = axis.node(i);
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    /// Multilinear interpolation stencil of `x` (clamped to the hull): calls
    /// `visit(node_index, weight)` for each of the `2^d` cell corners.
    pub fn stencil(&self, x: &[f64], mut visit: impl FnMut(usize, f64)) {
        let d = self.dim();
        let mut base = 0usize;
        let mut frac = [0.0f64; 16];
        let mut local = vec![0.0; if d > 16 { d } else { 0 }];
        let frac: &mut [f64] = if d <= 16 { &mut frac[..d] } else { &mut local };
        for (k, axis) in self.axes.iter().enumerate() {
            let xc = x[k].max(axis.lo).min(axis.hi);
            let t = (xc - axis.lo) / axis.spacing();
            let mut i = libm::floor(t) as usize;
            if i > axis.nodes - 2 {
                i = axis.nodes - 2;
            }
            frac[k] = (t - i as f64).max(0.0).min(1.0);
            base += i * self.strides[k];
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base;
            for k in 0..d {
                if corner >> (d - 1 - k) & 1 == 1 {
                    w *= frac[k];
                    idx += self.strides[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            visit(idx, w);
        }
    }

    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.stencil(x, |i, w| acc += w * values[i]);
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridValueFunction {
    pub grid: StateGrid,
    pub values: Vec<f64>,
    pub gamma: f64,
}

impl GridValueFunction {
    pub fn new(grid: StateGrid, values: Vec<f64>, gamma: f64) -> Result<Self> {
        check_len("grid values", grid.len(), values.len())?;
        Ok(Self {
            grid,
            values,
            gamma,
        })
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }
}

impl ValueFunction for GridValueFunction {
    fn value(&self, x: &[f64]) -> f64 {
        self.evaluate(x)
    }
}

/// Greedy control `argmax_u V(f(x, u))`, lowest grid index on ties.
pub fn greedy_policy<S: ControlSystem + ?Sized>(
    sys: &S,
    gvf: &GridValueFunction,
    x: &[f64],
) -> Result<Control> {
    let controls = ControlGrid::for_system(sys)?;
    Ok(greedy_control(sys, &controls, gvf, x))
}

/// The safety Bellman operator on a fixed grid, with every successor
/// stencil precomputed.
#[derive(Debug, Clone)]
pub struct BackupOperator {
    gamma: f64,
    margins: Vec<f64>,
    controls: usize,
    corners: usize,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl BackupOperator {
    pub fn new<S: ControlSystem + ?Sized>(sys: &S, grid: &StateGrid, gamma: f64) -> Result<Self> {
        check_len("grid dimension", sys.state_dim(), grid.dim())?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(alloc::format!(
                "discount must lie in [0, 1), got {gamma}"
            )));
        }
        let controls = ControlGrid::for_system(sys)?;
        let corners = 1usize << grid.dim();
        let n = grid.len();
        let mut margins = Vec::with_capacity(n);
        let mut indices = Vec::with_capacity(n * controls.len() * corners);
        let mut weights = Vec::with_capacity(n * controls.len() * corners);
        let mut x = vec![0.0; grid.dim()];
        let mut next = vec![0.0; grid.dim()];
        for i in 0..n {
            grid.node_into(i, &mut x);
            margins.push(sys.margin(&x));
            for u in controls.iter() {
                sys.transition(&x, u, &mut next);
                grid.stencil(&next, |j, w| {
                    indices.push(j as u32);
                    weights.push(w);
                });
            }
        }
        Ok(Self {
            gamma,
            margins,
            controls: controls.len(),
            corners,
            indices,
            weights,
        })
    }

    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let g = self.gamma;
        let block = self.controls * self.corners;
        for (node, o) in out.iter_mut().enumerate() {
            let start = node * block;
            let mut best = f64::NEG_INFINITY;
            for c in 0..self.controls {
                let s = start + c * self.corners;
                let mut acc = 0.0;
                for k in s..s + self.corners {
                    acc += self.weights[k] * v[self.indices[k] as usize];
                }
                if acc > best {
                    best = acc;
                }
            }
            let h = self.margins[node];
            *o = (1.0 - g) * h + g * h.min(best);
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply_into(v, &mut out);
        out
    }
}

/// One synchronous backup sweep `V_{k+1} = B(V_k)`.
pub fn bellman_backup<S: ControlSystem + ?Sized>(
    sys: &S,
    grid: &StateGrid,
    values: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    check_len("grid values", grid.len(), values.len())?;
    Ok(BackupOperator::new(sys, grid, gamma)?.apply(values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub iterations: usize,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    /// Contraction bound on the sweep count.
    pub bound: usize,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Iterate the backup from `V_0 = h` until the sup-norm change drops below `tol`.
pub fn value_iteration<S: ControlSystem + ?Sized>(
    sys: &S,
    grid: &StateGrid,
    gamma: f64,
    tol: f64,
) -> Result<(GridValueFunction, Convergence)> {
    if !(tol > 0.0) {
        return Err(Error::Config(alloc::format!("tolerance must be positive, got {tol}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(alloc::format!(
            "discount must lie in (0, 1), got {gamma}"
        )));
    }
    let op = BackupOperator::new(sys, grid, gamma)?;
    let mut v = op.margins().to_vec();
    let mut next = op.apply(&v);
    let first = sup_diff(&v, &next);
    let bound = if first < tol {
        1
    } else {
        libm::ceil(libm::log(tol / first) / libm::log(gamma)) as usize + 1
    };
    // rounding slack on top of the contraction bound
    let cap = bound + 2;
    let mut iterations = 1;
    let mut residual = first;
    while residual >= tol {
        if iterations >= cap {
            return Err(Error::NonConvergence {
                iterations,
                residual,
            });
        }
        core::mem::swap(&mut v, &mut next);
        op.apply_into(&v, &mut next);
        residual = sup_diff(&v, &next);
        iterations += 1;
    }
    let value = GridValueFunction::new(grid.clone(), next, gamma)?;
    Ok((
        value,
        Convergence {
            iterations,
            residual,
            bound,
        },
    ))
}
