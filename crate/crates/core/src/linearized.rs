//! Linearization along a nominal trajectory, linearized directions, the Goh
//! change of variables and the gamma-order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{cumulative_trapezoid, rk4_linear_step, time_derivative};
use crate::problem::ProblemDef;
use crate::trajectory::{Grid, Series, Trajectory};

/// Coefficients of `x' = Fx x + Fu u + Fv v` sampled at the grid nodes.
#[derive(Clone, Debug)]
pub struct LinearizedSystem {
    pub grid: Grid,
    pub fx: Vec<DMatrix<f64>>,
    pub fu: Vec<DMatrix<f64>>,
    pub fv: Vec<DMatrix<f64>>,
    /// Time derivative of the nominal nonlinear control.
    pub udot: Series,
    /// `B = Fx Fv - d/dt Fv`, the `ybar` coefficient after the Goh transform.
    pub b: Vec<DMatrix<f64>>,
}

impl LinearizedSystem {
    pub fn n(&self) -> usize {
        self.fx[0].nrows()
    }

    pub fn l(&self) -> usize {
        self.fu[0].ncols()
    }

    pub fn m(&self) -> usize {
        self.fv[0].ncols()
    }
}

pub fn linearize(p: &ProblemDef, traj: &Trajectory) -> Result<LinearizedSystem> {
    traj.check_dims(p)?;
    let (n, l, m) = (p.n(), p.l(), p.m());
    let len = traj.grid.len();
    let mut fx = Vec::with_capacity(len);
    let mut fu = Vec::with_capacity(len);
    let mut fv = Vec::with_capacity(len);
    for k in 0..len {
        let (x, u, v) = (&traj.x[k], &traj.u[k], &traj.v[k]);
        let f0 = p.eval_field(0, x, u, 1)?;
        let mut ax = f0.jac_x.unwrap();
        let mut au = f0.jac_u.unwrap();
        let mut av = DMatrix::zeros(n, m);
        for i in 0..m {
            let fi = p.eval_field(i + 1, x, u, 1)?;
            ax += fi.jac_x.unwrap() * v[i];
            au += fi.jac_u.unwrap() * v[i];
            av.set_column(i, &fi.value);
        }
        fx.push(ax);
        fu.push(au);
        fv.push(av);
    }
    let h = traj.grid.step();
    let udot = if l == 0 {
        vec![DVector::zeros(0); len]
    } else {
        time_derivative(&traj.u, h)
    };
    let fv_dot = time_derivative(&fv, h);
    let b = (0..len).map(|k| &fx[k] * &fv[k] - &fv_dot[k]).collect();
    Ok(LinearizedSystem {
        grid: traj.grid,
        fx,
        fu,
        fv,
        udot,
        b,
    })
}

/// A linearized direction `(x0bar, ubar, vbar)` with its state `xbar`.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub x0: DVector<f64>,
    pub u: Series,
    pub v: Series,
    pub x: Series,
}

/// A direction in Goh variables `(xi0, ubar, ybar, h)` with state `xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct GohDirection {
    pub xi0: DVector<f64>,
    pub u: Series,
    pub y: Series,
    pub h: DVector<f64>,
    pub xi: Series,
    /// Max deviation of `xi` from an RK4 solve of the transformed linear
    /// equation; zero when `xi` was produced by that solve.
    pub residual: f64,
}

fn check_inputs(lin: &LinearizedSystem, x0: &DVector<f64>, u: &Series, w: &Series, wdim: usize) -> Result<()> {
    let len = lin.grid.len();
    if x0.len() != lin.n() || u.len() != len || w.len() != len {
        return Err(Error::Dimension("direction inputs do not match the grid".into()));
    }
    if u.iter().any(|s| s.len() != lin.l()) || w.iter().any(|s| s.len() != wdim) {
        return Err(Error::Dimension("direction inputs have wrong component count".into()));
    }
    Ok(())
}

fn propagate(
    grid: &Grid,
    a: &[DMatrix<f64>],
    x0: &DVector<f64>,
    forcing: impl Fn(usize) -> DVector<f64>,
) -> Series {
    let h = grid.step();
    let mut out = Vec::with_capacity(grid.len());
    out.push(x0.clone());
    let mut b_prev = forcing(0);
    for k in 0..grid.intervals() {
        let b_next = forcing(k + 1);
        let next = rk4_linear_step(&a[k], &a[k + 1], &b_prev, &b_next, &out[k], h);
        out.push(next);
        b_prev = b_next;
    }
    out
}

/// RK4 solve of `x' = Fx x + Fu u + Fv v`, `x(0) = x0`.
pub fn integrate_linearized(
    lin: &LinearizedSystem,
    x0: &DVector<f64>,
    u: &Series,
    v: &Series,
) -> Result<Direction> {
    check_inputs(lin, x0, u, v, lin.m())?;
    let x = propagate(&lin.grid, &lin.fx, x0, |k| &lin.fu[k] * &u[k] + &lin.fv[k] * &v[k]);
    Ok(Direction {
        x0: x0.clone(),
        u: u.clone(),
        v: v.clone(),
        x,
    })
}

/// RK4 solve of the transformed equation `xi' = Fx xi + Fu u + B y`.
pub fn propagate_goh(lin: &LinearizedSystem, xi0: &DVector<f64>, u: &Series, y: &Series) -> Result<Series> {
    check_inputs(lin, xi0, u, y, lin.m())?;
    Ok(propagate(&lin.grid, &lin.fx, xi0, |k| &lin.fu[k] * &u[k] + &lin.b[k] * &y[k]))
}

impl GohDirection {
    /// Builds a Goh direction whose state solves the transformed equation.
    pub fn from_inputs(
        lin: &LinearizedSystem,
        xi0: DVector<f64>,
        u: Series,
        y: Series,
        h: DVector<f64>,
    ) -> Result<Self> {
        if h.len() != lin.m() {
            return Err(Error::Dimension(format!("h has length {}, expected {}", h.len(), lin.m())));
        }
        let xi = propagate_goh(lin, &xi0, &u, &y)?;
        Ok(GohDirection {
            xi0,
            u,
            y,
            h,
            xi,
            residual: 0.0,
        })
    }

    /// Inverse transform: `xbar = xi + Fv y`, `vbar = d/dt y`.
    pub fn to_direction(&self, lin: &LinearizedSystem) -> Direction {
        let x = self
            .xi
            .iter()
            .zip(&self.y)
            .zip(&lin.fv)
            .map(|((xi, y), fv)| xi + fv * y)
            .collect();
        let v = time_derivative(&self.y, lin.grid.step());
        Direction {
            x0: self.xi0.clone(),
            u: self.u.clone(),
            v,
            x,
        }
    }

    pub fn gamma(&self, grid: &Grid) -> f64 {
        gamma_order(grid, &self.xi0, &self.u, &self.y, &self.h)
    }

    /// Writes `t,xi1..,u1..,y1..`; `xi0` and `h` are not node series and are
    /// left out.
    pub fn write_csv<W: std::io::Write>(&self, grid: &Grid, out: W) -> Result<()> {
        crate::trajectory::write_series_csv(out, grid, [("xi", &self.xi), ("u", &self.u), ("y", &self.y)])
    }

    pub fn scale(&self, s: f64) -> Self {
        let sc = |v: &Series| v.iter().map(|e| e * s).collect::<Series>();
        GohDirection {
            xi0: &self.xi0 * s,
            u: sc(&self.u),
            y: sc(&self.y),
            h: &self.h * s,
            xi: sc(&self.xi),
            residual: self.residual * s.abs(),
        }
    }
}

/// `ybar = int vbar` (trapezoid), `xi = xbar - Fv ybar`, `h = ybar(T)`.
pub fn goh_transform_direction(lin: &LinearizedSystem, dir: &Direction) -> Result<GohDirection> {
    check_inputs(lin, &dir.x0, &dir.u, &dir.v, lin.m())?;
    let y = cumulative_trapezoid(&dir.v, lin.grid.step());
    let xi: Series = dir
        .x
        .iter()
        .zip(&y)
        .zip(&lin.fv)
        .map(|((x, y), fv)| x - fv * y)
        .collect();
    let h = y.last().unwrap().clone();
    let reference = propagate_goh(lin, &dir.x0, &dir.u, &y)?;
    let residual = reference
        .iter()
        .zip(&xi)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    Ok(GohDirection {
        xi0: dir.x0.clone(),
        u: dir.u.clone(),
        y,
        h,
        xi,
        residual,
    })
}

/// `|x0|^2 + |h|^2 + int (|u|^2 + |y|^2)` with trapezoid quadrature.
pub fn gamma_order(grid: &Grid, x0: &DVector<f64>, u: &Series, y: &Series, h: &DVector<f64>) -> f64 {
    x0.norm_squared()
        + h.norm_squared()
        + grid.integrate(u.iter().zip(y).map(|(a, b)| a.norm_squared() + b.norm_squared()))
}
