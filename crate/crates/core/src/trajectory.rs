//! Uniform time grids, nominal trajectories, nonlinear state integration and
//! feasibility diagnostics.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::trapezoid_weights;
use crate::problem::ProblemDef;

/// Node-indexed samples of a vector quantity.
pub type Series = Vec<DVector<f64>>;

/// Uniform grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Grid {
    intervals: usize,
    horizon: f64,
}

impl Grid {
    pub fn new(intervals: usize, horizon: f64) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::Domain(format!("grid needs N >= 2, got {intervals}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(Grid { intervals, horizon })
    }

    /// `N`, the number of intervals.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.intervals {
            self.horizon
        } else {
            k as f64 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(self.intervals, self.step())
    }

    /// Trapezoid rule over node values.
    pub fn integrate(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Sampled `(x, u, v)` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: Grid,
    pub x: Series,
    pub u: Series,
    pub v: Series,
}

impl Trajectory {
    pub fn new(grid: Grid, x: Series, u: Series, v: Series) -> Result<Self> {
        for (name, s) in [("x", &x), ("u", &u), ("v", &v)] {
            if s.len() != grid.len() {
                return Err(Error::Dimension(format!(
                    "{name} has {} samples, grid has {} nodes",
                    s.len(),
                    grid.len()
                )));
            }
            let dim = s[0].len();
            if s.iter().any(|e| e.len() != dim) {
                return Err(Error::Dimension(format!("{name} samples have inconsistent length")));
            }
            if s.iter().any(|e| e.iter().any(|c| !c.is_finite())) {
                return Err(Error::Domain(format!("{name} has non-finite entries")));
            }
        }
        Ok(Trajectory { grid, x, u, v })
    }

    /// Constant-zero trajectory of the given dimensions.
    pub fn zeros(grid: Grid, n: usize, l: usize, m: usize) -> Self {
        let z = |d| vec![DVector::zeros(d); grid.len()];
        Trajectory {
            grid,
            x: z(n),
            u: z(l),
            v: z(m),
        }
    }

    pub fn check_dims(&self, p: &ProblemDef) -> Result<()> {
        let dims = (self.x[0].len(), self.u[0].len(), self.v[0].len());
        if dims != (p.n(), p.l(), p.m()) {
            return Err(Error::Dimension(format!(
                "trajectory dims {dims:?} do not match problem ({}, {}, {})",
                p.n(),
                p.l(),
                p.m()
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_series_csv(out, &self.grid, [("x", &self.x), ("u", &self.u), ("v", &self.v)])
    }

    /// Reads `t,x1..xn,u1..ul,v1..vm`; the time column must be a uniform grid
    /// starting at zero.
    pub fn read_csv<R: Read>(input: R, n: usize, l: usize, m: usize) -> Result<Self> {
        let (grid, mut cols) = read_series_csv(input, &[n, l, m])?;
        let v = cols.pop().unwrap();
        let u = cols.pop().unwrap();
        let x = cols.pop().unwrap();
        Trajectory::new(grid, x, u, v)
    }
}

pub(crate) fn write_series_csv<'a, W: Write>(
    out: W,
    grid: &Grid,
    blocks: impl IntoIterator<Item = (&'a str, &'a Series)>,
) -> Result<()> {
    let blocks: Vec<_> = blocks.into_iter().collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for (name, s) in &blocks {
        header.extend((1..=s[0].len()).map(|i| format!("{name}{i}")));
    }
    w.write_record(&header)?;
    for k in 0..grid.len() {
        let mut row = vec![format!("{:.16e}", grid.t(k))];
        for (_, s) in &blocks {
            row.extend(s[k].iter().map(|c| format!("{c:.16e}")));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_series_csv<R: Read>(input: R, dims: &[usize]) -> Result<(Grid, Vec<Series>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let width = 1 + dims.iter().sum::<usize>();
    let header_len = rdr.headers()?.len();
    if header_len != width {
        return Err(Error::Dimension(format!(
            "CSV has {header_len} columns, expected {width}"
        )));
    }
    let mut times = Vec::new();
    let mut cols: Vec<Series> = dims.iter().map(|_| Vec::new()).collect();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: format!("row {} column {}", r + 1, c),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        times.push(vals[0]);
        let mut off = 1;
        for (d, col) in dims.iter().zip(cols.iter_mut()) {
            col.push(DVector::from_column_slice(&vals[off..off + d]));
            off += d;
        }
    }
    if times.len() < 3 {
        return Err(Error::Domain("CSV needs at least 3 rows".into()));
    }
    let horizon = *times.last().unwrap();
    let grid = Grid::new(times.len() - 1, horizon)?;
    let tol = 1e-9 * horizon.max(1.0);
    if let Some(k) = (0..grid.len()).find(|&k| (times[k] - grid.t(k)).abs() > tol) {
        return Err(Error::Domain(format!(
            "time column is not a uniform grid from 0 (row {k}: {} vs {})",
            times[k],
            grid.t(k)
        )));
    }
    Ok((grid, cols))
}

fn rk4_state_step(
    p: &ProblemDef,
    x: &DVector<f64>,
    (u0, u1): (&DVector<f64>, &DVector<f64>),
    (v0, v1): (&DVector<f64>, &DVector<f64>),
    h: f64,
) -> DVector<f64> {
    let um = (u0 + u1) * 0.5;
    let vm = (v0 + v1) * 0.5;
    let k1 = p.dynamics_unchecked(x, u0, v0);
    let k2 = p.dynamics_unchecked(&(x + &k1 * (0.5 * h)), &um, &vm);
    let k3 = p.dynamics_unchecked(&(x + &k2 * (0.5 * h)), &um, &vm);
    let k4 = p.dynamics_unchecked(&(x + &k3 * h), u1, v1);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates `x' = F(x,u,v)` by classical RK4, controls linear within steps.
pub fn integrate_state(
    p: &ProblemDef,
    x0: &DVector<f64>,
    u: &Series,
    v: &Series,
    grid: Grid,
) -> Result<Trajectory> {
    if u.len() != grid.len() || v.len() != grid.len() {
        return Err(Error::Dimension("control samples must match the grid".into()));
    }
    if x0.len() != p.n() || u[0].len() != p.l() || v[0].len() != p.m() {
        return Err(Error::Dimension("x0/u/v dimensions do not match problem".into()));
    }
    let h = grid.step();
    let mut x = Vec::with_capacity(grid.len());
    x.push(x0.clone());
    for k in 0..grid.intervals() {
        let next = rk4_state_step(p, &x[k], (&u[k], &u[k + 1]), (&v[k], &v[k + 1]), h);
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Diverged { node: k + 1 });
        }
        x.push(next);
    }
    Trajectory::new(grid, x, u.clone(), v.clone())
}

#[derive(Clone, Debug, Serialize)]
pub struct FeasibilityReport {
    /// `max_k |RK4(x_k) - x_{k+1}|`.
    pub max_defect: f64,
    pub defect_node: usize,
    /// Cost value followed by inequality values (multiplier order).
    pub phi: Vec<f64>,
    pub eta: Vec<f64>,
    /// Inequality indices (in `1..=d_phi`) with `|phi_i| <= tol`.
    pub active: Vec<usize>,
    pub feasible: bool,
}

pub fn feasibility_report(p: &ProblemDef, traj: &Trajectory, tol: f64) -> Result<FeasibilityReport> {
    traj.check_dims(p)?;
    let h = traj.grid.step();
    let (mut max_defect, mut defect_node) = (0.0_f64, 0);
    for k in 0..traj.grid.intervals() {
        let pred = rk4_state_step(
            p,
            &traj.x[k],
            (&traj.u[k], &traj.u[k + 1]),
            (&traj.v[k], &traj.v[k + 1]),
            h,
        );
        let d = (pred - &traj.x[k + 1]).amax();
        if d > max_defect || !d.is_finite() {
            max_defect = d;
            defect_node = k + 1;
        }
    }
    let (x0, xt) = (&traj.x[0], traj.x.last().unwrap());
    let value = |i| p.eval_endpoint(i, x0, xt, 0).map(|e| e.value);
    let phi = p.phi_range().map(value).collect::<Result<Vec<_>>>()?;
    let eta = p.eta_range().map(value).collect::<Result<Vec<_>>>()?;
    let active: Vec<usize> = (1..phi.len()).filter(|&i| phi[i].abs() <= tol).collect();
    let scale = 1.0 + traj.x.iter().map(|x| x.amax()).fold(0.0, f64::max);
    let feasible = max_defect <= tol * scale
        && eta.iter().all(|e| e.abs() <= tol)
        && phi[1..].iter().all(|&f| f <= tol);
    Ok(FeasibilityReport {
        max_defect,
        defect_node,
        phi,
        eta,
        active,
        feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    fn consts(grid: &Grid, vals: &[f64]) -> Series {
        vec![DVector::from_column_slice(vals); grid.len()]
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::new(1, 1.0).is_err());
        assert!(Grid::new(10, 0.0).is_err());
        let g = Grid::new(4, 2.0).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn pe_equilibrium() {
        let p = registry::pe(1.0);
        let g = Grid::new(50, 1.0).unwrap();
        let tr = integrate_state(&p, &DVector::zeros(3), &consts(&g, &[0.0]), &consts(&g, &[0.0]), g)
            .unwrap();
        assert!(tr.x.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn pe_unit_affine_control() {
        let p = registry::pe(1.0);
        let g = Grid::new(100, 1.0).unwrap();
        let tr = integrate_state(&p, &DVector::zeros(3), &consts(&g, &[0.0]), &consts(&g, &[1.0]), g)
            .unwrap();
        let xt = tr.x.last().unwrap();
        assert!((xt[1] - 1.0).abs() < 1e-12);
        assert!((xt[0] - 0.5).abs() < 1e-12);
        assert!((xt[2] - (1.0 / 20.0 + 1.0 / 3.0 + 0.5)).abs() < 1e-8);
    }

    #[test]
    fn exponential_growth() {
        let p = registry::exponential();
        for n in [100usize] {
            let g = Grid::new(n, 1.0).unwrap();
            let tr = integrate_state(&p, &DVector::from_vec(vec![1.0]), &consts(&g, &[]), &consts(&g, &[]), g)
                .unwrap();
            assert!((tr.x.last().unwrap()[0] - 1f64.exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let p = registry::exponential();
        let err = |n| {
            let g = Grid::new(n, 2.0).unwrap();
            let tr = integrate_state(&p, &DVector::from_vec(vec![1.0]), &consts(&g, &[]), &consts(&g, &[]), g)
                .unwrap();
            (tr.x.last().unwrap()[0] - 2f64.exp()).abs()
        };
        let order = (err(20) / err(40)).log2();
        assert!(order > 3.8, "observed order {order}");
    }

    #[test]
    fn divergence_reported() {
        // x' = x^2 from x0 = 1 blows up at t = 1
        let p = registry::blowup();
        let g = Grid::new(100, 3.0).unwrap();
        let r = integrate_state(&p, &DVector::from_vec(vec![1.0]), &consts(&g, &[]), &consts(&g, &[]), g);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn feasibility_of_pe() {
        let p = registry::pe(1.0);
        let g = Grid::new(20, 1.0).unwrap();
        let mut tr = Trajectory::zeros(g, 3, 1, 1);
        let rep = feasibility_report(&p, &tr, 1e-8).unwrap();
        assert_eq!(rep.max_defect, 0.0);
        assert_eq!(rep.eta, vec![0.0; 3]);
        assert_eq!(rep.phi, vec![0.0]);
        assert!(rep.feasible);
        tr.x[0][2] = 1.0;
        let rep = feasibility_report(&p, &tr, 1e-8).unwrap();
        assert_eq!(rep.eta[2], 1.0);
        assert!(!rep.feasible);
    }

    #[test]
    fn defect_scales_with_perturbation() {
        let p = registry::pe(1.0);
        let g = Grid::new(40, 1.0).unwrap();
        let base = integrate_state(&p, &DVector::zeros(3), &consts(&g, &[0.3]), &consts(&g, &[0.5]), g)
            .unwrap();
        let defect = |eps: f64| {
            let mut tr = base.clone();
            for (k, x) in tr.x.iter_mut().enumerate() {
                x[0] += eps * ((k * 7919) % 13) as f64 / 13.0;
            }
            feasibility_report(&p, &tr, 1e-8).unwrap().max_defect
        };
        let (d1, d2) = (defect(1e-3), defect(1e-4));
        assert!(d1 > 0.0 && (d1 / d2 - 10.0).abs() < 0.5, "{d1} {d2}");
    }

    #[test]
    fn csv_round_trip() {
        let p = registry::pe(1.0);
        let g = Grid::new(10, 1.0).unwrap();
        let tr = integrate_state(&p, &DVector::zeros(3), &consts(&g, &[0.1]), &consts(&g, &[1.0 / 3.0]), g)
            .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,x3,u1,v1\n"));
        let back = Trajectory::read_csv(&buf[..], 3, 1, 1).unwrap();
        assert_eq!(back, tr);
        assert!(Trajectory::read_csv(&buf[..], 2, 1, 1).is_err());
    }
}
