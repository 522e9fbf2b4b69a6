//! Hamiltonian derivative blocks, Lie brackets and the Goh-transformed
//! coefficient matrices.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linearized::{linearize, LinearizedSystem};
use crate::multiplier::{endpoint_hessian, Multiplier};
use crate::numerics::time_derivative;
use crate::poly::Polynomial;
use crate::problem::ProblemDef;
use crate::trajectory::{Series, Trajectory};

/// Partial derivatives of `H = p . F` at every node.
#[derive(Clone, Debug)]
pub struct HBlocks {
    pub hx: Series,
    pub hu: Series,
    pub hv: Series,
    pub hxx: Vec<DMatrix<f64>>,
    /// `l x n`.
    pub hux: Vec<DMatrix<f64>>,
    /// `m x n`.
    pub hvx: Vec<DMatrix<f64>>,
    pub huu: Vec<DMatrix<f64>>,
    /// `m x l`.
    pub hvu: Vec<DMatrix<f64>>,
}

pub fn h_blocks(p: &ProblemDef, traj: &Trajectory, lam: &Multiplier) -> Result<HBlocks> {
    let lin = linearize(p, traj)?;
    h_blocks_with(p, traj, &lin, lam)
}

struct NodeBlocks {
    hx: DVector<f64>,
    hu: DVector<f64>,
    hv: DVector<f64>,
    hxx: DMatrix<f64>,
    hux: DMatrix<f64>,
    hvx: DMatrix<f64>,
    huu: DMatrix<f64>,
    hvu: DMatrix<f64>,
}

pub(crate) fn h_blocks_with(
    p: &ProblemDef,
    traj: &Trajectory,
    lin: &LinearizedSystem,
    lam: &Multiplier,
) -> Result<HBlocks> {
    let len = lin.grid.len();
    if lam.p.len() != len || lam.p.iter().any(|c| c.len() != p.n()) {
        return Err(Error::Dimension("costate samples do not match the grid".into()));
    }
    let (n, l, m) = (p.n(), p.l(), p.m());
    let nodes: Vec<NodeBlocks> = (0..len)
        .into_par_iter()
        .map(|k| {
            let (x, u, v, pk) = (&traj.x[k], &traj.u[k], &traj.v[k], &lam.p[k]);
            let mut hxx = DMatrix::zeros(n, n);
            let mut hxu = DMatrix::zeros(n, l);
            let mut huu = DMatrix::zeros(l, l);
            let mut hvx = DMatrix::zeros(m, n);
            let mut hvu = DMatrix::zeros(m, l);
            for i in 0..=m {
                let w = if i == 0 { 1.0 } else { v[i - 1] };
                let fe = p.eval_field(i, x, u, 2)?;
                if i > 0 {
                    hvx.set_row(i - 1, &(pk.transpose() * fe.jac_x.as_ref().unwrap()));
                    hvu.set_row(i - 1, &(pk.transpose() * fe.jac_u.as_ref().unwrap()));
                }
                if w == 0.0 {
                    continue;
                }
                let (sxx, sxu, suu) = (
                    fe.hess_xx.as_ref().unwrap(),
                    fe.hess_xu.as_ref().unwrap(),
                    fe.hess_uu.as_ref().unwrap(),
                );
                for c in 0..n {
                    let pc = pk[c] * w;
                    if pc != 0.0 {
                        hxx += &sxx[c] * pc;
                        hxu += &sxu[c] * pc;
                        huu += &suu[c] * pc;
                    }
                }
            }
            Ok(NodeBlocks {
                hx: lin.fx[k].transpose() * pk,
                hu: lin.fu[k].transpose() * pk,
                hv: lin.fv[k].transpose() * pk,
                hxx,
                hux: hxu.transpose(),
                hvx,
                huu,
                hvu,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = HBlocks {
        hx: Vec::with_capacity(len),
        hu: Vec::with_capacity(len),
        hv: Vec::with_capacity(len),
        hxx: Vec::with_capacity(len),
        hux: Vec::with_capacity(len),
        hvx: Vec::with_capacity(len),
        huu: Vec::with_capacity(len),
        hvu: Vec::with_capacity(len),
    };
    for b in nodes {
        out.hx.push(b.hx);
        out.hu.push(b.hu);
        out.hv.push(b.hv);
        out.hxx.push(b.hxx);
        out.hux.push(b.hux);
        out.hvx.push(b.hvx);
        out.huu.push(b.huu);
        out.hvu.push(b.hvu);
    }
    Ok(out)
}

/// Data of the boundary form `g`, captured at the final time.
#[derive(Clone, Debug)]
pub struct BoundaryData {
    pub hvx_t: DMatrix<f64>,
    pub s_t: DMatrix<f64>,
    pub fv_t: DMatrix<f64>,
    /// Hessian of `l` over `(x0, xT)`, `2n x 2n`.
    pub ell_hess: DMatrix<f64>,
}

/// All coefficient matrices of the transformed second variation for one
/// multiplier, together with the linearization and H blocks they came from.
#[derive(Clone, Debug)]
pub struct GohMatrices {
    pub lin: LinearizedSystem,
    pub h: HBlocks,
    pub b: Vec<DMatrix<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub e: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub boundary: BoundaryData,
}

pub fn goh_matrices(p: &ProblemDef, traj: &Trajectory, lam: &Multiplier) -> Result<GohMatrices> {
    let lin = linearize(p, traj)?;
    goh_matrices_with(p, traj, lin, lam)
}

pub fn goh_matrices_with(
    p: &ProblemDef,
    traj: &Trajectory,
    lin: LinearizedSystem,
    lam: &Multiplier,
) -> Result<GohMatrices> {
    let h = h_blocks_with(p, traj, &lin, lam)?;
    let len = lin.grid.len();
    let step = lin.grid.step();
    let hvx_dot = time_derivative(&h.hvx, step);
    let mut s = Vec::with_capacity(len);
    let mut g = Vec::with_capacity(len);
    for k in 0..len {
        let x = &h.hvx[k] * &lin.fv[k];
        let xt = x.transpose();
        s.push((&x + &xt) * 0.5);
        g.push((&x - &xt) * 0.5);
    }
    let s_dot = time_derivative(&s, step);
    let mut mm = Vec::with_capacity(len);
    let mut e = Vec::with_capacity(len);
    let mut r = Vec::with_capacity(len);
    for k in 0..len {
        let fvt = lin.fv[k].transpose();
        mm.push(&fvt * &h.hxx[k] - &hvx_dot[k] - &h.hvx[k] * &lin.fx[k]);
        e.push(&fvt * h.hux[k].transpose() - &h.hvx[k] * &lin.fu[k]);
        let hb = &h.hvx[k] * &lin.b[k];
        let rk = &fvt * &h.hxx[k] * &lin.fv[k] - (&hb + hb.transpose()) - &s_dot[k];
        // symmetric in exact arithmetic; remove rounding asymmetry
        r.push((&rk + rk.transpose()) * 0.5);
    }
    let last = len - 1;
    let boundary = BoundaryData {
        hvx_t: h.hvx[last].clone(),
        s_t: s[last].clone(),
        fv_t: lin.fv[last].clone(),
        ell_hess: endpoint_hessian(p, traj, &lam.alpha, &lam.beta)?,
    };
    Ok(GohMatrices {
        b: lin.b.clone(),
        lin,
        h,
        m: mm,
        e,
        s,
        g,
        r,
        boundary,
    })
}

impl GohMatrices {
    pub fn n(&self) -> usize {
        self.lin.n()
    }

    pub fn l(&self) -> usize {
        self.lin.l()
    }

    pub fn m(&self) -> usize {
        self.lin.m()
    }

    pub fn max_abs_g(&self) -> f64 {
        self.g.iter().map(|g| if g.is_empty() { 0.0 } else { g.amax() }).fold(0.0, f64::max)
    }

    /// Node-indexed JSON bundle of all matrices, rows as nested arrays.
    pub fn to_json(&self) -> Value {
        let series = |v: &[DMatrix<f64>]| Value::Array(v.iter().map(mat_json).collect());
        json!({
            "t": self.lin.grid.times(),
            "Fx": series(&self.lin.fx),
            "Fu": series(&self.lin.fu),
            "Fv": series(&self.lin.fv),
            "B": series(&self.b),
            "M": series(&self.m),
            "E": series(&self.e),
            "S": series(&self.s),
            "G": series(&self.g),
            "R": series(&self.r),
            "Hxx": series(&self.h.hxx),
            "Hux": series(&self.h.hux),
            "Hvx": series(&self.h.hvx),
            "Huu": series(&self.h.huu),
            "Hvu": series(&self.h.hvu),
            "boundary": {
                "Hvx_T": mat_json(&self.boundary.hvx_t),
                "S_T": mat_json(&self.boundary.s_t),
                "Fv_T": mat_json(&self.boundary.fv_t),
                "ell_hessian": mat_json(&self.boundary.ell_hess),
            }
        })
    }
}

pub(crate) fn mat_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::from(m.row(i).iter().copied().collect::<Vec<f64>>()))
            .collect(),
    )
}

/// `[a, b]^x = (D_x a) b - (D_x b) a` for fields given as component
/// polynomials over `(x, u)`; only the first `n` variables are differentiated.
pub fn bracket(a: &[Polynomial], b: &[Polynomial], n: usize) -> Vec<Polynomial> {
    let arity = a[0].arity();
    (0..n)
        .map(|c| {
            let mut acc = Polynomial::zero(arity);
            for j in 0..n {
                acc = &acc + &(&a[c].derivative(j) * &b[j]);
                acc = &acc - &(&b[c].derivative(j) * &a[j]);
            }
            acc
        })
        .collect()
}

fn field_polys(p: &ProblemDef, i: usize) -> Result<&[Polynomial]> {
    p.fields()
        .get(i)
        .map(|f| f.components())
        .ok_or(Error::IndexOutOfRange {
            what: "field",
            index: i,
            limit: p.m() + 1,
        })
}

fn eval_polys(ps: &[Polynomial], x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    DVector::from_iterator(ps.len(), ps.iter().map(|q| q.eval(&z)))
}

/// `[f_i, f_j]^x` at `(x, u)`, from exact polynomial brackets.
pub fn lie_bracket_x(p: &ProblemDef, i: usize, j: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let (fi, fj) = (field_polys(p, i)?, field_polys(p, j)?);
    if x.len() != p.n() || u.len() != p.l() {
        return Err(Error::Dimension("(x, u) do not match the problem".into()));
    }
    Ok(eval_polys(&bracket(fi, fj, p.n()), x, u))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RCrossCheck {
    /// Max over nodes and entries of the difference between the two routes.
    Deviation { max_deviation: f64 },
    /// The bracket route needs `G = 0`.
    NotApplicable { max_abs_g: f64 },
}

/// Recomputes `R` from double Lie brackets and compares with `gm.r`.
///
/// Bracket route, symmetrized in `(i, j)`:
/// `R_ij = -p { [f_j,[f_0,f_i]] + sum_k v_k [f_j,[f_k,f_i]]
///              + (D^2_ux f_i f_j - D_x f_i D_u f_j) u' }`, averaged with `i <-> j`.
pub fn r_cross_check(p: &ProblemDef, traj: &Trajectory, lam: &Multiplier, gm: &GohMatrices, tol: f64) -> Result<RCrossCheck> {
    let max_g = gm.max_abs_g();
    if max_g > tol {
        return Ok(RCrossCheck::NotApplicable { max_abs_g: max_g });
    }
    let (n, m) = (p.n(), p.m());
    let fields: Vec<&[Polynomial]> = (0..=m).map(|i| field_polys(p, i)).collect::<Result<_>>()?;
    // dbl[k][i][j] = [f_j, [f_k, f_i]] for k in 0..=m, i, j in 1..=m
    let dbl: Vec<Vec<Vec<Vec<Polynomial>>>> = (0..=m)
        .map(|k| {
            (1..=m)
                .map(|i| {
                    let inner = bracket(fields[k], fields[i], n);
                    (1..=m).map(|j| bracket(fields[j], &inner, n)).collect()
                })
                .collect()
        })
        .collect();
    let mut dev: f64 = 0.0;
    for t in 0..gm.lin.grid.len() {
        let (x, u, v, pk) = (&traj.x[t], &traj.u[t], &traj.v[t], &lam.p[t]);
        let udot = &gm.lin.udot[t];
        let evals: Vec<_> = (1..=m).map(|i| p.eval_field(i, x, u, 2)).collect::<Result<_>>()?;
        let term = |i: usize, j: usize| -> DVector<f64> {
            let mut w = eval_polys(&dbl[0][i][j], x, u);
            for k in 1..=m {
                if v[k - 1] != 0.0 {
                    w += eval_polys(&dbl[k][i][j], x, u) * v[k - 1];
                }
            }
            if !udot.is_empty() {
                let (ei, ej) = (&evals[i], &evals[j]);
                let mut mix = -(ei.jac_x.as_ref().unwrap() * ej.jac_u.as_ref().unwrap());
                let hxu = ei.hess_xu.as_ref().unwrap();
                for c in 0..n {
                    // row c of D^2_ux f_i . f_j
                    let row = ej.value.transpose() * &hxu[c];
                    let mut dst = mix.row_mut(c);
                    dst += &row;
                }
                w += mix * udot;
            }
            w
        };
        for i in 0..m {
            for j in 0..m {
                let rij = -0.5 * pk.dot(&(term(i, j) + term(j, i)));
                dev = dev.max((rij - gm.r[t][(i, j)]).abs());
            }
        }
    }
    Ok(RCrossCheck::Deviation { max_deviation: dev })
}
