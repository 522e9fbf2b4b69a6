//! The Lagrangian, the second variation and its Goh-transformed versions,
//! all with trapezoid quadrature on the grid.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::goh::GohMatrices;
use crate::linearized::{integrate_linearized, Direction, GohDirection};
use crate::multiplier::{ClassFlags, Multiplier};
use crate::numerics::time_derivative;
use crate::problem::ProblemDef;
use crate::trajectory::{integrate_state, Series, Trajectory};

/// A quadratic-form value with its per-term contributions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadraticEvaluation {
    pub value: f64,
    pub breakdown: BTreeMap<String, f64>,
}

impl QuadraticEvaluation {
    fn from_terms(terms: Vec<(&str, f64)>) -> Self {
        let breakdown: BTreeMap<String, f64> = terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        QuadraticEvaluation {
            value: breakdown.values().sum(),
            breakdown,
        }
    }
}

/// `l(x(0), x(T)) + int p . (F(x,u,v) - x')`, with `x'` by finite differences.
pub fn lagrangian_value(p: &ProblemDef, w: &Trajectory, lam: &Multiplier) -> Result<f64> {
    w.check_dims(p)?;
    if lam.p.len() != w.grid.len() {
        return Err(Error::Dimension("multiplier and trajectory grids differ".into()));
    }
    let (x0, xt) = (&w.x[0], w.x.last().unwrap());
    let mut ell = 0.0;
    for (i, a) in lam.alpha.iter().enumerate() {
        ell += a * p.eval_endpoint(i, x0, xt, 0)?.value;
    }
    let eta0 = p.eta_range().start;
    for (j, b) in lam.beta.iter().enumerate() {
        ell += b * p.eval_endpoint(eta0 + j, x0, xt, 0)?.value;
    }
    let xdot = time_derivative(&w.x, w.grid.step());
    let integrand = (0..w.grid.len()).map(|k| {
        let f = p.dynamics_unchecked(&w.x[k], &w.u[k], &w.v[k]);
        lam.p[k].dot(&(f - &xdot[k]))
    });
    Ok(ell + w.grid.integrate(integrand))
}

fn check_series(s: &Series, len: usize, dim: usize, name: &str) -> Result<()> {
    if s.len() != len || s.iter().any(|e| e.len() != dim) {
        return Err(Error::Dimension(format!("{name} samples do not match the grid ({len} x {dim})")));
    }
    Ok(())
}

/// Second variation on a linearized direction.
pub fn omega(gm: &GohMatrices, dir: &Direction) -> Result<QuadraticEvaluation> {
    let (n, l, m) = (gm.n(), gm.l(), gm.m());
    let len = gm.lin.grid.len();
    check_series(&dir.x, len, n, "x")?;
    check_series(&dir.u, len, l, "u")?;
    check_series(&dir.v, len, m, "v")?;
    let ends = stack(&dir.x[0], dir.x.last().unwrap());
    let endpoint = 0.5 * ends.dot(&(&gm.boundary.ell_hess * &ends));
    let w = gm.lin.grid.weights();
    let h = &gm.h;
    let (mut hxx, mut hux, mut hvx, mut huu, mut hvu) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..len {
        let (x, u, v) = (&dir.x[k], &dir.u[k], &dir.v[k]);
        hxx += w[k] * 0.5 * x.dot(&(&h.hxx[k] * x));
        hux += w[k] * u.dot(&(&h.hux[k] * x));
        hvx += w[k] * v.dot(&(&h.hvx[k] * x));
        huu += w[k] * 0.5 * u.dot(&(&h.huu[k] * u));
        hvu += w[k] * v.dot(&(&h.hvu[k] * u));
    }
    Ok(QuadraticEvaluation::from_terms(vec![
        ("endpoint", endpoint),
        ("Hxx", hxx),
        ("Hux", hux),
        ("Hvx", hvx),
        ("Huu", huu),
        ("Hvu", hvu),
    ]))
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn check_goh(gm: &GohMatrices, d: &GohDirection) -> Result<()> {
    let (n, l, m) = (gm.n(), gm.l(), gm.m());
    let len = gm.lin.grid.len();
    check_series(&d.xi, len, n, "xi")?;
    check_series(&d.u, len, l, "u")?;
    check_series(&d.y, len, m, "y")?;
    if d.xi0.len() != n || d.h.len() != m {
        return Err(Error::Dimension("xi0 / h have wrong length".into()));
    }
    Ok(())
}

/// Boundary form `g` as a symmetric bilinear form.
fn boundary_bilinear(gm: &GohMatrices, a: &GohDirection, b: &GohDirection) -> f64 {
    let bd = &gm.boundary;
    let ends = |d: &GohDirection| stack(&d.xi0, &(d.xi.last().unwrap() + &bd.fv_t * &d.h));
    let (ea, eb) = (ends(a), ends(b));
    let (ta, tb) = (a.xi.last().unwrap(), b.xi.last().unwrap());
    0.5 * ea.dot(&(&bd.ell_hess * eb))
        + 0.5 * (a.h.dot(&(&bd.hvx_t * tb)) + b.h.dot(&(&bd.hvx_t * ta)))
        + 0.5 * a.h.dot(&(&bd.s_t * &b.h))
}

/// Symmetric bilinear version of the transformed form without the `G` term.
pub fn omega_p2_bilinear(gm: &GohMatrices, a: &GohDirection, b: &GohDirection) -> Result<QuadraticEvaluation> {
    check_goh(gm, a)?;
    check_goh(gm, b)?;
    let w = gm.lin.grid.weights();
    let h = &gm.h;
    let (mut hxx, mut hux, mut mm, mut huu, mut e, mut r) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..gm.lin.grid.len() {
        let (xa, ua, ya) = (&a.xi[k], &a.u[k], &a.y[k]);
        let (xb, ub, yb) = (&b.xi[k], &b.u[k], &b.y[k]);
        hxx += w[k] * 0.5 * xa.dot(&(&h.hxx[k] * xb));
        hux += w[k] * 0.5 * (ua.dot(&(&h.hux[k] * xb)) + ub.dot(&(&h.hux[k] * xa)));
        mm += w[k] * 0.5 * (ya.dot(&(&gm.m[k] * xb)) + yb.dot(&(&gm.m[k] * xa)));
        huu += w[k] * 0.5 * ua.dot(&(&h.huu[k] * ub));
        e += w[k] * 0.5 * (ya.dot(&(&gm.e[k] * ub)) + yb.dot(&(&gm.e[k] * ua)));
        r += w[k] * 0.5 * ya.dot(&(&gm.r[k] * yb));
    }
    Ok(QuadraticEvaluation::from_terms(vec![
        ("endpoint", boundary_bilinear(gm, a, b)),
        ("Hxx", hxx),
        ("Hux", hux),
        ("M", mm),
        ("Huu", huu),
        ("E", e),
        ("R", r),
    ]))
}

fn refuse_unless(ok: bool, what: &str, flags: &ClassFlags) -> Result<()> {
    if ok {
        return Ok(());
    }
    let mg = &flags.margins;
    Err(Error::Refused(format!(
        "multiplier is not {what} (min eig H_uu = {:.3e}, max |H_vu| = {:.3e}, max |G| = {:.3e})",
        mg.min_eig_huu, mg.max_abs_hvu, mg.max_abs_g
    )))
}

/// Transformed second variation, including the `v^T G y` term.
pub fn omega_p(gm: &GohMatrices, flags: &ClassFlags, d: &GohDirection, v: &Series) -> Result<QuadraticEvaluation> {
    refuse_unless(flags.in_co_lambda_sharp, "in co Lambda^# (H_uu >= 0, H_vu = 0)", flags)?;
    check_series(v, gm.lin.grid.len(), gm.m(), "v")?;
    let mut q = omega_p2_bilinear(gm, d, d)?;
    let w = gm.lin.grid.weights();
    let gterm: f64 = (0..w.len()).map(|k| w[k] * v[k].dot(&(&gm.g[k] * &d.y[k]))).sum();
    q.breakdown.insert("G".into(), gterm);
    q.value += gterm;
    Ok(q)
}

/// Transformed second variation on the extended cone; needs `G = 0`.
pub fn omega_p2(gm: &GohMatrices, flags: &ClassFlags, d: &GohDirection) -> Result<QuadraticEvaluation> {
    refuse_unless(flags.in_g_co_lambda_sharp, "in G co Lambda^# (H_uu >= 0, H_vu = 0, G = 0)", flags)?;
    omega_p2_bilinear(gm, d, d)
}

/// A perturbation of the nominal controls and initial state.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub x0: DVector<f64>,
    pub u: Series,
    pub v: Series,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionProbe {
    pub sigmas: Vec<f64>,
    /// `L(w + s dw) - L(w) - s^2 Omega` for each retained `s`.
    pub remainders: Vec<f64>,
    /// `Omega` on the linearized direction of `dw`.
    pub omega: f64,
    /// Least-squares slope of `log |r|` against `log s`; `None` when fewer
    /// than two remainders are nonzero.
    pub slope: Option<f64>,
    pub warnings: Vec<String>,
}

/// Measures the order of the Lagrangian expansion remainder along `dw`.
pub fn expansion_probe(
    p: &ProblemDef,
    traj: &Trajectory,
    lam: &Multiplier,
    gm: &GohMatrices,
    dw: &Perturbation,
    sigmas: &[f64],
) -> Result<ExpansionProbe> {
    let len = traj.grid.len();
    check_series(&dw.u, len, p.l(), "du")?;
    check_series(&dw.v, len, p.m(), "dv")?;
    if dw.x0.len() != p.n() {
        return Err(Error::Dimension("dx0 has wrong length".into()));
    }
    let dir = integrate_linearized(&gm.lin, &dw.x0, &dw.u, &dw.v)?;
    let om = omega(gm, &dir)?.value;
    let l0 = lagrangian_value(p, traj, lam)?;
    let mut out = ExpansionProbe {
        sigmas: vec![],
        remainders: vec![],
        omega: om,
        slope: None,
        warnings: vec![],
    };
    for &s in sigmas {
        let shift = |a: &Series, b: &Series| -> Series { a.iter().zip(b).map(|(x, y)| x + y * s).collect() };
        let x0 = &traj.x[0] + &dw.x0 * s;
        match integrate_state(p, &x0, &shift(&traj.u, &dw.u), &shift(&traj.v, &dw.v), traj.grid) {
            Ok(ws) => {
                let r = lagrangian_value(p, &ws, lam)? - l0 - s * s * om;
                out.sigmas.push(s);
                out.remainders.push(r);
            }
            Err(Error::Diverged { node }) => out
                .warnings
                .push(format!("sigma = {s:e} diverged at node {node}; dropped from the fit")),
            Err(e) => return Err(e),
        }
    }
    let pts: Vec<(f64, f64)> = out
        .sigmas
        .iter()
        .zip(&out.remainders)
        .filter(|(_, r)| **r != 0.0)
        .map(|(s, r)| (s.abs().ln(), r.abs().ln()))
        .collect();
    if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            out.slope = Some(sxy / sxx);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goh::goh_matrices;
    use crate::linearized::goh_transform_direction;
    use crate::multiplier::{classify_multiplier, multiplier_from_weights};
    use crate::registry;
    use crate::trajectory::Grid;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    struct Pe {
        p: ProblemDef,
        tr: Trajectory,
        lam: Multiplier,
        gm: GohMatrices,
        flags: ClassFlags,
    }

    fn pe(n: usize, t: f64) -> Pe {
        let (p, tr) = registry::registry("pe", Some(t), n).unwrap();
        let lam = multiplier_from_weights(&p, &tr, v(&[1.0]), v(&[0.0, 0.0, -1.0])).unwrap();
        let gm = goh_matrices(&p, &tr, &lam).unwrap();
        let flags = classify_multiplier(&p, &tr, &lam, 1e-8).unwrap();
        Pe { p, tr, lam, gm, flags }
    }

    fn constant(g: &Grid, c: f64) -> Series {
        vec![v(&[c]); g.len()]
    }

    #[test]
    fn pe_omega_on_unit_controls() {
        let s = pe(1000, 1.0);
        let g = s.tr.grid;
        let du = integrate_linearized(&s.gm.lin, &v(&[0.0; 3]), &constant(&g, 1.0), &constant(&g, 0.0)).unwrap();
        let q = omega(&s.gm, &du).unwrap();
        assert!((q.value - 4.0 / 3.0).abs() < 1e-6, "{}", q.value);
        let dv = integrate_linearized(&s.gm.lin, &v(&[0.0; 3]), &constant(&g, 0.0), &constant(&g, 1.0)).unwrap();
        let q = omega(&s.gm, &dv).unwrap();
        assert!((q.value + 7.0 / 60.0).abs() < 1e-6, "{}", q.value);
        assert!((q.breakdown["endpoint"] + 1.0).abs() < 1e-12);
        assert!((q.breakdown["Hvx"] - 0.5).abs() < 1e-6);
        let sum: f64 = q.breakdown.values().sum();
        assert!((sum - q.value).abs() <= 1e-12 * q.value.abs());
    }

    #[test]
    fn pe_transformed_forms_match() {
        let s = pe(1000, 1.0);
        let g = s.tr.grid;
        let vb = constant(&g, 1.0);
        let dv = integrate_linearized(&s.gm.lin, &v(&[0.0; 3]), &constant(&g, 0.0), &vb).unwrap();
        let gd = goh_transform_direction(&s.gm.lin, &dv).unwrap();
        let qp = omega_p(&s.gm, &s.flags, &gd, &vb).unwrap();
        assert!((qp.breakdown["endpoint"] + 0.5).abs() < 1e-12);
        assert!((qp.breakdown["R"] - 1.0 / 3.0).abs() < 1e-6);
        assert!((qp.value + 7.0 / 60.0).abs() < 1e-6);
        let q2 = omega_p2(&s.gm, &s.flags, &gd).unwrap();
        assert_eq!(q2.value, qp.value - qp.breakdown["G"]);
    }

    #[test]
    fn zero_direction_is_zero() {
        let s = pe(20, 1.0);
        let g = s.tr.grid;
        let z = integrate_linearized(&s.gm.lin, &v(&[0.0; 3]), &constant(&g, 0.0), &constant(&g, 0.0)).unwrap();
        assert_eq!(omega(&s.gm, &z).unwrap().value, 0.0);
        let gz = goh_transform_direction(&s.gm.lin, &z).unwrap();
        assert_eq!(omega_p2(&s.gm, &s.flags, &gz).unwrap().value, 0.0);
    }

    #[test]
    fn refusal_when_not_classified() {
        let (p, tr) = registry::registry("lc-violator", None, 20).unwrap();
        let lam = multiplier_from_weights(&p, &tr, v(&[1.0]), v(&[0.0, -1.0])).unwrap();
        let gm = goh_matrices(&p, &tr, &lam).unwrap();
        let flags = classify_multiplier(&p, &tr, &lam, 1e-8).unwrap();
        let g = tr.grid;
        let d = integrate_linearized(&gm.lin, &v(&[0.0; 2]), &constant(&g, 1.0), &constant(&g, 1.0)).unwrap();
        let gd = goh_transform_direction(&gm.lin, &d).unwrap();
        assert!(matches!(omega_p(&gm, &flags, &gd, &d.v), Err(Error::Refused(_))));
        assert!(matches!(omega_p2(&gm, &flags, &gd), Err(Error::Refused(_))));
        assert!(omega(&gm, &d).is_ok());
    }

    #[test]
    fn lagrangian_zero_at_nominal() {
        let s = pe(100, 1.0);
        assert_eq!(lagrangian_value(&s.p, &s.tr, &s.lam).unwrap(), 0.0);
    }

    #[test]
    fn pe_expansion_matches_closed_form() {
        for t in [0.1, 0.5, 1.0] {
            let s = pe(1000, t);
            let g = s.tr.grid;
            let dw = Perturbation {
                x0: v(&[0.0; 3]),
                u: constant(&g, 0.0),
                v: constant(&g, 1.0),
            };
            let probe = expansion_probe(&s.p, &s.tr, &s.lam, &s.gm, &dw, &[1e-1, 1e-2, 1e-3]).unwrap();
            let exact = t * t / 2.0 - 2.0 * t.powi(3) / 3.0 + t.powi(5) / 20.0;
            assert!((probe.omega - exact).abs() < 1e-6, "T={t}: {} vs {exact}", probe.omega);
            for (s, r) in probe.sigmas.iter().zip(&probe.remainders) {
                assert!(r.abs() < 1e-6 * s * s, "T={t} sigma={s} r={r}");
            }
        }
    }

    #[test]
    fn cubic_expansion_slope() {
        let (p, tr) = registry::registry("cubic", None, 400).unwrap();
        let lam = multiplier_from_weights(&p, &tr, v(&[1.0]), v(&[0.0, -1.0])).unwrap();
        let gm = goh_matrices(&p, &tr, &lam).unwrap();
        let g = tr.grid;
        let dw = Perturbation {
            x0: v(&[0.0, 0.0]),
            u: constant(&g, 0.5),
            v: constant(&g, 1.0),
        };
        let probe = expansion_probe(&p, &tr, &lam, &gm, &dw, &[1e-1, 3e-2, 1e-2, 3e-3, 1e-3]).unwrap();
        let slope = probe.slope.unwrap();
        assert!((2.9..=3.5).contains(&slope), "{slope}");
        let zero = Perturbation {
            x0: v(&[0.0, 0.0]),
            u: constant(&g, 0.0),
            v: constant(&g, 0.0),
        };
        let pz = expansion_probe(&p, &tr, &lam, &gm, &zero, &[1e-1, 1e-2]).unwrap();
        assert!(pz.remainders.iter().all(|r| *r == 0.0));
        assert!(pz.slope.is_none());
    }
}
