//! Costates, first-order residuals, the multiplier set and its classification.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goh::{h_blocks_with, HBlocks};
use crate::linearized::{linearize, LinearizedSystem};
use crate::numerics::rk4_linear_step;
use crate::problem::ProblemDef;
use crate::trajectory::{read_series_csv, write_series_csv, Grid, Series, Trajectory};

/// `lambda = (alpha, beta, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multiplier {
    /// Weights of the cost and the inequalities.
    pub alpha: DVector<f64>,
    /// Weights of the equalities.
    pub beta: DVector<f64>,
    /// Costate at the grid nodes.
    pub p: Series,
    /// Set when `|alpha|_1 + |beta|_1 = 1`.
    pub normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct MultiplierSidecar {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    normalized: bool,
}

impl Multiplier {
    pub fn l1_norm(&self) -> f64 {
        self.alpha.lp_norm(1) + self.beta.lp_norm(1)
    }

    pub fn scale(&self, c: f64) -> Self {
        Multiplier {
            alpha: &self.alpha * c,
            beta: &self.beta * c,
            p: self.p.iter().map(|p| p * c).collect(),
            normalized: self.normalized && c.abs() == 1.0,
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        Multiplier {
            alpha: &self.alpha * a + &other.alpha * b,
            beta: &self.beta * a + &other.beta * b,
            p: self.p.iter().zip(&other.p).map(|(x, y)| x * a + y * b).collect(),
            normalized: false,
        }
    }

    /// Writes `t,p1..pn` to `csv_out` and `{alpha, beta, normalized}` to `json_out`.
    pub fn write<W1: Write, W2: Write>(&self, grid: &Grid, csv_out: W1, json_out: W2) -> Result<()> {
        write_series_csv(csv_out, grid, [("p", &self.p)])?;
        let side = MultiplierSidecar {
            alpha: self.alpha.iter().copied().collect(),
            beta: self.beta.iter().copied().collect(),
            normalized: self.normalized,
        };
        serde_json::to_writer_pretty(json_out, &side)?;
        Ok(())
    }

    pub fn read<R1: Read, R2: Read>(csv_in: R1, json_in: R2, n: usize) -> Result<(Grid, Self)> {
        let (grid, mut cols) = read_series_csv(csv_in, &[n])?;
        let side: MultiplierSidecar = serde_json::from_reader(json_in)?;
        Ok((
            grid,
            Multiplier {
                alpha: DVector::from_vec(side.alpha),
                beta: DVector::from_vec(side.beta),
                p: cols.pop().unwrap(),
                normalized: side.normalized,
            },
        ))
    }
}

/// Gradient of `l = sum alpha_i phi_i + sum beta_j eta_j` over `(x0, xT)`.
pub(crate) fn endpoint_gradient(
    p: &ProblemDef,
    traj: &Trajectory,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_weights(p, alpha, beta)?;
    let (x0, xt) = (&traj.x[0], traj.x.last().unwrap());
    let mut g = DVector::zeros(2 * p.n());
    for (w, idx) in weights(p, alpha, beta) {
        if w != 0.0 {
            g.axpy(w, &p.eval_endpoint(idx, x0, xt, 1)?.gradient, 1.0);
        }
    }
    Ok(g)
}

/// Hessian of `l` over `(x0, xT)`.
pub(crate) fn endpoint_hessian(
    p: &ProblemDef,
    traj: &Trajectory,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_weights(p, alpha, beta)?;
    let (x0, xt) = (&traj.x[0], traj.x.last().unwrap());
    let mut h = DMatrix::zeros(2 * p.n(), 2 * p.n());
    for (w, idx) in weights(p, alpha, beta) {
        if w != 0.0 {
            h += p.eval_endpoint(idx, x0, xt, 2)?.hessian * w;
        }
    }
    Ok(h)
}

fn weights<'a>(
    p: &ProblemDef,
    alpha: &'a DVector<f64>,
    beta: &'a DVector<f64>,
) -> impl Iterator<Item = (f64, usize)> + 'a {
    let eta0 = p.eta_range().start;
    alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, i))
        .chain(beta.iter().enumerate().map(move |(j, &b)| (b, eta0 + j)))
}

fn check_weights(p: &ProblemDef, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<()> {
    if alpha.len() != 1 + p.d_phi() || beta.len() != p.d_eta() {
        return Err(Error::Dimension(format!(
            "multiplier weights have sizes ({}, {}), expected ({}, {})",
            alpha.len(),
            beta.len(),
            1 + p.d_phi(),
            p.d_eta()
        )));
    }
    Ok(())
}

/// Backward RK4 of `p' = -Fx^T p` from `p(T) = pt`.
pub(crate) fn costate_from_terminal(lin: &LinearizedSystem, pt: &DVector<f64>) -> Result<Series> {
    let len = lin.grid.len();
    let h = lin.grid.step();
    let zero = DVector::zeros(pt.len());
    let mut out = vec![DVector::zeros(pt.len()); len];
    out[len - 1] = pt.clone();
    let mut a_next = -lin.fx[len - 1].transpose();
    for k in (0..len - 1).rev() {
        let a_k = -lin.fx[k].transpose();
        let prev = rk4_linear_step(&a_next, &a_k, &zero, &zero, &out[k + 1], -h);
        if prev.iter().any(|c| !c.is_finite()) {
            return Err(Error::Diverged { node: k });
        }
        out[k] = prev;
        a_next = a_k;
    }
    Ok(out)
}

/// Costate for endpoint weights `(alpha, beta)`: `p(T) = D_xT l`, `-p' = H_x`.
pub fn integrate_costate(
    p: &ProblemDef,
    traj: &Trajectory,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<Series> {
    let lin = linearize(p, traj)?;
    costate_with(p, traj, &lin, alpha, beta)
}

pub(crate) fn costate_with(
    p: &ProblemDef,
    traj: &Trajectory,
    lin: &LinearizedSystem,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<Series> {
    let g = endpoint_gradient(p, traj, alpha, beta)?;
    costate_from_terminal(lin, &g.rows(p.n(), p.n()).into_owned())
}

/// Builds the multiplier for `(alpha, beta)` with its integrated costate.
pub fn multiplier_from_weights(
    p: &ProblemDef,
    traj: &Trajectory,
    alpha: DVector<f64>,
    beta: DVector<f64>,
) -> Result<Multiplier> {
    let costate = integrate_costate(p, traj, &alpha, &beta)?;
    let normalized = ((alpha.lp_norm(1) + beta.lp_norm(1)) - 1.0).abs() <= 1e-12;
    Ok(Multiplier {
        alpha,
        beta,
        p: costate,
        normalized,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Residuals {
    /// `|p(0) + D_x0 l|`.
    pub r_transv0: f64,
    /// `max_k |H_u(t_k)|`.
    pub r_hu: f64,
    /// `max_k |H_v(t_k)|`.
    pub r_hv: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.r_transv0.max(self.r_hu).max(self.r_hv)
    }
}

pub fn multiplier_residuals(p: &ProblemDef, traj: &Trajectory, lam: &Multiplier) -> Result<Residuals> {
    let lin = linearize(p, traj)?;
    residuals_with(p, traj, &lin, lam)
}

pub(crate) fn residuals_with(
    p: &ProblemDef,
    traj: &Trajectory,
    lin: &LinearizedSystem,
    lam: &Multiplier,
) -> Result<Residuals> {
    if lam.p.len() != lin.grid.len() || lam.p.iter().any(|c| c.len() != p.n()) {
        return Err(Error::Dimension("costate samples do not match the grid".into()));
    }
    let g = endpoint_gradient(p, traj, &lam.alpha, &lam.beta)?;
    let r_transv0 = (&lam.p[0] + g.rows(0, p.n())).norm();
    let mut r_hu: f64 = 0.0;
    let mut r_hv: f64 = 0.0;
    for k in 0..lin.grid.len() {
        r_hu = r_hu.max((lam.p[k].transpose() * &lin.fu[k]).norm());
        r_hv = r_hv.max((lam.p[k].transpose() * &lin.fv[k]).norm());
    }
    Ok(Residuals {
        r_transv0,
        r_hu,
        r_hv,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierStatus {
    Found,
    /// The first-order system has no normalized solution at this tolerance.
    Empty,
    /// Endpoint constraints are violated, so no search was attempted.
    Infeasible,
}

/// The normalized multiplier set: a null-space basis of the first-order
/// system and the extreme points of its normalized section.
#[derive(Clone, Debug)]
pub struct MultiplierSet {
    pub status: MultiplierStatus,
    /// Unnormalized basis of the solution space, one per null direction.
    pub basis: Vec<Multiplier>,
    /// Normalized extreme points (or samples, see `enumerated`).
    pub vertices: Vec<Multiplier>,
    /// Singular values of the first-order map, descending.
    pub singular_values: Vec<f64>,
    /// Whether `vertices` is an exact enumeration rather than a sample.
    pub enumerated: bool,
    /// Active inequality indices in `1..=d_phi`.
    pub active: Vec<usize>,
    /// Largest residual over the certified vertices.
    pub max_residual: f64,
    /// Vertices dropped because they failed the residual certificate.
    pub rejected: usize,
    /// Rank of the equality-constraint Jacobian and whether it is full.
    pub eta_rank: usize,
    pub eta_qualified: bool,
    pub note: String,
}

impl MultiplierSet {
    pub fn is_unique(&self) -> bool {
        self.vertices.len() == 1
    }

    fn empty(status: MultiplierStatus, note: String) -> Self {
        MultiplierSet {
            status,
            basis: vec![],
            vertices: vec![],
            singular_values: vec![],
            enumerated: true,
            active: vec![],
            max_residual: 0.0,
            rejected: 0,
            eta_rank: 0,
            eta_qualified: false,
            note,
        }
    }
}

/// Largest `d_phi + d_eta + 1` handled by exact vertex enumeration.
pub const ENUMERATION_LIMIT: usize = 12;

pub fn find_multipliers(p: &ProblemDef, traj: &Trajectory, tol: f64) -> Result<MultiplierSet> {
    find_multipliers_with(p, traj, tol, tol)
}

/// As [`find_multipliers`] with a separate tolerance for endpoint feasibility
/// and the active set.
pub fn find_multipliers_with(p: &ProblemDef, traj: &Trajectory, tol: f64, feas_tol: f64) -> Result<MultiplierSet> {
    if !(tol > 0.0 && feas_tol > 0.0) {
        return Err(Error::Domain("tolerances must be positive".into()));
    }
    traj.check_dims(p)?;
    let (x0, xt) = (&traj.x[0], traj.x.last().unwrap());
    let mut eta_bad = Vec::new();
    for idx in p.eta_range() {
        let v = p.eval_endpoint(idx, x0, xt, 0)?.value;
        if v.abs() > feas_tol {
            eta_bad.push(format!("eta{} = {v:.3e}", idx - p.eta_range().start + 1));
        }
    }
    let mut active = Vec::new();
    for i in 1..=p.d_phi() {
        let v = p.eval_endpoint(i, x0, xt, 0)?.value;
        if v > feas_tol {
            eta_bad.push(format!("phi{i} = {v:.3e}"));
        } else if v.abs() <= feas_tol {
            active.push(i);
        }
    }
    if !eta_bad.is_empty() {
        return Ok(MultiplierSet::empty(
            MultiplierStatus::Infeasible,
            format!("endpoint constraints violated: {}", eta_bad.join(", ")),
        ));
    }

    let lin = linearize(p, traj)?;
    let s = 1 + p.d_phi() + p.d_eta();
    let n = p.n();
    let unit = |q: usize| {
        let mut a = DVector::zeros(1 + p.d_phi());
        let mut b = DVector::zeros(p.d_eta());
        if q < a.len() {
            a[q] = 1.0;
        } else {
            b[q - a.len()] = 1.0;
        }
        (a, b)
    };
    // costates of the unit weights; everything else follows by linearity
    let units: Vec<Multiplier> = (0..s)
        .into_par_iter()
        .map(|q| {
            let (a, b) = unit(q);
            let pc = costate_with(p, traj, &lin, &a, &b)?;
            Ok(Multiplier {
                alpha: a,
                beta: b,
                p: pc,
                normalized: true,
            })
        })
        .collect::<Result<_>>()?;

    let sw: Vec<f64> = lin.grid.weights().iter().map(|w| w.sqrt()).collect();
    let (l, m) = (p.l(), p.m());
    let inactive: Vec<usize> = (1..=p.d_phi()).filter(|i| !active.contains(i)).collect();
    let rows = n + (l + m) * lin.grid.len() + inactive.len();
    let mut jmat = DMatrix::zeros(rows.max(s), s);
    for (q, lam) in units.iter().enumerate() {
        let g = endpoint_gradient(p, traj, &lam.alpha, &lam.beta)?;
        let r0 = &lam.p[0] + g.rows(0, n);
        jmat.view_mut((0, q), (n, 1)).copy_from(&r0);
        let mut off = n;
        for k in 0..lin.grid.len() {
            let hu = lin.fu[k].transpose() * &lam.p[k] * sw[k];
            let hv = lin.fv[k].transpose() * &lam.p[k] * sw[k];
            jmat.view_mut((off, q), (l, 1)).copy_from(&hu);
            jmat.view_mut((off + l, q), (m, 1)).copy_from(&hv);
            off += l + m;
        }
        for (r, &i) in inactive.iter().enumerate() {
            jmat[(off + r, q)] = lam.alpha.get(i).copied().unwrap_or(0.0);
        }
    }
    let svd = jmat.svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested V");
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sigma[0];
    let thr = tol * smax;
    let null: Vec<DVector<f64>> = order
        .iter()
        .filter(|&&i| svd.singular_values[i] <= thr)
        .map(|&i| vt.row(i).transpose())
        .collect();
    let range: Vec<DVector<f64>> = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > thr)
        .map(|&i| vt.row(i).transpose())
        .collect();

    let (eta_rank, eta_qualified) = eta_rank(p, traj)?;
    let mut set = MultiplierSet::empty(MultiplierStatus::Empty, String::new());
    set.singular_values = sigma.clone();
    set.active = active;
    set.eta_rank = eta_rank;
    set.eta_qualified = eta_qualified;
    if null.is_empty() {
        set.note = format!(
            "first-order map has trivial null space (smallest singular value {:.3e}, threshold {thr:.3e})",
            sigma[s - 1]
        );
        return Ok(set);
    }

    let combo = |c: &DVector<f64>| -> Multiplier {
        let mut acc = units[0].scale(c[0]);
        for q in 1..s {
            if c[q] != 0.0 {
                acc = acc.combine(1.0, &units[q], c[q]);
            }
        }
        acc
    };
    set.basis = null.iter().map(|c| combo(c)).collect();

    let (points, enumerated) = if s <= ENUMERATION_LIMIT {
        (enumerate_vertices(p, &range, s), true)
    } else {
        (sample_section(p, &null, s), false)
    };
    set.enumerated = enumerated;

    let cert = 10.0 * tol * smax.max(1.0);
    for lam_w in points {
        let mut lam = combo(&lam_w);
        lam.normalized = true;
        let r = residuals_with(p, traj, &lin, &lam)?;
        if r.max() <= cert {
            set.max_residual = set.max_residual.max(r.max());
            set.vertices.push(lam);
        } else {
            set.rejected += 1;
        }
    }
    if set.vertices.is_empty() {
        set.note = "null space has no normalized element with alpha >= 0".into();
    } else {
        set.status = MultiplierStatus::Found;
    }
    Ok(set)
}

fn eta_rank(p: &ProblemDef, traj: &Trajectory) -> Result<(usize, bool)> {
    let d = p.d_eta();
    if d == 0 {
        return Ok((0, true));
    }
    let (x0, xt) = (&traj.x[0], traj.x.last().unwrap());
    let mut jac = DMatrix::zeros(d, 2 * p.n());
    for (r, idx) in p.eta_range().enumerate() {
        jac.set_row(r, &p.eval_endpoint(idx, x0, xt, 1)?.gradient.transpose());
    }
    let sv = jac.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&x| x > 1e-10 * smax.max(f64::MIN_POSITIVE)).count();
    Ok((rank, rank == d))
}

/// Splits `beta = beta+ - beta-`: returns the `s x s'` map from the split
/// variables `w >= 0` back to `(alpha, beta)`.
fn split_map(p: &ProblemDef, s: usize) -> DMatrix<f64> {
    let na = 1 + p.d_phi();
    let nb = p.d_eta();
    let mut lmat = DMatrix::zeros(s, na + 2 * nb);
    for i in 0..na {
        lmat[(i, i)] = 1.0;
    }
    for j in 0..nb {
        lmat[(na + j, na + j)] = 1.0;
        lmat[(na + j, na + nb + j)] = -1.0;
    }
    lmat
}

/// Extreme points of `{lambda in null space, alpha >= 0, |lambda|_1 = 1}` as
/// complementary basic solutions of the split system.
fn enumerate_vertices(p: &ProblemDef, range: &[DVector<f64>], s: usize) -> Vec<DVector<f64>> {
    let lmat = split_map(p, s);
    let sp = lmat.ncols();
    let r = range.len() + 1;
    let mut a = DMatrix::zeros(r, sp);
    for (i, v) in range.iter().enumerate() {
        a.set_row(i, &(v.transpose() * &lmat));
    }
    a.row_mut(r - 1).fill(1.0);
    let mut rhs = DVector::zeros(r);
    rhs[r - 1] = 1.0;
    let na = 1 + p.d_phi();
    let nb = p.d_eta();

    let combos = combinations(sp, r);
    let mut found: Vec<DVector<f64>> = combos
        .par_iter()
        .filter_map(|cols| {
            let ab = a.select_columns(cols.iter());
            let sv = ab.singular_values();
            if sv.min() <= 1e-10 * sv.max() {
                return None;
            }
            let wb = ab.lu().solve(&rhs)?;
            if wb.iter().any(|&x| x < -1e-12) {
                return None;
            }
            let mut w = DVector::zeros(sp);
            for (c, &col) in cols.iter().enumerate() {
                w[col] = wb[c].max(0.0);
            }
            if (0..nb).any(|j| w[na + j].min(w[na + nb + j]) > 1e-12) {
                return None;
            }
            let lam = &lmat * w;
            let norm = lam.lp_norm(1);
            (norm > 0.5).then(|| lam / norm)
        })
        .collect();
    dedupe(&mut found);
    found
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn dedupe(points: &mut Vec<DVector<f64>>) {
    points.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    points.dedup_by(|a, b| (&*a - &*b).amax() <= 1e-9);
}

/// Random normalized elements of the section, for sets too large to enumerate.
fn sample_section(p: &ProblemDef, null: &[DVector<f64>], s: usize) -> Vec<DVector<f64>> {
    let na = 1 + p.d_phi();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    for _ in 0..20_000 {
        let mut lam = DVector::zeros(s);
        for v in null {
            let c: f64 = StandardNormal.sample(&mut rng);
            lam.axpy(c, v, 1.0);
        }
        for sign in [1.0, -1.0] {
            let cand = &lam * sign;
            if cand.rows(0, na).iter().all(|&a| a >= 0.0) {
                out.push(&cand / cand.lp_norm(1));
            }
        }
        if out.len() >= 64 {
            break;
        }
    }
    dedupe(&mut out);
    out
}

/// Margins behind the classification flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMargins {
    /// Min over nodes of the smallest eigenvalue of `H_uu`.
    pub min_eig_huu: f64,
    /// Max over nodes of `max |H_vu|`.
    pub max_abs_hvu: f64,
    /// Max over nodes of `max |G|`.
    pub max_abs_g: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassFlags {
    pub in_co_lambda_sharp: bool,
    pub in_g_co_lambda_sharp: bool,
    pub margins: ClassMargins,
}

pub fn classify_multiplier(p: &ProblemDef, traj: &Trajectory, lam: &Multiplier, tol: f64) -> Result<ClassFlags> {
    let lin = linearize(p, traj)?;
    let hb = h_blocks_with(p, traj, &lin, lam)?;
    Ok(classify_blocks(&hb, &lin, tol))
}

pub(crate) fn classify_blocks(hb: &HBlocks, lin: &LinearizedSystem, tol: f64) -> ClassFlags {
    let mut min_eig = f64::INFINITY;
    let mut max_hvu: f64 = 0.0;
    let mut max_g: f64 = 0.0;
    for k in 0..lin.grid.len() {
        if hb.huu[k].nrows() > 0 {
            min_eig = min_eig.min(hb.huu[k].symmetric_eigenvalues().min());
        }
        if !hb.hvu[k].is_empty() {
            max_hvu = max_hvu.max(hb.hvu[k].amax());
        }
        let x = &hb.hvx[k] * &lin.fv[k];
        if !x.is_empty() {
            max_g = max_g.max(((&x - x.transpose()) * 0.5).amax());
        }
    }
    if !min_eig.is_finite() {
        // l = 0: the condition is vacuous
        min_eig = 0.0;
    }
    let sharp = min_eig >= -tol && max_hvu <= tol;
    ClassFlags {
        in_co_lambda_sharp: sharp,
        in_g_co_lambda_sharp: sharp && max_g <= tol,
        margins: ClassMargins {
            min_eig_huu: min_eig,
            max_abs_hvu: max_hvu,
            max_abs_g: max_g,
        },
    }
}
