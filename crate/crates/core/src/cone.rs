//! The discretized critical cone in Goh variables and the matrix of the
//! transformed second variation on it.
//!
//! A direction is packed as `z = (xi0, u_0..u_N, y_0..y_N, h)`. The state
//! `xi` is a linear function of `z` through the RK4 propagation of
//! `xi' = Fx xi + Fu u + B y`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::goh::GohMatrices;
use crate::linearized::{propagate_goh, GohDirection, LinearizedSystem};
use crate::numerics::LinearStep;
use crate::problem::ProblemDef;
use crate::trajectory::{Grid, Trajectory};

#[derive(Clone, Debug)]
pub struct DiscretizedCone {
    pub grid: Grid,
    pub n: usize,
    pub l: usize,
    pub m: usize,
    /// Row block `k` (n rows) maps `z` to `xi` at node `k`.
    pub propagation: DMatrix<f64>,
    /// Maps `z` to `(xi(0), xi(T) + Fv(T) h)`.
    pub ends: DMatrix<f64>,
    /// Linearized equality maps, one row each.
    pub a_eq: DMatrix<f64>,
    /// Linearized active inequality maps; the cost is always the first row.
    pub a_in: DMatrix<f64>,
    /// Endpoint-map index of each `a_in` row.
    pub in_rows: Vec<usize>,
}

impl DiscretizedCone {
    pub fn dim(&self) -> usize {
        self.n + self.grid.len() * (self.l + self.m) + self.m
    }

    pub fn u_offset(&self, k: usize) -> usize {
        self.n + k * self.l
    }

    pub fn y_offset(&self, k: usize) -> usize {
        self.n + self.grid.len() * self.l + k * self.m
    }

    pub fn h_offset(&self) -> usize {
        self.n + self.grid.len() * (self.l + self.m)
    }

    /// Diagonal of the gamma-order Gram matrix.
    pub fn gamma_weights(&self) -> DVector<f64> {
        let w = self.grid.weights();
        let mut g = DVector::from_element(self.dim(), 1.0);
        for (k, wk) in w.iter().enumerate() {
            g.rows_mut(self.u_offset(k), self.l).fill(*wk);
            g.rows_mut(self.y_offset(k), self.m).fill(*wk);
        }
        g
    }

    pub fn gamma(&self, z: &DVector<f64>) -> f64 {
        z.component_mul(z).dot(&self.gamma_weights())
    }

    pub fn pack(&self, d: &GohDirection) -> Result<DVector<f64>> {
        let len = self.grid.len();
        if d.xi0.len() != self.n || d.h.len() != self.m || d.u.len() != len || d.y.len() != len {
            return Err(Error::Dimension("direction does not match the cone layout".into()));
        }
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.n).copy_from(&d.xi0);
        for k in 0..len {
            if d.u[k].len() != self.l || d.y[k].len() != self.m {
                return Err(Error::Dimension("direction does not match the cone layout".into()));
            }
            z.rows_mut(self.u_offset(k), self.l).copy_from(&d.u[k]);
            z.rows_mut(self.y_offset(k), self.m).copy_from(&d.y[k]);
        }
        z.rows_mut(self.h_offset(), self.m).copy_from(&d.h);
        Ok(z)
    }

    /// Unpacks `z`; the state comes from the propagation operator.
    pub fn unpack(&self, z: &DVector<f64>) -> GohDirection {
        let len = self.grid.len();
        let xi_all = &self.propagation * z;
        GohDirection {
            xi0: z.rows(0, self.n).into_owned(),
            u: (0..len).map(|k| z.rows(self.u_offset(k), self.l).into_owned()).collect(),
            y: (0..len).map(|k| z.rows(self.y_offset(k), self.m).into_owned()).collect(),
            h: z.rows(self.h_offset(), self.m).into_owned(),
            xi: (0..len).map(|k| xi_all.rows(k * self.n, self.n).into_owned()).collect(),
            residual: 0.0,
        }
    }

    /// As [`unpack`](Self::unpack) but re-propagates the state directly.
    pub fn to_direction(&self, lin: &LinearizedSystem, z: &DVector<f64>) -> Result<GohDirection> {
        let d = self.unpack(z);
        let xi = propagate_goh(lin, &d.xi0, &d.u, &d.y)?;
        Ok(GohDirection { xi, ..d })
    }

    fn xi_block(&self, k: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.propagation.rows(k * self.n, self.n)
    }
}

/// Builds the cone at `traj`. Inequalities with `|phi_i| <= active_tol` are
/// active; the cost row is always included.
pub fn build_cone(p: &ProblemDef, traj: &Trajectory, lin: &LinearizedSystem, active_tol: f64) -> Result<DiscretizedCone> {
    traj.check_dims(p)?;
    let (n, l, m) = (lin.n(), lin.l(), lin.m());
    let grid = lin.grid;
    let len = grid.len();
    let dim = n + len * (l + m) + m;
    let u_off = |k: usize| n + k * l;
    let y_off = |k: usize| n + len * l + k * m;

    let mut prop = DMatrix::zeros(n * len, dim);
    for i in 0..n {
        prop[(i, i)] = 1.0;
    }
    // forcing coefficient of z at node k: Fu_k on u_k, B_k on y_k
    let forcing = |k: usize, coef: &DMatrix<f64>, target: &mut DMatrix<f64>, row: usize| {
        let fu = coef * &lin.fu[k];
        let fb = coef * &lin.b[k];
        let mut block = target.view_mut((row, u_off(k)), (n, l));
        block += &fu;
        let mut block = target.view_mut((row, y_off(k)), (n, m));
        block += &fb;
    };
    for k in 0..grid.intervals() {
        let st = LinearStep::new(&lin.fx[k], &lin.fx[k + 1], grid.step());
        // only columns up to node k are nonzero so far
        let width = y_off(k) + m;
        let prev_u = prop.view((k * n, 0), (n, u_off(k + 1))).into_owned();
        let prev_y = prop.view((k * n, y_off(0)), (n, width - y_off(0))).into_owned();
        let next_u = &st.p * prev_u;
        let next_y = &st.p * prev_y;
        prop.view_mut(((k + 1) * n, 0), (n, u_off(k + 1))).copy_from(&next_u);
        prop.view_mut(((k + 1) * n, y_off(0)), (n, width - y_off(0))).copy_from(&next_y);
        forcing(k, &st.c0, &mut prop, (k + 1) * n);
        forcing(k + 1, &st.c1, &mut prop, (k + 1) * n);
    }

    let mut ends = DMatrix::zeros(2 * n, dim);
    ends.view_mut((0, 0), (n, dim)).copy_from(&prop.rows(0, n));
    ends.view_mut((n, 0), (n, dim)).copy_from(&prop.rows((len - 1) * n, n));
    {
        let mut hb = ends.view_mut((n, dim - m), (n, m));
        hb += &lin.fv[len - 1];
    }

    let (x0, xt) = (&traj.x[0], traj.x.last().unwrap());
    let row_of = |i: usize| -> Result<DVector<f64>> {
        let g = p.eval_endpoint(i, x0, xt, 1)?.gradient;
        Ok(ends.tr_mul(&g))
    };
    let mut in_rows = vec![0];
    for i in p.phi_range().skip(1) {
        if p.eval_endpoint(i, x0, xt, 0)?.value.abs() <= active_tol {
            in_rows.push(i);
        }
    }
    let a_in = stack_rows(in_rows.iter().map(|&i| row_of(i)).collect::<Result<Vec<_>>>()?, dim);
    let a_eq = stack_rows(p.eta_range().map(row_of).collect::<Result<Vec<_>>>()?, dim);
    Ok(DiscretizedCone {
        grid,
        n,
        l,
        m,
        propagation: prop,
        ends,
        a_eq,
        a_in,
        in_rows,
    })
}

fn stack_rows(rows: Vec<DVector<f64>>, dim: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(rows.len(), dim);
    for (i, r) in rows.iter().enumerate() {
        a.set_row(i, &r.transpose());
    }
    a
}

/// `a^T b` through faer's parallel matmul.
pub(crate) fn gemm_tn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    let fa = faer::MatRef::from_column_major_slice(a.as_slice(), a.nrows(), a.ncols());
    let fb = faer::MatRef::from_column_major_slice(b.as_slice(), b.nrows(), b.ncols());
    let (r, c) = (out.nrows(), out.ncols());
    let fo = faer::MatMut::from_column_major_slice_mut(out.as_mut_slice(), r, c);
    faer::linalg::matmul::matmul(fo, faer::Accum::Replace, fa.transpose(), fb, 1.0, faer::Par::rayon(0));
    out
}

/// Symmetric `Q` with `omega_P2(z) = z^T Q z` for the multiplier behind `gm`.
pub fn form_matrix(cone: &DiscretizedCone, gm: &GohMatrices) -> Result<DMatrix<f64>> {
    let (n, l, m) = (cone.n, cone.l, cone.m);
    let len = cone.grid.len();
    if gm.lin.grid.len() != len || gm.n() != n || gm.l() != l || gm.m() != m {
        return Err(Error::Dimension("Goh matrices do not match the cone".into()));
    }
    let dim = cone.dim();
    let w = cone.grid.weights();
    let h = &gm.h;

    let mut weighted = DMatrix::zeros(n * len, dim);
    for k in 0..len {
        let blk = (&h.hxx[k] * (0.5 * w[k])) * cone.xi_block(k);
        weighted.rows_mut(k * n, n).copy_from(&blk);
    }
    let mut a = gemm_tn(&cone.propagation, &weighted);
    drop(weighted);

    for k in 0..len {
        let xi = cone.xi_block(k);
        let (uo, yo) = (cone.u_offset(k), cone.y_offset(k));
        let hux = (&h.hux[k] * w[k]) * xi;
        let mut rows = a.rows_mut(uo, l);
        rows += &hux;
        let mx = (&gm.m[k] * w[k]) * xi;
        let mut rows = a.rows_mut(yo, m);
        rows += &mx;
        let mut blk = a.view_mut((uo, uo), (l, l));
        blk += &h.huu[k] * (0.5 * w[k]);
        let mut blk = a.view_mut((yo, uo), (m, l));
        blk += &gm.e[k] * w[k];
        let mut blk = a.view_mut((yo, yo), (m, m));
        blk += &gm.r[k] * (0.5 * w[k]);
    }

    let bd = &gm.boundary;
    let lh = (&bd.ell_hess * 0.5) * &cone.ends;
    a += cone.ends.tr_mul(&lh);
    let ho = cone.h_offset();
    let cross = &bd.hvx_t * cone.xi_block(len - 1);
    let mut rows = a.rows_mut(ho, m);
    rows += &cross;
    let mut blk = a.view_mut((ho, ho), (m, m));
    blk += &bd.s_t * 0.5;

    let at = a.transpose();
    Ok((a + at) * 0.5)
}

/// Minimum of `z^T Q z / z^T Gamma z` over the null space of `constraints`.
#[derive(Clone, Debug)]
pub struct ReducedMinimum {
    pub value: f64,
    /// Minimizer, normalized to `z^T Gamma z = 1`. Absent when the
    /// reduced space is trivial.
    pub z: Option<DVector<f64>>,
    /// Largest absolute generalized eigenvalue.
    pub scale: f64,
    pub reduced_dim: usize,
    pub constraint_rank: usize,
}

/// Solves the constrained generalized eigenproblem for `(Q, diag(gamma))`.
/// `rank_tol` is relative to the largest singular value of the whitened
/// constraints.
pub fn reduced_minimum(
    q: &DMatrix<f64>,
    gamma: &DVector<f64>,
    constraints: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<ReducedMinimum> {
    let d = q.nrows();
    if gamma.iter().any(|g| !g.is_finite() || *g <= 0.0) {
        return Err(Error::Numerical("gamma Gram matrix is singular".into()));
    }
    let isq: DVector<f64> = gamma.map(|g| 1.0 / g.sqrt());
    let mut qw = q.clone();
    for j in 0..d {
        for i in 0..d {
            qw[(i, j)] *= isq[i] * isq[j];
        }
    }
    let mut basis_rows = Vec::new();
    if constraints.nrows() > 0 {
        let mut cw = constraints.clone();
        for j in 0..d {
            let s = isq[j];
            cw.column_mut(j).scale_mut(s);
        }
        let svd = cw.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Numerical("constraint SVD failed".into()))?;
        let smax = svd.singular_values.max();
        for (i, s) in svd.singular_values.iter().enumerate() {
            if smax > 0.0 && *s > rank_tol * smax {
                basis_rows.push(vt.row(i).transpose());
            }
        }
    }
    let r = basis_rows.len();
    let reflectors = householder(basis_rows, d);
    for v in &reflectors {
        reflect_two_sided(&mut qw, v);
    }
    let k = d - r;
    if k == 0 {
        return Ok(ReducedMinimum {
            value: 0.0,
            z: None,
            scale: 0.0,
            reduced_dim: 0,
            constraint_rank: r,
        });
    }
    let red = qw.view((r, r), (k, k));
    let fm = faer::Mat::<f64>::from_fn(k, k, |i, j| red[(i, j)]);
    let (s, u) = sequential_eigen(&fm)?;
    let value = s[0];
    let scale = s[0].abs().max(s[k - 1].abs());
    let mut y = DVector::zeros(d);
    for i in 0..k {
        y[r + i] = u[(i, 0)];
    }
    for v in reflectors.iter().rev() {
        let c = 2.0 * v.dot(&y);
        y.axpy(-c, v, 1.0);
    }
    let mut z = y.component_mul(&isq);
    // fix the sign so the output is reproducible
    if z[z.iamax()] < 0.0 {
        z.neg_mut();
    }
    Ok(ReducedMinimum {
        value,
        z: Some(z),
        scale,
        reduced_dim: k,
        constraint_rank: r,
    })
}

/// Symmetric eigendecomposition, ascending, on one thread so results do
/// not depend on the pool size.
fn sequential_eigen(a: &faer::Mat<f64>) -> Result<(Vec<f64>, faer::Mat<f64>)> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::evd::{self_adjoint_evd, self_adjoint_evd_scratch, ComputeEigenvectors};
    let k = a.nrows();
    let mut s = faer::diag::Diag::<f64>::zeros(k);
    let mut u = faer::Mat::<f64>::zeros(k, k);
    let par = faer::Par::Seq;
    let mut buf = MemBuffer::new(self_adjoint_evd_scratch::<f64>(
        k,
        ComputeEigenvectors::Yes,
        par,
        Default::default(),
    ));
    self_adjoint_evd(a.as_ref(), s.as_mut(), Some(u.as_mut()), par, MemStack::new(&mut buf), Default::default())
        .map_err(|e| Error::Numerical(format!("eigensolver failed: {e:?}")))?;
    let vals = (0..k).map(|i| s[i]).collect();
    Ok((vals, u))
}

/// Householder vectors `v_j` (unit, zero before `j`) with
/// `H_r .. H_1 V^T = [R; 0]` for the rows in `rows`.
fn householder(rows: Vec<DVector<f64>>, d: usize) -> Vec<DVector<f64>> {
    let r = rows.len();
    let mut a = DMatrix::zeros(d, r);
    for (j, row) in rows.iter().enumerate() {
        a.set_column(j, row);
    }
    let mut out = Vec::with_capacity(r);
    for j in 0..r {
        let x = a.view((j, j), (d - j, 1)).column(0).into_owned();
        let norm = x.norm();
        let mut v = DVector::zeros(d);
        v.rows_mut(j, d - j).copy_from(&x);
        v[j] += if x[0] >= 0.0 { norm } else { -norm };
        let vn = v.norm();
        if vn == 0.0 {
            // dependent row; the zero vector stands for the identity
            out.push(DVector::zeros(d));
            continue;
        }
        v /= vn;
        for c in j..r {
            let coef = 2.0 * v.dot(&a.column(c));
            let mut col = a.column_mut(c);
            col.axpy(-coef, &v, 1.0);
        }
        out.push(v);
    }
    out
}

/// `A <- H A H` with `H = I - 2 v v^T`.
fn reflect_two_sided(a: &mut DMatrix<f64>, v: &DVector<f64>) {
    if v.iter().all(|x| *x == 0.0) {
        return;
    }
    let w = &*a * v;
    let c = v.dot(&w);
    let t = w - v * c;
    // A - 2 v w^T - 2 w v^T + 4 c v v^T = A - 2 v t^T - 2 t v^T
    a.ger(-2.0, v, &t, 1.0);
    a.ger(-2.0, &t, v, 1.0);
}

pub fn quadratic_value(q: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    z.dot(&(q * z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::omega_p2_bilinear;
    use crate::goh::goh_matrices_with;
    use crate::linearized::linearize;
    use crate::multiplier::find_multipliers;
    use crate::registry;

    fn setup(name: &str, t: f64, n: usize) -> (ProblemDef, Trajectory, GohMatrices, DiscretizedCone) {
        let (p, tr) = registry::registry(name, Some(t), n).unwrap();
        let lin = linearize(&p, &tr).unwrap();
        let set = find_multipliers(&p, &tr, 1e-10).unwrap();
        let cone = build_cone(&p, &tr, &lin, 1e-8).unwrap();
        let gm = goh_matrices_with(&p, &tr, lin, &set.vertices[0]).unwrap();
        (p, tr, gm, cone)
    }

    fn random_z(dim: usize, seed: u64) -> DVector<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pe_constraint_rows() {
        let (_, _, _, cone) = setup("pe", 1.0, 20);
        assert_eq!(cone.a_eq.nrows(), 3);
        assert_eq!(cone.a_in.nrows(), 1);
        for i in 0..3 {
            for j in 0..cone.dim() {
                assert_eq!(cone.a_eq[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
        // xi3 is constant, so the cost row reads xi3(0), which a_eq pins
        for j in 0..cone.dim() {
            assert_eq!(cone.a_in[(0, j)], if j == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn propagation_matches_direct_solve_and_is_linear() {
        let (_, _, gm, cone) = setup("cubic", 1.0, 30);
        let (z1, z2) = (random_z(cone.dim(), 2), random_z(cone.dim(), 3));
        let d = cone.to_direction(&gm.lin, &z1).unwrap();
        let u = cone.unpack(&z1);
        for k in 0..cone.grid.len() {
            assert!((&d.xi[k] - &u.xi[k]).amax() < 1e-13);
        }
        let sum = &cone.propagation * (&z1 + &z2);
        let sep = &cone.propagation * &z1 + &cone.propagation * &z2;
        assert!((sum - sep).amax() < 1e-13);
    }

    #[test]
    fn pack_roundtrip() {
        let (_, _, _, cone) = setup("goh-violator", 1.0, 10);
        let z = random_z(cone.dim(), 4);
        assert_eq!(cone.pack(&cone.unpack(&z)).unwrap(), z);
    }

    #[test]
    fn form_matrix_matches_direct_evaluation() {
        for name in registry::NAMES {
            let (_, _, gm, cone) = setup(name, 1.0, 25);
            let q = form_matrix(&cone, &gm).unwrap();
            let (z1, z2) = (random_z(cone.dim(), 5), random_z(cone.dim(), 6));
            let (d1, d2) = (cone.unpack(&z1), cone.unpack(&z2));
            let direct = omega_p2_bilinear(&gm, &d1, &d2).unwrap().value;
            let via = z1.dot(&(&q * &z2));
            assert!((direct - via).abs() < 1e-12 * (1.0 + direct.abs()), "{name}: {direct} vs {via}");
        }
    }

    #[test]
    fn reduced_minimum_small_example() {
        // min of x^2 + 2 y^2 + 3 w^2 over x + y = 0 with unit weights is 1.5
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let g = DVector::from_element(3, 1.0);
        let r = reduced_minimum(&q, &g, &c, 1e-12).unwrap();
        assert!((r.value - 1.5).abs() < 1e-14);
        assert_eq!((r.reduced_dim, r.constraint_rank), (2, 1));
        let z = r.z.unwrap();
        assert!((c * &z)[0].abs() < 1e-14);
        assert!((quadratic_value(&q, &z) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn fully_pinned_space_is_trivial() {
        let q = DMatrix::identity(2, 2);
        let r = reduced_minimum(&q, &DVector::from_element(2, 1.0), &DMatrix::identity(2, 2), 1e-12).unwrap();
        assert_eq!(r.reduced_dim, 0);
        assert!(r.z.is_none());
    }

    #[test]
    fn zero_rows_do_not_count() {
        let q = DMatrix::identity(3, 3);
        let c = DMatrix::zeros(2, 3);
        let r = reduced_minimum(&q, &DVector::from_element(3, 1.0), &c, 1e-12).unwrap();
        assert_eq!(r.constraint_rank, 0);
        assert_eq!(r.reduced_dim, 3);
    }
}
