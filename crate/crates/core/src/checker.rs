//! Verdicts: pointwise conditions, the integral necessary condition on the
//! cone and uniform positivity relative to the gamma-order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cone::{build_cone, form_matrix, reduced_minimum, DiscretizedCone};
use crate::error::{Error, Result};
use crate::forms::omega_p2_bilinear;
use crate::goh::{goh_matrices_with, r_cross_check, GohMatrices, RCrossCheck};
use crate::linearized::{linearize, GohDirection, LinearizedSystem};
use crate::multiplier::{classify_blocks, find_multipliers_with, ClassFlags, Multiplier, MultiplierSet, MultiplierStatus};
use crate::problem::ProblemDef;
use crate::trajectory::{feasibility_report, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
    NotApplicable,
    Blocked,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Satisfied => "satisfied",
            Verdict::Violated => "violated",
            Verdict::Inconclusive => "inconclusive",
            Verdict::NotApplicable => "not_applicable",
            Verdict::Blocked => "blocked",
        }
    }
}

/// One checked condition.
#[derive(Clone, Debug, Serialize)]
pub struct Entry {
    pub name: String,
    /// The condition this entry tests.
    pub locus: String,
    pub verdict: Verdict,
    /// `None` only for blocked entries.
    pub margin: Option<f64>,
    /// How `margin` was computed.
    pub margin_source: String,
    pub witnesses: Value,
    pub notes: Vec<String>,
}

impl Entry {
    fn new(name: &str, locus: &str, verdict: Verdict, margin: f64, source: &str) -> Self {
        Entry {
            name: name.into(),
            locus: locus.into(),
            verdict,
            margin: Some(margin),
            margin_source: source.into(),
            witnesses: Value::Null,
            notes: vec![],
        }
    }

    fn blocked(name: &str, locus: &str, why: &str) -> Self {
        Entry {
            name: name.into(),
            locus: locus.into(),
            verdict: Verdict::Blocked,
            margin: None,
            margin_source: String::new(),
            witnesses: Value::Null,
            notes: vec![why.into()],
        }
    }

    fn with_witnesses(mut self, w: Value) -> Self {
        self.witnesses = w;
        self
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

/// A multiplier vertex with its classification and Goh matrices.
#[derive(Clone, Debug)]
pub struct VertexForm {
    pub multiplier: Multiplier,
    pub flags: ClassFlags,
    pub gm: GohMatrices,
}

pub fn vertex_forms(
    p: &ProblemDef,
    traj: &Trajectory,
    lin: &LinearizedSystem,
    set: &MultiplierSet,
    tol: f64,
) -> Result<Vec<VertexForm>> {
    set.vertices
        .par_iter()
        .map(|lam| {
            let gm = goh_matrices_with(p, traj, lin.clone(), lam)?;
            let flags = classify_blocks(&gm.h, lin, tol);
            Ok(VertexForm {
                multiplier: lam.clone(),
                flags,
                gm,
            })
        })
        .collect()
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        0.0
    } else {
        m.symmetric_eigenvalues().min()
    }
}

/// Per-vertex pointwise margins, minimized or maximized over the nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PointwiseMargins {
    /// Min eigenvalue of `[[H_uu, H_vu^T], [H_vu, 0]]`.
    pub legendre_clebsch: f64,
    /// Max `|G|`.
    pub max_abs_g: f64,
    /// Min eigenvalue of `[[H_uu, E^T], [E, R]]`.
    pub goh_block: f64,
    /// Largest absolute entry over the blocks above, for scaling tolerances.
    pub scale: f64,
}

pub fn pointwise_margins(gm: &GohMatrices) -> PointwiseMargins {
    let (l, m) = (gm.l(), gm.m());
    let mut lc = f64::INFINITY;
    let mut gb = f64::INFINITY;
    let mut g: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 0..gm.lin.grid.len() {
        let mut a = DMatrix::zeros(l + m, l + m);
        a.view_mut((0, 0), (l, l)).copy_from(&gm.h.huu[k]);
        a.view_mut((l, 0), (m, l)).copy_from(&gm.h.hvu[k]);
        a.view_mut((0, l), (l, m)).copy_from(&gm.h.hvu[k].transpose());
        let mut c = DMatrix::zeros(l + m, l + m);
        c.view_mut((0, 0), (l, l)).copy_from(&gm.h.huu[k]);
        c.view_mut((l, 0), (m, l)).copy_from(&gm.e[k]);
        c.view_mut((0, l), (l, m)).copy_from(&gm.e[k].transpose());
        c.view_mut((l, l), (m, m)).copy_from(&gm.r[k]);
        lc = lc.min(min_sym_eig(&a));
        gb = gb.min(min_sym_eig(&c));
        if !gm.g[k].is_empty() {
            g = g.max(gm.g[k].amax());
        }
        for x in [&a, &c] {
            if !x.is_empty() {
                scale = scale.max(x.amax());
            }
        }
    }
    PointwiseMargins {
        legendre_clebsch: if lc.is_finite() { lc } else { 0.0 },
        max_abs_g: g,
        goh_block: if gb.is_finite() { gb } else { 0.0 },
        scale,
    }
}

const LOCUS_LC: &str = "Legendre-Clebsch: [[H_uu, H_vu^T], [H_vu, 0]] >= 0";
const LOCUS_GOH_SYM: &str = "Goh: H_vx F_v symmetric (G = 0)";
const LOCUS_GOH_BLOCK: &str = "Goh: [[H_uu, E^T], [E, R]] >= 0";
const LOCUS_UNIFORM: &str = "strengthened Legendre: [[H_uu, E^T], [E, R]] >= rho I, rho > 0";
const LOCUS_NEC: &str = "max over G(co Lambda)^# of Omega_P2 >= 0 on P2";
const LOCUS_SUF: &str = "max over G(co Lambda)^# of Omega_P2 >= rho gamma_P on P2, rho > 0";

/// Threshold for "strictly positive" relative to a form or matrix scale.
pub const POSITIVITY_REL: f64 = 1e-6;

/// Pointwise entries. With several vertices each condition is credited to
/// the best vertex; a failure is only called a violation when the
/// multiplier is unique.
pub fn pointwise_report(forms: &[VertexForm], unique: bool, tol: f64) -> Vec<Entry> {
    let names = ["legendre_clebsch", "goh_symmetry", "goh_block", "uniform_positivity"];
    let loci = [LOCUS_LC, LOCUS_GOH_SYM, LOCUS_GOH_BLOCK, LOCUS_UNIFORM];
    if forms.is_empty() {
        return names
            .iter()
            .zip(loci)
            .map(|(n, l)| Entry::blocked(n, l, "no multiplier available"))
            .collect();
    }
    let margins: Vec<PointwiseMargins> = forms.iter().map(|f| pointwise_margins(&f.gm)).collect();
    let scale = margins.iter().map(|m| m.scale).fold(1.0, f64::max);
    let psd_tol = tol * scale;
    let best = |f: &dyn Fn(&PointwiseMargins) -> f64| -> (usize, f64) {
        margins
            .iter()
            .map(f)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc })
    };
    let fail = if unique { Verdict::Violated } else { Verdict::Inconclusive };
    let wit = |i: usize| json!({ "vertex": i, "per_vertex": margins });

    let (i, lc) = best(&|m| m.legendre_clebsch);
    let e_lc = Entry::new(
        names[0],
        loci[0],
        if lc >= -psd_tol { Verdict::Satisfied } else { fail },
        lc,
        "min over nodes of the smallest eigenvalue",
    )
    .with_witnesses(wit(i));

    let (i, neg_g) = best(&|m| -m.max_abs_g);
    let g = -neg_g;
    let e_g = Entry::new(
        names[1],
        loci[1],
        if g <= psd_tol { Verdict::Satisfied } else { fail },
        g,
        "max over nodes of |G|",
    )
    .with_witnesses(wit(i));

    let (i, gb) = best(&|m| m.goh_block);
    let e_gb = Entry::new(
        names[2],
        loci[2],
        if gb >= -psd_tol { Verdict::Satisfied } else { fail },
        gb,
        "min over nodes of the smallest eigenvalue",
    )
    .with_witnesses(wit(i));

    let rho_tol = POSITIVITY_REL * scale;
    let e_u = Entry::new(
        names[3],
        loci[3],
        if gb > rho_tol { Verdict::Satisfied } else { Verdict::Inconclusive },
        gb,
        "largest rho: min over nodes of the smallest eigenvalue",
    )
    .with_witnesses(wit(i))
    .with_note("not necessary for optimality; failure is reported as inconclusive");
    vec![e_lc, e_g, e_gb, e_u]
}

/// Shifted Legendre polynomials up to `degree` on `[0, T]`.
fn legendre(degree: usize, s: f64) -> Vec<f64> {
    let mut out = vec![1.0, s];
    for j in 1..degree {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0) * s * out[j] - jf * out[j - 1]) / (jf + 1.0);
        out.push(next);
    }
    out.truncate(degree + 1);
    out
}

/// Degree of the smooth basis used for sampling.
pub const SMOOTH_DEGREE: usize = 8;

/// Columns are packed directions: unit `xi0`, Legendre `u` and `y`
/// components, unit `h`.
fn smooth_basis(cone: &DiscretizedCone) -> DMatrix<f64> {
    let (n, l, m) = (cone.n, cone.l, cone.m);
    let nd = SMOOTH_DEGREE + 1;
    let cols = n + nd * (l + m) + m;
    let mut b = DMatrix::zeros(cone.dim(), cols);
    for i in 0..n {
        b[(i, i)] = 1.0;
    }
    let t_end = cone.grid.horizon();
    for k in 0..cone.grid.len() {
        let s = 2.0 * cone.grid.t(k) / t_end - 1.0;
        let ps = legendre(SMOOTH_DEGREE, s);
        for (j, pj) in ps.iter().enumerate() {
            for c in 0..l {
                b[(cone.u_offset(k) + c, n + c * nd + j)] = *pj;
            }
            for c in 0..m {
                b[(cone.y_offset(k) + c, n + (l + c) * nd + j)] = *pj;
            }
        }
    }
    for i in 0..m {
        b[(cone.h_offset() + i, n + nd * (l + m) + i)] = 1.0;
    }
    b
}

fn null_basis(a: &DMatrix<f64>, cols: usize, rel: f64) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    // pad to a square system so the SVD returns the full right basis
    let mut sq = DMatrix::zeros(cols.max(a.nrows()), cols);
    sq.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..cols)
        .filter(|&i| smax == 0.0 || svd.singular_values[i] <= rel * smax)
        .collect();
    let mut out = DMatrix::zeros(cols, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &vt.row(i).transpose());
    }
    out
}

/// Outcome of the sign-constrained sampling of the cone.
#[derive(Clone, Debug)]
pub struct SampleProbe {
    /// Min over accepted samples (and Ritz candidates) of
    /// `max_lambda Omega_P2 / gamma_P`; `None` if nothing was accepted.
    pub min_ratio: Option<f64>,
    /// Minimizing direction scaled to `gamma_P = 1`.
    pub witness: Option<GohDirection>,
    /// `max_lambda Omega_P2` at the witness.
    pub witness_value: Option<f64>,
    pub accepted: usize,
    pub rejected: usize,
    /// Whether the minimum came from a Ritz candidate.
    pub from_ritz: bool,
    /// Dimension of the sampled space after the equality constraints.
    pub dim: usize,
    pub seed: u64,
}

/// Samples smooth directions in `P2`: Gaussian combinations of the smooth
/// basis projected onto the equality null space; a sample violating the
/// active inequalities is negated if that fixes it and rejected otherwise.
/// Sample `s` uses stream `s` of a ChaCha8 generator seeded with `seed`.
pub fn sample_cone(cone: &DiscretizedCone, forms: &[VertexForm], samples: usize, seed: u64) -> Result<SampleProbe> {
    let lin = &forms
        .first()
        .ok_or_else(|| Error::Refused("no multiplier to evaluate".into()))?
        .gm
        .lin;
    let bz = smooth_basis(cone);
    let nb = bz.ncols();
    let dirs: Vec<GohDirection> = (0..nb)
        .into_par_iter()
        .map(|j| cone.unpack(&bz.column(j).into_owned()))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..nb).flat_map(|i| (i..nb).map(move |j| (i, j))).collect();
    let mut qs = Vec::with_capacity(forms.len());
    for f in forms {
        let vals: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| omega_p2_bilinear(&f.gm, &dirs[i], &dirs[j]).map(|q| q.value))
            .collect::<Result<_>>()?;
        let mut q = DMatrix::zeros(nb, nb);
        for (&(i, j), v) in pairs.iter().zip(vals) {
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
        qs.push(q);
    }
    let gw = cone.gamma_weights();
    let mut gb = bz.clone();
    for (r, w) in gw.iter().enumerate() {
        gb.row_mut(r).scale_mut(*w);
    }
    let gram = bz.tr_mul(&gb);

    let nbasis = null_basis(&(&cone.a_eq * &bz), nb, 1e-10);
    let k = nbasis.ncols();
    let ain = &cone.a_in * &bz;
    let row_norms: Vec<f64> = (0..ain.nrows()).map(|i| ain.row(i).norm()).collect();
    let mut probe = SampleProbe {
        min_ratio: None,
        witness: None,
        witness_value: None,
        accepted: 0,
        rejected: 0,
        from_ritz: false,
        dim: k,
        seed,
    };
    if k == 0 {
        return Ok(probe);
    }

    // None = rejected
    let orient = |c: DVector<f64>| -> Option<DVector<f64>> {
        let a = &ain * &c;
        let cn = c.norm();
        let s: Vec<f64> = a.iter().zip(&row_norms).map(|(ai, rn)| ai / (rn * cn + f64::MIN_POSITIVE)).collect();
        let eps = 1e-10;
        if s.iter().all(|x| *x <= eps) {
            Some(c)
        } else if s.iter().all(|x| *x >= -eps) {
            Some(-c)
        } else {
            None
        }
    };
    let ratio = |c: &DVector<f64>| -> f64 {
        let g = c.dot(&(&gram * c));
        qs.iter().map(|q| c.dot(&(q * c))).fold(f64::NEG_INFINITY, f64::max) / g
    };

    let results: Vec<Option<(f64, DVector<f64>)>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let coef = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            orient(&nbasis * coef).map(|c| (ratio(&c), c))
        })
        .collect();

    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for r in results {
        match r {
            Some((v, c)) => {
                probe.accepted += 1;
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, c, false));
                }
            }
            None => probe.rejected += 1,
        }
    }

    // Ritz vectors of each vertex's form restricted to the sampled space
    let gr = nbasis.tr_mul(&(&gram * &nbasis));
    if let Some(chol) = gr.clone().cholesky() {
        let linv = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("gamma Gram matrix is singular".into()))?;
        for q in &qs {
            let qr = nbasis.tr_mul(&(q * &nbasis));
            let white = &linv * qr * linv.transpose();
            let white = (&white + white.transpose()) * 0.5;
            let eig = white.symmetric_eigen();
            let i = eig.eigenvalues.imin();
            let c = &nbasis * (linv.transpose() * eig.eigenvectors.column(i));
            if let Some(c) = orient(c) {
                let v = ratio(&c);
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, c, true));
                }
            }
        }
    } else {
        return Err(Error::Numerical("gamma Gram matrix is singular".into()));
    }

    if let Some((v, c, ritz)) = best {
        let g = c.dot(&(&gram * &c));
        let c = c / g.sqrt();
        let z = &bz * &c;
        let d = cone.to_direction(lin, &z)?;
        let mut wv = f64::NEG_INFINITY;
        for f in forms {
            wv = wv.max(omega_p2_bilinear(&f.gm, &d, &d)?.value);
        }
        probe.min_ratio = Some(v);
        probe.witness = Some(d);
        probe.witness_value = Some(wv);
        probe.from_ritz = ritz;
    }
    Ok(probe)
}

fn direction_summary(d: &GohDirection, grid: &crate::trajectory::Grid) -> Value {
    let amax = |s: &[DVector<f64>]| s.iter().map(|v| if !v.is_empty() { v.amax() } else { 0.0 }).fold(0.0, f64::max);
    json!({
        "xi0": d.xi0.as_slice(),
        "h": d.h.as_slice(),
        "y_T": d.y.last().map(|v| v.as_slice().to_vec()),
        "max_abs_u": amax(&d.u),
        "max_abs_y": amax(&d.y),
        "gamma": d.gamma(grid),
    })
}

/// Result of the integral necessary condition check.
#[derive(Clone, Debug)]
pub struct NecessityResult {
    pub verdict: Verdict,
    pub probe: SampleProbe,
    pub entry: Entry,
}

/// Samples `P2` for a negative value of the max-form. `forms` must be the
/// vertices in `G(co Lambda)^#`; `complete` says whether they are all of
/// the multiplier vertices, which is needed to call a negative sample a
/// violation.
pub fn necessity_scan(
    cone: &DiscretizedCone,
    forms: &[VertexForm],
    complete: bool,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<NecessityResult> {
    if forms.is_empty() {
        let probe = SampleProbe {
            min_ratio: None,
            witness: None,
            witness_value: None,
            accepted: 0,
            rejected: 0,
            from_ritz: false,
            dim: 0,
            seed,
        };
        let entry = Entry::new("integral_necessary", LOCUS_NEC, Verdict::NotApplicable, 0.0, "none")
            .with_note("G(co Lambda)^# is empty: the condition says nothing at this candidate");
        return Ok(NecessityResult {
            verdict: Verdict::NotApplicable,
            probe,
            entry,
        });
    }
    let probe = sample_cone(cone, forms, samples, seed)?;
    let grid = &cone.grid;
    let (verdict, margin, mut notes) = match probe.min_ratio {
        None if probe.dim == 0 => (Verdict::Satisfied, 0.0, vec!["cone is {0}: vacuous".to_string()]),
        None => (Verdict::Inconclusive, 0.0, vec!["every sample was rejected".to_string()]),
        Some(r) if r < -tol && complete => (Verdict::Violated, r, vec![]),
        Some(r) if r < -tol => (
            Verdict::Inconclusive,
            r,
            vec!["negative sample, but some multiplier vertices were excluded from the max".to_string()],
        ),
        Some(r) => (Verdict::Satisfied, r, vec!["no violation found by sampling".to_string()]),
    };
    if !complete {
        notes.push("max taken over the vertices in G(co Lambda)^# only".into());
    }
    let witness = probe.witness.as_ref().map(|d| {
        let mut w = direction_summary(d, grid);
        w["omega_p2"] = json!(probe.witness_value);
        w
    });
    let mut entry = Entry::new(
        "integral_necessary",
        LOCUS_NEC,
        verdict,
        margin,
        "min over samples of max_lambda Omega_P2 / gamma_P",
    )
    .with_witnesses(json!({
        "direction": witness,
        "samples": samples,
        "accepted": probe.accepted,
        "rejected": probe.rejected,
        "from_ritz": probe.from_ritz,
        "sampled_dim": probe.dim,
        "seed": seed,
        "basis_degree": SMOOTH_DEGREE,
    }));
    entry.notes = notes;
    Ok(NecessityResult {
        verdict,
        probe,
        entry,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SufficiencyMode {
    /// Active inequalities are treated as equalities.
    Subspace,
    /// Subspace check plus sign-constrained sampling of the full cone.
    Cone,
}

#[derive(Clone, Debug)]
pub struct SufficiencyResult {
    /// Max over vertices of the min generalized eigenvalue on the subspace.
    pub rho_hat: f64,
    /// Minimizer for the best vertex, scaled to `gamma_P = 1`.
    pub worst_direction: Option<GohDirection>,
    pub verdict: Verdict,
    /// Index into the `forms` slice of the vertex attaining `rho_hat`.
    pub vertex: usize,
    /// Spectral scale of the reduced form, for tolerances.
    pub scale: f64,
    pub reduced_dim: usize,
    pub sampled_min: Option<f64>,
    pub entry: Entry,
}

pub fn sufficiency_check(
    cone: &DiscretizedCone,
    forms: &[VertexForm],
    complete: bool,
    mode: SufficiencyMode,
    samples: usize,
    seed: u64,
) -> Result<SufficiencyResult> {
    if forms.is_empty() {
        let entry = Entry::new("integral_sufficient", LOCUS_SUF, Verdict::NotApplicable, 0.0, "none")
            .with_note("G(co Lambda)^# is empty: the condition cannot hold");
        return Ok(SufficiencyResult {
            rho_hat: f64::NEG_INFINITY,
            worst_direction: None,
            verdict: Verdict::NotApplicable,
            vertex: 0,
            scale: 0.0,
            reduced_dim: 0,
            sampled_min: None,
            entry,
        });
    }
    let mut cons = DMatrix::zeros(cone.a_eq.nrows() + cone.a_in.nrows(), cone.dim());
    cons.rows_mut(0, cone.a_eq.nrows()).copy_from(&cone.a_eq);
    cons.rows_mut(cone.a_eq.nrows(), cone.a_in.nrows()).copy_from(&cone.a_in);
    let gamma = cone.gamma_weights();
    let mut mins = Vec::with_capacity(forms.len());
    for f in forms {
        let q = form_matrix(cone, &f.gm)?;
        mins.push(reduced_minimum(&q, &gamma, &cons, 1e-10)?);
    }
    let (vertex, best) = mins
        .iter()
        .enumerate()
        .fold((0, &mins[0]), |acc, (i, r)| if r.value > acc.1.value { (i, r) } else { acc });
    let scale = mins.iter().map(|r| r.scale).fold(0.0, f64::max);
    let thr = POSITIVITY_REL * scale;
    let rho = best.value;
    let reduced_dim = best.reduced_dim;
    let worst_direction = match &best.z {
        Some(z) => Some(cone.to_direction(&forms[vertex].gm.lin, z)?),
        None => None,
    };

    let mut notes = vec![];
    let eq_rank = if cone.a_eq.nrows() > 0 {
        cone.a_eq.clone().svd(false, false).rank(1e-10 * cone.a_eq.amax().max(f64::MIN_POSITIVE))
    } else {
        0
    };
    let restricted = best.constraint_rank > eq_rank;
    let mut verdict = if reduced_dim == 0 {
        notes.push("cone is {0}: vacuous".to_string());
        Verdict::Satisfied
    } else if rho > thr {
        if restricted {
            notes.push("active inequalities were treated as equalities; positivity is shown on a subspace of P2".into());
        }
        Verdict::Satisfied
    } else if rho < -thr && forms.len() == 1 && complete {
        Verdict::Violated
    } else {
        Verdict::Inconclusive
    };

    let mut sampled_min = None;
    if mode == SufficiencyMode::Cone {
        let probe = sample_cone(cone, forms, samples, seed)?;
        sampled_min = probe.min_ratio;
        if let Some(s) = probe.min_ratio {
            if s < -thr {
                verdict = if complete { Verdict::Violated } else { Verdict::Inconclusive };
                notes.push("sampling found a negative direction in P2".into());
            } else if s <= thr && verdict == Verdict::Satisfied {
                verdict = Verdict::Inconclusive;
            }
        }
    }
    if forms.len() > 1 {
        notes.push(format!("rho_hat is the best of {} vertices, a lower bound for the max-form", forms.len()));
    }
    let wd = worst_direction.as_ref().map(|d| {
        let mut w = direction_summary(d, &cone.grid);
        w["omega_p2"] = json!(omega_p2_bilinear(&forms[vertex].gm, d, d).map(|q| q.value).ok());
        w
    });
    let mut entry = Entry::new(
        "integral_sufficient",
        LOCUS_SUF,
        verdict,
        rho,
        "min generalized eigenvalue of (Omega_P2, gamma_P) on the constraint null space",
    )
    .with_witnesses(json!({
        "rho_hat": rho,
        "threshold": thr,
        "scale": scale,
        "vertex": vertex,
        "reduced_dim": reduced_dim,
        "constraint_rank": best.constraint_rank,
        "mode": mode,
        "sampled_min": sampled_min,
        "worst_direction": wd,
        "per_vertex_min": mins.iter().map(|r| r.value).collect::<Vec<_>>(),
    }));
    entry.notes = notes;
    Ok(SufficiencyResult {
        rho_hat: rho,
        worst_direction,
        verdict,
        vertex,
        scale,
        reduced_dim,
        sampled_min,
        entry,
    })
}

/// Pipeline stages selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Multipliers,
    CheckPointwise,
    CheckNecessary,
    CheckSufficient,
    Full,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportOptions {
    pub problem_name: String,
    pub stage: Stage,
    pub tol: f64,
    pub feas_tol: f64,
    pub active_tol: f64,
    pub samples: usize,
    pub seed: u64,
    pub sufficiency_mode: SufficiencyMode,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            problem_name: String::new(),
            stage: Stage::Full,
            tol: 1e-8,
            feas_tol: 1e-6,
            active_tol: 1e-6,
            samples: 1000,
            seed: 0,
            sufficiency_mode: SufficiencyMode::Subspace,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProblemSummary {
    pub name: String,
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub d_phi: usize,
    pub d_eta: usize,
    pub horizon: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Environment {
    pub intervals: usize,
    pub tol: f64,
    pub feas_tol: f64,
    pub active_tol: f64,
    pub stage: Stage,
    pub samples: usize,
    pub seed: u64,
    pub sufficiency_mode: SufficiencyMode,
    pub multipliers: Value,
}

/// Directions and multipliers behind the report, for CSV export.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub multipliers: Vec<Multiplier>,
    pub necessity_witness: Option<GohDirection>,
    pub sufficiency_worst: Option<GohDirection>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionReport {
    pub schema: u32,
    pub problem: ProblemSummary,
    pub environment: Environment,
    pub entries: Vec<Entry>,
    pub overall: Verdict,
    #[serde(skip)]
    pub artifacts: Artifacts,
}

impl ConditionReport {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// 0 all satisfied or inconclusive, 1 a violation, 2 blocked.
    pub fn exit_code(&self) -> i32 {
        match self.overall {
            Verdict::Violated => 1,
            Verdict::Blocked => 2,
            _ => 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_text(&self) -> String {
        let p = &self.problem;
        let e = &self.environment;
        let mut s = format!(
            "problem {} (n={}, l={}, m={}, T={})\ngrid N={}, tol={:e}, stage {:?}\n",
            p.name, p.n, p.l, p.m, p.horizon, e.intervals, e.tol, e.stage
        );
        for en in &self.entries {
            let margin = en.margin.map_or("-".to_string(), |m| format!("{m:.6e}"));
            s += &format!("[{:>14}] {:<22} margin {}  ({})\n", en.verdict.as_str(), en.name, margin, en.locus);
            for n in &en.notes {
                s += &format!("{:>17} {n}\n", "-");
            }
        }
        s += &format!("overall: {}\n", self.overall.as_str());
        s
    }
}

fn overall(entries: &[Entry]) -> Verdict {
    let has = |v: Verdict| entries.iter().any(|e| e.verdict == v);
    if entries.first().is_some_and(|e| e.name == "feasibility" && e.verdict != Verdict::Satisfied) {
        Verdict::Blocked
    } else if has(Verdict::Violated) {
        Verdict::Violated
    } else if has(Verdict::Blocked) {
        Verdict::Blocked
    } else if has(Verdict::Inconclusive) {
        Verdict::Inconclusive
    } else {
        Verdict::Satisfied
    }
}

fn multiplier_summary(set: &MultiplierSet, forms: &[VertexForm]) -> Value {
    let vertices: Vec<Value> = forms
        .iter()
        .map(|f| {
            json!({
                "alpha": f.multiplier.alpha.as_slice(),
                "beta": f.multiplier.beta.as_slice(),
                "p0": f.multiplier.p[0].as_slice(),
                "pT": f.multiplier.p.last().unwrap().as_slice(),
                "in_co_lambda_sharp": f.flags.in_co_lambda_sharp,
                "in_g_co_lambda_sharp": f.flags.in_g_co_lambda_sharp,
                "margins": f.flags.margins,
            })
        })
        .collect();
    json!({
        "status": set.status,
        "count": set.vertices.len(),
        "unique": set.is_unique(),
        "enumerated": set.enumerated,
        "null_dim": set.basis.len(),
        "smallest_singular_values": set.singular_values.iter().rev().take(4).collect::<Vec<_>>(),
        "max_residual": set.max_residual,
        "rejected": set.rejected,
        "eta_qualified": set.eta_qualified,
        "normalization": "|alpha|_1 + |beta|_1 = 1",
        "note": set.note,
        "vertices": vertices,
    })
}

/// Runs the stages selected by `opts.stage` in order. Later stages are
/// blocked when an earlier one fails.
pub fn full_report(p: &ProblemDef, traj: &Trajectory, opts: &ReportOptions) -> Result<ConditionReport> {
    traj.check_dims(p)?;
    let stage = opts.stage;
    let want_pointwise = matches!(stage, Stage::CheckPointwise | Stage::Full);
    let want_nec = matches!(stage, Stage::CheckNecessary | Stage::Full);
    let want_suf = matches!(stage, Stage::CheckSufficient | Stage::Full);
    let want_mult = stage != Stage::Simulate;

    let mut entries = vec![];
    let mut artifacts = Artifacts::default();
    let mut mult_desc = Value::Null;

    let feas = feasibility_report(p, traj, opts.feas_tol)?;
    let feas_margin = feas
        .max_defect
        .max(feas.eta.iter().fold(0.0, |a, x| a.max(x.abs())))
        .max(feas.phi.iter().skip(1).fold(0.0, |a, x| a.max(*x)));
    entries.push(
        Entry::new(
            "feasibility",
            "dynamics and endpoint constraints hold",
            if feas.feasible { Verdict::Satisfied } else { Verdict::Violated },
            feas_margin,
            "max of dynamics defect, |eta| and positive parts of phi",
        )
        .with_witnesses(serde_json::to_value(&feas)?),
    );

    let names: Vec<(&str, &str, bool)> = vec![
        ("first_order", "multiplier with costate, transversality and stationarity", want_mult),
        ("classification", "multiplier classes (co Lambda)^# and G(co Lambda)^#", want_mult),
        ("legendre_clebsch", LOCUS_LC, want_pointwise),
        ("goh_symmetry", LOCUS_GOH_SYM, want_pointwise),
        ("goh_block", LOCUS_GOH_BLOCK, want_pointwise),
        ("uniform_positivity", LOCUS_UNIFORM, want_pointwise),
        ("r_cross_check", "R from the Goh matrices vs the bracket formula", stage == Stage::Full),
        ("integral_necessary", LOCUS_NEC, want_nec),
        ("integral_sufficient", LOCUS_SUF, want_suf),
    ];
    let block_rest = |entries: &mut Vec<Entry>, from: &str, why: &str| {
        let mut on = false;
        for (n, l, w) in &names {
            on |= *n == from;
            if on && *w {
                entries.push(Entry::blocked(n, l, why));
            }
        }
    };

    let finish = |entries: Vec<Entry>, mult: Value, artifacts: Artifacts| ConditionReport {
        schema: 1,
        problem: ProblemSummary {
            name: opts.problem_name.clone(),
            n: p.n(),
            l: p.l(),
            m: p.m(),
            d_phi: p.d_phi(),
            d_eta: p.d_eta(),
            horizon: p.horizon(),
        },
        environment: Environment {
            intervals: traj.grid.intervals(),
            tol: opts.tol,
            feas_tol: opts.feas_tol,
            active_tol: opts.active_tol,
            stage,
            samples: opts.samples,
            seed: opts.seed,
            sufficiency_mode: opts.sufficiency_mode,
            multipliers: mult,
        },
        overall: overall(&entries),
        entries,
        artifacts,
    };

    if !want_mult {
        return Ok(finish(entries, mult_desc, artifacts));
    }
    if !feas.feasible {
        block_rest(&mut entries, "first_order", "candidate is infeasible");
        return Ok(finish(entries, mult_desc, artifacts));
    }

    let lin = linearize(p, traj)?;
    let set = find_multipliers_with(p, traj, opts.tol, opts.feas_tol)?;
    if set.status != MultiplierStatus::Found {
        entries.push(
            Entry::new(
                "first_order",
                names[0].1,
                Verdict::Violated,
                set.singular_values.last().copied().unwrap_or(0.0),
                "smallest singular value of the first-order map",
            )
            .with_note(set.note.clone())
            .with_note("no normalized multiplier at this tolerance (the candidate is not stationary, or tol is too tight)"),
        );
        block_rest(&mut entries, "classification", "no multiplier");
        mult_desc = multiplier_summary(&set, &[]);
        return Ok(finish(entries, mult_desc, artifacts));
    }
    let forms = vertex_forms(p, traj, &lin, &set, opts.tol)?;
    mult_desc = multiplier_summary(&set, &forms);
    artifacts.multipliers = set.vertices.clone();
    let mut fo = Entry::new(
        "first_order",
        names[0].1,
        Verdict::Satisfied,
        set.max_residual,
        "max residual over certified vertices",
    )
    .with_witnesses(json!({ "vertices": set.vertices.len(), "null_dim": set.basis.len() }));
    if !set.eta_qualified {
        fo = fo.with_note("equality constraints are rank deficient; multipliers may be abnormal");
    }
    if !set.enumerated {
        fo = fo.with_note("vertices were sampled, not enumerated");
    }
    entries.push(fo);

    let sharp: Vec<VertexForm> = forms.iter().filter(|f| f.flags.in_g_co_lambda_sharp).cloned().collect();
    let complete = sharp.len() == forms.len();
    let best_g = forms.iter().map(|f| f.flags.margins.max_abs_g).fold(f64::INFINITY, f64::min);
    let mut cls = Entry::new(
        "classification",
        names[1].1,
        if sharp.is_empty() { Verdict::NotApplicable } else { Verdict::Satisfied },
        best_g,
        "min over vertices of max |G|",
    )
    .with_witnesses(json!({
        "in_co_lambda_sharp": forms.iter().filter(|f| f.flags.in_co_lambda_sharp).count(),
        "in_g_co_lambda_sharp": sharp.len(),
        "vertices": forms.len(),
    }));
    if sharp.is_empty() {
        cls = cls.with_note("no vertex lies in G(co Lambda)^#; integral conditions do not apply");
    }
    entries.push(cls);

    if want_pointwise {
        entries.extend(pointwise_report(&forms, set.is_unique(), opts.tol));
    }

    if stage == Stage::Full {
        let mut worst: f64 = 0.0;
        let mut applicable = false;
        for f in &forms {
            match r_cross_check(p, traj, &f.multiplier, &f.gm, opts.tol)? {
                RCrossCheck::Deviation { max_deviation } => {
                    applicable = true;
                    worst = worst.max(max_deviation);
                }
                RCrossCheck::NotApplicable { .. } => {}
            }
        }
        let e = if applicable {
            Entry::new(
                "r_cross_check",
                names[6].1,
                if worst <= 1e-6 { Verdict::Satisfied } else { Verdict::Inconclusive },
                worst,
                "max deviation over nodes and G = 0 vertices",
            )
            .with_note("consistency diagnostic of the discretization")
        } else {
            Entry::new("r_cross_check", names[6].1, Verdict::NotApplicable, 0.0, "none")
                .with_note("needs a vertex with G = 0")
        };
        entries.push(e);
    }

    if want_nec || want_suf {
        let cone = build_cone(p, traj, &lin, opts.active_tol)?;
        if want_nec {
            let nec = necessity_scan(&cone, &sharp, complete, opts.samples, opts.seed, opts.tol)?;
            artifacts.necessity_witness = nec.probe.witness.clone();
            entries.push(nec.entry);
        }
        if want_suf {
            let suf = sufficiency_check(&cone, &sharp, complete, opts.sufficiency_mode, opts.samples, opts.seed)?;
            artifacts.sufficiency_worst = suf.worst_direction.clone();
            entries.push(suf.entry);
        }
    }
    Ok(finish(entries, mult_desc, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiplier::find_multipliers;
    use crate::registry;

    struct Setup {
        cone: DiscretizedCone,
        forms: Vec<VertexForm>,
    }

    fn setup(name: &str, t: f64, n: usize) -> Setup {
        let (p, tr) = registry::registry(name, Some(t), n).unwrap();
        let lin = linearize(&p, &tr).unwrap();
        let set = find_multipliers(&p, &tr, 1e-10).unwrap();
        let forms = vertex_forms(&p, &tr, &lin, &set, 1e-8).unwrap();
        let cone = build_cone(&p, &tr, &lin, 1e-8).unwrap();
        Setup { cone, forms }
    }

    #[test]
    fn legendre_values() {
        let p = legendre(3, 0.5);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.5);
        assert!((p[2] - (-0.125)).abs() < 1e-15);
        assert!((p[3] - (-0.4375)).abs() < 1e-15);
        assert_eq!(legendre(0, 0.3).len(), 1);
    }

    #[test]
    fn pe_pointwise_entries() {
        let s = setup("pe", 0.1, 50);
        let e = pointwise_report(&s.forms, true, 1e-8);
        let get = |n: &str| e.iter().find(|x| x.name == n).unwrap();
        // normalized multiplier has alpha0 = 1/2
        assert!(get("legendre_clebsch").margin.unwrap().abs() < 1e-12);
        assert_eq!(get("legendre_clebsch").verdict, Verdict::Satisfied);
        assert!(get("goh_symmetry").margin.unwrap() < 1e-12);
        assert!((get("goh_block").margin.unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(get("uniform_positivity").verdict, Verdict::Satisfied);
    }

    #[test]
    fn violators_fail_pointwise() {
        let s = setup("lc-violator", 1.0, 40);
        let e = pointwise_report(&s.forms, true, 1e-8);
        assert_eq!(e[0].verdict, Verdict::Violated);
        assert!(e[0].margin.unwrap() < -0.1);
        let s = setup("goh-violator", 1.0, 40);
        let e = pointwise_report(&s.forms, true, 1e-8);
        assert_eq!(e[1].verdict, Verdict::Violated);
        assert!(e[1].margin.unwrap() > 0.1);
    }

    #[test]
    fn pe_sufficiency_signs() {
        let s = setup("pe", 0.1, 100);
        let r = sufficiency_check(&s.cone, &s.forms, true, SufficiencyMode::Subspace, 0, 0).unwrap();
        assert_eq!(r.verdict, Verdict::Satisfied);
        assert!(r.rho_hat > 0.1 && r.rho_hat < 0.13, "{}", r.rho_hat);
        let s = setup("pe", 1.0, 100);
        let r = sufficiency_check(&s.cone, &s.forms, true, SufficiencyMode::Subspace, 0, 0).unwrap();
        assert_eq!(r.verdict, Verdict::Violated);
        assert!(r.rho_hat < -0.2, "{}", r.rho_hat);
    }

    #[test]
    fn worst_direction_reproduces_rho() {
        let s = setup("pe", 1.0, 60);
        let r = sufficiency_check(&s.cone, &s.forms, true, SufficiencyMode::Subspace, 0, 0).unwrap();
        let d = r.worst_direction.unwrap();
        let val = omega_p2_bilinear(&s.forms[0].gm, &d, &d).unwrap().value;
        let g = d.gamma(&s.cone.grid);
        assert!((g - 1.0).abs() < 1e-10);
        assert!((val - r.rho_hat * g).abs() < 1e-8 * r.scale.max(1.0));
    }

    #[test]
    fn lq_decoupled_rho() {
        let s = setup("lq-decoupled", 1.0, 80);
        let r = sufficiency_check(&s.cone, &s.forms, true, SufficiencyMode::Subspace, 0, 0).unwrap();
        assert_eq!(r.verdict, Verdict::Satisfied);
        assert!((r.rho_hat - 0.25).abs() < 1e-10, "{}", r.rho_hat);
    }

    #[test]
    fn necessity_scan_pe() {
        let s = setup("pe", 0.1, 100);
        let r = necessity_scan(&s.cone, &s.forms, true, 200, 7, 1e-8).unwrap();
        assert_eq!(r.verdict, Verdict::Satisfied);
        assert!(r.probe.min_ratio.unwrap() > 0.0);
        assert_eq!(r.probe.accepted, 200);
        let s = setup("pe", 1.0, 100);
        let r = necessity_scan(&s.cone, &s.forms, true, 200, 7, 1e-8).unwrap();
        assert_eq!(r.verdict, Verdict::Violated);
        // the witness has gamma 1, so its value is the ratio
        assert!(r.probe.witness_value.unwrap() < -7.0 / 120.0);
    }

    #[test]
    fn not_applicable_without_sharp_vertices() {
        let s = setup("goh-violator", 1.0, 20);
        let r = necessity_scan(&s.cone, &[], false, 10, 0, 1e-8).unwrap();
        assert_eq!(r.verdict, Verdict::NotApplicable);
        let r = sufficiency_check(&s.cone, &[], false, SufficiencyMode::Subspace, 0, 0).unwrap();
        assert_eq!(r.verdict, Verdict::NotApplicable);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = setup("cubic", 1.0, 40);
        let a = sample_cone(&s.cone, &s.forms, 50, 3).unwrap();
        let b = sample_cone(&s.cone, &s.forms, 50, 3).unwrap();
        assert_eq!(a.min_ratio, b.min_ratio);
        assert_eq!(a.witness, b.witness);
    }

    #[test]
    fn full_report_pe() {
        let (p, tr) = registry::registry("pe", Some(0.1), 100).unwrap();
        let opts = ReportOptions {
            problem_name: "pe".into(),
            samples: 100,
            ..Default::default()
        };
        let r = full_report(&p, &tr, &opts).unwrap();
        assert_eq!(r.overall, Verdict::Satisfied, "{}", r.render_text());
        assert_eq!(r.exit_code(), 0);
        let (p, tr) = registry::registry("pe", Some(1.0), 100).unwrap();
        let r = full_report(&p, &tr, &opts).unwrap();
        assert_eq!(r.entry("integral_necessary").unwrap().verdict, Verdict::Violated);
        assert_eq!(r.entry("legendre_clebsch").unwrap().verdict, Verdict::Satisfied);
        assert_eq!(r.exit_code(), 1);
    }

    #[test]
    fn infeasible_candidate_blocks_later_stages() {
        let (p, mut tr) = registry::registry("pe", Some(1.0), 50).unwrap();
        for x in tr.x.iter_mut() {
            x[0] = 1.0;
        }
        let r = full_report(&p, &tr, &ReportOptions::default()).unwrap();
        assert_eq!(r.entries[0].verdict, Verdict::Violated);
        assert!(r.entries[1..].iter().all(|e| e.verdict == Verdict::Blocked));
        assert_eq!(r.exit_code(), 2);
        assert!(r.entries.iter().all(|e| e.verdict == Verdict::Blocked || e.margin.is_some()));
    }

    #[test]
    fn stage_selection() {
        let (p, tr) = registry::registry("pe", Some(0.1), 40).unwrap();
        let mut opts = ReportOptions {
            stage: Stage::Simulate,
            ..Default::default()
        };
        assert_eq!(full_report(&p, &tr, &opts).unwrap().entries.len(), 1);
        opts.stage = Stage::Multipliers;
        assert_eq!(full_report(&p, &tr, &opts).unwrap().entries.len(), 3);
        opts.stage = Stage::CheckPointwise;
        assert_eq!(full_report(&p, &tr, &opts).unwrap().entries.len(), 7);
    }
}
