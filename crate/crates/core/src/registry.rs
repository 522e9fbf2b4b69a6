//! Built-in problems with known answers.
//!
//! Every entry has the zero trajectory as its reference candidate.

use crate::error::{Error, Result};
use crate::poly::Polynomial;
use crate::problem::{ProblemDef, VectorField};
use crate::trajectory::{Grid, Trajectory};

/// Names accepted by [`registry`].
pub const NAMES: [&str; 5] = ["pe", "lq-decoupled", "goh-violator", "lc-violator", "cubic"];

/// Horizon used by `pe` when none is given.
pub const PE_DEFAULT_HORIZON: f64 = 0.1;

fn poly(arity: usize, terms: &[(f64, &[u32])]) -> Polynomial {
    Polynomial::new(arity, terms.iter().map(|(c, e)| (*c, e.to_vec()))).expect("registry polynomial")
}

fn field(arity: usize, comps: &[&[(f64, &[u32])]]) -> VectorField {
    VectorField::new(comps.iter().map(|c| poly(arity, c)).collect(), arity).expect("registry field")
}

/// `x_i(0)` as an endpoint map over `(x0, xT)`.
fn initial(n: usize, i: usize) -> Polynomial {
    Polynomial::var(2 * n, i)
}

fn terminal(n: usize, i: usize) -> Polynomial {
    Polynomial::var(2 * n, n + i)
}

fn fixed_start(n: usize) -> Vec<Polynomial> {
    (0..n).map(|i| initial(n, i)).collect()
}

/// Three states, one nonlinear and one affine control:
///
/// ```text
/// x1' = x2 + u,  x2' = v,  x3' = x1^2 + x2^2 + u^2 + x2 v
/// minimize -2 x1(T) x2(T) + x3(T),  x(0) = 0
/// ```
pub fn pe(horizon: f64) -> ProblemDef {
    let a = 4;
    let f0 = field(
        a,
        &[
            &[(1.0, &[0, 1, 0, 0]), (1.0, &[0, 0, 0, 1])],
            &[],
            &[(1.0, &[2, 0, 0, 0]), (1.0, &[0, 2, 0, 0]), (1.0, &[0, 0, 0, 2])],
        ],
    );
    let f1 = field(a, &[&[], &[(1.0, &[0, 0, 0, 0])], &[(1.0, &[0, 1, 0, 0])]]);
    let cost = poly(6, &[(-2.0, &[0, 0, 0, 1, 1, 0]), (1.0, &[0, 0, 0, 0, 0, 1])]);
    ProblemDef::new(3, 1, 1, horizon, vec![f0, f1], cost, vec![], fixed_start(3)).unwrap()
}

/// `x1' = v`, `x2' = x1^2 + u^2 + x1 v`, minimize `x2(T)` from `x(0) = 0`.
///
/// The transformed form is `alpha0 (int u^2 + y^2 + h^2/2)`, so the minimal
/// ratio against the gamma-order is `alpha0 / 2`.
pub fn lq_decoupled(horizon: f64) -> ProblemDef {
    let a = 3;
    let f0 = field(a, &[&[], &[(1.0, &[2, 0, 0]), (1.0, &[0, 0, 2])]]);
    let f1 = field(a, &[&[(1.0, &[0, 0, 0])], &[(1.0, &[1, 0, 0])]]);
    ProblemDef::new(2, 1, 1, horizon, vec![f0, f1], terminal(2, 1), vec![], fixed_start(2)).unwrap()
}

/// Two affine controls whose bracket does not vanish against the costate:
/// `x1' = v1`, `x2' = v2`, `x3' = u^2 + x1 v2`, minimize `x3(T)`.
pub fn goh_violator(horizon: f64) -> ProblemDef {
    let a = 4;
    let f0 = field(a, &[&[], &[], &[(1.0, &[0, 0, 0, 2])]]);
    let f1 = field(a, &[&[(1.0, &[0, 0, 0, 0])], &[], &[]]);
    let f2 = field(a, &[&[], &[(1.0, &[0, 0, 0, 0])], &[(1.0, &[1, 0, 0, 0])]]);
    ProblemDef::new(3, 1, 2, horizon, vec![f0, f1, f2], terminal(3, 2), vec![], fixed_start(3)).unwrap()
}

/// `x1' = v`, `x2' = x1^2 - u^2`, minimize `x2(T)`: concave in `u`.
pub fn lc_violator(horizon: f64) -> ProblemDef {
    let a = 3;
    let f0 = field(a, &[&[], &[(1.0, &[2, 0, 0]), (-1.0, &[0, 0, 2])]]);
    let f1 = field(a, &[&[(1.0, &[0, 0, 0])], &[]]);
    ProblemDef::new(2, 1, 1, horizon, vec![f0, f1], terminal(2, 1), vec![], fixed_start(2)).unwrap()
}

/// `x1' = u + v`, `x2' = x1^3 + x1^2 + u^2`, minimize `x2(T)`.
///
/// The cubic term makes the Lagrangian remainder genuinely third order.
pub fn cubic(horizon: f64) -> ProblemDef {
    let a = 3;
    let f0 = field(
        a,
        &[
            &[(1.0, &[0, 0, 1])],
            &[(1.0, &[3, 0, 0]), (1.0, &[2, 0, 0]), (1.0, &[0, 0, 2])],
        ],
    );
    let f1 = field(a, &[&[(1.0, &[0, 0, 0])], &[]]);
    ProblemDef::new(2, 1, 1, horizon, vec![f0, f1], terminal(2, 1), vec![], fixed_start(2)).unwrap()
}

/// `x' = x` with no controls; minimize `x(T)`.
pub fn exponential() -> ProblemDef {
    let f0 = field(1, &[&[(1.0, &[1])]]);
    ProblemDef::new(1, 0, 0, 1.0, vec![f0], terminal(1, 0), vec![], vec![]).unwrap()
}

/// `x' = x^2`, which blows up at `t = 1/x(0)`.
pub fn blowup() -> ProblemDef {
    let f0 = field(1, &[&[(1.0, &[2])]]);
    ProblemDef::new(1, 0, 0, 1.0, vec![f0], terminal(1, 0), vec![], vec![]).unwrap()
}

/// Looks up a built-in problem and its zero reference trajectory on a grid
/// with `intervals` steps. `horizon` overrides the default horizon.
pub fn registry(name: &str, horizon: Option<f64>, intervals: usize) -> Result<(ProblemDef, Trajectory)> {
    let t = horizon.unwrap_or(if name == "pe" { PE_DEFAULT_HORIZON } else { 1.0 });
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Domain(format!("horizon T must be > 0, got {t}")));
    }
    let p = match name {
        "pe" => pe(t),
        "lq-decoupled" => lq_decoupled(t),
        "goh-violator" => goh_violator(t),
        "lc-violator" => lc_violator(t),
        "cubic" => cubic(t),
        _ => {
            return Err(Error::UnknownProblem {
                name: name.to_string(),
                available: NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    let grid = Grid::new(intervals, t)?;
    let traj = Trajectory::zeros(grid, p.n(), p.l(), p.m());
    Ok((p, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn all_names_resolve_to_feasible_references() {
        for name in NAMES {
            let (p, tr) = registry(name, None, 20).unwrap();
            let rep = crate::trajectory::feasibility_report(&p, &tr, 1e-10).unwrap();
            assert!(rep.feasible, "{name}");
        }
    }

    #[test]
    fn unknown_name_lists_alternatives() {
        let err = registry("zzz", None, 10).unwrap_err();
        let msg = err.to_string();
        for name in ["pe", "lq-decoupled", "goh-violator", "lc-violator"] {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn horizon_override() {
        let (p, tr) = registry("pe", Some(1.0), 10).unwrap();
        assert_eq!(p.horizon(), 1.0);
        assert_eq!(tr.grid.horizon(), 1.0);
        assert_eq!(registry("pe", None, 10).unwrap().0.horizon(), PE_DEFAULT_HORIZON);
        assert!(registry("pe", Some(-1.0), 10).is_err());
    }

    #[test]
    fn pe_shape() {
        let p = pe(1.0);
        assert_eq!((p.n(), p.l(), p.m(), p.d_phi(), p.d_eta()), (3, 1, 1, 0, 3));
        let f = p
            .eval_dynamics(
                &DVector::from_vec(vec![1.0, 2.0, 0.0]),
                &DVector::from_vec(vec![0.5]),
                &DVector::from_vec(vec![3.0]),
            )
            .unwrap();
        assert_eq!(f, DVector::from_vec(vec![2.5, 3.0, 1.0 + 4.0 + 0.25 + 6.0]));
    }
}
