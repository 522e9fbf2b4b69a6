//! Problem definitions: polynomial vector fields, endpoint maps, and their
//! exact evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Polynomial;

/// `n` polynomial components over the `n + l` variables `(x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    components: Vec<Polynomial>,
}

impl VectorField {
    pub fn new(components: Vec<Polynomial>, arity: usize) -> Result<Self> {
        for (c, p) in components.iter().enumerate() {
            if p.arity() != arity {
                return Err(Error::Dimension(format!(
                    "component {c} has arity {}, expected {arity}",
                    p.arity()
                )));
            }
        }
        Ok(VectorField { components })
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Cost,
    Inequality,
    Equality,
}

/// A scalar function of `(x(0), x(T))`, stored as a polynomial of arity `2n`.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointMap {
    pub value: Polynomial,
    pub kind: EndpointKind,
}

/// Value, Jacobians and Hessian slices of one vector field at `(x, u)`.
///
/// `hess_*[c]` is the Hessian block of component `c`. Blocks are absent when
/// the requested order is too low.
#[derive(Clone, Debug)]
pub struct FieldEval {
    pub value: DVector<f64>,
    pub jac_x: Option<DMatrix<f64>>,
    pub jac_u: Option<DMatrix<f64>>,
    pub hess_xx: Option<Vec<DMatrix<f64>>>,
    pub hess_xu: Option<Vec<DMatrix<f64>>>,
    pub hess_uu: Option<Vec<DMatrix<f64>>>,
}

/// Value, gradient (length `2n`, ordered `(x0, xT)`) and Hessian of an
/// endpoint map.
#[derive(Clone, Debug)]
pub struct EndpointEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// A partially-affine problem: `x' = f0(x,u) + sum_i v_i f_i(x,u)` on `[0,T]`,
/// minimizing a cost over `(x(0), x(T))` under endpoint constraints.
///
/// Endpoints are stored in multiplier order: the cost, then the
/// inequalities, then the equalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemDef {
    n: usize,
    l: usize,
    m: usize,
    horizon: f64,
    fields: Vec<VectorField>,
    endpoints: Vec<EndpointMap>,
}

impl ProblemDef {
    pub fn new(
        n: usize,
        l: usize,
        m: usize,
        horizon: f64,
        fields: Vec<VectorField>,
        cost: Polynomial,
        inequalities: Vec<Polynomial>,
        equalities: Vec<Polynomial>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dimension("state dimension n must be >= 1".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon T must be > 0, got {horizon}")));
        }
        if fields.len() != m + 1 {
            return Err(Error::Dimension(format!(
                "expected {} vector fields (m + 1), got {}",
                m + 1,
                fields.len()
            )));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.dim() != n {
                return Err(Error::Dimension(format!(
                    "field {i} has {} components, expected n = {n}",
                    f.dim()
                )));
            }
            if let Some(p) = f.components().iter().find(|p| p.arity() != n + l) {
                return Err(Error::Dimension(format!(
                    "field {i} component arity {} != n + l = {}",
                    p.arity(),
                    n + l
                )));
            }
        }
        let mut endpoints = Vec::with_capacity(1 + inequalities.len() + equalities.len());
        let tagged = std::iter::once((cost, EndpointKind::Cost))
            .chain(inequalities.into_iter().map(|p| (p, EndpointKind::Inequality)))
            .chain(equalities.into_iter().map(|p| (p, EndpointKind::Equality)));
        for (value, kind) in tagged {
            if value.arity() != 2 * n {
                return Err(Error::Dimension(format!(
                    "{kind:?} endpoint map has arity {}, expected 2n = {}",
                    value.arity(),
                    2 * n
                )));
            }
            endpoints.push(EndpointMap { value, kind });
        }
        Ok(ProblemDef {
            n,
            l,
            m,
            horizon,
            fields,
            endpoints,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon T must be > 0, got {horizon}")));
        }
        Ok(ProblemDef {
            horizon,
            ..self.clone()
        })
    }

    /// Number of inequality constraints (`d_phi`).
    pub fn d_phi(&self) -> usize {
        self.count(EndpointKind::Inequality)
    }

    /// Number of equality constraints (`d_eta`).
    pub fn d_eta(&self) -> usize {
        self.count(EndpointKind::Equality)
    }

    fn count(&self, kind: EndpointKind) -> usize {
        self.endpoints.iter().filter(|e| e.kind == kind).count()
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    /// All endpoint maps in multiplier order (cost, inequalities, equalities).
    pub fn endpoints(&self) -> &[EndpointMap] {
        &self.endpoints
    }

    /// Index range of the `phi` maps (cost and inequalities) in `endpoints()`.
    pub fn phi_range(&self) -> std::ops::Range<usize> {
        0..1 + self.d_phi()
    }

    /// Index range of the `eta` maps in `endpoints()`.
    pub fn eta_range(&self) -> std::ops::Range<usize> {
        1 + self.d_phi()..self.endpoints.len()
    }

    pub fn eval_field(
        &self,
        i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        order: u8,
    ) -> Result<FieldEval> {
        let field = self.fields.get(i).ok_or(Error::IndexOutOfRange {
            what: "field",
            index: i,
            limit: self.m + 1,
        })?;
        self.check_xu(x, u)?;
        let (n, l) = (self.n, self.l);
        let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();

        let mut value = DVector::zeros(n);
        let mut jac_x = (order >= 1).then(|| DMatrix::zeros(n, n));
        let mut jac_u = (order >= 1).then(|| DMatrix::zeros(n, l));
        let mut hxx = (order >= 2).then(|| Vec::with_capacity(n));
        let mut hxu = (order >= 2).then(|| Vec::with_capacity(n));
        let mut huu = (order >= 2).then(|| Vec::with_capacity(n));

        for (c, poly) in field.components().iter().enumerate() {
            let e = poly.eval_with(&z, order.min(2));
            value[c] = e.value;
            if let (Some(g), Some(jx), Some(ju)) = (&e.gradient, jac_x.as_mut(), jac_u.as_mut()) {
                jx.row_mut(c).copy_from(&g.rows(0, n).transpose());
                ju.row_mut(c).copy_from(&g.rows(n, l).transpose());
            }
            if let Some(h) = &e.hessian {
                hxx.as_mut().unwrap().push(h.view((0, 0), (n, n)).into_owned());
                hxu.as_mut().unwrap().push(h.view((0, n), (n, l)).into_owned());
                huu.as_mut().unwrap().push(h.view((n, n), (l, l)).into_owned());
            }
        }
        Ok(FieldEval {
            value,
            jac_x,
            jac_u,
            hess_xx: hxx,
            hess_xu: hxu,
            hess_uu: huu,
        })
    }

    /// Evaluates endpoint map `which` (multiplier order) at `(x0, xT)`.
    pub fn eval_endpoint(
        &self,
        which: usize,
        x0: &DVector<f64>,
        xt: &DVector<f64>,
        order: u8,
    ) -> Result<EndpointEval> {
        let ep = self.endpoints.get(which).ok_or(Error::IndexOutOfRange {
            what: "endpoint",
            index: which,
            limit: self.endpoints.len(),
        })?;
        if x0.len() != self.n || xt.len() != self.n {
            return Err(Error::Dimension(format!(
                "endpoint arguments must have length n = {}",
                self.n
            )));
        }
        let z: Vec<f64> = x0.iter().chain(xt.iter()).copied().collect();
        let e = ep.value.eval_with(&z, order.min(2));
        let d = 2 * self.n;
        Ok(EndpointEval {
            value: e.value,
            gradient: e.gradient.unwrap_or_else(|| DVector::zeros(d)),
            hessian: e.hessian.unwrap_or_else(|| DMatrix::zeros(d, d)),
        })
    }

    /// `F(x,u,v) = f0(x,u) + sum_i v_i f_i(x,u)`.
    pub fn eval_dynamics(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        if v.len() != self.m {
            return Err(Error::Dimension(format!(
                "v has length {}, expected m = {}",
                v.len(),
                self.m
            )));
        }
        Ok(self.dynamics_unchecked(x, u, v))
    }

    pub(crate) fn dynamics_unchecked(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
        let field_value =
            |f: &VectorField| DVector::from_iterator(self.n, f.components().iter().map(|p| p.eval(&z)));
        let mut out = field_value(&self.fields[0]);
        for (i, vi) in v.iter().enumerate() {
            if *vi != 0.0 {
                out.axpy(*vi, &field_value(&self.fields[i + 1]), 1.0);
            }
        }
        out
    }

    fn check_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n || u.len() != self.l {
            return Err(Error::Dimension(format!(
                "(x, u) have lengths ({}, {}), expected ({}, {})",
                x.len(),
                u.len(),
                self.n,
                self.l
            )));
        }
        Ok(())
    }

    /// Parses the JSON problem document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: ProblemDoc = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        doc.into_problem()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ProblemDoc::from_problem(self))
            .expect("problem document serializes")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDoc {
    n: usize,
    l: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: f64,
    fields: Vec<Vec<Vec<FieldTermDoc>>>,
    cost: Vec<EndpointTermDoc>,
    #[serde(default)]
    inequalities: Vec<Vec<EndpointTermDoc>>,
    #[serde(default)]
    equalities: Vec<Vec<EndpointTermDoc>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldTermDoc {
    coef: f64,
    #[serde(default)]
    x: Vec<u32>,
    #[serde(default)]
    u: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointTermDoc {
    coef: f64,
    x: Vec<u32>,
}

impl ProblemDoc {
    fn into_problem(self) -> Result<ProblemDef> {
        let (n, l) = (self.n, self.l);
        let mut fields = Vec::with_capacity(self.fields.len());
        for (i, comps) in self.fields.into_iter().enumerate() {
            let mut polys = Vec::with_capacity(comps.len());
            for (c, terms) in comps.into_iter().enumerate() {
                let mut mons = Vec::with_capacity(terms.len());
                for (k, t) in terms.into_iter().enumerate() {
                    if t.x.len() != n || t.u.len() != l {
                        return Err(Error::Dimension(format!(
                            "fields[{i}][{c}][{k}]: exponent arrays have lengths ({}, {}), expected ({n}, {l})",
                            t.x.len(),
                            t.u.len()
                        )));
                    }
                    mons.push((t.coef, t.x.into_iter().chain(t.u).collect()));
                }
                polys.push(Polynomial::new(n + l, mons)?);
            }
            fields.push(VectorField::new(polys, n + l)?);
        }
        let endpoint = |name: String, terms: Vec<EndpointTermDoc>| -> Result<Polynomial> {
            for (k, t) in terms.iter().enumerate() {
                if t.x.len() != 2 * n {
                    return Err(Error::Dimension(format!(
                        "{name}[{k}]: exponent array has length {}, expected 2n = {}",
                        t.x.len(),
                        2 * n
                    )));
                }
            }
            Polynomial::new(2 * n, terms.into_iter().map(|t| (t.coef, t.x)))
        };
        let cost = endpoint("cost".into(), self.cost)?;
        let inequalities = self
            .inequalities
            .into_iter()
            .enumerate()
            .map(|(j, t)| endpoint(format!("inequalities[{j}]"), t))
            .collect::<Result<Vec<_>>>()?;
        let equalities = self
            .equalities
            .into_iter()
            .enumerate()
            .map(|(j, t)| endpoint(format!("equalities[{j}]"), t))
            .collect::<Result<Vec<_>>>()?;
        ProblemDef::new(n, l, self.m, self.horizon, fields, cost, inequalities, equalities)
    }

    fn from_problem(p: &ProblemDef) -> Self {
        let n = p.n;
        let fields = p
            .fields
            .iter()
            .map(|f| {
                f.components()
                    .iter()
                    .map(|poly| {
                        poly.terms()
                            .iter()
                            .map(|t| FieldTermDoc {
                                coef: t.coef,
                                x: t.exponents[..n].to_vec(),
                                u: t.exponents[n..].to_vec(),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let terms = |poly: &Polynomial| -> Vec<EndpointTermDoc> {
            poly.terms()
                .iter()
                .map(|t| EndpointTermDoc {
                    coef: t.coef,
                    x: t.exponents.clone(),
                })
                .collect()
        };
        let of_kind = |kind| {
            p.endpoints
                .iter()
                .filter(|e| e.kind == kind)
                .map(|e| terms(&e.value))
                .collect()
        };
        ProblemDoc {
            n,
            l: p.l,
            m: p.m,
            horizon: p.horizon,
            fields,
            cost: terms(&p.endpoints[0].value),
            inequalities: of_kind(EndpointKind::Inequality),
            equalities: of_kind(EndpointKind::Equality),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    fn pe() -> ProblemDef {
        registry::pe(1.0)
    }

    fn zeros(k: usize) -> DVector<f64> {
        DVector::zeros(k)
    }

    #[test]
    fn pe_field_one_at_origin() {
        let p = pe();
        let e = p.eval_field(1, &zeros(3), &zeros(1), 1).unwrap();
        assert_eq!(e.value, DVector::from_vec(vec![0.0, 1.0, 0.0]));
        let jx = e.jac_x.unwrap();
        let mut expected = DMatrix::zeros(3, 3);
        expected[(2, 1)] = 1.0;
        assert_eq!(jx, expected);
        assert!(e.hess_xx.is_none());
    }

    #[test]
    fn pe_drift_hessian() {
        let p = pe();
        let e = p.eval_field(0, &zeros(3), &zeros(1), 2).unwrap();
        assert_eq!(e.value, zeros(3));
        let huu = e.hess_uu.unwrap();
        assert_eq!(huu[2][(0, 0)], 2.0);
        assert_eq!(e.hess_xx.unwrap()[2], DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 0.0])));
    }

    #[test]
    fn field_index_out_of_range() {
        let p = pe();
        assert!(matches!(
            p.eval_field(2, &zeros(3), &zeros(1), 0),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            p.eval_endpoint(9, &zeros(3), &zeros(3), 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn pe_cost_endpoint() {
        let p = pe();
        let (a, b, c) = (0.7, -1.3, 2.1);
        let xt = DVector::from_vec(vec![a, b, c]);
        let e = p.eval_endpoint(0, &zeros(3), &xt, 2).unwrap();
        assert!((e.value - (-2.0 * a * b + c)).abs() < 1e-14);
        let mut h = DMatrix::zeros(6, 6);
        h[(3, 4)] = -2.0;
        h[(4, 3)] = -2.0;
        assert_eq!(e.hessian, h);
        assert_eq!(p.eval_endpoint(0, &zeros(3), &zeros(3), 0).unwrap().value, 0.0);
    }

    #[test]
    fn pe_equality_is_linear() {
        let p = pe();
        let x0 = DVector::from_vec(vec![0.4, 0.5, 0.6]);
        let e = p.eval_endpoint(p.eta_range().start, &x0, &x0, 2).unwrap();
        let mut g = zeros(6);
        g[0] = 1.0;
        assert_eq!(e.gradient, g);
        assert_eq!(e.hessian, DMatrix::zeros(6, 6));
    }

    #[test]
    fn pe_dynamics() {
        let p = pe();
        let f = p
            .eval_dynamics(&zeros(3), &zeros(1), &DVector::from_vec(vec![1.0]))
            .unwrap();
        assert_eq!(f, DVector::from_vec(vec![0.0, 1.0, 0.0]));
        let x = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let u = DVector::from_vec(vec![0.9]);
        let f0 = p.eval_dynamics(&x, &u, &zeros(1)).unwrap();
        assert_eq!(f0, p.eval_field(0, &x, &u, 0).unwrap().value);
        let (v1, v2) = (DVector::from_vec(vec![0.37]), DVector::from_vec(vec![-1.9]));
        let r = p.eval_dynamics(&x, &u, &(&v1 + &v2)).unwrap()
            - p.eval_dynamics(&x, &u, &v1).unwrap()
            - p.eval_dynamics(&x, &u, &v2).unwrap()
            + f0;
        assert!(r.amax() < 1e-14);
        assert!(matches!(
            p.eval_dynamics(&x, &u, &zeros(2)),
            Err(Error::Dimension(_))
        ));
    }

    const PE_DOC: &str = r#"{
      "n": 3, "l": 1, "m": 1, "T": 1.0,
      "fields": [
        [ [ {"coef": 1, "x": [0,1,0], "u": [0]}, {"coef": 1, "x": [0,0,0], "u": [1]} ],
          [],
          [ {"coef": 1, "x": [2,0,0], "u": [0]}, {"coef": 1, "x": [0,2,0], "u": [0]},
            {"coef": 1, "x": [0,0,0], "u": [2]} ] ],
        [ [], [ {"coef": 1, "x": [0,0,0], "u": [0]} ], [ {"coef": 1, "x": [0,1,0], "u": [0]} ] ]
      ],
      "cost": [ {"coef": -2, "x": [0,0,0,1,1,0]}, {"coef": 1, "x": [0,0,0,0,0,1]} ],
      "equalities": [ [ {"coef": 1, "x": [1,0,0,0,0,0]} ],
                      [ {"coef": 1, "x": [0,1,0,0,0,0]} ],
                      [ {"coef": 1, "x": [0,0,1,0,0,0]} ] ]
    }"#;

    #[test]
    fn parse_pe_document() {
        let p = ProblemDef::from_json(PE_DOC).unwrap();
        assert_eq!((p.n(), p.l(), p.m(), p.d_phi(), p.d_eta()), (3, 1, 1, 0, 3));
        assert_eq!(p, pe());
        let again = ProblemDef::from_json(&p.to_json()).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn parse_errors() {
        let bad_arity = PE_DOC.replacen(r#""x": [0,1,0], "u": [0]"#, r#""x": [0,1,0,0], "u": [0]"#, 1);
        assert!(matches!(ProblemDef::from_json(&bad_arity), Err(Error::Dimension(_))));
        let bad_t = PE_DOC.replace(r#""T": 1.0"#, r#""T": 0.0"#);
        assert!(matches!(ProblemDef::from_json(&bad_t), Err(Error::Domain(_))));
        let schema = PE_DOC.replace(r#""coef": -2"#, r#""coef": "minus two""#);
        match ProblemDef::from_json(&schema) {
            Err(Error::Parse { path, .. }) => assert_eq!(path, "cost[0].coef"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
