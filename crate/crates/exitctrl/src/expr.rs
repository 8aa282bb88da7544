//! Coefficient expression trees.
//!
//! Problem coefficients (drift, diffusion, driver, terminal) are finite
//! expression trees over a fixed node alphabet. There is no division or
//! logarithm node, so evaluation is total on any bounded box and Lipschitz
//! continuity is preserved under composition.
//!
//! Wire format: `{"op": <name>, "args": [children...], "value": <number>}`
//! with `args`/`value` omitted where unused. `x`, `v`, `z` carry the
//! coordinate index in `value`; `powi` carries a nonnegative integer
//! exponent in `value`.

use crate::error::{Error, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// State coordinate `x[i]`.
    X(usize),
    /// Control coordinate `v[j]`.
    V(usize),
    /// BSDE solution value `y` (driver expressions only).
    Y,
    /// BSDE martingale coefficient `z[j]` (driver expressions only).
    Z(usize),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Neg(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    Exp(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Tanh(Box<Expr>),
    /// Integer power with nonnegative exponent.
    Powi(Box<Expr>, u32),
}

/// Evaluation point. Slots that a given expression class may not reference
/// (enforced by [`Expr::validate`]) can be left empty.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx<'a> {
    pub x: &'a [f64],
    pub v: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
}

impl<'a> EvalCtx<'a> {
    pub fn state(x: &'a [f64]) -> Self {
        EvalCtx {
            x,
            v: &[],
            y: 0.0,
            z: &[],
        }
    }

    pub fn state_control(x: &'a [f64], v: &'a [f64]) -> Self {
        EvalCtx { x, v, y: 0.0, z: &[] }
    }
}

/// Which variables an expression slot may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRules {
    pub dim_x: usize,
    /// `Some(k)` when a control argument exists.
    pub dim_v: Option<usize>,
    /// `Some(m)` when y/z arguments exist (driver expressions).
    pub dim_z: Option<usize>,
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(vec![a, b])
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Mul(vec![a, b])
    }

    pub fn scale(c: f64, e: Expr) -> Self {
        Expr::Mul(vec![Expr::Const(c), e])
    }

    pub fn eval(&self, ctx: &EvalCtx) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::X(i) => ctx.x[*i],
            Expr::V(j) => ctx.v[*j],
            Expr::Y => ctx.y,
            Expr::Z(j) => ctx.z[*j],
            Expr::Add(terms) => terms.iter().map(|t| t.eval(ctx)).sum(),
            Expr::Mul(terms) => terms.iter().map(|t| t.eval(ctx)).product(),
            Expr::Neg(a) => -a.eval(ctx),
            Expr::Min(a, b) => a.eval(ctx).min(b.eval(ctx)),
            Expr::Max(a, b) => a.eval(ctx).max(b.eval(ctx)),
            Expr::Abs(a) => a.eval(ctx).abs(),
            Expr::Exp(a) => a.eval(ctx).exp(),
            Expr::Sin(a) => a.eval(ctx).sin(),
            Expr::Cos(a) => a.eval(ctx).cos(),
            Expr::Tanh(a) => a.eval(ctx).tanh(),
            Expr::Powi(a, n) => a.eval(ctx).powi(*n as i32),
        }
    }

    /// Checks that the tree only references variables its slot allows and
    /// that all coordinate indices are in range.
    pub fn validate(&self, slot: &str, rules: SlotRules) -> Result<()> {
        let fail = |message: String| Error::InvalidExpr {
            slot: slot.to_string(),
            message,
        };
        match self {
            Expr::Const(c) => {
                if !c.is_finite() {
                    return Err(fail(format!("non-finite constant {c}")));
                }
            }
            Expr::X(i) => {
                if *i >= rules.dim_x {
                    return Err(fail(format!("x[{i}] out of range (d = {})", rules.dim_x)));
                }
            }
            Expr::V(j) => match rules.dim_v {
                None => return Err(fail(format!("v[{j}] not allowed here"))),
                Some(k) if *j >= k => {
                    return Err(fail(format!("v[{j}] out of range (k = {k})")));
                }
                _ => {}
            },
            Expr::Y => {
                if rules.dim_z.is_none() {
                    return Err(fail("y node only allowed in driver expressions".into()));
                }
            }
            Expr::Z(j) => match rules.dim_z {
                None => {
                    return Err(fail(format!(
                        "z[{j}] node only allowed in driver expressions"
                    )))
                }
                Some(m) if *j >= m => {
                    return Err(fail(format!("z[{j}] out of range (m = {m})")));
                }
                _ => {}
            },
            Expr::Add(ts) | Expr::Mul(ts) => {
                if ts.is_empty() {
                    return Err(fail("empty argument list".into()));
                }
                for t in ts {
                    t.validate(slot, rules)?;
                }
            }
            Expr::Neg(a)
            | Expr::Abs(a)
            | Expr::Exp(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Tanh(a)
            | Expr::Powi(a, _) => a.validate(slot, rules)?,
            Expr::Min(a, b) | Expr::Max(a, b) => {
                a.validate(slot, rules)?;
                b.validate(slot, rules)?;
            }
        }
        Ok(())
    }

    /// True when any node references `y` or `z`.
    pub fn uses_yz(&self) -> bool {
        self.any(&mut |e| matches!(e, Expr::Y | Expr::Z(_)))
    }

    /// True when any node references `z`.
    pub fn uses_z(&self) -> bool {
        self.any(&mut |e| matches!(e, Expr::Z(_)))
    }

    fn any(&self, pred: &mut impl FnMut(&Expr) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        match self {
            Expr::Add(ts) | Expr::Mul(ts) => ts.iter().any(|t| t.any(pred)),
            Expr::Neg(a)
            | Expr::Abs(a)
            | Expr::Exp(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Tanh(a)
            | Expr::Powi(a, _) => a.any(pred),
            Expr::Min(a, b) | Expr::Max(a, b) => a.any(pred) || b.any(pred),
            _ => false,
        }
    }

    /// Symbolic partial derivative with respect to `x[i]`, defined on the
    /// polynomial subset (const, x, add, mul, neg, powi). Test functions for
    /// the viscosity checks are polynomials, so their gradient and Hessian
    /// trees come from here.
    pub fn differentiate(&self, i: usize) -> Result<Expr> {
        let d = match self {
            Expr::Const(_) | Expr::V(_) | Expr::Y | Expr::Z(_) => Expr::Const(0.0),
            Expr::X(j) => Expr::Const(if *j == i { 1.0 } else { 0.0 }),
            Expr::Add(ts) => Expr::Add(
                ts.iter()
                    .map(|t| t.differentiate(i))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Expr::Mul(ts) => {
                let mut terms = Vec::with_capacity(ts.len());
                for (k, t) in ts.iter().enumerate() {
                    let mut factors = ts.clone();
                    factors[k] = t.differentiate(i)?;
                    terms.push(Expr::Mul(factors));
                }
                Expr::Add(terms)
            }
            Expr::Neg(a) => Expr::Neg(Box::new(a.differentiate(i)?)),
            Expr::Powi(a, n) => {
                if *n == 0 {
                    Expr::Const(0.0)
                } else {
                    Expr::Mul(vec![
                        Expr::Const(*n as f64),
                        Expr::Powi(a.clone(), n - 1),
                        a.differentiate(i)?,
                    ])
                }
            }
            other => {
                return Err(Error::InvalidExpr {
                    slot: "differentiate".into(),
                    message: format!("{:?} node is not polynomial", op_name(other)),
                })
            }
        };
        Ok(d.simplified())
    }

    /// Light constant folding so derivative trees stay readable and cheap.
    fn simplified(self) -> Expr {
        match self {
            Expr::Add(ts) => {
                let ts: Vec<Expr> = ts
                    .into_iter()
                    .map(Expr::simplified)
                    .filter(|t| !matches!(t, Expr::Const(c) if *c == 0.0))
                    .collect();
                match ts.len() {
                    0 => Expr::Const(0.0),
                    1 => ts.into_iter().next().unwrap(),
                    _ => Expr::Add(ts),
                }
            }
            Expr::Mul(ts) => {
                let ts: Vec<Expr> = ts.into_iter().map(Expr::simplified).collect();
                if ts.iter().any(|t| matches!(t, Expr::Const(c) if *c == 0.0)) {
                    return Expr::Const(0.0);
                }
                let ts: Vec<Expr> = ts
                    .into_iter()
                    .filter(|t| !matches!(t, Expr::Const(c) if *c == 1.0))
                    .collect();
                match ts.len() {
                    0 => Expr::Const(1.0),
                    1 => ts.into_iter().next().unwrap(),
                    _ => Expr::Mul(ts),
                }
            }
            Expr::Neg(a) => match a.simplified() {
                Expr::Const(c) => Expr::Const(-c),
                other => Expr::Neg(Box::new(other)),
            },
            other => other,
        }
    }
}

fn op_name(e: &Expr) -> &'static str {
    match e {
        Expr::Const(_) => "const",
        Expr::X(_) => "x",
        Expr::V(_) => "v",
        Expr::Y => "y",
        Expr::Z(_) => "z",
        Expr::Add(_) => "add",
        Expr::Mul(_) => "mul",
        Expr::Neg(_) => "neg",
        Expr::Min(..) => "min",
        Expr::Max(..) => "max",
        Expr::Abs(_) => "abs",
        Expr::Exp(_) => "exp",
        Expr::Sin(_) => "sin",
        Expr::Cos(_) => "cos",
        Expr::Tanh(_) => "tanh",
        Expr::Powi(..) => "powi",
    }
}

#[derive(Serialize, Deserialize)]
struct Node {
    op: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    args: Vec<Node>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

fn to_node(e: &Expr) -> Node {
    let (op, args, value): (&str, Vec<&Expr>, Option<f64>) = match e {
        Expr::Const(c) => ("const", vec![], Some(*c)),
        Expr::X(i) => ("x", vec![], Some(*i as f64)),
        Expr::V(j) => ("v", vec![], Some(*j as f64)),
        Expr::Y => ("y", vec![], None),
        Expr::Z(j) => ("z", vec![], Some(*j as f64)),
        Expr::Add(ts) => ("add", ts.iter().collect(), None),
        Expr::Mul(ts) => ("mul", ts.iter().collect(), None),
        Expr::Neg(a) => ("neg", vec![a], None),
        Expr::Min(a, b) => ("min", vec![a, b], None),
        Expr::Max(a, b) => ("max", vec![a, b], None),
        Expr::Abs(a) => ("abs", vec![a], None),
        Expr::Exp(a) => ("exp", vec![a], None),
        Expr::Sin(a) => ("sin", vec![a], None),
        Expr::Cos(a) => ("cos", vec![a], None),
        Expr::Tanh(a) => ("tanh", vec![a], None),
        Expr::Powi(a, n) => ("powi", vec![a.as_ref()], Some(*n as f64)),
    };
    Node {
        op: op.to_string(),
        args: args.into_iter().map(to_node).collect(),
        value,
    }
}

fn from_node(n: &Node, path: &str) -> Result<Expr> {
    let schema = |message: String| Error::Schema {
        path: path.to_string(),
        message,
    };
    let index = || -> Result<usize> {
        let v = n
            .value
            .ok_or_else(|| schema(format!("`{}` requires an index in `value`", n.op)))?;
        if v.fract() != 0.0 || v < 0.0 {
            return Err(schema(format!("index {v} is not a nonnegative integer")));
        }
        Ok(v as usize)
    };
    let arity = |want: usize| -> Result<()> {
        if n.args.len() != want {
            Err(schema(format!(
                "`{}` takes {want} argument(s), got {}",
                n.op,
                n.args.len()
            )))
        } else {
            Ok(())
        }
    };
    let child = |k: usize| from_node(&n.args[k], &format!("{path}.args[{k}]"));

    Ok(match n.op.as_str() {
        "const" => Expr::Const(
            n.value
                .ok_or_else(|| schema("`const` requires `value`".into()))?,
        ),
        "x" => Expr::X(index()?),
        "v" => Expr::V(index()?),
        "y" => Expr::Y,
        "z" => Expr::Z(index()?),
        "add" | "mul" => {
            if n.args.is_empty() {
                return Err(schema(format!("`{}` requires at least one argument", n.op)));
            }
            let ts = (0..n.args.len()).map(child).collect::<Result<Vec<_>>>()?;
            if n.op == "add" {
                Expr::Add(ts)
            } else {
                Expr::Mul(ts)
            }
        }
        "neg" => {
            arity(1)?;
            Expr::Neg(Box::new(child(0)?))
        }
        "min" | "max" => {
            arity(2)?;
            let a = Box::new(child(0)?);
            let b = Box::new(child(1)?);
            if n.op == "min" {
                Expr::Min(a, b)
            } else {
                Expr::Max(a, b)
            }
        }
        "abs" => {
            arity(1)?;
            Expr::Abs(Box::new(child(0)?))
        }
        "exp" => {
            arity(1)?;
            Expr::Exp(Box::new(child(0)?))
        }
        "sin" => {
            arity(1)?;
            Expr::Sin(Box::new(child(0)?))
        }
        "cos" => {
            arity(1)?;
            Expr::Cos(Box::new(child(0)?))
        }
        "tanh" => {
            arity(1)?;
            Expr::Tanh(Box::new(child(0)?))
        }
        "powi" => {
            arity(1)?;
            let n_exp = index()?;
            if n_exp > u32::MAX as usize {
                return Err(schema("powi exponent too large".into()));
            }
            Expr::Powi(Box::new(child(0)?), n_exp as u32)
        }
        other => return Err(schema(format!("unknown op `{other}`"))),
    })
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_node(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let node = Node::deserialize(d)?;
        from_node(&node, "expr").map_err(|e| D::Error::custom(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx<'a>(x: &'a [f64], v: &'a [f64], y: f64, z: &'a [f64]) -> EvalCtx<'a> {
        EvalCtx { x, v, y, z }
    }

    #[test]
    fn evaluates_composites() {
        // f(x, y, z, v) = -2y + 1 + v[0]*x[0]
        let f = Expr::Add(vec![
            Expr::scale(-2.0, Expr::Y),
            Expr::Const(1.0),
            Expr::mul(Expr::V(0), Expr::X(0)),
        ]);
        let val = f.eval(&ctx(&[0.5], &[3.0], 2.0, &[]));
        assert_eq!(val, -4.0 + 1.0 + 1.5);
    }

    #[test]
    fn validation_rejects_yz_outside_drivers() {
        let rules = SlotRules {
            dim_x: 1,
            dim_v: Some(1),
            dim_z: None,
        };
        let bad = Expr::add(Expr::Y, Expr::X(0));
        assert!(matches!(
            bad.validate("b[0]", rules),
            Err(Error::InvalidExpr { .. })
        ));
        let bad_z = Expr::Z(0);
        assert!(bad_z.validate("g", rules).is_err());
    }

    #[test]
    fn validation_checks_index_ranges() {
        let rules = SlotRules {
            dim_x: 2,
            dim_v: Some(1),
            dim_z: Some(2),
        };
        assert!(Expr::X(1).validate("f", rules).is_ok());
        assert!(Expr::X(2).validate("f", rules).is_err());
        assert!(Expr::V(1).validate("f", rules).is_err());
        assert!(Expr::Z(1).validate("f", rules).is_ok());
    }

    #[test]
    fn differentiates_polynomials() {
        // d/dx0 (x0^3 + 2*x0*x1) = 3*x0^2 + 2*x1
        let p = Expr::Add(vec![
            Expr::Powi(Box::new(Expr::X(0)), 3),
            Expr::Mul(vec![Expr::Const(2.0), Expr::X(0), Expr::X(1)]),
        ]);
        let dp = p.differentiate(0).unwrap();
        let x = [1.5, -0.5];
        let expect = 3.0 * 1.5f64.powi(2) + 2.0 * (-0.5);
        assert!((dp.eval(&EvalCtx::state(&x)) - expect).abs() < 1e-14);
    }

    #[test]
    fn differentiate_rejects_nonpolynomial_nodes() {
        let e = Expr::Exp(Box::new(Expr::X(0)));
        assert!(e.differentiate(0).is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-10.0..10.0f64).prop_map(Expr::Const),
            (0usize..2).prop_map(Expr::X),
            (0usize..2).prop_map(Expr::V),
            Just(Expr::Y),
            (0usize..2).prop_map(Expr::Z),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 1..4).prop_map(Expr::Add),
                prop::collection::vec(inner.clone(), 1..4).prop_map(Expr::Mul),
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Min(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Max(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|e| Expr::Abs(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Exp(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Sin(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Cos(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Tanh(Box::new(e))),
                (inner, 0u32..4).prop_map(|(e, n)| Expr::Powi(Box::new(e), n)),
            ]
        })
    }

    // exp is excluded and constants kept small so values cannot overflow;
    // the point is totality (no NaN, no panic), not range.
    fn arb_tame_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0..3.0f64).prop_map(Expr::Const),
            (0usize..2).prop_map(Expr::X),
            (0usize..2).prop_map(Expr::V),
            Just(Expr::Y),
            (0usize..2).prop_map(Expr::Z),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 1..4).prop_map(Expr::Add),
                prop::collection::vec(inner.clone(), 1..4).prop_map(Expr::Mul),
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Min(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|e| Expr::Abs(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Sin(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Tanh(Box::new(e))),
                (inner, 0u32..4).prop_map(|(e, n)| Expr::Powi(Box::new(e), n)),
            ]
        })
    }

    proptest! {
        #[test]
        fn serde_round_trip(e in arb_expr()) {
            let json = serde_json::to_string(&e).unwrap();
            let back: Expr = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(e, back);
        }

        #[test]
        fn eval_is_total_on_bounded_boxes(e in arb_tame_expr(),
                                          x0 in -3.0..3.0f64, x1 in -3.0..3.0f64,
                                          y in -3.0..3.0f64) {
            let x = [x0, x1];
            let v = [0.5, -0.5];
            let z = [y, -y];
            let val = e.eval(&ctx(&x, &v, y, &z));
            prop_assert!(val.is_finite());
        }
    }
}
