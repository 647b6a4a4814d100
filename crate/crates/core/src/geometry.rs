//! Poincaré-ball operations on `f64` coordinates.
//!
//! The ball has radius `r = 1/√γ`. Möbius addition is
//!
//! ```text
//! x ⊕ y = ((1 + 2γ⟨x,y⟩ + γ‖y‖²) x + (1 − γ‖x‖²) y) / (1 + 2γ⟨x,y⟩ + γ²‖x‖²‖y‖²)
//! ```
//!
//! and the geodesic distance is `d(x, y) = 2r · atanh(‖(−x) ⊕ y‖ / r)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Which scaling goes inside the `tanh` of the exponential map at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpMapVariant {
    /// `tanh((1/√γ) · λ‖v‖/2) · v / (√γ‖v‖)`.
    #[default]
    Paper,
    /// `tanh(√γ · λ‖v‖/2) · v / (√γ‖v‖)`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBallConfig {
    gamma: f64,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default = "default_lambda")]
    lambda_scale: f64,
    #[serde(default)]
    exp_map_variant: ExpMapVariant,
}

fn default_lambda() -> f64 {
    2.0
}

/// Curvature and numerical margins of the ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBallConfig", into = "RawBallConfig")]
pub struct BallConfig {
    gamma: f64,
    radius: f64,
    eps: f64,
    lambda_scale: f64,
    exp_map_variant: ExpMapVariant,
}

impl TryFrom<RawBallConfig> for BallConfig {
    type Error = Error;

    fn try_from(raw: RawBallConfig) -> Result<Self> {
        let cfg = BallConfig::new(raw.gamma)?
            .with_lambda_scale(raw.lambda_scale)?
            .with_exp_map_variant(raw.exp_map_variant);
        match raw.eps {
            Some(eps) => cfg.with_eps(eps),
            None => Ok(cfg),
        }
    }
}

impl From<BallConfig> for RawBallConfig {
    fn from(cfg: BallConfig) -> Self {
        RawBallConfig {
            gamma: cfg.gamma,
            eps: Some(cfg.eps),
            lambda_scale: cfg.lambda_scale,
            exp_map_variant: cfg.exp_map_variant,
        }
    }
}

impl Default for BallConfig {
    fn default() -> Self {
        Self::new(2e-5).expect("default curvature is valid")
    }
}

impl BallConfig {
    /// Ball with curvature magnitude `gamma`, `λ = 2`, margin `1e-5·r`.
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        let radius = 1.0 / gamma.sqrt();
        Ok(Self {
            gamma,
            radius,
            eps: 1e-5 * radius,
            lambda_scale: 2.0,
            exp_map_variant: ExpMapVariant::Paper,
        })
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < self.radius) {
            return Err(Error::InvalidConfig(format!(
                "eps must lie in (0, {}), got {eps}",
                self.radius
            )));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn with_lambda_scale(mut self, lambda_scale: f64) -> Result<Self> {
        if !(lambda_scale.is_finite() && lambda_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_scale must be positive, got {lambda_scale}"
            )));
        }
        self.lambda_scale = lambda_scale;
        Ok(self)
    }

    pub fn with_exp_map_variant(mut self, variant: ExpMapVariant) -> Self {
        self.exp_map_variant = variant;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn lambda_scale(&self) -> f64 {
        self.lambda_scale
    }

    pub fn exp_map_variant(&self) -> ExpMapVariant {
        self.exp_map_variant
    }
}

/// A point strictly inside the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
}

impl BallPoint {
    pub fn new(coords: Vec<f64>, cfg: &BallConfig) -> Result<Self> {
        check_finite(&coords, "ball point")?;
        let norm = norm(&coords);
        if norm >= cfg.radius {
            return Err(Error::OutsideBall(norm / cfg.radius));
        }
        Ok(Self { coords })
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            coords: vec![0.0; dim],
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn negated(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn mobius_raw(x: &[f64], y: &[f64], gamma: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let cx = 1.0 + 2.0 * gamma * xy + gamma * y2;
    let cy = 1.0 - gamma * x2;
    let den = 1.0 + 2.0 * gamma * xy + gamma * gamma * x2 * y2;
    x.iter().zip(y).map(|(&a, &b)| (cx * a + cy * b) / den).collect()
}

/// Möbius addition `a ⊕ b`. A result that rounds onto or past the boundary is
/// pulled back to radius `r − eps`.
pub fn mobius_add(a: &BallPoint, b: &BallPoint, cfg: &BallConfig) -> Result<BallPoint> {
    check_dims(&a.coords, &b.coords)?;
    check_finite(&a.coords, "mobius_add lhs")?;
    check_finite(&b.coords, "mobius_add rhs")?;
    let sum = mobius_raw(&a.coords, &b.coords, cfg.gamma);
    check_finite(&sum, "mobius_add result")?;
    if norm(&sum) >= cfg.radius {
        return Ok(project_to_ball(&sum, cfg));
    }
    Ok(BallPoint { coords: sum })
}

/// Geodesic distance `2r · atanh(‖(−a) ⊕ b‖ / r)`.
pub fn hyperbolic_distance(a: &BallPoint, b: &BallPoint, cfg: &BallConfig) -> Result<f64> {
    check_dims(&a.coords, &b.coords)?;
    distance_coords(&a.coords, &b.coords, cfg)
}

pub(crate) fn distance_coords(a: &[f64], b: &[f64], cfg: &BallConfig) -> Result<f64> {
    check_finite(a, "distance lhs")?;
    check_finite(b, "distance rhs")?;
    if a == b {
        return Ok(0.0);
    }
    let neg_a: Vec<f64> = a.iter().map(|v| -v).collect();
    let m = mobius_raw(&neg_a, b, cfg.gamma);
    let arg = norm(&m) / cfg.radius;
    if !(arg < 1.0) {
        return Err(Error::OutsideBall(arg));
    }
    Ok(2.0 * cfg.radius * arg.atanh())
}

/// Exponential map at the origin. The zero vector maps to the origin.
pub fn exp_map(v: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
    check_finite(v, "exp_map input")?;
    let n = norm(v);
    if n == 0.0 {
        return Ok(BallPoint::origin(v.len()));
    }
    let sqrt_gamma = cfg.gamma.sqrt();
    let inner = match cfg.exp_map_variant {
        ExpMapVariant::Paper => (1.0 / sqrt_gamma) * (cfg.lambda_scale * n / 2.0),
        ExpMapVariant::Standard => sqrt_gamma * (cfg.lambda_scale * n / 2.0),
    };
    let factor = inner.tanh() / (sqrt_gamma * n);
    let mapped: Vec<f64> = v.iter().map(|&x| factor * x).collect();
    // q ⊕ y with q = 0 is y itself.
    let shifted = mobius_raw(&vec![0.0; v.len()], &mapped, cfg.gamma);
    Ok(project_to_ball(&shifted, cfg))
}

/// Rescales `v` onto radius `r − eps` when it lies beyond it.
pub fn project_to_ball(v: &[f64], cfg: &BallConfig) -> BallPoint {
    debug_assert!(v.iter().all(|x| x.is_finite()));
    let limit = cfg.radius - cfg.eps;
    let n = norm(v);
    if n <= limit {
        return BallPoint { coords: v.to_vec() };
    }
    let s = limit / n;
    BallPoint {
        coords: v.iter().map(|&x| x * s).collect(),
    }
}

/// Coordinate mean of the points, projected into the ball.
pub fn hyperbolic_mean(points: &[BallPoint], cfg: &BallConfig) -> Result<BallPoint> {
    let first = points
        .first()
        .ok_or_else(|| Error::Empty("hyperbolic_mean of no points".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for p in points {
        check_dims(&acc, &p.coords)?;
        acc.iter_mut().zip(&p.coords).for_each(|(a, &x)| *a += x);
    }
    let inv = 1.0 / points.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    check_finite(&acc, "hyperbolic_mean")?;
    Ok(project_to_ball(&acc, cfg))
}

/// Differentiable `a ⊕ b` for one-dimensional tape variables of equal length.
pub fn mobius_add_on_tape(tape: &mut Tape, a: Var, b: Var, cfg: &BallConfig) -> Result<Var> {
    let n = tape.shape(a).iter().product();
    let g = cfg.gamma;
    let xy = tape.dot(a, b)?;
    let x2 = tape.dot(a, a)?;
    let y2 = tape.dot(b, b)?;
    let two_xy = tape.scale(xy, 2.0 * g);
    let g_y2 = tape.scale(y2, g);
    let cx = tape.add(two_xy, g_y2)?;
    let cx = tape.add_const(cx, 1.0);
    let g_x2 = tape.scale(x2, -g);
    let cy = tape.add_const(g_x2, 1.0);
    let x2y2 = tape.mul(x2, y2)?;
    let x2y2 = tape.scale(x2y2, g * g);
    let den = tape.add(two_xy, x2y2)?;
    let den = tape.add_const(den, 1.0);
    let cx = tape.broadcast(cx, n)?;
    let cy = tape.broadcast(cy, n)?;
    let den = tape.broadcast(den, n)?;
    let ta = tape.mul(cx, a)?;
    let tb = tape.mul(cy, b)?;
    let num = tape.add(ta, tb)?;
    tape.div(num, den)
}

/// Differentiable geodesic distance between two tape variables.
pub fn distance_on_tape(tape: &mut Tape, a: Var, b: Var, cfg: &BallConfig) -> Result<Var> {
    let neg_a = tape.neg(a);
    let m = mobius_add_on_tape(tape, neg_a, b, cfg)?;
    let sq = tape.dot(m, m)?;
    let len = tape.sqrt(sq);
    let arg = tape.scale(len, 1.0 / cfg.radius);
    let value = tape.value(arg).item();
    if !(value < 1.0) {
        return Err(Error::OutsideBall(value));
    }
    let at = tape.atanh(arg);
    Ok(tape.scale(at, 2.0 * cfg.radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn unit() -> BallConfig {
        BallConfig::new(1.0).unwrap()
    }

    fn pt(v: &[f64]) -> BallPoint {
        BallPoint::new(v.to_vec(), &unit()).unwrap()
    }

    #[test]
    fn radius_is_inverse_sqrt_gamma() {
        let cfg = BallConfig::new(2e-5).unwrap();
        assert_eq!(cfg.radius(), 1.0 / 2e-5f64.sqrt());
        assert_eq!(cfg.eps(), 1e-5 * cfg.radius());
        assert_eq!(cfg.lambda_scale(), 2.0);
        assert!(BallConfig::new(0.0).is_err());
        assert!(BallConfig::new(-1.0).is_err());
        assert!(unit().with_eps(1.0).is_err());
        assert!(unit().with_lambda_scale(0.0).is_err());
    }

    #[test]
    fn ball_config_serde_round_trip() {
        let cfg = BallConfig::new(0.5)
            .unwrap()
            .with_exp_map_variant(ExpMapVariant::Standard);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: BallConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<BallConfig>(r#"{"gamma": -1}"#).is_err());
        assert!(serde_json::from_str::<BallConfig>(r#"{"gamma": 1, "radius": 3}"#).is_err());
    }

    #[test]
    fn mobius_examples() {
        let cfg = unit();
        let v = pt(&[0.2, -0.4, 0.1]);
        assert_eq!(mobius_add(&BallPoint::origin(3), &v, &cfg).unwrap(), v);
        let inv = mobius_add(&v, &v.negated(), &cfg).unwrap();
        assert!(inv.norm() < 1e-15);
        let s = mobius_add(&pt(&[0.3]), &pt(&[0.4]), &cfg).unwrap();
        assert!((s.coords()[0] - 0.625).abs() < 1e-15);
    }

    #[test]
    fn mobius_rejects_mismatched_or_non_finite() {
        let cfg = unit();
        assert!(matches!(
            mobius_add(&pt(&[0.1]), &pt(&[0.1, 0.2]), &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = BallPoint {
            coords: vec![f64::NAN],
        };
        assert!(matches!(mobius_add(&bad, &pt(&[0.1]), &cfg), Err(Error::NonFinite(_))));
        assert!(BallPoint::new(vec![1.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn distance_examples() {
        let cfg = unit();
        let z = pt(&[0.3, 0.1]);
        assert_eq!(hyperbolic_distance(&z, &z, &cfg).unwrap(), 0.0);
        let d = hyperbolic_distance(&pt(&[0.0]), &pt(&[0.5]), &cfg).unwrap();
        assert!((d - 1.098_612_288_668_109_6).abs() < 1e-12);
        let d = hyperbolic_distance(&pt(&[0.3]), &pt(&[0.4]), &cfg).unwrap();
        assert!((d - 0.228_258_651_980_980_22).abs() < 1e-12, "{d}");
    }

    #[test]
    fn distance_errors_on_boundary_points() {
        let cfg = unit();
        let a = BallPoint { coords: vec![1.0] };
        let b = BallPoint { coords: vec![-0.5] };
        assert!(matches!(hyperbolic_distance(&a, &b, &cfg), Err(Error::OutsideBall(_))));
    }

    #[test]
    fn exp_map_examples() {
        let cfg = unit();
        assert_eq!(exp_map(&[0.0, 0.0], &cfg).unwrap(), BallPoint::origin(2));
        let p = exp_map(&[1.0, 0.0], &cfg).unwrap();
        assert!((p.coords()[0] - 1f64.tanh()).abs() < 1e-15);
        assert_eq!(p.coords()[1], 0.0);
        assert!(exp_map(&[f64::INFINITY], &cfg).is_err());
    }

    #[test]
    fn exp_map_variants_differ_away_from_unit_curvature() {
        let paper = BallConfig::new(0.25).unwrap();
        let standard = paper.with_exp_map_variant(ExpMapVariant::Standard);
        let v = [0.3, 0.4];
        let a = exp_map(&v, &paper).unwrap();
        let b = exp_map(&v, &standard).unwrap();
        // r = 2; Paper variant: tanh(2 · 0.5) · v/(0.5 · 0.5); Standard variant: tanh(0.5 · 0.5) · ...
        assert!((a.norm() - 2.0 * 1f64.tanh()).abs() < 1e-12);
        assert!((b.norm() - 2.0 * 0.25f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn exp_map_saturates_inside_the_margin_at_paper_curvature() {
        let cfg = BallConfig::default();
        let p = exp_map(&[1.0, 2.0, -3.0], &cfg).unwrap();
        assert!(p.norm() < cfg.radius());
        assert!((p.norm() - (cfg.radius() - cfg.eps())).abs() < 1e-9);
    }

    #[test]
    fn projection_examples() {
        let cfg = unit();
        assert_eq!(project_to_ball(&[0.3, 0.2], &cfg).coords(), &[0.3, 0.2]);
        assert_eq!(project_to_ball(&[2.0, 0.0], &cfg).coords(), &[1.0 - 1e-5, 0.0]);
        assert_eq!(project_to_ball(&[0.0, 0.0], &cfg).coords(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_examples() {
        let cfg = unit();
        let p = pt(&[0.1, -0.2]);
        assert_eq!(hyperbolic_mean(std::slice::from_ref(&p), &cfg).unwrap(), p);
        let m = hyperbolic_mean(&[p.clone(), p.negated()], &cfg).unwrap();
        assert_eq!(m.coords(), &[0.0, 0.0]);
        let m = hyperbolic_mean(&[pt(&[0.2, 0.0]), pt(&[0.4, 0.0])], &cfg).unwrap();
        assert!((m.coords()[0] - 0.3).abs() < 1e-15);
        assert!(matches!(hyperbolic_mean(&[], &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn tape_distance_matches_direct_evaluation() {
        let cfg = BallConfig::new(0.7).unwrap();
        let a = [0.2, -0.5, 0.1];
        let b = [-0.3, 0.2, 0.6];
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::vector(a.to_vec()));
        let vb = tape.constant(Tensor::vector(b.to_vec()));
        let d = distance_on_tape(&mut tape, va, vb, &cfg).unwrap();
        let direct = distance_coords(&a, &b, &cfg).unwrap();
        assert!((tape.value(d).item() - direct).abs() < 1e-12);
    }

    fn ball_vec(dim: usize, max_norm: f64) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim).prop_map(move |v| {
            let n = norm(&v);
            if n > max_norm {
                v.iter().map(|x| x * max_norm / n).collect()
            } else {
                v
            }
        })
    }

    proptest! {
        #[test]
        fn left_identity_and_inverse(v in (1usize..=8).prop_flat_map(|d| ball_vec(d, 0.9))) {
            let cfg = unit();
            let p = BallPoint::new(v.clone(), &cfg).unwrap();
            let id = mobius_add(&BallPoint::origin(v.len()), &p, &cfg).unwrap();
            for (x, y) in id.coords().iter().zip(&v) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!(mobius_add(&p, &p.negated(), &cfg).unwrap().norm() <= 1e-10);
        }

        #[test]
        fn distance_is_symmetric(
            (a, b) in (1usize..=8).prop_flat_map(|d| (ball_vec(d, 0.95), ball_vec(d, 0.95)))
        ) {
            let cfg = unit();
            let dab = distance_coords(&a, &b, &cfg).unwrap();
            let dba = distance_coords(&b, &a, &cfg).unwrap();
            prop_assert!((dab - dba).abs() <= 1e-10);
            prop_assert!(dab >= 0.0);
        }

        #[test]
        fn exp_map_stays_inside(v in prop::collection::vec(-1e6f64..1e6, 1..16), gamma in 1e-6f64..10.0) {
            let cfg = BallConfig::new(gamma).unwrap();
            prop_assert!(exp_map(&v, &cfg).unwrap().norm() < cfg.radius());
            let std = cfg.with_exp_map_variant(ExpMapVariant::Standard);
            prop_assert!(exp_map(&v, &std).unwrap().norm() < cfg.radius());
        }
    }
}
