//! Quadrature rules on the reference triangle {(x,y) : x,y >= 0, x+y <= 1}.
//!
//! Two rules cover every integral in the solver: a 6-point degree-4 rule
//! for piecewise-polynomial integrands (P1 gradients, RT0 fluxes) and a
//! 16-point degree-7 rule for anything containing the Coulombic kernel or
//! the sinh/cosh/arsinh nonlinearity. Both have strictly positive weights;
//! that matters because the nonlinear duality term is pointwise nonnegative
//! and the reported bounds must not go negative through quadrature alone.

/// A quadrature point in reference coordinates with its weight.
/// Weights sum to 1/2, the area of the reference triangle.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

/// Polynomial degree a rule integrates exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// 6-point symmetric rule, exact through total degree 4.
    Degree4,
    /// 16-point conical-product rule, exact through total degree 7.
    Degree7,
}

// Two symmetric orbits; barycentric generator and weight per point
// (weights in unit-sum normalization, scaled by 1/2 below).
const D4_A1: f64 = 0.816_847_572_980_459;
const D4_W1: f64 = 0.109_951_743_655_322;
const D4_A2: f64 = 0.108_103_018_168_070;
const D4_W2: f64 = 0.223_381_589_678_011;

/// Gauss-Legendre 4-point nodes/weights on [0,1].
const GL4_X: [f64; 4] = [
    0.069_431_844_202_973_71,
    0.330_009_478_207_571_87,
    0.669_990_521_792_428_13,
    0.930_568_155_797_026_23,
];
const GL4_W: [f64; 4] = [
    0.173_927_422_568_726_84,
    0.326_072_577_431_273_10,
    0.326_072_577_431_273_10,
    0.173_927_422_568_726_84,
];

/// Gauss-Jacobi 4-point nodes/weights on [0,1] for the weight (1-t).
const GJ4_X: [f64; 4] = [
    0.057_104_196_114_517_75,
    0.276_843_013_638_123_86,
    0.583_590_432_368_916_72,
    0.860_240_135_656_219_26,
];
const GJ4_W: [f64; 4] = [
    0.135_506_913_431_488_10,
    0.203_464_568_010_271_52,
    0.129_847_547_608_232_47,
    0.031_180_970_950_008_11,
];

fn degree4_points() -> Vec<QuadPoint> {
    let mut pts = Vec::with_capacity(6);
    for &(a, w) in &[(D4_A1, D4_W1), (D4_A2, D4_W2)] {
        let b = (1.0 - a) / 2.0;
        // barycentric (l0,l1,l2) with vertices (0,0),(1,0),(0,1): x=l1, y=l2
        for bary in [(a, b, b), (b, a, b), (b, b, a)] {
            pts.push(QuadPoint {
                x: bary.1,
                y: bary.2,
                w: w * 0.5,
            });
        }
    }
    pts
}

fn degree7_points() -> Vec<QuadPoint> {
    // Duffy-type map x = xi*(1-eta), y = eta turns the triangle integral into
    // int_0^1 int_0^1 f(xi(1-eta), eta) (1-eta) dxi deta; the (1-eta) factor
    // is absorbed into the Jacobi weight, so all 16 weights stay positive.
    let mut pts = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            pts.push(QuadPoint {
                x: GL4_X[i] * (1.0 - GJ4_X[j]),
                y: GJ4_X[j],
                w: GL4_W[i] * GJ4_W[j],
            });
        }
    }
    pts
}

/// Points of the requested rule on the reference triangle.
pub fn points(rule: Rule) -> Vec<QuadPoint> {
    match rule {
        Rule::Degree4 => degree4_points(),
        Rule::Degree7 => degree7_points(),
    }
}

/// Integrates `f` over the physical triangle (p0,p1,p2).
/// `f` receives physical coordinates; the factor 2*area maps the
/// reference weights (which sum to 1/2) onto the element.
pub fn integrate<F: FnMut(f64, f64) -> f64>(
    rule: Rule,
    p0: [f64; 2],
    p1: [f64; 2],
    p2: [f64; 2],
    mut f: F,
) -> f64 {
    let jac = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    let mut acc = 0.0;
    for q in points(rule) {
        let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
        let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
        acc += q.w * f(x, y);
    }
    acc * jac.abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monomial_exact(a: u32, b: u32) -> f64 {
        // int_T x^a y^b over the reference triangle = a! b! / (a+b+2)!
        let fact = |n: u32| (1..=n as u64).product::<u64>() as f64;
        fact(a) * fact(b) / fact(a + b + 2)
    }

    fn check_rule(rule: Rule, max_deg: u32) {
        for a in 0..=max_deg {
            for b in 0..=(max_deg - a) {
                let approx: f64 = points(rule)
                    .iter()
                    .map(|q| q.w * q.x.powi(a as i32) * q.y.powi(b as i32))
                    .sum();
                let exact = monomial_exact(a, b);
                assert!(
                    (approx - exact).abs() <= 1e-14 * exact.max(1.0),
                    "rule {:?} fails on x^{} y^{}: {} vs {}",
                    rule,
                    a,
                    b,
                    approx,
                    exact
                );
            }
        }
    }

    #[test]
    fn degree4_exact_on_monomials() {
        check_rule(Rule::Degree4, 4);
    }

    #[test]
    fn degree7_exact_on_monomials() {
        check_rule(Rule::Degree7, 7);
    }

    #[test]
    fn degree7_not_exact_at_degree8() {
        let approx: f64 = points(Rule::Degree7)
            .iter()
            .map(|q| q.w * q.x.powi(8))
            .sum();
        let exact = monomial_exact(8, 0);
        assert!((approx - exact).abs() > 1e-9 * exact);
    }

    #[test]
    fn weights_positive_and_sum_to_half() {
        for rule in [Rule::Degree4, Rule::Degree7] {
            let pts = points(rule);
            assert!(pts.iter().all(|q| q.w > 0.0));
            let total: f64 = pts.iter().map(|q| q.w).sum();
            assert!((total - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn physical_triangle_area_and_affine_invariance() {
        // integral of 1 over an arbitrary triangle is its area
        let p0: [f64; 2] = [1.0, 2.0];
        let p1: [f64; 2] = [4.0, 2.5];
        let p2: [f64; 2] = [2.0, 5.0];
        let area: f64 = 0.5
            * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])).abs();
        let got = integrate(Rule::Degree4, p0, p1, p2, |_, _| 1.0);
        assert!((got - area).abs() < 1e-13 * area);
        // linear function integrates to area * value at centroid
        let cx = (p0[0] + p1[0] + p2[0]) / 3.0;
        let cy = (p0[1] + p1[1] + p2[1]) / 3.0;
        let lin = integrate(Rule::Degree7, p0, p1, p2, |x, y| 3.0 * x - 2.0 * y + 1.0);
        assert!((lin - area * (3.0 * cx - 2.0 * cy + 1.0)).abs() < 1e-12 * area);
    }
}
