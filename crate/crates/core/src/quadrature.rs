//! Symmetric quadrature rules on triangles (Dunavant).
//!
//! Points are barycentric triples; weights are normalized to sum to one, so
//! an integral over a physical triangle is `area * sum(w_q f(x_q))`.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub points: Vec<[T; 3]>,
    pub weights: Vec<T>,
    /// Highest total polynomial degree integrated exactly.
    pub order: usize,
}

impl<T: Real> QuadratureRule<T> {
    /// 3-point rule, exact for degree 2.
    pub fn order2() -> Self {
        let mut rule = Self::empty(2);
        rule.orbit3(1.0 / 3.0, 1.0 / 6.0);
        rule
    }

    /// 6-point rule, exact for degree 4. Used for assembly.
    pub fn order4() -> Self {
        let mut rule = Self::empty(4);
        rule.orbit3(0.223_381_589_678_011_47, 0.445_948_490_915_964_89);
        rule.orbit3(0.109_951_743_655_321_87, 0.091_576_213_509_770_743);
        rule
    }

    /// 12-point rule, exact for degree 6. Used for error norms.
    pub fn order6() -> Self {
        let mut rule = Self::empty(6);
        rule.orbit3(0.116_786_275_726_379_37, 0.249_286_745_170_910_42);
        rule.orbit3(0.050_844_906_370_206_817, 0.063_089_014_491_502_228);
        rule.orbit6(
            0.082_851_075_618_373_575,
            0.053_145_049_844_816_947,
            0.310_352_451_033_784_41,
        );
        rule
    }

    /// Lowest-order stored rule that is exact for `degree`.
    pub fn for_degree(degree: usize) -> Self {
        match degree {
            0..=2 => Self::order2(),
            3..=4 => Self::order4(),
            _ => Self::order6(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn empty(order: usize) -> Self {
        Self {
            points: Vec::new(),
            weights: Vec::new(),
            order,
        }
    }

    /// Points `(a, a, 1-2a)` and rotations.
    fn orbit3(&mut self, w: f64, a: f64) {
        let b = 1.0 - 2.0 * a;
        for p in [[a, a, b], [a, b, a], [b, a, a]] {
            self.push(w, p);
        }
    }

    /// Points `(a, b, 1-a-b)` and all six permutations.
    fn orbit6(&mut self, w: f64, a: f64, b: f64) {
        let c = 1.0 - a - b;
        for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
            self.push(w, p);
        }
    }

    fn push(&mut self, w: f64, p: [f64; 3]) {
        self.weights.push(T::lit(w));
        self.points.push(p.map(T::lit));
    }
}
