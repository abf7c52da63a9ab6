//! Space-time scalar fields: coefficients, sources, boundary and initial data.

use std::fmt;
use std::sync::Arc;

use crate::mesh::Point2;
use crate::scalar::Real;

/// A deterministic function `(x, t) -> value`.
pub trait Field<T>: Send + Sync {
    fn eval(&self, p: Point2<T>, t: T) -> T;

    /// `true` when the value never depends on `t`. Lets callers cache
    /// assembled operators across time steps.
    fn is_steady(&self) -> bool {
        false
    }
}

impl<T, F> Field<T> for F
where
    F: Fn(Point2<T>, T) -> T + Send + Sync,
{
    fn eval(&self, p: Point2<T>, t: T) -> T {
        self(p, t)
    }
}

/// Shared, type-erased field.
pub type ScalarField<T> = Arc<dyn Field<T>>;

/// Wraps a closure as a shared field.
pub fn field<T, F>(f: F) -> ScalarField<T>
where
    T: Real,
    F: Fn(Point2<T>, T) -> T + Send + Sync + 'static,
{
    Arc::new(f)
}

/// Constant field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant<T>(pub T);

impl<T: Real> Field<T> for Constant<T> {
    fn eval(&self, _: Point2<T>, _: T) -> T {
        self.0
    }

    fn is_steady(&self) -> bool {
        true
    }
}

pub fn constant<T: Real>(c: T) -> ScalarField<T> {
    Arc::new(Constant(c))
}

/// Time-independent field built from a function of position only.
pub struct Steady<F>(pub F);

impl<T, F> Field<T> for Steady<F>
where
    T: Real,
    F: Fn(Point2<T>) -> T + Send + Sync,
{
    fn eval(&self, p: Point2<T>, _: T) -> T {
        (self.0)(p)
    }

    fn is_steady(&self) -> bool {
        true
    }
}

impl<F> fmt::Debug for Steady<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Steady(..)")
    }
}

pub fn steady<T, F>(f: F) -> ScalarField<T>
where
    T: Real,
    F: Fn(Point2<T>) -> T + Send + Sync + 'static,
{
    Arc::new(Steady(f))
}

/// Pointwise arithmetic mean of a set of fields.
#[derive(Clone)]
pub struct MeanField<T> {
    members: Vec<ScalarField<T>>,
}

impl<T: Real> MeanField<T> {
    pub fn new(members: Vec<ScalarField<T>>) -> Self {
        assert!(!members.is_empty(), "mean of an empty set of fields");
        Self { members }
    }
}

impl<T: Real> Field<T> for MeanField<T> {
    fn eval(&self, p: Point2<T>, t: T) -> T {
        let sum: T = self.members.iter().map(|a| a.eval(p, t)).sum();
        sum / T::count(self.members.len())
    }

    fn is_steady(&self) -> bool {
        self.members.iter().all(|a| a.is_steady())
    }
}

/// Vector-valued counterpart used for exact gradients.
pub type VectorField<T> = Arc<dyn Fn(Point2<T>, T) -> [T; 2] + Send + Sync>;
