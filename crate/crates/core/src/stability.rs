//! Sampled estimates of the coercivity and mean-deviation bounds that
//! govern stability of the shared-matrix scheme, and grouping of ensembles
//! that violate them.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleProblem;
use crate::error::{Error, Result};
use crate::fem::FeSpace;
use crate::field::ScalarField;
use crate::mesh::Point2;
use crate::scalar::Real;

/// Space-time points at which coefficients are sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<T> {
    pub points: Vec<Point2<T>>,
    pub times: Vec<T>,
}

impl<T: Real> SamplingGrid<T> {
    pub fn new(points: Vec<Point2<T>>, times: Vec<T>) -> Result<Self> {
        if points.is_empty() || times.is_empty() {
            return Err(Error::Config("sampling grid needs at least one point and one time".into()));
        }
        Ok(Self { points, times })
    }

    /// Assembly quadrature points of `space` plus the mesh vertices, at `times`.
    pub fn for_space(space: &FeSpace<T>, times: Vec<T>) -> Result<Self> {
        let mut points = space.assembly_points();
        points.extend_from_slice(space.mesh().vertices());
        Self::new(points, times)
    }

    /// Grid matching the spatial discretization and `t_1..t_N` of `problem`.
    pub fn for_problem(problem: &EnsembleProblem<T>) -> Result<Self> {
        Self::for_space(&problem.space, problem.grid.step_times())
    }

    fn describe(&self, steady: bool) -> String {
        let times = if steady { 1 } else { self.times.len() };
        format!("{} points x {} times", self.points.len(), times)
    }
}

/// Estimated bounds for one group of coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `min(theta_members, theta_mean)`.
    pub theta: f64,
    pub theta_plus: f64,
    pub theta_minus: f64,
    pub satisfied: bool,
    pub margin: f64,
    /// Smallest sampled value of any member coefficient.
    pub theta_members: f64,
    /// Smallest sampled value of the mean coefficient.
    pub theta_mean: f64,
    pub sampling: String,
}

impl StabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "theta = {:.6}, theta_plus = {:.6}, theta_minus = {:.6}, margin = {:.6} ({})",
            self.theta,
            self.theta_plus,
            self.theta_minus,
            self.margin,
            if self.satisfied { "stable" } else { "violated" }
        )
    }
}

/// What to do when a realized ensemble fails the condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityPolicy {
    /// Return a stability error carrying the report.
    #[default]
    Refuse,
    /// Split into stable groups and run each separately.
    Partition,
}

/// Coefficient values `a_j(x_p, t_k)` stored member by member, time-major.
struct Samples<T> {
    values: Vec<Vec<T>>,
    npoints: usize,
    ntimes: usize,
    sampling: String,
}

impl<T: Real> Samples<T> {
    fn collect(members: &[ScalarField<T>], grid: &SamplingGrid<T>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("stability estimate needs at least one member".into()));
        }
        let steady = members.iter().all(|a| a.is_steady());
        let times = if steady { &grid.times[..1] } else { &grid.times[..] };
        let values = members
            .par_iter()
            .enumerate()
            .map(|(j, a)| {
                let v: Vec<T> = times
                    .iter()
                    .flat_map(|&t| grid.points.iter().map(move |&p| a.eval(p, t)))
                    .collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteSample { member: j });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            values,
            npoints: grid.points.len(),
            ntimes: times.len(),
            sampling: grid.describe(steady),
        })
    }

    fn len(&self) -> usize {
        self.npoints * self.ntimes
    }

    fn mean(&self, group: &[usize]) -> Vec<T> {
        let mut mean = vec![T::zero(); self.len()];
        for &j in group {
            for (m, &v) in mean.iter_mut().zip(&self.values[j]) {
                *m += v;
            }
        }
        let n = T::count(group.len());
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    fn min_value(&self, j: usize) -> T {
        self.values[j].iter().copied().fold(T::infinity(), T::min)
    }

    fn report(&self, group: &[usize]) -> StabilityReport {
        let mean = self.mean(group);
        let theta_members = group.iter().map(|&j| self.min_value(j)).fold(T::infinity(), T::min);
        let theta_mean = mean.iter().copied().fold(T::infinity(), T::min);
        let mut theta_plus = T::zero();
        let mut theta_minus = T::infinity();
        for &j in group {
            for k in 0..self.ntimes {
                let range = k * self.npoints..(k + 1) * self.npoints;
                let dev = self.values[j][range.clone()]
                    .iter()
                    .zip(&mean[range])
                    .map(|(&a, &m)| (a - m).abs())
                    .fold(T::zero(), T::max);
                theta_plus = theta_plus.max(dev);
                theta_minus = theta_minus.min(dev);
            }
        }
        let theta = theta_members.min(theta_mean);
        let margin = theta - theta_plus;
        StabilityReport {
            theta: theta.as_f64(),
            theta_plus: theta_plus.as_f64(),
            theta_minus: theta_minus.as_f64(),
            satisfied: margin > T::zero(),
            margin: margin.as_f64(),
            theta_members: theta_members.as_f64(),
            theta_mean: theta_mean.as_f64(),
            sampling: self.sampling.clone(),
        }
    }
}

/// Sampled `theta`, `theta_plus` and `theta_minus` for the coefficient set.
pub fn estimate_bounds<T: Real>(members: &[ScalarField<T>], grid: &SamplingGrid<T>) -> Result<StabilityReport> {
    let samples = Samples::collect(members, grid)?;
    let all: Vec<usize> = (0..members.len()).collect();
    Ok(samples.report(&all))
}

/// Report for the coefficients of `problem` on its own discretization.
pub fn estimate_for_problem<T: Real>(problem: &EnsembleProblem<T>) -> Result<StabilityReport> {
    let coeffs: Vec<_> = problem.members.iter().map(|m| m.coeff.clone()).collect();
    estimate_bounds(&coeffs, &SamplingGrid::for_problem(problem)?)
}

/// `theta > theta_plus`.
pub fn check_condition(report: &StabilityReport) -> bool {
    report.margin > 0.0
}

/// Greedy split into groups that each satisfy the condition.
///
/// Members are swept in order of their signed mean deviation from the
/// global mean; a new group is opened whenever adding the next member would
/// break the condition for the current one. Indices within a group are
/// ascending and groups appear in sweep order.
pub fn partition_ensemble<T: Real>(members: &[ScalarField<T>], grid: &SamplingGrid<T>) -> Result<Vec<Vec<usize>>> {
    let samples = Samples::collect(members, grid)?;
    for j in 0..members.len() {
        let min = samples.min_value(j);
        if min <= T::zero() {
            return Err(Error::Infeasible { member: j, min: min.as_f64() });
        }
    }
    let all: Vec<usize> = (0..members.len()).collect();
    let global = samples.mean(&all);
    let shift: Vec<T> = samples
        .values
        .iter()
        .map(|v| v.iter().zip(&global).map(|(&a, &m)| a - m).sum::<T>() / T::count(samples.len()))
        .collect();
    let mut order = all;
    order.sort_by(|&a, &b| shift[a].total_cmp_real(shift[b]).then(a.cmp(&b)));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for j in order {
        current.push(j);
        if current.len() > 1 && !samples.report(&current).satisfied {
            current.pop();
            groups.push(std::mem::take(&mut current));
            current.push(j);
        }
    }
    groups.push(current);
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

trait TotalCmp {
    fn total_cmp_real(self, other: Self) -> std::cmp::Ordering;
}

impl<T: Real> TotalCmp for T {
    fn total_cmp_real(self, other: T) -> std::cmp::Ordering {
        self.as_f64().total_cmp(&other.as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_space;
    use crate::field::{constant, field, steady};
    use crate::mesh::{Mesh, Rect};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn unit_grid(nx: usize, times: Vec<f64>) -> SamplingGrid<f64> {
        let mesh = Arc::new(Mesh::uniform(nx, nx, Rect::unit_square()).unwrap());
        SamplingGrid::for_space(&build_space(mesh, 2).unwrap(), times).unwrap()
    }

    fn constants(values: &[f64]) -> Vec<ScalarField<f64>> {
        values.iter().map(|&c| constant(c)).collect()
    }

    #[test]
    fn single_member_has_zero_deviation() {
        let grid = unit_grid(2, vec![0.5]);
        let r = estimate_bounds(&[steady(|p: Point2<f64>| 2.0 + p.x)], &grid).unwrap();
        assert_eq!((r.theta_plus, r.theta_minus), (0.0, 0.0));
        assert_eq!(r.theta, 2.0);
        assert!(r.satisfied && check_condition(&r));
    }

    #[test]
    fn two_constants_have_zero_margin() {
        let r = estimate_bounds(&constants(&[1.0, 3.0]), &unit_grid(2, vec![1.0])).unwrap();
        assert_eq!((r.theta, r.theta_plus, r.theta_minus, r.margin), (1.0, 1.0, 1.0, 0.0));
        assert!(!r.satisfied && !check_condition(&r));
        assert_eq!(r.theta_mean, 2.0);
    }

    #[test]
    fn manufactured_coefficients() {
        let eps = [0.6207, 0.1841, 0.2691];
        let members: Vec<_> = eps
            .iter()
            .map(|&e| field(move |p: Point2<f64>, t: f64| 1.0 + (1.0 + e) * t.sin() * (p.x * p.y).sin()))
            .collect();
        let times: Vec<f64> = (1..=10).map(|n| n as f64 / 10.0).collect();
        let r = estimate_bounds(&members, &unit_grid(4, times)).unwrap();
        let mean_eps = eps.iter().sum::<f64>() / 3.0;
        let spread = eps.iter().map(|e| (e - mean_eps).abs()).fold(0.0, f64::max);
        assert!((spread - 0.262733).abs() < 5e-7);
        assert_eq!(r.theta, 1.0);
        assert!((r.theta_plus - spread * 1f64.sin().powi(2)).abs() < 1e-12);
        assert!((r.theta_plus - 0.186034).abs() < 5e-7);
        assert!(r.satisfied);
        assert!(r.theta_minus > 0.0 && r.theta_minus <= r.theta_plus);
    }

    #[test]
    fn steady_members_sample_one_time() {
        let grid = unit_grid(1, vec![0.1, 0.2, 0.3]);
        let r = estimate_bounds(&constants(&[1.0, 1.5]), &grid).unwrap();
        assert!(r.sampling.ends_with("x 1 times"), "{}", r.sampling);
        let r = estimate_bounds(&[field(|_, t: f64| 1.0 + t), constant(1.0)], &grid).unwrap();
        assert!(r.sampling.ends_with("x 3 times"));
        assert!((r.theta_plus - 0.15).abs() < 1e-15);
        assert!((r.theta_minus - 0.05).abs() < 1e-15);
    }

    #[test]
    fn non_finite_coefficient_is_an_error() {
        let err = estimate_bounds(&[constant(1.0), constant(f64::NAN)], &unit_grid(1, vec![0.0])).unwrap_err();
        assert_eq!(err, Error::NonFiniteSample { member: 1 });
        assert!(SamplingGrid::<f64>::new(vec![], vec![0.0]).is_err());
    }

    #[test]
    fn report_json_fields() {
        let r = estimate_bounds(&constants(&[1.0, 3.0]), &unit_grid(1, vec![0.0])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["theta", "theta_plus", "theta_minus", "satisfied", "margin"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["satisfied"], false);
    }

    #[test]
    fn partitions_of_constant_ensembles() {
        let grid = unit_grid(1, vec![0.0]);
        assert_eq!(partition_ensemble(&constants(&[1.0, 3.0]), &grid).unwrap(), vec![vec![0], vec![1]]);
        assert_eq!(
            partition_ensemble(&constants(&[1.0, 1.1, 3.0, 3.1]), &grid).unwrap(),
            vec![vec![0, 1], vec![2, 3]]
        );
        assert_eq!(
            partition_ensemble(&constants(&[3.1, 1.0, 3.0, 1.1]), &grid).unwrap(),
            vec![vec![1, 3], vec![0, 2]]
        );
        assert_eq!(partition_ensemble(&constants(&[1.0, 1.2, 1.1]), &grid).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn partition_rejects_non_positive_member() {
        let err = partition_ensemble(&constants(&[1.0, 0.0]), &unit_grid(1, vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::Infeasible { member: 1, .. }));
    }

    fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in set_partitions(n - 1) {
            for k in 0..p.len() {
                let mut q = p.clone();
                q[k].push(n - 1);
                out.push(q);
            }
            let mut q = p;
            q.push(vec![n - 1]);
            out.push(q);
        }
        out
    }

    #[test]
    fn greedy_split_is_minimal_among_all_partitions() {
        let values = [1.0, 1.1, 3.0, 3.1];
        let members = constants(&values);
        let grid = unit_grid(1, vec![0.0]);
        let all = set_partitions(values.len());
        assert_eq!(all.len(), 15);
        let stable = |p: &Vec<Vec<usize>>| {
            p.iter().all(|g| {
                let sub: Vec<_> = g.iter().map(|&j| members[j].clone()).collect();
                estimate_bounds(&sub, &grid).unwrap().satisfied
            })
        };
        let fewest = all.iter().filter(|p| stable(p)).map(|p| p.len()).min().unwrap();
        let greedy = partition_ensemble(&members, &grid).unwrap();
        assert!(stable(&greedy));
        assert_eq!(greedy.len(), fewest);
    }

    proptest! {
        #[test]
        fn partition_is_sound(values in prop::collection::vec((0.2f64..4.0, -0.5f64..0.5), 1..12)) {
            let members: Vec<ScalarField<f64>> = values
                .iter()
                .map(|&(c, s)| field(move |p: Point2<f64>, t: f64| c + 0.1 * s * (p.y + t)))
                .collect();
            let grid = unit_grid(1, vec![0.5, 1.0]);
            let groups = partition_ensemble(&members, &grid).unwrap();
            let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..members.len()).collect::<Vec<_>>());
            for g in &groups {
                let sub: Vec<_> = g.iter().map(|&j| members[j].clone()).collect();
                let r = estimate_bounds(&sub, &grid).unwrap();
                prop_assert!(check_condition(&r));
                prop_assert!(r.theta_plus >= r.theta_minus && r.theta_minus >= 0.0);
            }
            let again = partition_ensemble(&members, &grid).unwrap();
            prop_assert_eq!(groups, again);
        }

        #[test]
        fn adding_a_far_member_raises_theta_plus(
            values in prop::collection::vec(0.5f64..3.0, 1..8),
            extra in 0.5f64..3.0,
        ) {
            let grid = unit_grid(1, vec![0.0]);
            let before = estimate_bounds(&constants(&values), &grid).unwrap();
            let mut grown = values.clone();
            grown.push(extra);
            let new_mean = grown.iter().sum::<f64>() / grown.len() as f64;
            prop_assume!((extra - new_mean).abs() > before.theta_plus);
            let after = estimate_bounds(&constants(&grown), &grid).unwrap();
            prop_assert!(after.theta_plus >= before.theta_plus);
        }

        #[test]
        fn singletons_always_pass(c in 1e-3f64..10.0) {
            let r = estimate_bounds(&constants(&[c]), &unit_grid(1, vec![0.0])).unwrap();
            prop_assert!(r.satisfied);
        }
    }
}
