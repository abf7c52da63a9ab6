//! Reproducible studies: manufactured-solution convergence, ensemble
//! Monte Carlo against per-sample backward Euler, and defaults shared by the
//! command-line front end and the acceptance tests.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::ensemble::{run, ErrorAccumulator, EnsembleMember, EnsembleProblem, Scheme, SolveStats, TimeGrid};
use crate::error::{Error, Result};
use crate::fem::{build_space, energy_norm};
use crate::field::{constant, field, ScalarField, VectorField};
use crate::mesh::{BoundaryTag, Mesh, Point2, Rect};
use crate::scalar::Real;
use crate::stability::{estimate_for_problem, StabilityReport};
use crate::stochastic::{block_statistics, draw_replica, qoi_integral, simulate, EmcConfig, Histogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDefaults {
    pub degree: usize,
    pub levels: usize,
    pub epsilons: Vec<f64>,
    pub final_time: f64,
    pub nx0: usize,
    pub dt0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmcDefaults {
    pub samples: usize,
    pub nx: usize,
    pub dt: f64,
    pub final_time: f64,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDefaults {
    pub sample_counts: Vec<usize>,
    pub benchmark: usize,
    pub replicas: usize,
    pub nx: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub table_l2_rel: f64,
    pub table_h1_rel: f64,
    pub scheme_gap_rel: f64,
    pub rate_l2: [f64; 2],
    pub rate_h1_final: [f64; 2],
    pub energy_growth: f64,
    pub mc_slope: [f64; 2],
    pub emc_femc_gap: f64,
}

/// Contents of the bundled `defaults.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub version: u32,
    pub convergence: ConvergenceDefaults,
    pub emc: EmcDefaults,
    pub rate: RateDefaults,
    pub tolerances: Tolerances,
}

impl Defaults {
    pub fn get() -> &'static Defaults {
        static DEFAULTS: OnceLock<Defaults> = OnceLock::new();
        DEFAULTS.get_or_init(|| serde_json::from_str(include_str!("../defaults.json")).expect("bundled defaults parse"))
    }

    /// EMC configuration with the bundled mesh, step and sample count.
    pub fn emc_config(&self, seed: u64) -> EmcConfig {
        EmcConfig {
            samples: self.emc.samples,
            nx: self.emc.nx,
            dt: self.emc.dt,
            final_time: self.emc.final_time,
            degree: self.emc.degree,
            seed,
            ..EmcConfig::default()
        }
    }

    /// Template for the sample-count study.
    pub fn rate_config(&self, seed: u64) -> EmcConfig {
        EmcConfig {
            nx: self.rate.nx,
            dt: self.rate.dt,
            ..self.emc_config(seed)
        }
    }
}

/// Smooth solution `u = (1+eps)(sin 2pi x sin 2pi y + sin 4pi t)` with
/// coefficient `a = 1 + (1+eps) sin t sin(xy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedCase {
    pub epsilon: f64,
}

impl ManufacturedCase {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon }
    }

    fn scale<T: Real>(&self) -> T {
        T::lit(1.0 + self.epsilon)
    }

    pub fn coeff<T: Real>(&self) -> ScalarField<T> {
        let s = self.scale::<T>();
        field(move |p: Point2<T>, t: T| T::one() + s * t.sin() * (p.x * p.y).sin())
    }

    pub fn exact<T: Real>(&self) -> ScalarField<T> {
        let (s, k) = (self.scale::<T>(), T::lit(2.0 * PI));
        field(move |p: Point2<T>, t: T| s * ((k * p.x).sin() * (k * p.y).sin() + ((k + k) * t).sin()))
    }

    pub fn gradient<T: Real>(&self) -> VectorField<T> {
        let (s, k) = (self.scale::<T>(), T::lit(2.0 * PI));
        Arc::new(move |p: Point2<T>, _t: T| {
            [
                s * k * (k * p.x).cos() * (k * p.y).sin(),
                s * k * (k * p.x).sin() * (k * p.y).cos(),
            ]
        })
    }

    /// `f = u_t - a_x u_x - a_y u_y - a (u_xx + u_yy)`.
    pub fn source<T: Real>(&self) -> ScalarField<T> {
        let (s, k) = (self.scale::<T>(), T::lit(2.0 * PI));
        field(move |p: Point2<T>, t: T| {
            let (sx, cx, sy, cy) = ((k * p.x).sin(), (k * p.x).cos(), (k * p.y).sin(), (k * p.y).cos());
            let u_t = s * (k + k) * ((k + k) * t).cos();
            let (u_x, u_y) = (s * k * cx * sy, s * k * sx * cy);
            let lap = -(s * T::lit(2.0) * k * k * sx * sy);
            let (st, xy) = (t.sin(), p.x * p.y);
            let a = T::one() + s * st * xy.sin();
            let (a_x, a_y) = (s * st * p.y * xy.cos(), s * st * p.x * xy.cos());
            u_t - a_x * u_x - a_y * u_y - a * lap
        })
    }

    pub fn member<T: Real>(&self) -> EnsembleMember<T> {
        EnsembleMember {
            coeff: self.coeff(),
            source: self.source(),
            boundary: self.exact(),
            initial: self.exact(),
        }
    }
}

/// Settings of a refinement study on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub degree: usize,
    pub levels: usize,
    pub epsilons: Vec<f64>,
    pub scheme: Scheme,
    pub final_time: f64,
    /// Level `k` uses `nx0 * 2^(k-1)` cells per side and step `dt0 / 2^(k-1)`.
    pub nx0: usize,
    pub dt0: f64,
}

impl ConvergenceConfig {
    pub fn from_defaults(scheme: Scheme) -> Self {
        let d = &Defaults::get().convergence;
        Self {
            degree: d.degree,
            levels: d.levels,
            epsilons: d.epsilons.clone(),
            scheme,
            final_time: d.final_time,
            nx0: d.nx0,
            dt0: d.dt0,
        }
    }

    pub fn level(&self, k: usize) -> (usize, f64) {
        let f = 1usize << (k - 1);
        (self.nx0 * f, self.dt0 / f as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 12 {
            return Err(Error::Config(format!("levels must lie in 1..=12 (got {})", self.levels)));
        }
        if self.epsilons.is_empty() || self.nx0 == 0 {
            return Err(Error::Config("at least one member and nx0 >= 1 are required".into()));
        }
        Ok(())
    }

    /// Problem at refinement level `k` (1-based).
    pub fn problem<T: Real>(&self, k: usize) -> Result<EnsembleProblem<T>> {
        let (nx, dt) = self.level(k);
        let mesh = Arc::new(Mesh::uniform(nx, nx, Rect::unit_square())?);
        let space = Arc::new(build_space(mesh, self.degree)?);
        let grid = TimeGrid::from_step(T::lit(self.final_time), T::lit(dt))?;
        let members = self.epsilons.iter().map(|&e| ManufacturedCase::new(e).member()).collect();
        EnsembleProblem::new(members, space, grid, BoundaryTag::ALL.to_vec())
    }
}

/// Errors of one member at one refinement level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub dt: f64,
    /// 1-based member number.
    pub member: usize,
    pub e_l2: f64,
    pub rate_l2: Option<f64>,
    pub e_h1: f64,
    pub rate_h1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Solver work per level.
    pub stats: Vec<SolveStats>,
    pub stability: Vec<StabilityReport>,
}

impl ConvergenceStudy {
    pub fn row(&self, level: usize, member: usize) -> Option<&ConvergenceRow> {
        self.rows.iter().find(|r| r.level == level && r.member == member)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,h,dt,member,E_L2,rate_L2,E_H1,rate_H1\n");
        let opt = |r: Option<f64>| r.map(|v| format!("{v:.4}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6e},{:.6e},{},{:.6e},{},{:.6e},{}",
                r.level,
                r.h,
                r.dt,
                r.member,
                r.e_l2,
                opt(r.rate_l2),
                r.e_h1,
                opt(r.rate_h1)
            );
        }
        out
    }
}

/// Runs every level and reports `max_n ||u - u_h||` and
/// `sqrt(dt sum_n ||grad(u - u_h)||^2)` per member, with log2 rates.
pub fn run_convergence<T: Real>(config: &ConvergenceConfig) -> Result<ConvergenceStudy> {
    config.validate()?;
    let cases: Vec<_> = config.epsilons.iter().map(|&e| ManufacturedCase::new(e)).collect();
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    let mut stats = Vec::new();
    let mut stability = Vec::new();
    for k in 1..=config.levels {
        let problem = config.problem::<T>(k)?;
        stability.push(estimate_for_problem(&problem)?);
        let mut acc = ErrorAccumulator::new(
            cases.iter().map(|c| c.exact()).collect(),
            cases.iter().map(|c| c.gradient()).collect(),
        )?;
        let s = run(&problem, config.scheme, |state| acc.observe(&problem.space, &problem.grid, state))?;
        stats.push(s);
        let (l2, h1) = acc.finish();
        let (nx, dt) = config.level(k);
        for j in 0..cases.len() {
            let prev = rows.iter().find(|r| r.level + 1 == k && r.member == j + 1);
            let (e_l2, e_h1) = (l2[j].as_f64(), h1[j].as_f64());
            rows.push(ConvergenceRow {
                level: k,
                h: 2f64.sqrt() / nx as f64,
                dt,
                member: j + 1,
                e_l2,
                rate_l2: prev.map(|p| (p.e_l2 / e_l2).log2()),
                e_h1,
                rate_h1: prev.map(|p| (p.e_h1 / e_h1).log2()),
            });
        }
    }
    Ok(ConvergenceStudy { rows, stats, stability })
}

/// `max_j ( ||u_j^N||^2 + (theta - theta_plus) dt sum_{n>=1} ||grad u_j^n||^2 )` per level.
pub fn energy_bound_study<T: Real>(config: &ConvergenceConfig) -> Result<Vec<f64>> {
    config.validate()?;
    (1..=config.levels)
        .map(|k| {
            let problem = config.problem::<T>(k)?;
            let report = estimate_for_problem(&problem)?;
            if !report.satisfied {
                return Err(Error::StabilityViolation {
                    theta: report.theta,
                    theta_plus: report.theta_plus,
                    report: report.to_json(),
                });
            }
            let weight = T::lit(report.margin) * problem.grid.dt();
            let mass = problem.space.assemble_mass();
            let laplace = problem.space.assemble_stiffness(&*constant(T::one()), T::zero())?;
            let j = problem.size();
            let mut grad_sum = vec![T::zero(); j];
            let mut last = vec![T::zero(); j];
            run(&problem, Scheme::Ensemble, |state| {
                if state.step == 0 {
                    return Ok(());
                }
                for (m, col) in state.solution.columns().enumerate() {
                    grad_sum[m] += energy_norm(&laplace, col)?.powi(2);
                    last[m] = energy_norm(&mass, col)?.powi(2);
                }
                Ok(())
            })?;
            Ok((0..j)
                .map(|m| (last[m] + weight * grad_sum[m]).as_f64())
                .fold(0.0, f64::max))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStatsPair {
    pub ensemble: SolveStats,
    pub independent: SolveStats,
}

/// Ensemble Monte Carlo against per-sample backward Euler on the same draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub config: EmcConfig,
    /// `max |mean_E - mean_I|` at the final time.
    pub mean_gap: f64,
    /// Same, maximized over all steps.
    pub mean_gap_all_steps: f64,
    pub qoi_gaps: Vec<f64>,
    pub qoi_gap_histogram: Histogram,
    pub groups: usize,
    pub stability: Vec<StabilityReport>,
    pub stats: SolveStatsPair,
}

/// Runs both schemes on the draws of `config` and records the gaps.
pub fn run_compare<T: Real>(config: &EmcConfig) -> Result<CompareRecord> {
    config.validate()?;
    let space = config.build_space::<T>()?;
    let draws = draw_replica(config.seed, config.replica, config.samples, config.spec.dimension());
    let ens_cfg = EmcConfig { scheme: Scheme::Ensemble, ..config.clone() };
    let ind_cfg = EmcConfig { scheme: Scheme::Independent, ..config.clone() };
    let ens = simulate(&ens_cfg, &space, &draws, true)?;
    let ind = simulate(&ind_cfg, &space, &draws, true)?;
    let gap = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| (*x - *y).abs().as_f64()).fold(0.0, f64::max);
    let (mean_e, _, _) = block_statistics(&ens.final_block);
    let (mean_i, _, _) = block_statistics(&ind.final_block);
    let mean_gap_all_steps = ens
        .step_means
        .iter()
        .zip(&ind.step_means)
        .map(|(a, b)| gap(a, b))
        .fold(0.0, f64::max);
    let qoi_gaps: Vec<f64> = ens
        .final_block
        .columns()
        .zip(ind.final_block.columns())
        .map(|(a, b)| (qoi_integral(&space, a) - qoi_integral(&space, b)).abs().as_f64())
        .collect();
    Ok(CompareRecord {
        config: config.clone(),
        mean_gap: gap(&mean_e, &mean_i),
        mean_gap_all_steps,
        qoi_gap_histogram: Histogram::new(&qoi_gaps),
        qoi_gaps,
        groups: ens.groups.len(),
        stability: ens.reports,
        stats: SolveStatsPair {
            ensemble: ens.stats,
            independent: ind.stats,
        },
    })
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let d = Defaults::get();
        assert_eq!(d.version, 1);
        assert_eq!(d.convergence.epsilons, vec![0.6207, 0.1841, 0.2691]);
        assert_eq!(d.rate.benchmark, 640);
        assert_eq!(d.rate_config(3).nx, 16);
    }

    /// Central differences of the exact solution and coefficient reproduce the source.
    #[test]
    fn source_matches_finite_differences() {
        let case = ManufacturedCase::new(0.1841);
        let (u, a, f) = (case.exact::<f64>(), case.coeff::<f64>(), case.source::<f64>());
        let grad = case.gradient::<f64>();
        let h = 1e-4;
        for &(x, y, t) in &[(0.3, 0.7, 0.2), (0.9, 0.1, 0.85), (0.5, 0.5, 0.5)] {
            let at = |dx: f64, dy: f64, dt: f64| u.eval(Point2::new(x + dx, y + dy), t + dt);
            let ut = (at(0.0, 0.0, h) - at(0.0, 0.0, -h)) / (2.0 * h);
            let flux = |dx: f64, dy: f64, dir: usize| {
                let p = Point2::new(x + dx, y + dy);
                let g = if dir == 0 {
                    (u.eval(Point2::new(p.x + h, p.y), t) - u.eval(Point2::new(p.x - h, p.y), t)) / (2.0 * h)
                } else {
                    (u.eval(Point2::new(p.x, p.y + h), t) - u.eval(Point2::new(p.x, p.y - h), t)) / (2.0 * h)
                };
                a.eval(p, t) * g
            };
            let div = (flux(h, 0.0, 0) - flux(-h, 0.0, 0)) / (2.0 * h) + (flux(0.0, h, 1) - flux(0.0, -h, 1)) / (2.0 * h);
            let expected = ut - div;
            let got = f.eval(Point2::new(x, y), t);
            assert!((got - expected).abs() < 1e-5 * (1.0 + expected.abs()), "{got} vs {expected}");
            let g = grad(Point2::new(x, y), t);
            assert!((g[0] - (at(h, 0.0, 0.0) - at(-h, 0.0, 0.0)) / (2.0 * h)).abs() < 1e-6);
            assert!((g[1] - (at(0.0, h, 0.0) - at(0.0, -h, 0.0)) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn single_level_csv() {
        let cfg = ConvergenceConfig {
            levels: 1,
            ..ConvergenceConfig::from_defaults(Scheme::Ensemble)
        };
        let study = run_convergence::<f64>(&cfg).unwrap();
        let csv = study.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "level,h,dt,member,E_L2,rate_L2,E_H1,rate_H1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,"));
        assert_eq!(lines[1].split(',').nth(5), Some(""));
        assert_eq!(lines[1].split(',').nth(7), Some(""));
        assert_eq!(study.stats[0].factorizations, 10);
        assert!(study.stability[0].satisfied);
    }

    #[test]
    fn rates_use_previous_level() {
        let cfg = ConvergenceConfig {
            levels: 2,
            degree: 1,
            epsilons: vec![0.5],
            ..ConvergenceConfig::from_defaults(Scheme::Independent)
        };
        let s = run_convergence::<f64>(&cfg).unwrap();
        let (a, b) = (s.row(1, 1).unwrap(), s.row(2, 1).unwrap());
        assert!(a.rate_l2.is_none());
        assert!((b.rate_l2.unwrap() - (a.e_l2 / b.e_l2).log2()).abs() < 1e-15);
        assert!(b.e_l2 < a.e_l2 && b.e_h1 < a.e_h1);
    }

    #[test]
    fn compare_single_sample_coincides() {
        let cfg = EmcConfig { samples: 1, nx: 4, dt: 0.01, final_time: 0.05, seed: 5, ..EmcConfig::default() };
        let r = run_compare::<f64>(&cfg).unwrap();
        assert!(r.mean_gap <= 1e-12 && r.mean_gap_all_steps <= 1e-12);
        assert!(r.qoi_gaps.iter().all(|&g| g <= 1e-12));
        assert_eq!(r.stats.ensemble.factorizations, 5);
        assert_eq!(r.stats.independent.factorizations, 5);
    }

    #[test]
    fn compare_identical_coefficients_coincides() {
        let mut cfg = EmcConfig { samples: 4, nx: 4, dt: 0.01, final_time: 0.05, seed: 5, ..EmcConfig::default() };
        cfg.spec.sigma = 0.0;
        let r = run_compare::<f64>(&cfg).unwrap();
        assert!(r.mean_gap <= 1e-12);
        assert_eq!(r.stats.independent.factorizations, 20);
        assert_eq!(r.stats.ensemble.factorizations, 5);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, "a\n").unwrap();
        write_atomic(&path, "b\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "b\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
