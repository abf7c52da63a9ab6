//! Random diffusion coefficients, seeded sampling and ensemble Monte Carlo.
//!
//! The coefficient varies in `y` only:
//!
//! ```text
//! a(y) = a0 + sigma sqrt(l0) Y_0 + sum_{i=1..nf} sigma sqrt(l_i) (Y_i cos(i pi y) + Y_{nf+i} sin(i pi y))
//! ```
//!
//! with `Y_k` independent and uniform on `[-sqrt 3, sqrt 3]`.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{run, EnsembleMember, EnsembleProblem, Scheme, SolveStats, TimeGrid};
use crate::error::{Error, Result};
use crate::fem::{build_space, FeSpace};
use crate::field::{constant, steady, ScalarField};
use crate::mesh::{BoundaryTag, Mesh, Point2, Rect};
use crate::scalar::Real;
use crate::sparse::{Block, CsrMatrix};
use crate::stability::{estimate_bounds, partition_ensemble, SamplingGrid, StabilityPolicy, StabilityReport};

/// Parameters of the random coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomFieldSpec {
    pub a0: f64,
    pub sigma: f64,
    pub corr_length: f64,
    pub nf: usize,
}

impl Default for RandomFieldSpec {
    fn default() -> Self {
        Self {
            a0: 1.0,
            sigma: 0.15,
            corr_length: 0.25,
            nf: 3,
        }
    }
}

impl RandomFieldSpec {
    /// Number of random variables per sample.
    pub fn dimension(&self) -> usize {
        2 * self.nf + 1
    }

    /// Lower bound of `a` over all possible draws.
    pub fn worst_case_min(&self) -> f64 {
        let l = kl_eigenvalues(self);
        let spread: f64 = l[0].sqrt() + l[1..].iter().map(|v| 2.0 * v.sqrt()).sum::<f64>();
        self.a0 - self.sigma * 3f64.sqrt() * spread
    }
}

/// `l_0 = sqrt(pi Lc) / 2` and `l_i = sqrt(pi) Lc exp(-(i pi Lc)^2 / 4)`.
pub fn kl_eigenvalues(spec: &RandomFieldSpec) -> Vec<f64> {
    let lc = spec.corr_length;
    std::iter::once((PI * lc).sqrt() / 2.0)
        .chain((1..=spec.nf).map(|i| PI.sqrt() * lc * (-(i as f64 * PI * lc).powi(2) / 4.0).exp()))
        .collect()
}

/// Random variables of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub seed: u64,
    pub replica: u32,
    pub index: u32,
    pub y: Vec<f64>,
}

/// Draw `index` of `replica`, from its own ChaCha substream.
pub fn draw_sample(seed: u64, replica: u32, index: u32, dimension: usize) -> SampleDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(replica) << 32) | u64::from(index));
    let half = 3f64.sqrt();
    let uniform = Uniform::new_inclusive(-half, half).expect("valid bounds");
    SampleDraw {
        seed,
        replica,
        index,
        y: (0..dimension).map(|_| uniform.sample(&mut rng)).collect(),
    }
}

/// First `count` draws of `replica`; shorter requests are prefixes of longer ones.
pub fn draw_replica(seed: u64, replica: u32, count: usize, dimension: usize) -> Vec<SampleDraw> {
    (0..count)
        .into_par_iter()
        .map(|j| draw_sample(seed, replica, j as u32, dimension))
        .collect()
}

/// First `count` draws of replica 0.
pub fn draw_samples(seed: u64, count: usize, nf: usize) -> Vec<SampleDraw> {
    draw_replica(seed, 0, count, 2 * nf + 1)
}

/// Steady coefficient field for one draw.
pub fn sample_coefficient<T: Real>(spec: &RandomFieldSpec, draw: &SampleDraw) -> Result<ScalarField<T>> {
    if draw.y.len() != spec.dimension() {
        return Err(Error::DimensionMismatch {
            expected: spec.dimension(),
            found: draw.y.len(),
        });
    }
    let l = kl_eigenvalues(spec);
    let nf = spec.nf;
    let base = spec.a0 + spec.sigma * l[0].sqrt() * draw.y[0];
    let modes: Vec<(f64, f64, f64)> = (1..=nf)
        .map(|i| {
            let s = spec.sigma * l[i].sqrt();
            (i as f64 * PI, s * draw.y[i], s * draw.y[nf + i])
        })
        .collect();
    let (base, modes): (T, Vec<(T, T, T)>) = (
        T::lit(base),
        modes.into_iter().map(|(k, c, s)| (T::lit(k), T::lit(c), T::lit(s))).collect(),
    );
    Ok(steady(move |p: Point2<T>| {
        modes
            .iter()
            .fold(base, |acc, &(k, c, s)| acc + c * (k * p.y).cos() + s * (k * p.y).sin())
    }))
}

/// `int_D u_h`.
pub fn qoi_integral<T: Real>(space: &FeSpace<T>, u: &[T]) -> T {
    space.integrate(u)
}

/// Fixed-width histogram with `ceil(sqrt(n))` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { edges: vec![], counts: vec![] };
        }
        let bins = (values.len() as f64).sqrt().ceil() as usize;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

/// Settings of one Monte Carlo run on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmcConfig {
    pub spec: RandomFieldSpec,
    pub samples: usize,
    /// Cells per side; the mesh size is `sqrt(2) / nx`.
    pub nx: usize,
    pub degree: usize,
    pub final_time: f64,
    pub dt: f64,
    pub seed: u64,
    pub replica: u32,
    pub policy: StabilityPolicy,
    pub scheme: Scheme,
}

impl Default for EmcConfig {
    fn default() -> Self {
        Self {
            spec: RandomFieldSpec::default(),
            samples: 100,
            nx: 32,
            degree: 1,
            final_time: 0.5,
            dt: 2.5e-3,
            seed: 0,
            replica: 0,
            policy: StabilityPolicy::Partition,
            scheme: Scheme::Ensemble,
        }
    }
}

impl EmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("number of samples must be at least 1".into()));
        }
        if self.nx == 0 {
            return Err(Error::Config("nx must be at least 1".into()));
        }
        if !(self.spec.corr_length > 0.0) || !(self.spec.sigma >= 0.0) {
            return Err(Error::Config("correlation length must be positive and sigma non-negative".into()));
        }
        self.time_grid::<f64>().map(|_| ())
    }

    pub fn time_grid<T: Real>(&self) -> Result<TimeGrid<T>> {
        TimeGrid::from_step(T::lit(self.final_time), T::lit(self.dt))
    }

    pub fn build_space<T: Real>(&self) -> Result<Arc<FeSpace<T>>> {
        let mesh = Mesh::uniform(self.nx, self.nx, Rect::unit_square())?;
        Ok(Arc::new(build_space(Arc::new(mesh), self.degree)?))
    }
}

/// `g = y (1 - y)` on the left edge and zero elsewhere.
pub fn left_inflow<T: Real>() -> ScalarField<T> {
    steady(|p: Point2<T>| {
        if p.x <= T::lit(1e-12) {
            p.y * (T::one() - p.y)
        } else {
            T::zero()
        }
    })
}

/// Ensemble run over a fixed set of draws.
pub struct EmcRun<T> {
    /// `U^N`, one column per draw, in draw order.
    pub final_block: Block<T>,
    /// Sample mean at `t_1..t_N`, when requested.
    pub step_means: Vec<Vec<T>>,
    pub groups: Vec<Vec<usize>>,
    pub reports: Vec<StabilityReport>,
    pub stats: SolveStats,
}

fn members<T: Real>(spec: &RandomFieldSpec, draws: &[SampleDraw]) -> Result<Vec<EnsembleMember<T>>> {
    let (zero, g) = (constant(T::zero()), left_inflow());
    draws
        .iter()
        .map(|d| {
            Ok(EnsembleMember {
                coeff: sample_coefficient(spec, d)?,
                source: zero.clone(),
                boundary: g.clone(),
                initial: zero.clone(),
            })
        })
        .collect()
}

fn stability_error(report: &StabilityReport) -> Error {
    Error::StabilityViolation {
        theta: report.theta,
        theta_plus: report.theta_plus,
        report: report.to_json(),
    }
}

/// Runs the draws as one ensemble (or as stable groups under
/// [`StabilityPolicy::Partition`]) and collects the final block.
pub fn simulate<T: Real>(
    config: &EmcConfig,
    space: &Arc<FeSpace<T>>,
    draws: &[SampleDraw],
    keep_steps: bool,
) -> Result<EmcRun<T>> {
    let start = Instant::now();
    if draws.is_empty() {
        return Err(Error::Config("at least one draw is required".into()));
    }
    let grid = config.time_grid::<T>()?;
    let problem = EnsembleProblem::new(members(&config.spec, draws)?, space.clone(), grid, BoundaryTag::ALL.to_vec())?;
    let coeffs: Vec<_> = problem.members.iter().map(|m| m.coeff.clone()).collect();
    let sampling = SamplingGrid::for_problem(&problem)?;

    let groups = match (config.scheme, config.policy) {
        (Scheme::Independent, _) => vec![(0..draws.len()).collect()],
        (Scheme::Ensemble, StabilityPolicy::Refuse) => {
            let report = estimate_bounds(&coeffs, &sampling)?;
            if !report.satisfied {
                return Err(stability_error(&report));
            }
            vec![(0..draws.len()).collect()]
        }
        (Scheme::Ensemble, StabilityPolicy::Partition) => partition_ensemble(&coeffs, &sampling)?,
    };

    let n = space.dof_count();
    let mut final_cols: Vec<Vec<T>> = vec![Vec::new(); draws.len()];
    let mut step_sums: Vec<Vec<T>> = if keep_steps { vec![vec![T::zero(); n]; grid.steps] } else { Vec::new() };
    let mut reports = Vec::with_capacity(groups.len());
    let mut stats = SolveStats::default();
    for group in &groups {
        let sub: Vec<_> = group.iter().map(|&j| coeffs[j].clone()).collect();
        let report = estimate_bounds(&sub, &sampling)?;
        if config.scheme == Scheme::Ensemble && !report.satisfied {
            return Err(stability_error(&report));
        }
        reports.push(report);
        let sub_problem = problem.subset(group);
        let mut last = None;
        let s = run(&sub_problem, config.scheme, |state| {
            if keep_steps && state.step > 0 {
                let sums = &mut step_sums[state.step - 1];
                for col in state.solution.columns() {
                    for (s, &v) in sums.iter_mut().zip(col) {
                        *s += v;
                    }
                }
            }
            if state.step == grid.steps {
                last = Some(state.solution.clone());
            }
            Ok(())
        })?;
        stats.merge(&s);
        let last = last.expect("final state observed");
        for (k, &j) in group.iter().enumerate() {
            final_cols[j] = last.col(k).to_vec();
        }
    }
    let count = T::count(draws.len());
    for sums in &mut step_sums {
        sums.iter_mut().for_each(|v| *v /= count);
    }
    stats.wall_time_s = start.elapsed().as_secs_f64();
    Ok(EmcRun {
        final_block: Block::from_columns(final_cols)?,
        step_means: step_sums,
        groups,
        reports,
        stats,
    })
}

/// Mesh description attached to exported fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshInfo {
    pub nx: usize,
    pub h: f64,
    pub degree: usize,
    pub dofs: usize,
}

/// Statistics of one Monte Carlo run at the final time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmcResult<T> {
    pub config: EmcConfig,
    pub mesh: MeshInfo,
    pub mean_field: Vec<T>,
    pub std_field: Vec<T>,
    /// Set when `J = 1`; `std_field` is then all zeros.
    pub std_degenerate: bool,
    pub qoi_samples: Vec<T>,
    pub qoi_mean: T,
    pub qoi_histogram: Histogram,
    pub groups: Vec<Vec<usize>>,
    pub stability: Vec<StabilityReport>,
    pub stats: SolveStats,
}

impl<T: Real + Serialize> EmcResult<T> {
    /// Pretty JSON without the wall-clock time, so seeded runs serialize identically.
    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("result serializes");
        if let Some(stats) = value.get_mut("stats").and_then(|s| s.as_object_mut()) {
            stats.remove("wall_time_s");
        }
        serde_json::to_string_pretty(&value).expect("result serializes")
    }
}

/// Column mean and unbiased column standard deviation, per row.
pub fn block_statistics<T: Real>(block: &Block<T>) -> (Vec<T>, Vec<T>, bool) {
    let mean = block.column_mean();
    let j = block.ncols();
    if j < 2 {
        return (mean, vec![T::zero(); block.nrows()], true);
    }
    let mut ss = vec![T::zero(); block.nrows()];
    for col in block.columns() {
        for ((s, &v), &m) in ss.iter_mut().zip(col).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = T::count(j - 1);
    (mean, ss.into_iter().map(|s| (s / denom).sqrt()).collect(), false)
}

/// Draws `config.samples` coefficients and runs the ensemble Monte Carlo method.
pub fn run_emc<T: Real>(config: &EmcConfig) -> Result<EmcResult<T>> {
    config.validate()?;
    let space = config.build_space::<T>()?;
    let draws = draw_replica(config.seed, config.replica, config.samples, config.spec.dimension());
    let run = simulate(config, &space, &draws, false)?;
    let (mean_field, std_field, std_degenerate) = block_statistics(&run.final_block);
    let qoi_samples: Vec<T> = run.final_block.columns().map(|c| qoi_integral(&space, c)).collect();
    let qoi_mean = qoi_samples.iter().copied().sum::<T>() / T::count(qoi_samples.len());
    let hist = Histogram::new(&qoi_samples.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
    Ok(EmcResult {
        config: config.clone(),
        mesh: MeshInfo {
            nx: config.nx,
            h: 2f64.sqrt() / config.nx as f64,
            degree: config.degree,
            dofs: space.dof_count(),
        },
        mean_field,
        std_field,
        std_degenerate,
        qoi_samples,
        qoi_mean,
        qoi_histogram: hist,
        groups: run.groups,
        stability: run.reports,
        stats: run.stats,
    })
}

/// Errors of the `J`-sample mean against the `J0`-sample benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    #[serde(rename = "J")]
    pub samples: usize,
    #[serde(rename = "E_L2")]
    pub e_l2: f64,
    #[serde(rename = "E_H1")]
    pub e_h1: f64,
}

/// Least-squares fit `E = c J^slope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub c: f64,
}

/// Fits `log y = log c + slope log x`.
pub fn power_fit(x: &[f64], y: &[f64]) -> Result<PowerFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("power fit needs at least two matching points".into()));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Config("power fit needs positive finite data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("power fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    Ok(PowerFit {
        slope,
        c: (my - slope * mx).exp(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub rows: Vec<RateRow>,
    pub fit_l2: Option<PowerFit>,
    pub fit_h1: Option<PowerFit>,
    pub replicas: usize,
    pub benchmark: usize,
    pub stats: SolveStats,
}

impl RateStudy {
    /// `J,E_L2,E_H1` rows followed by a JSON footer line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("J,E_L2,E_H1\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6e},{:.6e}\n", r.samples, r.e_l2, r.e_h1));
        }
        let footer = serde_json::json!({
            "slope_L2": self.fit_l2.map(|f| f.slope),
            "slope_H1": self.fit_h1.map(|f| f.slope),
            "fit_c_L2": self.fit_l2.map(|f| f.c),
        });
        out.push_str(&footer.to_string());
        out.push('\n');
        out
    }
}

/// Sample-count convergence study against a `benchmark`-sample mean.
///
/// Replica `m` uses the first `benchmark` draws of its substream family;
/// each `J` run reuses the first `J` of them.
pub fn mc_rate_study<T: Real>(
    template: &EmcConfig,
    sample_counts: &[usize],
    benchmark: usize,
    replicas: usize,
) -> Result<RateStudy> {
    template.validate()?;
    if replicas == 0 || sample_counts.is_empty() {
        return Err(Error::Config("rate study needs replicas >= 1 and at least one J".into()));
    }
    if let Some(&j) = sample_counts.iter().find(|&&j| j == 0 || j > benchmark) {
        return Err(Error::Config(format!("sample count {j} must lie in 1..={benchmark}")));
    }
    let start = Instant::now();
    let space = template.build_space::<T>()?;
    let mass = space.assemble_mass();
    let stiffness = space.assemble_stiffness(&*constant(T::one()), T::zero())?;
    let dt = template.time_grid::<T>()?.dt();
    let dim = template.spec.dimension();

    let per_replica = (0..replicas)
        .map(|m| -> Result<(Vec<Vec<T>>, Vec<T>, SolveStats)> {
            let draws = draw_replica(template.seed, m as u32, benchmark, dim);
            let bench = simulate(template, &space, &draws, true)?;
            let mut stats = bench.stats;
            let mut sq_l2 = Vec::with_capacity(sample_counts.len());
            let mut h1 = Vec::with_capacity(sample_counts.len());
            for &j in sample_counts {
                let run = simulate(template, &space, &draws[..j], true)?;
                stats.merge(&run.stats);
                let (l2_steps, h1_sum) = distances(&mass, &stiffness, &bench.step_means, &run.step_means, dt)?;
                sq_l2.push(l2_steps);
                h1.push(h1_sum);
            }
            Ok((sq_l2, h1, stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stats = SolveStats::default();
    let inv_m = T::count(replicas).recip();
    let rows = sample_counts
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let steps = per_replica[0].0[k].len();
            let e_l2 = (0..steps)
                .map(|n| (per_replica.iter().map(|r| r.0[k][n]).sum::<T>() * inv_m).sqrt())
                .fold(T::zero(), T::max);
            let e_h1 = (per_replica.iter().map(|r| r.1[k]).sum::<T>() * inv_m).sqrt();
            RateRow {
                samples: j,
                e_l2: e_l2.as_f64(),
                e_h1: e_h1.as_f64(),
            }
        })
        .collect::<Vec<_>>();
    for r in &per_replica {
        stats.merge(&r.2);
    }
    stats.wall_time_s = start.elapsed().as_secs_f64();
    let js: Vec<f64> = rows.iter().map(|r| r.samples as f64).collect();
    let fit = |e: Vec<f64>| power_fit(&js, &e).ok();
    Ok(RateStudy {
        fit_l2: fit(rows.iter().map(|r| r.e_l2).collect()),
        fit_h1: fit(rows.iter().map(|r| r.e_h1).collect()),
        rows,
        replicas,
        benchmark,
        stats,
    })
}

/// Squared L2 distance per step and `dt sum_n |grad d_n|^2`.
fn distances<T: Real>(
    mass: &CsrMatrix<T>,
    stiffness: &CsrMatrix<T>,
    reference: &[Vec<T>],
    other: &[Vec<T>],
    dt: T,
) -> Result<(Vec<T>, T)> {
    let mut l2 = Vec::with_capacity(reference.len());
    let mut h1 = T::zero();
    for (a, b) in reference.iter().zip(other) {
        let d: Vec<T> = a.iter().zip(b).map(|(x, y)| *x - *y).collect();
        l2.push(crate::scalar::dot(&d, &mass.matvec(&d)?).max(T::zero()));
        h1 += dt * crate::scalar::dot(&d, &stiffness.matvec(&d)?).max(T::zero());
    }
    Ok((l2, h1))
}
