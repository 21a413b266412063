use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::corr::{estimate_rho, CorrStructure, Residuals, WorkingCorrelation};
use super::link::{LinkFunction, VarianceFunction};
use super::GeeError;
use crate::exec::Execution;
use crate::numkit::{inverse, solve_vector, symmetrize, NumError};

/// One subject's design rows, responses and wave indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub waves: Vec<usize>,
}

impl Cluster {
    /// Cluster observed at waves `0, 1, …, m−1`.
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Self {
        let waves = (0..y.len()).collect();
        Self { x, y, waves }
    }

    pub fn with_waves(mut self, waves: Vec<usize>) -> Self {
        self.waves = waves;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Marginal mean model and working covariance family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeeSpec {
    pub link: LinkFunction,
    pub variance: VarianceFunction,
    pub corr: CorrStructure,
}

impl GeeSpec {
    pub fn new(link: LinkFunction, variance: VarianceFunction, corr: CorrStructure) -> Self {
        Self {
            link,
            variance,
            corr,
        }
    }

    /// Canonical variance for the link.
    pub fn canonical(link: LinkFunction, corr: CorrStructure) -> Self {
        Self::new(link, link.canonical_variance(), corr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeeOptions {
    /// Convergence when `max|Δβ| / (1 + max|β|)` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// `|η|` above which a point counts towards the separation check.
    pub separation_eta: f64,
    pub separation_fraction: f64,
    pub exec: Execution,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 10,
            separation_eta: 30.0,
            separation_fraction: 0.1,
            exec: Execution::Parallel,
        }
    }
}

/// Nuisance parameters held fixed while β is updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingParams {
    pub corr: WorkingCorrelation,
    pub phi: f64,
}

impl WorkingParams {
    pub fn independence() -> Self {
        Self {
            corr: WorkingCorrelation::Independence,
            phi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub beta: DVector<f64>,
    /// `(Σ DᵢᵀVᵢ⁻¹Dᵢ)⁻¹`
    pub cov_model: DMatrix<f64>,
    /// `B⁻¹ (Σ ψᵢψᵢᵀ) B⁻ᵀ`
    pub cov_robust: DMatrix<f64>,
    pub params: WorkingParams,
    pub iterations: usize,
    pub converged: bool,
    /// Per-subject estimating-function contributions `ψᵢ(β̂)`.
    pub scores: Vec<DVector<f64>>,
    /// Exact `Σ ∂ψᵢ/∂β` at β̂ with the working parameters held fixed.
    pub bread: DMatrix<f64>,
    pub n_obs: usize,
}

impl GeeFit {
    pub fn robust_se(&self) -> DVector<f64> {
        self.cov_robust.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn score_sum(&self) -> DVector<f64> {
        let p = self.beta.len();
        self.scores.iter().fold(DVector::zeros(p), |acc, s| acc + s)
    }
}

/// Per-subject pieces of the estimating function at a given β.
///
/// With `a = μ′/√v`, `e = (y−μ)/√v` and `q = diag(a) R⁻¹ e / φ`, the score is
/// `ψ = Xᵀq`. `dq` is `∂q/∂η`, so the exact derivative is `Xᵀ dq X` and a
/// perturbation of the design rows enters through `q` and `dq` alike.
#[derive(Debug, Clone)]
pub struct ClusterTerms {
    pub eta: DVector<f64>,
    pub q: DVector<f64>,
    pub dq: DMatrix<f64>,
    pub score: DVector<f64>,
    /// Expected information `Xᵀ diag(a) R⁻¹ diag(a) X / φ`.
    pub info: DMatrix<f64>,
}

impl ClusterTerms {
    pub fn jacobian(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.transpose() * &self.dq * x
    }
}

pub fn cluster_terms(
    cluster: &Cluster,
    beta: &DVector<f64>,
    spec: &GeeSpec,
    phi: f64,
    rinv: &DMatrix<f64>,
) -> ClusterTerms {
    let eta = &cluster.x * beta;
    let m = eta.len();
    let mut a = DVector::zeros(m);
    let mut da = DVector::zeros(m);
    let mut e = DVector::zeros(m);
    let mut de = DVector::zeros(m);
    for j in 0..m {
        let mu = spec.link.inverse(eta[j]);
        let d1 = spec.link.d_inverse(eta[j]);
        let d2 = spec.link.d2_inverse(eta[j]);
        let v = match (spec.link, spec.variance) {
            // μ(1−μ) from both tails avoids cancellation for large η
            (LinkFunction::Logit, VarianceFunction::Binomial) => d1,
            _ => spec.variance.variance(mu),
        };
        let dv = spec.variance.d_variance(mu);
        let s = v.sqrt();
        let r = cluster.y[j] - mu;
        a[j] = d1 / s;
        e[j] = r / s;
        da[j] = d2 / s - d1 * d1 * dv / (2.0 * v * s);
        de[j] = -d1 / s - r * dv * d1 / (2.0 * v * s);
    }
    let rinv_e = rinv * &e;
    let q = a.component_mul(&rinv_e) / phi;
    let mut dq = DMatrix::zeros(m, m);
    for j in 0..m {
        dq[(j, j)] = rinv_e[j] * da[j];
        for k in 0..m {
            dq[(j, k)] += a[j] * rinv[(j, k)] * de[k];
        }
    }
    dq /= phi;
    let xa = DMatrix::from_fn(m, cluster.x.ncols(), |j, c| cluster.x[(j, c)] * a[j]);
    let info = xa.transpose() * rinv * &xa / phi;
    let score = cluster.x.transpose() * &q;
    ClusterTerms {
        eta,
        q,
        dq,
        score,
        info,
    }
}

/// Caches `R⁻¹` per distinct wave pattern.
pub(crate) struct InverseCache {
    by_waves: HashMap<Vec<usize>, DMatrix<f64>>,
}

impl InverseCache {
    pub(crate) fn new(clusters: &[Cluster], corr: &WorkingCorrelation) -> Result<Self, GeeError> {
        let mut by_waves = HashMap::new();
        for c in clusters {
            if !by_waves.contains_key(&c.waves) {
                by_waves.insert(c.waves.clone(), corr.inverse(&c.waves)?);
            }
        }
        Ok(Self { by_waves })
    }

    pub(crate) fn get(&self, waves: &[usize]) -> &DMatrix<f64> {
        &self.by_waves[waves]
    }
}

/// `Σᵢ ψᵢ(β)` with the working parameters held fixed.
pub fn estimating_function(
    clusters: &[Cluster],
    beta: &DVector<f64>,
    spec: &GeeSpec,
    params: &WorkingParams,
) -> Result<DVector<f64>, GeeError> {
    let cache = InverseCache::new(clusters, &params.corr)?;
    Ok(clusters.iter().fold(DVector::zeros(beta.len()), |acc, c| {
        acc + cluster_terms(c, beta, spec, params.phi, cache.get(&c.waves)).score
    }))
}

/// Per-subject terms at β, computed with `exec` and returned in subject order.
pub fn all_terms(
    clusters: &[Cluster],
    beta: &DVector<f64>,
    spec: &GeeSpec,
    params: &WorkingParams,
    exec: Execution,
) -> Result<Vec<ClusterTerms>, GeeError> {
    let cache = InverseCache::new(clusters, &params.corr)?;
    Ok(exec.map(clusters, |c| {
        cluster_terms(c, beta, spec, params.phi, cache.get(&c.waves))
    }))
}

/// Moment updates of `φ` and the correlation parameters at β.
pub fn update_params(
    clusters: &[Cluster],
    beta: &DVector<f64>,
    spec: &GeeSpec,
    structure: CorrStructure,
) -> Result<WorkingParams, GeeError> {
    let p = beta.len();
    let residuals: Vec<Residuals> = clusters
        .iter()
        .map(|c| {
            let eta = &c.x * beta;
            let values = (0..c.len())
                .map(|j| {
                    let mu = spec.link.inverse(eta[j]);
                    (c.y[j] - mu) / spec.variance.variance(mu).sqrt()
                })
                .collect();
            Residuals::new(values, c.waves.clone())
        })
        .collect();
    let phi = if spec.variance.has_free_dispersion() {
        let n: usize = clusters.iter().map(Cluster::len).sum();
        let ss: f64 = residuals
            .iter()
            .flat_map(|r| r.values.iter())
            .map(|e| e * e)
            .sum();
        let phi = ss / (n.saturating_sub(p).max(1)) as f64;
        if phi > 0.0 {
            phi
        } else {
            // an exact fit; any positive value solves the same equations
            1.0
        }
    } else {
        1.0
    };
    let corr = match estimate_rho(&residuals, structure) {
        Ok(c) => c,
        Err(GeeError::InsufficientPairs) => {
            log::debug!("no within-subject pairs; {structure:?} working correlation reduces to independence");
            WorkingCorrelation::Independence
        }
        Err(e) => return Err(e),
    };
    Ok(WorkingParams { corr, phi })
}

fn check_inputs(clusters: &[Cluster], spec: &GeeSpec) -> Result<usize, GeeError> {
    let p = clusters.first().ok_or(GeeError::Empty)?.x.ncols();
    for (i, c) in clusters.iter().enumerate() {
        if c.x.nrows() != c.len() || c.x.ncols() != p || c.waves.len() != c.len() {
            return Err(GeeError::DimensionMismatch(format!(
                "cluster {i}: {}×{} design, {} responses, {} waves (expected {p} columns)",
                c.x.nrows(),
                c.x.ncols(),
                c.len(),
                c.waves.len()
            )));
        }
        if c.is_empty() {
            return Err(GeeError::DimensionMismatch(format!(
                "cluster {i} has no observations"
            )));
        }
        if let Some(&y) = c.y.iter().find(|&&y| !spec.variance.accepts(y)) {
            return Err(GeeError::InvalidResponse {
                cluster: i,
                value: y,
            });
        }
        if c.x.iter().any(|v| !v.is_finite()) {
            return Err(GeeError::NonFinite(format!("design of cluster {i}")));
        }
    }
    Ok(p)
}

fn initial_beta(clusters: &[Cluster], spec: &GeeSpec, p: usize) -> DVector<f64> {
    let mut beta = DVector::zeros(p);
    let intercept = (0..p).find(|&k| {
        clusters
            .iter()
            .all(|c| c.x.column(k).iter().all(|&v| v == 1.0))
    });
    if let Some(k) = intercept {
        let (s, n) = clusters.iter().fold((0.0, 0usize), |(s, n), c| {
            (s + c.y.iter().sum::<f64>(), n + c.len())
        });
        let ybar = s / n as f64;
        let ybar = match spec.link {
            LinkFunction::Identity => ybar,
            LinkFunction::Logit => ybar.clamp(1e-6, 1.0 - 1e-6),
            LinkFunction::Log => ybar.max(1e-6),
        };
        beta[k] = spec.link.link(ybar);
    }
    beta
}

fn singular(e: NumError) -> GeeError {
    match e {
        NumError::SingularMatrix { .. } => GeeError::RankDeficientDesign,
        other => GeeError::Num(other),
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

struct Sums {
    score: DVector<f64>,
    info: DMatrix<f64>,
    extreme: usize,
}

fn sum_terms(terms: &[ClusterTerms], p: usize, eta_bound: f64) -> Sums {
    let mut s = Sums {
        score: DVector::zeros(p),
        info: DMatrix::zeros(p, p),
        extreme: 0,
    };
    for t in terms {
        s.score += &t.score;
        s.info += &t.info;
        s.extreme += t.eta.iter().filter(|e| e.abs() > eta_bound).count();
    }
    s
}

struct Loop {
    beta: DVector<f64>,
    params: WorkingParams,
    iterations: usize,
    converged: bool,
}

/// Fisher scoring, re-estimating the working parameters at every iteration
/// unless `fixed` supplies them.
fn fisher(
    clusters: &[Cluster],
    spec: &GeeSpec,
    opts: &GeeOptions,
    start: DVector<f64>,
    structure: CorrStructure,
    fixed: Option<&WorkingParams>,
    n_obs: usize,
) -> Result<Loop, GeeError> {
    let p = start.len();
    let mut beta = start;
    let mut params = WorkingParams::independence();
    for it in 1..=opts.max_iter {
        params = match fixed {
            Some(f) => f.clone(),
            None => update_params(clusters, &beta, spec, structure)?,
        };
        let terms = all_terms(clusters, &beta, spec, &params, opts.exec)?;
        let sums = sum_terms(&terms, p, opts.separation_eta);
        if spec.link != LinkFunction::Identity
            && sums.extreme as f64 >= opts.separation_fraction * n_obs as f64
        {
            return Err(GeeError::SeparationSuspected {
                fraction: sums.extreme as f64 / n_obs as f64,
            });
        }
        if !sums.score.iter().all(|v| v.is_finite()) {
            return Err(GeeError::NonFinite("estimating function".into()));
        }
        let mut step = solve_vector(&sums.info, &sums.score).map_err(singular)?;
        let norm0 = sums.score.norm();
        let mut next = &beta + &step;
        for _ in 0..opts.max_halvings {
            let u = estimating_function(clusters, &next, spec, &params)?;
            let norm = u.norm();
            if norm.is_finite() && norm <= norm0 {
                break;
            }
            step *= 0.5;
            next = &beta + &step;
        }
        let change = inf_norm(&(&next - &beta)) / (1.0 + inf_norm(&beta));
        beta = next;
        if change < opts.tol {
            return Ok(Loop {
                beta,
                params,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(Loop {
        beta,
        params,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// Solves `Σᵢ Dᵢᵀ Vᵢ⁻¹ (Yᵢ − μᵢ) = 0` with `Vᵢ = φ A^{1/2} R A^{1/2}`.
///
/// β starts from an independence fit. Fisher scoring then alternates β steps
/// (halved while the estimating-function norm grows) with moment updates of
/// `φ` and the correlation. After convergence a few steps with the working
/// parameters frozen solve the equations to round-off, so the reported bread,
/// scores and sandwich all refer to one fixed estimating function.
/// Non-convergence is reported through `converged = false`.
pub fn solve_gee(
    clusters: &[Cluster],
    spec: &GeeSpec,
    opts: &GeeOptions,
) -> Result<GeeFit, GeeError> {
    let p = check_inputs(clusters, spec)?;
    let n_obs: usize = clusters.iter().map(Cluster::len).sum();
    if n_obs < p {
        return Err(GeeError::RankDeficientDesign);
    }
    let start = initial_beta(clusters, spec, p);
    let indep = fisher(
        clusters,
        spec,
        opts,
        start,
        CorrStructure::Independence,
        None,
        n_obs,
    )?;
    let mut run = if spec.corr == CorrStructure::Independence {
        indep
    } else {
        let r = fisher(clusters, spec, opts, indep.beta, spec.corr, None, n_obs)?;
        Loop {
            iterations: indep.iterations + r.iterations,
            ..r
        }
    };

    if run.converged {
        let params = update_params(clusters, &run.beta, spec, spec.corr)?;
        let polish_opts = GeeOptions {
            tol: 1e-14,
            max_iter: 5,
            ..*opts
        };
        let polished = fisher(
            clusters,
            spec,
            &polish_opts,
            run.beta.clone(),
            spec.corr,
            Some(&params),
            n_obs,
        )?;
        run.beta = polished.beta;
        run.params = params;
    }
    finish(clusters, spec, opts, run, n_obs)
}

/// Solves the equations with the working parameters fixed at `params`.
pub fn solve_gee_fixed(
    clusters: &[Cluster],
    spec: &GeeSpec,
    params: &WorkingParams,
    opts: &GeeOptions,
) -> Result<GeeFit, GeeError> {
    let p = check_inputs(clusters, spec)?;
    let n_obs: usize = clusters.iter().map(Cluster::len).sum();
    let start = initial_beta(clusters, spec, p);
    let run = fisher(clusters, spec, opts, start, spec.corr, Some(params), n_obs)?;
    finish(clusters, spec, opts, run, n_obs)
}

fn finish(
    clusters: &[Cluster],
    spec: &GeeSpec,
    opts: &GeeOptions,
    run: Loop,
    n_obs: usize,
) -> Result<GeeFit, GeeError> {
    let p = run.beta.len();
    let terms = all_terms(clusters, &run.beta, spec, &run.params, opts.exec)?;
    let jacs = opts
        .exec
        .map(&terms.iter().zip(clusters).collect::<Vec<_>>(), |(t, c)| {
            t.jacobian(&c.x)
        });
    let mut bread = DMatrix::zeros(p, p);
    let mut info = DMatrix::zeros(p, p);
    let mut meat = DMatrix::zeros(p, p);
    for (t, j) in terms.iter().zip(&jacs) {
        bread += j;
        info += &t.info;
        meat += &t.score * t.score.transpose();
    }
    let cov_model = symmetrize(&inverse(&info).map_err(singular)?);
    let b_inv = inverse(&bread).map_err(singular)?;
    let cov_robust = symmetrize(&(&b_inv * meat * b_inv.transpose()));
    if !run.converged {
        log::warn!("GEE did not converge in {} iterations", run.iterations);
    }
    Ok(GeeFit {
        beta: run.beta,
        cov_model,
        cov_robust,
        params: run.params,
        iterations: run.iterations,
        converged: run.converged,
        scores: terms.into_iter().map(|t| t.score).collect(),
        bread,
        n_obs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{numerical_jacobian, RngStream};

    fn spec(link: LinkFunction, corr: CorrStructure) -> GeeSpec {
        GeeSpec::canonical(link, corr)
    }

    fn seq() -> GeeOptions {
        GeeOptions {
            exec: Execution::Sequential,
            ..GeeOptions::default()
        }
    }

    fn logistic_panel(seed: u64, n: usize, m: usize) -> Vec<Cluster> {
        let mut rng = RngStream::new(seed, 0);
        (0..n)
            .map(|_| {
                let u = rng.standard_normal();
                let x = DMatrix::from_fn(m, 3, |j, k| match k {
                    0 => 1.0,
                    1 => j as f64,
                    _ => u + 0.5 * (j as f64),
                });
                let frailty = 0.8 * rng.standard_normal();
                let y = (0..m)
                    .map(|j| {
                        let eta = -1.0 + 0.2 * x[(j, 1)] + 0.5 * x[(j, 2)] + frailty;
                        f64::from(rng.uniform() < LinkFunction::Logit.inverse(eta))
                    })
                    .collect();
                Cluster::new(x, y)
            })
            .collect()
    }

    #[test]
    fn bread_matches_numerical_jacobian() {
        let clusters = logistic_panel(3, 60, 4);
        for corr in [
            CorrStructure::Independence,
            CorrStructure::Exchangeable,
            CorrStructure::Ar1,
            CorrStructure::Unstructured,
        ] {
            let s = spec(LinkFunction::Logit, corr);
            let fit = solve_gee(&clusters, &s, &seq()).unwrap();
            assert!(fit.converged);
            let num = numerical_jacobian(
                |b| estimating_function(&clusters, b, &s, &fit.params).unwrap(),
                &fit.beta,
            )
            .unwrap();
            let rel = (&num - &fit.bread).amax() / fit.bread.amax();
            assert!(rel < 1e-4, "{corr:?}: {rel}");
            assert!(inf_norm(&fit.score_sum()) < 1e-6);
        }
    }

    #[test]
    fn gaussian_and_log_breads() {
        let mut rng = RngStream::new(9, 0);
        let clusters: Vec<Cluster> = (0..40)
            .map(|_| {
                let x = DMatrix::from_fn(3, 2, |j, k| {
                    if k == 0 {
                        1.0
                    } else {
                        j as f64 + rng.uniform()
                    }
                });
                let y = (0..3)
                    .map(|j| {
                        (0.3 + 0.4 * x[(j, 1)] + rng.standard_normal() * 0.3)
                            .exp()
                            .round()
                    })
                    .collect();
                Cluster::new(x, y)
            })
            .collect();
        for s in [
            GeeSpec::new(
                LinkFunction::Log,
                VarianceFunction::Poisson,
                CorrStructure::Ar1,
            ),
            GeeSpec::new(
                LinkFunction::Identity,
                VarianceFunction::Gaussian,
                CorrStructure::Exchangeable,
            ),
            GeeSpec::new(
                LinkFunction::Log,
                VarianceFunction::Gaussian,
                CorrStructure::Ar1,
            ),
        ] {
            let fit = solve_gee(&clusters, &s, &seq()).unwrap();
            let num = numerical_jacobian(
                |b| estimating_function(&clusters, b, &s, &fit.params).unwrap(),
                &fit.beta,
            )
            .unwrap();
            assert!(
                (&num - &fit.bread).amax() / fit.bread.amax() < 1e-4,
                "{s:?}"
            );
        }
    }

    #[test]
    fn robust_covariance_is_symmetric_psd() {
        let clusters = logistic_panel(4, 80, 5);
        let fit = solve_gee(
            &clusters,
            &spec(LinkFunction::Logit, CorrStructure::Ar1),
            &seq(),
        )
        .unwrap();
        assert_eq!(fit.cov_robust, fit.cov_robust.transpose());
        assert!(fit
            .cov_robust
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .all(|&l| l > -1e-12));
    }

    #[test]
    fn order_invariance() {
        let clusters = logistic_panel(5, 70, 5);
        let s = spec(LinkFunction::Logit, CorrStructure::Ar1);
        let a = solve_gee(&clusters, &s, &seq()).unwrap();
        let mut rev = clusters.clone();
        rev.reverse();
        let b = solve_gee(&rev, &s, &seq()).unwrap();
        assert!((a.beta - b.beta).amax() < 1e-8);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let clusters = logistic_panel(6, 90, 5);
        let s = spec(LinkFunction::Logit, CorrStructure::Exchangeable);
        let a = solve_gee(&clusters, &s, &seq()).unwrap();
        let b = solve_gee(&clusters, &s, &GeeOptions::default()).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.cov_robust, b.cov_robust);
    }

    #[test]
    fn separation_is_flagged() {
        let clusters: Vec<Cluster> = (-10..=10)
            .filter(|&i| i != 0)
            .map(|i| {
                let x = DMatrix::from_row_slice(1, 2, &[1.0, i as f64]);
                Cluster::new(x, vec![f64::from(i > 0)])
            })
            .collect();
        let r = solve_gee(
            &clusters,
            &spec(LinkFunction::Logit, CorrStructure::Independence),
            &seq(),
        );
        assert!(
            matches!(r, Err(GeeError::SeparationSuspected { .. })),
            "{r:?}"
        );
    }

    #[test]
    fn rank_deficiency_and_bad_responses() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let r = solve_gee(
            &[Cluster::new(x.clone(), vec![0.0, 1.0])],
            &spec(LinkFunction::Logit, CorrStructure::Independence),
            &seq(),
        );
        assert!(matches!(r, Err(GeeError::RankDeficientDesign)));
        let r = solve_gee(
            &[Cluster::new(x, vec![0.0, 2.0])],
            &spec(LinkFunction::Logit, CorrStructure::Independence),
            &seq(),
        );
        assert!(matches!(r, Err(GeeError::InvalidResponse { .. })));
    }

    #[test]
    fn single_point_clusters_under_ar1() {
        let mut clusters = logistic_panel(7, 150, 1);
        for c in &mut clusters {
            c.x = c.x.select_columns(&[0, 2]);
        }
        let a = solve_gee(
            &clusters,
            &spec(LinkFunction::Logit, CorrStructure::Ar1),
            &seq(),
        )
        .unwrap();
        let b = solve_gee(
            &clusters,
            &spec(LinkFunction::Logit, CorrStructure::Independence),
            &seq(),
        )
        .unwrap();
        assert_eq!(a.params.corr, WorkingCorrelation::Independence);
        assert!((a.beta - b.beta).amax() < 1e-10);
    }

    #[test]
    fn fitted_means_in_range() {
        let clusters = logistic_panel(8, 50, 3);
        let fit = solve_gee(
            &clusters,
            &spec(LinkFunction::Logit, CorrStructure::Ar1),
            &seq(),
        )
        .unwrap();
        for c in &clusters {
            let eta = &c.x * &fit.beta;
            assert!(eta.iter().all(|&e| {
                let mu = LinkFunction::Logit.inverse(e);
                mu > 0.0 && mu < 1.0
            }));
        }
    }
}
