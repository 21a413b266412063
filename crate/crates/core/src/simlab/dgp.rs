use nalgebra::{DMatrix, DVector};

use super::{NoiseModel, Scenario, SimError, ValidationMeasurements};
use crate::dataset::{Design, Role, Study, SubjectPanel};
use crate::exposure::cumulative_average;
use crate::numkit::{
    bivariate_normal_cdf, bivariate_normal_pdf, normal_quantile, psd_sqrt, MvnSampler, RngStream,
};

/// Stream offset separating validation subjects from main-study subjects.
const VALIDATION_STREAM: u64 = 1 << 40;
const LATENT_TOL: f64 = 1e-6;

/// Latent normal correlation reproducing a requested binary correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPair {
    pub latent: f64,
    /// Joint success probability actually targeted.
    pub p11: f64,
    /// Whether the request fell outside the attainable range and was clipped.
    pub clipped: bool,
}

/// Solves `P(Z₁ ≤ Φ⁻¹(p₁), Z₂ ≤ Φ⁻¹(p₂); r) = p₁p₂ + ρ√(p₁q₁p₂q₂)` for `r`.
///
/// The joint probability is increasing in `r`, so a bracketing search on
/// `[−1, 1]` always succeeds; Newton steps are taken when they stay inside
/// the bracket.
pub fn latent_pair_correlation(p1: f64, p2: f64, rho: f64) -> LatentPair {
    let lo = (p1 + p2 - 1.0).max(0.0);
    let hi = p1.min(p2);
    let wanted = p1 * p2 + rho * (p1 * (1.0 - p1) * p2 * (1.0 - p2)).sqrt();
    let p11 = wanted.clamp(lo, hi);
    let clipped = (p11 - wanted).abs() > 1e-12;
    if clipped {
        log::debug!("binary correlation {rho} infeasible for means ({p1:.4}, {p2:.4}); clipped to the Fréchet bound");
    }
    if p11 >= hi {
        return LatentPair {
            latent: 1.0,
            p11,
            clipped,
        };
    }
    if p11 <= lo {
        return LatentPair {
            latent: -1.0,
            p11,
            clipped,
        };
    }
    let (x, y) = (normal_quantile(p1), normal_quantile(p2));
    let (mut a, mut b) = (-1.0_f64, 1.0_f64);
    let mut r = 0.0;
    for _ in 0..200 {
        let f = bivariate_normal_cdf(x, y, r) - p11;
        if f > 0.0 {
            b = r;
        } else {
            a = r;
        }
        if b - a < LATENT_TOL || f == 0.0 {
            break;
        }
        let slope = bivariate_normal_pdf(x, y, r);
        let newton = r - f / slope;
        r = if slope > 0.0 && newton > a && newton < b && (newton - r).abs() < 0.5 * (b - a) {
            newton
        } else {
            0.5 * (a + b)
        };
        if (r - a).min(b - r) < 0.25 * LATENT_TOL {
            break;
        }
    }
    LatentPair {
        latent: r,
        p11,
        clipped,
    }
}

/// Correlated binary responses with the given means and AR(1) correlation
/// `lag_corr^|j−k|`, by thresholding a latent normal vector.
pub fn gen_binary_outcomes(
    means: &[f64],
    lag_corr: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>, SimError> {
    let m = means.len();
    if let Some(p) = means.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(SimError::Config(format!("outcome mean {p} outside (0, 1)")));
    }
    let mut z: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
    if lag_corr != 0.0 && m > 1 {
        let mut r = DMatrix::identity(m, m);
        for j in 0..m {
            for k in j + 1..m {
                let rho = lag_corr.powi((k - j) as i32);
                let v = latent_pair_correlation(means[j], means[k], rho).latent;
                r[(j, k)] = v;
                r[(k, j)] = v;
            }
        }
        let factor = match r.clone().cholesky() {
            Some(c) => c.l(),
            None => {
                log::debug!("latent outcome correlation not positive definite; projecting");
                psd_sqrt(&nearest_correlation(&r))?
            }
        };
        z = (factor * DVector::from_vec(z)).data.into();
    }
    Ok(z.iter()
        .zip(means)
        .map(|(zj, p)| if *zj <= normal_quantile(*p) { 1.0 } else { 0.0 })
        .collect())
}

/// Clips eigenvalues to a small positive floor and restores the unit diagonal.
fn nearest_correlation(r: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = r.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(1e-8));
    let a = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let d = a.diagonal().map(|v| 1.0 / v.sqrt());
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j])
}

/// Everything drawn for one subject before any of it is hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSubject {
    pub times: Vec<f64>,
    pub surrogate: Vec<f64>,
    pub covariate: Vec<f64>,
    pub exposure: Vec<f64>,
    pub noise_variance: Vec<f64>,
}

/// Precomputed data-generating process for one scenario.
#[derive(Debug, Clone)]
pub struct Generator {
    scenario: Scenario,
    sampler: MvnSampler,
    constant_noise: Option<f64>,
}

impl Generator {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let m = scenario.n_times;
        let ec = scenario.exposure_cov;
        let cov = DMatrix::from_fn(2 * m, 2 * m, |a, b| {
            let (ja, jb) = (a % m, b % m);
            let lag = ja.abs_diff(jb) as i32;
            match (a < m, b < m) {
                (true, true) => ec.rho_c.powi(lag),
                (false, false) => ec.rho_w.powi(lag),
                _ if ja == jb => ec.cross,
                _ => 0.0,
            }
        });
        let sampler = MvnSampler::new(DVector::zeros(2 * m), &cov)?;
        let mut gen = Self {
            scenario: scenario.clone(),
            sampler,
            constant_noise: None,
        };
        gen.constant_noise = match scenario.noise {
            NoiseModel::Fixed { variance } => Some(variance),
            NoiseModel::CalibratedVisit { visit } => {
                // σ²(t) is quadratic in t, so Simpson's rule is exact.
                let t0 = visit as f64;
                let vals = [t0, t0 + 0.5, t0 + 1.0].map(|t| gen.per_point_noise(t));
                let avg = (vals[0] + 4.0 * vals[1] + vals[2]) / 6.0;
                if avg < 0.0 {
                    return Err(SimError::InfeasibleCorrelation {
                        target: scenario.target_cor,
                        time: t0 + 0.5,
                        max: gen.max_correlation(t0 + 0.5),
                    });
                }
                Some(avg)
            }
            NoiseModel::PerPoint => None,
        };
        Ok(gen)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// `(Cov(c, C), Var(c) − σ²)` at time `t`.
    fn moments(&self, t: f64) -> (f64, f64) {
        let a = &self.scenario.alpha;
        let k = self.scenario.exposure_cov.cross;
        let b = a[1] + a[3] * t;
        (b + a[4] * k, b * b + a[4] * a[4] + 2.0 * b * a[4] * k)
    }

    /// Noise variance that makes `Cor(c, C)` equal the target at time `t`;
    /// negative when the target exceeds [`Generator::max_correlation`].
    pub fn per_point_noise(&self, t: f64) -> f64 {
        let (cov, signal) = self.moments(t);
        let r = self.scenario.target_cor;
        cov * cov / (r * r) - signal
    }

    /// `Cor(c, C)` at time `t` without noise.
    pub fn max_correlation(&self, t: f64) -> f64 {
        let (cov, signal) = self.moments(t);
        cov / signal.sqrt()
    }

    /// Population `Cor(c, C)` at time `t`.
    pub fn correlation(&self, t: f64) -> Result<f64, SimError> {
        let (cov, signal) = self.moments(t);
        Ok(cov / (signal + self.noise_variance(t)?).sqrt())
    }

    pub fn noise_variance(&self, t: f64) -> Result<f64, SimError> {
        if let Some(v) = self.constant_noise {
            return Ok(v);
        }
        let v = self.per_point_noise(t);
        if v < 0.0 {
            return Err(SimError::InfeasibleCorrelation {
                target: self.scenario.target_cor,
                time: t,
                max: self.max_correlation(t),
            });
        }
        Ok(v)
    }

    pub fn latent_subject(&self, rng: &mut RngStream) -> Result<LatentSubject, SimError> {
        let m = self.scenario.n_times;
        let a = &self.scenario.alpha;
        let t1 = rng.uniform();
        let times: Vec<f64> = (0..m).map(|j| t1 + j as f64).collect();
        let v = self.sampler.sample(rng);
        let surrogate: Vec<f64> = v.rows(0, m).iter().copied().collect();
        let covariate: Vec<f64> = v.rows(m, m).iter().copied().collect();
        let mut exposure = Vec::with_capacity(m);
        let mut noise_variance = Vec::with_capacity(m);
        for j in 0..m {
            let (c, t, w) = (surrogate[j], times[j], covariate[j]);
            let s2 = self.noise_variance(t)?;
            let eps = s2.sqrt() * rng.standard_normal();
            exposure.push(a[0] + a[1] * c + a[2] * t + a[3] * c * t + a[4] * w + eps);
            noise_variance.push(s2);
        }
        Ok(LatentSubject {
            times,
            surrogate,
            covariate,
            exposure,
            noise_variance,
        })
    }

    /// Marginal success probabilities given the true exposure history.
    pub fn outcome_means(&self, subject: &LatentSubject) -> Result<Vec<f64>, SimError> {
        let b = &self.scenario.beta;
        let s = cumulative_average(&subject.times, &subject.exposure)
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok((0..subject.times.len())
            .map(|j| {
                let t = subject.times[j];
                let eta =
                    b[0] + b[1] * s[j] + b[2] * t + b[3] * s[j] * t + b[4] * subject.covariate[j];
                crate::gee::LinkFunction::Logit.inverse(eta)
            })
            .collect())
    }

    /// One simulated replicate; identical `(base_seed, replicate)` pairs give
    /// identical studies.
    pub fn study(&self, replicate: u64) -> Result<Study, SimError> {
        let s = &self.scenario;
        let root = RngStream::new(s.base_seed, replicate);
        let main = (0..s.n1)
            .map(|i| gen_panel(self, Role::Main, i, &mut root.substream(i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let validation = (0..s.n2)
            .map(|k| {
                gen_panel(
                    self,
                    Role::Validation,
                    k,
                    &mut root.substream(VALIDATION_STREAM | k as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Study::new(s.design, main, validation))
    }
}

/// Draws one observed subject panel. Main subjects carry outcomes only;
/// validation subjects carry true exposure at the measured visits, plus
/// outcomes under internal validation.
pub fn gen_panel(
    gen: &Generator,
    role: Role,
    index: usize,
    rng: &mut RngStream,
) -> Result<SubjectPanel, SimError> {
    let s = gen.scenario();
    let subject = gen.latent_subject(rng)?;
    let m = subject.times.len();
    let prefix = match role {
        Role::Main => "m",
        Role::Validation => "v",
    };
    let mut panel = SubjectPanel::new(
        format!("{prefix}{index}"),
        subject.times.clone(),
        subject.surrogate.clone(),
    )
    .with_covariates(DMatrix::from_column_slice(m, 1, &subject.covariate));
    if role == Role::Validation {
        let measured: Vec<bool> = match s.validation_measurements {
            ValidationMeasurements::All => vec![true; m],
            ValidationMeasurements::Single => {
                let u: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
                let rank = u[1..].iter().filter(|x| **x < u[0]).count();
                (0..m).map(|j| j == rank).collect()
            }
        };
        panel = panel.with_true_exposure(
            subject
                .exposure
                .iter()
                .zip(&measured)
                .map(|(c, keep)| keep.then_some(*c))
                .collect(),
        );
    }
    if role == Role::Main || s.design == Design::MsIvs {
        let means = gen.outcome_means(&subject)?;
        panel = panel.with_outcome(gen_binary_outcomes(&means, s.outcome_lag_corr, rng)?);
    }
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::normal_cdf;

    fn quick(design: Design) -> Scenario {
        let mut s = Scenario::preset(design, 40, 10, 0.9, false);
        s.replicates = 2;
        s
    }

    #[test]
    fn calibrated_noise_matches_closed_form() {
        for (cor, want) in [(0.9, 0.336), (0.75, 1.290)] {
            let s = Scenario::preset(Design::MsEvs, 10, 10, cor, false);
            let g = Generator::new(&s).unwrap();
            assert!(
                (g.noise_variance(3.7).unwrap() - want).abs() < 5e-4,
                "{cor}"
            );
        }
    }

    #[test]
    fn per_point_noise_hits_target_everywhere() {
        let mut s = Scenario::preset(Design::MsEvs, 10, 10, 0.8, false);
        s.noise = NoiseModel::PerPoint;
        let g = Generator::new(&s).unwrap();
        for t in [0.1, 1.5, 4.9] {
            assert!((g.correlation(t).unwrap() - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_target_is_reported() {
        let mut s = Scenario::preset(Design::MsEvs, 10, 10, 0.999, false);
        s.noise = NoiseModel::PerPoint;
        let g = Generator::new(&s).unwrap();
        let err = g.noise_variance(0.0).unwrap_err();
        assert!(matches!(err, SimError::InfeasibleCorrelation { .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn latent_pair_reproduces_joint_probability() {
        for (p1, p2, rho) in [
            (0.3, 0.6, 0.2),
            (0.05, 0.1, 0.1),
            (0.5, 0.5, -0.4),
            (0.2, 0.2, 0.0),
        ] {
            let lp = latent_pair_correlation(p1, p2, rho);
            assert!(!lp.clipped);
            let (x, y) = (normal_quantile(p1), normal_quantile(p2));
            let got = bivariate_normal_cdf(x, y, lp.latent);
            let dp = bivariate_normal_pdf(x, y, lp.latent);
            assert!(
                (got - lp.p11).abs() <= dp * LATENT_TOL + 1e-12,
                "{p1} {p2} {rho}"
            );
        }
        assert!(latent_pair_correlation(0.2, 0.2, 0.0).latent.abs() < 1e-6);
    }

    #[test]
    fn infeasible_binary_correlation_is_clipped() {
        // Equal means admit correlation up to 1, unequal ones do not.
        assert!(!latent_pair_correlation(0.5, 0.5, 0.999).clipped);
        let lp = latent_pair_correlation(0.05, 0.5, 0.999);
        assert!(lp.clipped);
        assert_eq!(lp.p11, 0.05);
        assert_eq!(lp.latent, 1.0);
    }

    #[test]
    fn binary_moments() {
        let means = [0.1, 0.3, 0.5, 0.3, 0.1];
        let lag = 0.4;
        let mut rng = RngStream::new(7, 0);
        let n = 40_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| gen_binary_outcomes(&means, lag, &mut rng).unwrap())
            .collect();
        for j in 0..5 {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            assert!(
                (mean - means[j]).abs() < 4.0 * (means[j] * (1.0 - means[j]) / n as f64).sqrt()
            );
        }
        for (j, k) in [(1, 2), (0, 2)] {
            let p11 = draws.iter().filter(|d| d[j] == 1.0 && d[k] == 1.0).count() as f64 / n as f64;
            let (pj, pk) = (means[j], means[k]);
            let corr = (p11 - pj * pk) / (pj * (1.0 - pj) * pk * (1.0 - pk)).sqrt();
            let want = lag.powi((k - j) as i32);
            assert!((corr - want).abs() < 0.03, "{j}{k}: {corr} vs {want}");
        }
        // The threshold rule is the normal cdf.
        assert!((normal_cdf(normal_quantile(0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn exposure_moments() {
        let mut s = Scenario::preset(Design::MsEvs, 1, 1, 0.75, false);
        s.noise = NoiseModel::PerPoint;
        let g = Generator::new(&s).unwrap();
        let mut rng = RngStream::new(11, 3);
        let n = 40_000;
        let subjects: Vec<LatentSubject> = (0..n)
            .map(|_| g.latent_subject(&mut rng).unwrap())
            .collect();
        let corr = |j: usize, f: &dyn Fn(&LatentSubject) -> f64| {
            let xs: Vec<f64> = subjects.iter().map(|x| x.surrogate[j]).collect();
            let ys: Vec<f64> = subjects.iter().map(f).collect();
            let (mx, my) = (mean(&xs), mean(&ys));
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            sxy / (sxx * syy).sqrt()
        };
        // Per-point calibration keeps Cor(c, C) at the target at each visit.
        for j in 0..5 {
            let r = corr(j, &|x: &LatentSubject| x.exposure[j]);
            assert!((r - 0.75).abs() < 0.015, "visit {j}: {r}");
        }
        assert!((corr(0, &|x: &LatentSubject| x.surrogate[1]) - 0.6).abs() < 0.015);
        assert!((corr(2, &|x: &LatentSubject| x.covariate[2]) - 0.4).abs() < 0.015);
        assert!(corr(2, &|x: &LatentSubject| x.covariate[3]).abs() < 0.015);
        let t1: Vec<f64> = subjects.iter().map(|x| x.times[0]).collect();
        assert!((mean(&t1) - 0.5).abs() < 0.01);
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn study_shape_by_design() {
        let evs = Generator::new(&quick(Design::MsEvs))
            .unwrap()
            .study(0)
            .unwrap();
        assert_eq!((evs.n_main(), evs.n_validation()), (40, 10));
        assert!(evs
            .main
            .iter()
            .all(|p| p.outcome.is_some() && p.n_true() == 0));
        assert!(evs
            .validation
            .iter()
            .all(|p| p.outcome.is_none() && p.n_true() == 1));
        assert!(crate::dataset::validate_study(&evs).is_empty());

        let mut s = quick(Design::MsIvs);
        s.validation_measurements = ValidationMeasurements::All;
        let ivs = Generator::new(&s).unwrap().study(0).unwrap();
        assert!(ivs
            .validation
            .iter()
            .all(|p| p.outcome.is_some() && p.n_true() == 5));
    }

    #[test]
    fn single_visit_is_roughly_uniform() {
        let mut s = quick(Design::MsEvs);
        s.n1 = 1;
        s.n2 = 5000;
        let st = Generator::new(&s).unwrap().study(4).unwrap();
        let mut counts = [0usize; 5];
        for p in &st.validation {
            counts[p.true_exposure.iter().position(Option::is_some).unwrap()] += 1;
        }
        assert!(
            counts.iter().all(|c| (*c as f64 - 1000.0).abs() < 130.0),
            "{counts:?}"
        );
    }

    #[test]
    fn studies_are_reproducible_and_distinct() {
        let g = Generator::new(&quick(Design::MsIvs)).unwrap();
        assert_eq!(g.study(3).unwrap(), g.study(3).unwrap());
        assert_ne!(g.study(3).unwrap(), g.study(4).unwrap());
    }
}
