use super::{MemSpec, NoiseModel, Scenario};

/// `E[Σw² (β₁ + β₃t)²]` averaged over the visits of the simulation design,
/// for the cumulative average with `t_j = U + j`, `U ~ U(0,1)`.
///
/// Multiplying by the noise variance gives the expected value of the
/// approximation diagnostic.
pub fn approximation_factor(beta1: f64, beta3: f64, n_times: usize) -> f64 {
    let total: f64 = (0..n_times)
        .map(|j| {
            // Squared norm of the cumulative-average weights at visit j.
            let w2 = if j == 0 { 1.0 } else { 1.0 / j as f64 };
            let m = beta1 + beta3 * j as f64;
            w2 * (m * m + beta3 * m + beta3 * beta3 / 3.0)
        })
        .sum();
    total / n_times as f64
}

/// The same scenario fitted with a calibration model lacking the
/// surrogate-by-time term. Idempotent.
pub fn misspecified_mem_scenario(base: &Scenario) -> Scenario {
    let mut s = base.clone();
    if s.mem_spec != MemSpec::NoInteraction {
        s.mem_spec = MemSpec::NoInteraction;
        s.name = format!("{}_mem-nointeraction", base.name);
    }
    s
}

/// A scenario where the first-order approximation degrades: a steep
/// exposure-by-time effect (`β₁ = log 1.2`, `β₃ = −log 2`) and a noise
/// variance chosen so the expected approximation diagnostic equals `target`.
pub fn stress_scenario(base: &Scenario, target: f64) -> Scenario {
    let mut s = base.clone();
    s.beta[1] = 1.2_f64.ln();
    s.beta[3] = -(2.0_f64.ln());
    let factor = approximation_factor(s.beta[1], s.beta[3], s.n_times);
    s.noise = NoiseModel::Fixed {
        variance: target / factor,
    };
    s.name = format!("{}_stress{:.0}", base.name, 100.0 * target);
    s
}
