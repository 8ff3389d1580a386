//! Gumbel noise, the Gumbel-Softmax relaxation and temperature annealing.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform draws are clamped into `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]` before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    /// Temperature.
    pub tau: f64,
    /// Noise weight; 1 while training, 0 for generation.
    pub omega: f64,
    /// Number of categories.
    pub k: usize,
}

impl GumbelConfig {
    pub fn new(tau: f64, omega: f64, k: usize) -> Result<Self> {
        let cfg = GumbelConfig { tau, omega, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !self.omega.is_finite() {
            return Err(Error::contract("noise weight must be finite"));
        }
        if self.k < 2 {
            return Err(Error::contract(format!(
                "need at least 2 categories, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Exponential temperature decay with a floor.
///
/// The temperature is multiplied by `factor` once every `interval` steps and
/// never drops below `cutoff`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealingSchedule {
    pub tau_start: f64,
    pub factor: f64,
    pub cutoff: f64,
    pub interval: u64,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        AnnealingSchedule {
            tau_start: 2.0,
            factor: 0.9999,
            cutoff: 0.1,
            interval: 1,
        }
    }
}

impl AnnealingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_start.is_finite()) {
            return Err(Error::contract("tau_start must be positive"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::contract("annealing factor must lie in (0, 1)"));
        }
        if !(self.cutoff > 0.0 && self.cutoff < self.tau_start) {
            return Err(Error::contract("cutoff must lie in (0, tau_start)"));
        }
        if self.interval == 0 {
            return Err(Error::contract("annealing interval must be positive"));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: u64) -> f64 {
        let decays = (step / self.interval) as f64;
        (self.tau_start * self.factor.powf(decays)).max(self.cutoff)
    }
}

/// Inverse CDF of the standard Gumbel distribution, with clamping.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| gumbel_from_uniform(rng.random::<f64>()))
        .collect()
}

/// A `rows x k` matrix of independent Gumbel draws.
pub fn sample_gumbel_matrix<R: Rng + ?Sized>(rows: usize, k: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, k, |_, _| gumbel_from_uniform(rng.random::<f64>()))
}

/// `softmax((logits + omega * noise) / tau)` with the noise supplied by the caller.
pub fn gumbel_softmax_with_noise(
    logits: &[f64],
    noise: &[f64],
    tau: f64,
    omega: f64,
) -> Result<Vec<f64>> {
    GumbelConfig::new(tau, omega, logits.len().max(2))?;
    if noise.len() != logits.len() {
        return Err(Error::contract("noise and logits differ in length"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "gumbel_softmax",
        });
    }
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + omega * g) / tau)
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn gumbel_softmax<R: Rng + ?Sized>(
    logits: &[f64],
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if logits.len() != cfg.k {
        return Err(Error::contract(format!(
            "expected {} logits, got {}",
            cfg.k,
            logits.len()
        )));
    }
    let noise = if cfg.omega == 0.0 {
        vec![0.0; cfg.k]
    } else {
        sample_gumbel(cfg.k, rng)
    };
    gumbel_softmax_with_noise(logits, &noise, cfg.tau, cfg.omega)
}

/// Row-wise Gumbel-Softmax inside a graph, differentiable w.r.t. `logits`.
///
/// `noise` must have the shape of `logits`; pass `None` when `omega` is 0.
pub fn gumbel_softmax_var(
    g: &mut Graph,
    logits: Var,
    noise: Option<&Tensor>,
    tau: f64,
    omega: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let perturbed = match noise {
        Some(n) if omega != 0.0 => {
            if n.shape() != g.value(logits).shape() {
                return Err(Error::contract("gumbel noise shape differs from logits"));
            }
            let nv = g.constant(n.map(|v| omega * v));
            g.add(logits, nv)?
        }
        _ => logits,
    };
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    g.softmax(scaled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub draw: usize,
    pub sample: Vec<f64>,
}

/// Draws `draws_per_tau` noisy samples from the same logits at each temperature.
pub fn sample_sweep<R: Rng + ?Sized>(
    logits: &[f64],
    taus: &[f64],
    draws_per_tau: usize,
    rng: &mut R,
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::contract(format!(
            "sweep temperature must be positive, got {bad}"
        )));
    }
    let mut rows = Vec::with_capacity(taus.len() * draws_per_tau);
    for &tau in taus {
        for draw in 0..draws_per_tau {
            let noise = sample_gumbel(logits.len(), rng);
            let sample = gumbel_softmax_with_noise(logits, &noise, tau, 1.0)?;
            rows.push(SweepRow { tau, draw, sample });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "tau,draw,component,value")?;
    for row in rows {
        for (c, v) in row.sample.iter().enumerate() {
            writeln!(out, "{},{},{},{}", row.tau, row.draw, c, v)?;
        }
    }
    Ok(())
}

/// Per-temperature statistics of the largest sample component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub tau: f64,
    pub draws: usize,
    pub median_max: f64,
    pub mean_max: f64,
}

/// Summaries in the order temperatures first appear in `rows`.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut taus: Vec<f64> = Vec::new();
    for r in rows {
        if !taus.contains(&r.tau) {
            taus.push(r.tau);
        }
    }
    taus.into_iter()
        .map(|tau| {
            let mut maxes: Vec<f64> = rows
                .iter()
                .filter(|r| r.tau == tau)
                .map(|r| r.sample.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            maxes.sort_by(f64::total_cmp);
            let n = maxes.len();
            let median_max = if n % 2 == 1 {
                maxes[n / 2]
            } else {
                0.5 * (maxes[n / 2 - 1] + maxes[n / 2])
            };
            SweepSummary {
                tau,
                draws: n,
                median_max,
                mean_max: maxes.iter().sum::<f64>() / n as f64,
            }
        })
        .collect()
}

pub fn write_sweep_summary_csv<W: Write>(rows: &[SweepSummary], mut out: W) -> std::io::Result<()> {
    writeln!(out, "tau,draws,median_max,mean_max")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.tau, r.draws, r.median_max, r.mean_max)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn gumbel_of_inverse_e_is_zero() {
        let g = gumbel_from_uniform((-1.0f64).exp());
        assert!(g.abs() < 1e-15, "{g}");
    }

    #[test]
    fn gumbel_inversion_gives_minus_one() {
        let u = (-std::f64::consts::E).exp();
        assert!((gumbel_from_uniform(u) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_extremes_are_finite() {
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
        assert!(gumbel_from_uniform(0.0) < gumbel_from_uniform(1.0));
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let mean: f64 = sample_gumbel(n, &mut rng).iter().sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn noiseless_unit_temperature_is_softmax() {
        let logits = [0.5, -1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GumbelConfig::new(1.0, 0.0, 3).unwrap();
        let out = gumbel_softmax(&logits, &cfg, &mut rng).unwrap();
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for (o, l) in out.iter().zip(logits) {
            assert!((o - l.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GumbelConfig::new(0.01, 0.0, 3).unwrap();
        let out = gumbel_softmax(&[2.0, 1.0, 0.0], &cfg, &mut rng).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!(out[1] < 1e-4 && out[2] < 1e-4);
    }

    #[test]
    fn argmax_frequency_matches_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GumbelConfig::new(0.5, 1.0, 2).unwrap();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let s = gumbel_softmax(&[1.0, 0.0], &cfg, &mut rng).unwrap();
                s[0] > s[1]
            })
            .count();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((hits as f64 / n as f64 - expected).abs() < 0.01);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        assert!(GumbelConfig::new(0.0, 1.0, 3).is_err());
        assert!(GumbelConfig::new(-1.0, 1.0, 3).is_err());
        assert!(GumbelConfig::new(1.0, 1.0, 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = GumbelConfig {
            tau: 0.0,
            omega: 0.0,
            k: 2,
        };
        assert!(matches!(
            gumbel_softmax(&[0.0, 0.0], &bad, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn schedule_values() {
        let s = AnnealingSchedule::default();
        assert_eq!(s.tau_at(0), 2.0);
        let t = s.tau_at(10_000);
        assert!((t - 2.0 * 0.9999f64.powi(10_000)).abs() < 1e-12);
        assert!((t - 0.7357).abs() < 1e-3, "{t}");
        assert_eq!(s.tau_at(u64::MAX), 0.1);
        assert_eq!(s.tau_at(10_000_000), 0.1);
    }

    #[test]
    fn schedule_interval_holds_tau_between_decays() {
        let s = AnnealingSchedule {
            interval: 10,
            factor: 0.5,
            ..Default::default()
        };
        assert_eq!(s.tau_at(9), 2.0);
        assert_eq!(s.tau_at(10), 1.0);
        assert_eq!(s.tau_at(19), 1.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(AnnealingSchedule::default().validate().is_ok());
        let bad = [
            AnnealingSchedule {
                factor: 1.0,
                ..Default::default()
            },
            AnnealingSchedule {
                cutoff: 3.0,
                ..Default::default()
            },
            AnnealingSchedule {
                interval: 0,
                ..Default::default()
            },
            AnnealingSchedule {
                tau_start: 0.0,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn empty_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows = sample_sweep(&[0.0; 4], &[0.1, 1.0], 0, &mut rng).unwrap();
        assert!(rows.is_empty());
        assert!(sample_sweep(&[0.0; 4], &[0.0], 3, &mut rng).is_err());
    }

    #[test]
    fn sweep_is_deterministic_and_csv_shaped() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_sweep(&[0.0; 3], &[0.1, 2.0], 4, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_sweep_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "tau,draw,component,value");
        assert_eq!(lines.len(), 1 + 2 * 4 * 3);
    }

    #[test]
    fn low_temperature_sweep_is_near_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = sample_sweep(&[0.0; 10], &[0.05], 1000, &mut rng).unwrap();
        let mut maxes: Vec<f64> = rows
            .iter()
            .map(|r| r.sample.iter().copied().fold(0.0, f64::max))
            .collect();
        maxes.sort_by(f64::total_cmp);
        assert!(maxes[500] > 0.99, "{}", maxes[500]);
    }

    #[test]
    fn frozen_noise_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = sample_gumbel_matrix(3, 5, &mut rng);
        let logits = Tensor::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let weights = Tensor::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let report = grad_check(&[logits], 1e-4, 1e-4, |g, p| {
            let s = gumbel_softmax_var(g, p[0], Some(&noise), 0.7, 1.0)?;
            let w = g.constant(weights.clone());
            let m = g.mul(s, w)?;
            g.sum(m)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn output_is_probability_vector(
            logits in prop::collection::vec(-50.0f64..50.0, 2..12),
            tau in 0.01f64..10.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = GumbelConfig::new(tau, 1.0, logits.len()).unwrap();
            let s = gumbel_softmax(&logits, &cfg, &mut rng).unwrap();
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn noiseless_max_component_decreases_with_tau(
            logits in prop::collection::vec(-3.0f64..3.0, 2..8),
            tau in 0.05f64..5.0,
        ) {
            let spread = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - logits.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let zero = vec![0.0; logits.len()];
            let lo = gumbel_softmax_with_noise(&logits, &zero, tau, 0.0).unwrap();
            let hi = gumbel_softmax_with_noise(&logits, &zero, tau * 1.5, 0.0).unwrap();
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            prop_assert!(max(&lo) > max(&hi));
        }

        #[test]
        fn tau_at_is_monotone_and_bounded(
            start in 0.5f64..5.0,
            factor in 0.5f64..0.99999,
            cut_frac in 0.01f64..0.99,
            interval in 1u64..20,
            step in 0u64..100_000,
        ) {
            let s = AnnealingSchedule { tau_start: start, factor, cutoff: start * cut_frac, interval };
            prop_assert!(s.tau_at(step + 1) <= s.tau_at(step));
            prop_assert!(s.tau_at(step) >= s.cutoff);
        }
    }

    #[test]
    fn sweep_summary_medians_fall_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..10).map(|i| -(i as f64) * 0.3).collect();
        let rows = sample_sweep(&logits, &[0.05, 0.1, 0.2, 2.0, 5.0], 1000, &mut rng).unwrap();
        let summary = summarize_sweep(&rows);
        assert_eq!(summary.len(), 5);
        assert!(summary[0].median_max > 0.99);
        assert!(summary
            .windows(2)
            .all(|w| w[0].median_max > w[1].median_max));
        assert!(summary.iter().all(|s| s.draws == 1000));
    }
}
