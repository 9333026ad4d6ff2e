//! Slot-level simulation: cost at slot start, decide, sample, serve, admit.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::channel::{sample_outcome_into, DecodeModel};
use crate::error::{Error, Result};
use crate::model::{stage_cost, SchedulingDecision, SlotOutcome, SystemConfig, SystemState};
use crate::par::Execution;
use crate::policy::{Policy, PolicyKind};

pub const DEFAULT_WARMUP: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub config: SystemConfig,
    pub policy: PolicyKind,
    /// Number of slots `B`; draining runs stop earlier once empty.
    pub horizon: u64,
    pub seed: u64,
    /// Queue cap; arrivals beyond it are dropped and counted.
    #[serde(default)]
    pub x_cap: Option<u32>,
    /// Leading slots excluded from [`SimMetrics::avg_cost_after_warmup`].
    #[serde(default = "default_warmup")]
    pub warmup: u64,
}

fn default_warmup() -> u64 {
    DEFAULT_WARMUP
}

impl SimRun {
    pub fn new(config: &SystemConfig, policy: PolicyKind, horizon: u64, seed: u64) -> Self {
        Self {
            config: config.clone(),
            policy,
            horizon,
            seed,
            x_cap: None,
            warmup: DEFAULT_WARMUP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least one slot".into()));
        }
        if let Some(cap) = self.x_cap {
            if (0..self.config.num_users).any(|i| self.config.backlog(i) > cap) {
                return Err(Error::InvalidConfig(
                    "initial backlog exceeds the queue cap".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UserMetrics {
    pub cost: f64,
    pub decoded: u64,
    /// Packets discarded after a failed attempt at the retransmission limit.
    pub discarded: u64,
    /// Arrivals dropped at the queue cap.
    pub truncated: u64,
    pub arrivals: u64,
    pub final_backlog: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub seed: u64,
    pub horizon: u64,
    /// Slots actually simulated.
    pub slots: u64,
    pub cumulative_cost: f64,
    /// `cumulative_cost / horizon`.
    pub avg_cost: f64,
    /// Average over slots after the warm-up, if any remain.
    pub avg_cost_after_warmup: Option<f64>,
    pub decoded: u64,
    /// `decoded / horizon`.
    pub throughput: f64,
    pub discarded: u64,
    pub truncated: u64,
    pub arrivals: u64,
    pub initial_backlog: u64,
    pub final_backlog: u64,
    /// First slot at which a draining run found the system empty.
    pub drain_slot: Option<u64>,
    pub per_user: Vec<UserMetrics>,
}

impl SimMetrics {
    /// Discards plus truncation drops.
    pub fn dropped(&self) -> u64 {
        self.discarded + self.truncated
    }

    /// `arrivals + initial == decoded + dropped + final backlog`.
    pub fn is_conserved(&self) -> bool {
        self.arrivals + self.initial_backlog == self.decoded + self.dropped() + self.final_backlog
    }
}

/// Runs one simulation, building the policy from `spec`.
pub fn run(spec: &SimRun) -> Result<SimMetrics> {
    spec.validate()?;
    let x_cap = spec.x_cap.unwrap_or(0);
    let policy = Policy::with_drain_cap(spec.policy, &spec.config, x_cap)?;
    run_with_policy(spec, &policy)
}

/// Runs one simulation with a prebuilt policy for `spec.config`.
pub fn run_with_policy(spec: &SimRun, policy: &Policy) -> Result<SimMetrics> {
    spec.validate()?;
    let cfg = &spec.config;
    let model: &DecodeModel = policy.model();
    if model.config() != cfg {
        return Err(Error::ContractViolation(
            "policy was built for a different configuration".into(),
        ));
    }
    let n = cfg.num_users;
    let draining = !cfg.has_arrivals();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut state = SystemState::initial(cfg);
    let mut per_user = vec![UserMetrics::default(); n];
    let mut truncated = vec![0u64; n];
    let mut outcome = SlotOutcome {
        user_decoded: false,
        relay_decodes: Vec::new(),
        arrivals: vec![0; n],
    };
    let initial_backlog = state.bs.total_backlog();
    let mut cumulative = 0.0;
    let mut after_warmup = 0.0;
    let mut last_served = None;
    let mut drain_slot = None;
    let mut slots = 0;

    for slot in 0..spec.horizon {
        if draining && state.bs.is_empty() {
            drain_slot = Some(slot);
            break;
        }
        let c = stage_cost(&state.bs, cfg);
        cumulative += c;
        if slot >= spec.warmup {
            after_warmup += c;
        }
        for (i, u) in per_user.iter_mut().enumerate() {
            if state.bs.queue_lengths[i] > 0 {
                u.cost += match &cfg.drain_costs {
                    Some(f) => f[i].eval(state.bs.queue_lengths[i]),
                    None => cfg.cost_rates[i][state.bs.hol_retx[i]],
                };
            }
        }

        let decision = policy.decide(&state, last_served)?;
        sample_outcome_into(&mut rng, &decision, &state, model, &mut outcome);
        if let SchedulingDecision::Serve { user, .. } = decision {
            last_served = Some(user);
            let ev = state.apply_service(cfg, &decision, outcome.user_decoded, &outcome.relay_decodes)?;
            if let Some(i) = ev.decoded {
                per_user[i].decoded += 1;
            }
            if let Some(i) = ev.discarded {
                per_user[i].discarded += 1;
            }
        }
        for (u, &a) in per_user.iter_mut().zip(&outcome.arrivals) {
            u.arrivals += u64::from(a);
        }
        state.admit_arrivals(&outcome.arrivals, spec.x_cap, &mut truncated);
        slots = slot + 1;
    }
    if draining && drain_slot.is_none() && state.bs.is_empty() {
        drain_slot = Some(slots);
    }

    for (i, u) in per_user.iter_mut().enumerate() {
        u.truncated = truncated[i];
        u.final_backlog = u64::from(state.bs.queue_lengths[i]);
    }
    let sum = |f: fn(&UserMetrics) -> u64| per_user.iter().map(f).sum::<u64>();
    let decoded = sum(|u| u.decoded);
    let b = spec.horizon as f64;
    Ok(SimMetrics {
        seed: spec.seed,
        horizon: spec.horizon,
        slots,
        cumulative_cost: cumulative,
        avg_cost: cumulative / b,
        avg_cost_after_warmup: (spec.horizon > spec.warmup)
            .then(|| after_warmup / (spec.horizon - spec.warmup) as f64),
        decoded,
        throughput: decoded as f64 / b,
        discarded: sum(|u| u.discarded),
        truncated: sum(|u| u.truncated),
        arrivals: sum(|u| u.arrivals),
        initial_backlog,
        final_backlog: sum(|u| u.final_backlog),
        drain_slot,
        per_user,
    })
}

/// Sample mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub std_dev: f64,
    pub half_width: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn from_samples(xs: &[f64]) -> Self {
        Self::with_confidence(xs, 0.95)
    }

    pub fn with_confidence(xs: &[f64], level: f64) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_dev: f64::NAN,
                half_width: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self {
                mean,
                std_dev: 0.0,
                half_width: 0.0,
                n,
            };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_dev = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map(|d| d.inverse_cdf(0.5 + level / 2.0))
            .unwrap_or(f64::NAN);
        Self {
            mean,
            std_dev,
            half_width: t * std_dev / (n as f64).sqrt(),
            n,
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lower()..=self.upper()).contains(&x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub avg_cost: MeanCi,
    pub throughput: MeanCi,
    pub decoded: MeanCi,
    pub dropped: MeanCi,
    pub avg_cost_after_warmup: Option<MeanCi>,
}

impl RunSummary {
    pub fn from_runs(runs: &[SimMetrics]) -> Self {
        let col = |f: &dyn Fn(&SimMetrics) -> f64| {
            MeanCi::from_samples(&runs.iter().map(f).collect::<Vec<_>>())
        };
        let warm: Option<Vec<f64>> = runs.iter().map(|m| m.avg_cost_after_warmup).collect();
        Self {
            avg_cost: col(&|m| m.avg_cost),
            throughput: col(&|m| m.throughput),
            decoded: col(&|m| m.decoded as f64),
            dropped: col(&|m| m.dropped() as f64),
            avg_cost_after_warmup: warm.map(|w| MeanCi::from_samples(&w)),
        }
    }
}

/// Replicated runs of one spec.
#[derive(Debug, Clone, Serialize)]
pub struct Replicated {
    pub runs: Vec<SimMetrics>,
    pub summary: RunSummary,
}

/// Seeds for `count` runs, drawn in order from a generator keyed by `master`.
pub fn derive_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Runs every spec `replications` times. The seed field of each spec is
/// ignored; seeds come from `master` in spec-major order, so results do not
/// depend on the execution mode.
pub fn run_many(
    specs: &[SimRun],
    replications: usize,
    master: u64,
    exec: Execution,
) -> Result<Vec<Replicated>> {
    if replications == 0 {
        return Err(Error::InvalidConfig("at least one replication required".into()));
    }
    let mut policies = Vec::with_capacity(specs.len());
    for s in specs {
        s.validate()?;
        policies.push(Policy::with_drain_cap(s.policy, &s.config, s.x_cap.unwrap_or(0))?);
    }
    let seeds = derive_seeds(master, specs.len() * replications);
    let jobs: Vec<(usize, u64)> = seeds
        .iter()
        .enumerate()
        .map(|(k, &seed)| (k / replications, seed))
        .collect();
    let results = exec.map(&jobs, |&(k, seed)| {
        let spec = SimRun {
            seed,
            ..specs[k].clone()
        };
        run_with_policy(&spec, &policies[k])
    });
    let mut results = results.into_iter();
    let mut out = Vec::with_capacity(specs.len());
    for _ in specs {
        let runs = results
            .by_ref()
            .take(replications)
            .collect::<Result<Vec<_>>>()?;
        let summary = RunSummary::from_runs(&runs);
        out.push(Replicated { runs, summary });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::two_user_config;
    use crate::model::ConvexCost;

    fn one_shot_queue(lambda: f64) -> SystemConfig {
        SystemConfig {
            num_users: 1,
            num_relays: 0,
            arrival_rates: vec![lambda],
            cost_rates: vec![vec![1.0]],
            retx_limits: vec![0],
            bs_channel_params: vec![0.5],
            relay_channel_params: vec![],
            bs_relay_params: vec![],
            decode_decay: 0.9,
            initial_backlog: vec![],
            drain_costs: None,
        }
    }

    #[test]
    fn idle_system_costs_nothing() {
        let m = run(&SimRun::new(&one_shot_queue(0.0), PolicyKind::RlpaIndex, 100, 1)).unwrap();
        assert_eq!(m.cumulative_cost, 0.0);
        assert_eq!(m.throughput, 0.0);
        assert_eq!(m.drain_slot, Some(0));
    }

    #[test]
    fn one_shot_throughput_matches_arrival_rate() {
        let m = run(&SimRun::new(&one_shot_queue(0.3), PolicyKind::RlpaIndex, 1_000_000, 9)).unwrap();
        assert!((m.throughput - 0.3).abs() < 0.002, "{}", m.throughput);
        assert!(m.is_conserved());
    }

    #[test]
    fn reproducible_and_conserved() {
        let mut spec = SimRun::new(&two_user_config(), PolicyKind::RlpaIndex, 20_000, 42);
        spec.x_cap = Some(3);
        let a = run(&spec).unwrap();
        let b = run(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.is_conserved());
        assert!(a.truncated > 0);
        assert!((0.0..=1.0).contains(&a.throughput));
        spec.seed = 43;
        assert_ne!(run(&spec).unwrap(), a);
    }

    #[test]
    fn draining_run_stops_when_empty() {
        let mut cfg = two_user_config();
        cfg.arrival_rates = vec![0.0, 0.0];
        cfg.initial_backlog = vec![2, 2];
        cfg.drain_costs = Some(vec![ConvexCost::Quadratic { weight: 1.0 }; 2]);
        let m = run(&SimRun::new(&cfg, PolicyKind::RdcIndex, 1_000, 5)).unwrap();
        let d = m.drain_slot.unwrap();
        assert!((4..=12).contains(&d));
        assert_eq!(m.slots, d);
        assert_eq!(m.final_backlog, 0);
        assert!(m.is_conserved());
    }

    #[test]
    fn degenerate_ci_with_one_replication() {
        let spec = SimRun::new(&two_user_config(), PolicyKind::RlpaIndex, 1_000, 0);
        let out = run_many(&[spec], 1, 7, Execution::Sequential).unwrap();
        let s = &out[0].summary.avg_cost;
        assert_eq!(s.half_width, 0.0);
        assert_eq!(s.mean, out[0].runs[0].avg_cost);
    }

    #[test]
    fn run_many_is_mode_independent() {
        let spec = SimRun::new(&two_user_config(), PolicyKind::RlpaIndex, 2_000, 0);
        let specs = vec![spec.clone(), SimRun { policy: PolicyKind::LongestQueue, ..spec }];
        let a = run_many(&specs, 3, 11, Execution::Sequential).unwrap();
        let b = run_many(&specs, 3, 11, Execution::Parallel { jobs: 3 }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.runs, y.runs);
        }
        assert_ne!(a[0].runs[0].seed, a[0].runs[1].seed);
    }

    #[test]
    fn interval_examples() {
        let ci = MeanCi::from_samples(&[1.0, 2.0, 3.0]);
        assert!((ci.mean - 2.0).abs() < 1e-15);
        assert!((ci.std_dev - 1.0).abs() < 1e-15);
        // t_{0.975, 2} = 4.302653
        assert!((ci.half_width - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
        assert!(ci.contains(2.0));
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = SimRun::new(&two_user_config(), PolicyKind::RlpaIndex, 0, 0);
        assert!(run(&spec).is_err());
        let spec = SimRun::new(&two_user_config(), PolicyKind::RdcIndex, 10, 0);
        assert!(run(&spec).is_err());
        assert!(run_many(&[], 0, 0, Execution::Sequential).is_err());
    }
}
