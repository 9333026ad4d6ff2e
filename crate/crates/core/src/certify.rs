//! Random-instance campaigns comparing the index policies with the exact oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::klimov::build_rlpak;
use crate::model::{ConvexCost, SystemConfig, SystemState};
use crate::oracle::{AverageOptions, Mdp, MdpSpec, DEFAULT_STATE_LIMIT};
use crate::par::Execution;
use crate::policy::{Policy, PolicyKind};
use crate::sim::{derive_seeds, run_many, MeanCi, SimRun};
use crate::DecodeModel;

/// Gap below which a draining policy counts as optimal.
pub const DRAIN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSpec {
    pub draining_instances: usize,
    pub average_instances: usize,
    pub max_users: usize,
    pub max_relays: usize,
    pub max_retx: usize,
    pub max_backlog: u32,
    /// Queue cap of the average-cost instances.
    pub x_cap: u32,
    pub horizon: u64,
    pub warmup: u64,
    pub replications: usize,
    /// Family-wise confidence level across all average-cost instances.
    pub confidence: f64,
    /// Draining instance whose policy is replaced by LONGEST_QUEUE.
    pub negative_control: Option<usize>,
    pub state_limit: usize,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        Self {
            draining_instances: 100,
            average_instances: 0,
            max_users: 2,
            max_relays: 2,
            max_retx: 2,
            max_backlog: 2,
            x_cap: 6,
            horizon: 200_000,
            warmup: 10_000,
            replications: 10,
            confidence: 0.95,
            negative_control: None,
            state_limit: DEFAULT_STATE_LIMIT,
        }
    }
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_users == 0 {
            return Err(Error::InvalidConfig("max_users must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.confidence) {
            return Err(Error::InvalidConfig("confidence must lie in [0, 1)".into()));
        }
        if self.average_instances > 0 && (self.replications < 2 || self.horizon <= self.warmup) {
            return Err(Error::InvalidConfig(
                "average-cost checks need two replications and a horizon beyond the warm-up"
                    .into(),
            ));
        }
        if let Some(k) = self.negative_control {
            if k >= self.draining_instances {
                return Err(Error::InvalidConfig(format!(
                    "negative control {k} is not a draining instance"
                )));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_channels<R: Rng>(rng: &mut R, cfg: &mut SystemConfig) {
    let (n, m) = (cfg.num_users, cfg.num_relays);
    cfg.bs_channel_params = (0..n).map(|_| uniform(rng, 0.05, 0.95)).collect();
    cfg.relay_channel_params = (0..m)
        .map(|_| (0..n).map(|_| uniform(rng, 0.05, 0.95)).collect())
        .collect();
    cfg.bs_relay_params = (0..m).map(|_| uniform(rng, 0.05, 0.95)).collect();
    cfg.decode_decay = uniform(rng, 0.5, 0.95);
}

fn random_linear_costs<R: Rng>(rng: &mut R, retx_limits: &[usize]) -> Vec<Vec<f64>> {
    retx_limits
        .iter()
        .map(|&r_max| {
            let mut c = uniform(rng, 0.5, 2.0);
            (0..=r_max)
                .map(|_| {
                    let v = c;
                    c += uniform(rng, 0.0, 0.5);
                    v
                })
                .collect()
        })
        .collect()
}

/// Random draining instance: no arrivals, small backlog, linear or quadratic costs.
pub fn random_draining_instance(seed: u64, spec: &CampaignSpec) -> SystemConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=spec.max_users);
    let m = rng.random_range(0..=spec.max_relays);
    let retx_limits: Vec<usize> = (0..n).map(|_| rng.random_range(0..=spec.max_retx)).collect();
    let mut backlog: Vec<u32> = (0..n).map(|_| rng.random_range(0..=spec.max_backlog)).collect();
    if spec.max_backlog > 0 && backlog.iter().all(|&x| x == 0) {
        backlog[rng.random_range(0..n)] = 1;
    }
    let drain_costs = (0..n)
        .map(|_| {
            let weight = uniform(&mut rng, 0.5, 2.0);
            if rng.random::<bool>() {
                ConvexCost::Linear { weight }
            } else {
                ConvexCost::Quadratic { weight }
            }
        })
        .collect();
    let mut cfg = SystemConfig {
        num_users: n,
        num_relays: m,
        arrival_rates: vec![0.0; n],
        cost_rates: random_linear_costs(&mut rng, &retx_limits),
        retx_limits,
        bs_channel_params: vec![],
        relay_channel_params: vec![],
        bs_relay_params: vec![],
        decode_decay: 0.9,
        initial_backlog: backlog,
        drain_costs: Some(drain_costs),
    };
    random_channels(&mut rng, &mut cfg);
    cfg
}

/// Random instance with Poisson arrivals at a moderate total load.
pub fn random_average_instance(seed: u64, spec: &CampaignSpec) -> Result<SystemConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.max_users.min(2);
    let m = rng.random_range(0..=spec.max_relays.min(1));
    let retx_limits: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=spec.max_retx.max(1)))
        .collect();
    let mut cfg = SystemConfig {
        num_users: n,
        num_relays: m,
        arrival_rates: vec![0.0; n],
        cost_rates: random_linear_costs(&mut rng, &retx_limits),
        retx_limits,
        bs_channel_params: vec![],
        relay_channel_params: vec![],
        bs_relay_params: vec![],
        decode_decay: 0.9,
        initial_backlog: vec![],
        drain_costs: None,
    };
    random_channels(&mut rng, &mut cfg);
    // scale rates so the base-station-only workload hits the drawn load
    let load = uniform(&mut rng, 0.3, 0.6);
    let bare = cfg.without_relays();
    let inst = build_rlpak(&bare, &DecodeModel::new(&bare)?)?;
    let t = inst.full_service_times();
    let mut share: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.3, 1.0)).collect();
    let total: f64 = share.iter().sum();
    share.iter_mut().for_each(|s| *s /= total);
    let mut offset = 0;
    for i in 0..n {
        cfg.arrival_rates[i] = load * share[i] / t[offset];
        offset += cfg.retx_limits[i] + 1;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct DrainRow {
    pub instance: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub config: SystemConfig,
    pub states: usize,
    pub optimal: f64,
    pub policy_value: f64,
    pub gap: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineRow {
    pub policy: PolicyKind,
    pub avg_cost: MeanCi,
    /// Baseline mean lies below the index mean by more than the index interval width.
    pub beats_index: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AverageRow {
    pub instance: usize,
    pub seed: u64,
    pub config: SystemConfig,
    pub x_cap: u32,
    pub states: usize,
    pub optimal_gain: f64,
    /// Exact gain of the index policy on the truncated chain.
    pub index_gain: f64,
    pub exact_gap: f64,
    /// Simulated average cost of the index policy after the warm-up.
    pub simulated: MeanCi,
    pub optimum_in_interval: bool,
    pub baselines: Vec<BaselineRow>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub master_seed: u64,
    pub campaign: CampaignSpec,
    /// Per-instance confidence after the family-wise correction.
    pub per_instance_confidence: f64,
    pub draining: Vec<DrainRow>,
    pub average: Vec<AverageRow>,
    pub negative_control: Option<DrainRow>,
    pub max_draining_gap: f64,
    pub passed: bool,
    pub warnings: Vec<String>,
}

fn draining_row(
    instance: usize,
    seed: u64,
    kind: PolicyKind,
    cfg: &SystemConfig,
    limit: usize,
) -> Result<DrainRow> {
    let mut spec = MdpSpec::draining(cfg);
    spec.state_limit = limit;
    let mdp = Mdp::build(&spec)?;
    let opt = mdp.solve_draining()?;
    let cap = cfg.initial_backlog.iter().copied().max().unwrap_or(0);
    let policy = Policy::with_drain_cap(kind, cfg, cap)?;
    let ev = mdp.evaluate_draining_policy(&policy)?;
    let s = mdp
        .space
        .index_of(&SystemState::initial(cfg))
        .ok_or_else(|| Error::Inconsistent("initial state outside the space".into()))?;
    let gap = (ev.values[s] - opt.values[s]).abs();
    Ok(DrainRow {
        instance,
        seed,
        policy: kind,
        config: cfg.clone(),
        states: mdp.len(),
        optimal: opt.values[s],
        policy_value: ev.values[s],
        gap,
        passed: gap < DRAIN_TOLERANCE,
    })
}

fn average_row(
    instance: usize,
    seed: u64,
    spec: &CampaignSpec,
    level: f64,
) -> Result<AverageRow> {
    let cfg = random_average_instance(seed, spec)?;
    let mut mdp_spec = MdpSpec::new(&cfg, spec.x_cap);
    mdp_spec.state_limit = spec.state_limit;
    let mdp = Mdp::build(&mdp_spec)?;
    let opts = AverageOptions::default();
    let opt = mdp.solve_average_cost(&opts)?;
    let index = Policy::new(PolicyKind::RlpaIndex, &cfg)?;
    let ev = mdp.evaluate_average_policy(&index, &opts)?;

    let kinds = [
        PolicyKind::RlpaIndex,
        PolicyKind::RoundRobin,
        PolicyKind::LongestQueue,
    ];
    let runs: Vec<SimRun> = kinds
        .iter()
        .map(|&k| SimRun {
            x_cap: Some(spec.x_cap),
            warmup: spec.warmup,
            ..SimRun::new(&cfg, k, spec.horizon, 0)
        })
        .collect();
    let reps = run_many(&runs, spec.replications, seed, Execution::Sequential)?;
    let ci = |k: usize| {
        let xs: Vec<f64> = reps[k]
            .runs
            .iter()
            .map(|m| m.avg_cost_after_warmup.unwrap_or(m.avg_cost))
            .collect();
        MeanCi::with_confidence(&xs, level)
    };
    let simulated = ci(0);
    let width = 2.0 * simulated.half_width;
    let baselines: Vec<BaselineRow> = (1..kinds.len())
        .map(|k| {
            let c = ci(k);
            BaselineRow {
                policy: kinds[k],
                beats_index: c.mean < simulated.mean - width,
                avg_cost: c,
            }
        })
        .collect();
    let optimum_in_interval = simulated.contains(opt.gain);
    let passed = optimum_in_interval && baselines.iter().all(|b| !b.beats_index);
    Ok(AverageRow {
        instance,
        seed,
        config: cfg,
        x_cap: spec.x_cap,
        states: mdp.len(),
        optimal_gain: opt.gain,
        index_gain: ev.gain,
        exact_gap: ev.gain - opt.gain,
        simulated,
        optimum_in_interval,
        baselines,
        passed,
    })
}

/// Runs both campaigns. Instance seeds derive from `master` in order:
/// draining instances first, then average-cost instances.
pub fn certify(spec: &CampaignSpec, master: u64, exec: Execution) -> Result<CertifyReport> {
    spec.validate()?;
    let seeds = derive_seeds(master, spec.draining_instances + spec.average_instances);
    let (drain_seeds, avg_seeds) = seeds.split_at(spec.draining_instances);
    let mut warnings = Vec::new();
    if seeds.is_empty() {
        warnings.push("campaign has no instances; passing trivially".to_string());
    }

    let drain_jobs: Vec<(usize, u64)> = drain_seeds.iter().copied().enumerate().collect();
    let draining = exec
        .map(&drain_jobs, |&(k, seed)| {
            let cfg = random_draining_instance(seed, spec);
            draining_row(k, seed, PolicyKind::RdcIndex, &cfg, spec.state_limit)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let negative_control = match spec.negative_control {
        Some(k) => {
            let row = draining_row(
                k,
                drain_seeds[k],
                PolicyKind::LongestQueue,
                &draining[k].config,
                spec.state_limit,
            )?;
            if row.passed {
                warnings.push(format!(
                    "negative control on instance {k} happens to be optimal"
                ));
            }
            Some(row)
        }
        None => None,
    };

    let level = if spec.average_instances > 0 {
        1.0 - (1.0 - spec.confidence) / spec.average_instances as f64
    } else {
        spec.confidence
    };
    let avg_jobs: Vec<(usize, u64)> = avg_seeds.iter().copied().enumerate().collect();
    let average = exec
        .map(&avg_jobs, |&(k, seed)| average_row(k, seed, spec, level))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let max_draining_gap = draining.iter().map(|r| r.gap).fold(0.0, f64::max);
    let passed = draining.iter().all(|r| r.passed) && average.iter().all(|r| r.passed);
    Ok(CertifyReport {
        master_seed: master,
        campaign: spec.clone(),
        per_instance_confidence: level,
        draining,
        average,
        negative_control,
        max_draining_gap,
        passed,
        warnings,
    })
}
