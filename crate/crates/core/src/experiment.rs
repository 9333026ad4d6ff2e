//! Experiment files and the outputs of the three commands.
//!
//! Every command returns its output files as bytes; writing them is left to
//! the caller so identical inputs give identical files.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::certify::{certify, CampaignSpec, CertifyReport};
use crate::error::{Error, Result};
use crate::model::SystemConfig;
use crate::par::Execution;
use crate::policy::{index_table, IndexTable, PolicyKind};
use crate::sim::{run_many, MeanCi, SimRun, DEFAULT_WARMUP};

pub const SCHEMA_VERSION: u32 = 1;

pub const SIMULATE_CSV: &str = "simulate.csv";
pub const SIMULATE_SUMMARY: &str = "simulate_summary.json";
pub const CERTIFY_REPORT: &str = "certify.json";
pub const INDICES_CSV: &str = "indices.csv";
pub const ORDER_SWEEP_CSV: &str = "order_sweep.csv";
pub const ORDER_FLIPS: &str = "order_flips.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Replace the addressed number(s) with the grid value.
    #[default]
    Set,
    /// Multiply the addressed number(s) by the grid value.
    Scale,
}

/// One-parameter grid over a field of the system block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// JSON pointer into the system block, e.g. `/relay_channel_params/0/1`.
    /// It may address a number or an array of numbers.
    pub path: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub mode: SweepMode,
}

impl Sweep {
    pub fn validate(&self, base: &SystemConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "sweep over {} has an empty grid",
                self.path
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("sweep values must be finite".into()));
        }
        for &v in &self.values {
            self.apply(base, v)?;
        }
        Ok(())
    }

    /// `base` with the swept field set to (or scaled by) `value`.
    pub fn apply(&self, base: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut doc = serde_json::to_value(base)?;
        let target = doc.pointer_mut(&self.path).ok_or_else(|| {
            Error::InvalidConfig(format!("sweep path {} does not exist", self.path))
        })?;
        let update = |x: &mut Value| -> Result<()> {
            let old = x.as_f64().ok_or_else(|| {
                Error::InvalidConfig(format!("sweep path {} is not numeric", self.path))
            })?;
            let new = match self.mode {
                SweepMode::Set => value,
                SweepMode::Scale => old * value,
            };
            *x = serde_json::Number::from_f64(new)
                .map(Value::Number)
                .ok_or_else(|| Error::InvalidConfig("non-finite sweep value".into()))?;
            Ok(())
        };
        match target {
            Value::Array(items) if !items.is_empty() => items.iter_mut().try_for_each(update)?,
            other => update(other)?,
        }
        let cfg: SystemConfig = serde_json::from_value(doc).map_err(|e| {
            Error::InvalidConfig(format!("sweep over {} gives an invalid system: {e}", self.path))
        })?;
        cfg.validate()
            .map_err(|e| Error::InvalidConfig(format!("{} = {value}: {e}", self.path)))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicesSpec {
    #[serde(default = "default_index_policy")]
    pub policy: PolicyKind,
    /// Optional grid over which the priority order is tracked.
    #[serde(default)]
    pub order_sweep: Option<Sweep>,
    /// Width below which a flip point is considered located.
    #[serde(default = "default_bisection_tolerance")]
    pub bisection_tolerance: f64,
}

fn default_index_policy() -> PolicyKind {
    PolicyKind::RlpaIndex
}

fn default_bisection_tolerance() -> f64 {
    1e-10
}

fn default_horizon() -> u64 {
    1_000_000
}

fn default_replications() -> usize {
    10
}

fn default_warmup() -> u64 {
    DEFAULT_WARMUP
}

fn default_policies() -> Vec<PolicyKind> {
    vec![PolicyKind::RlpaIndex]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub system: SystemConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    /// Slots per run.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub x_cap: Option<u32>,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub certify: Option<CampaignSpec>,
    #[serde(default)]
    pub indices: Option<IndicesSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)?;
        match raw.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::InvalidConfig(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => {
                return Err(Error::InvalidConfig(
                    "missing numeric schema_version".into(),
                ))
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if let Some(s) = &self.sweep {
            s.validate(&self.system)?;
        }
        if let Some(i) = &self.indices {
            if let Some(s) = &i.order_sweep {
                s.validate(&self.system)?;
            }
            if !(i.bisection_tolerance > 0.0) {
                return Err(Error::InvalidConfig("bisection_tolerance must be positive".into()));
            }
        }
        if let Some(c) = &self.certify {
            c.validate()?;
        }
        Ok(())
    }

    fn grid(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().copied().map(Some).collect(),
            None => vec![None],
        }
    }

    fn system_at(&self, v: Option<f64>) -> Result<SystemConfig> {
        match (&self.sweep, v) {
            (Some(s), Some(v)) => s.apply(&self.system, v),
            _ => Ok(self.system.clone()),
        }
    }
}

/// Output file name and contents.
pub type OutputFile = (&'static str, Vec<u8>);

pub const SIMULATE_HEADER: &str = "# simulation runs: one row per (grid value, policy, replication); avg_cost = cumulative cost / B, throughput = D / B, dropped = discards + queue-cap drops";

#[derive(Debug, Serialize)]
struct SimRow<'a> {
    grid_value: Option<f64>,
    policy: &'a str,
    avg_cost: f64,
    throughput: f64,
    #[serde(rename = "D")]
    decoded: u64,
    #[serde(rename = "B")]
    horizon: u64,
    dropped: u64,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointSummary {
    pub grid_value: Option<f64>,
    pub policy: PolicyKind,
    pub avg_cost: MeanCi,
    pub throughput: MeanCi,
    pub decoded: MeanCi,
    pub dropped: MeanCi,
    /// Average cost excluding the warm-up slots, for sensitivity.
    pub avg_cost_after_warmup: Option<MeanCi>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndpointChange {
    pub policy: PolicyKind,
    pub first_grid_value: Option<f64>,
    pub last_grid_value: Option<f64>,
    /// `(last - first) / first` of the mean average cost.
    pub cost_change: f64,
    /// `(last - first) / first` of the mean throughput.
    pub throughput_change: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub schema_version: u32,
    pub name: Option<String>,
    pub master_seed: u64,
    pub horizon: u64,
    pub replications: usize,
    pub warmup: u64,
    pub sweep_path: Option<String>,
    pub points: Vec<PointSummary>,
    pub endpoints: Vec<EndpointChange>,
}

impl SimulateSummary {
    /// Points of one policy in grid order.
    pub fn curve(&self, policy: PolicyKind) -> Vec<&PointSummary> {
        self.points.iter().filter(|p| p.policy == policy).collect()
    }
}

pub fn simulate(
    exp: &ExperimentConfig,
    seed: u64,
    exec: Execution,
) -> Result<(SimulateSummary, Vec<OutputFile>)> {
    exp.validate()?;
    if exp.policies.is_empty() {
        return Err(Error::InvalidConfig("policy list is empty".into()));
    }
    let grid = exp.grid();
    let mut specs = Vec::with_capacity(grid.len() * exp.policies.len());
    for &v in &grid {
        let cfg = exp.system_at(v)?;
        for &p in &exp.policies {
            specs.push(SimRun {
                x_cap: exp.x_cap,
                warmup: exp.warmup,
                ..SimRun::new(&cfg, p, exp.horizon, 0)
            });
        }
    }
    let results = run_many(&specs, exp.replications, seed, exec)?;

    let mut csv_bytes = Vec::new();
    csv_bytes.extend_from_slice(SIMULATE_HEADER.as_bytes());
    csv_bytes.push(b'\n');
    let mut points = Vec::with_capacity(specs.len());
    {
        let mut w = csv::Writer::from_writer(&mut csv_bytes);
        for (k, rep) in results.iter().enumerate() {
            let v = grid[k / exp.policies.len()];
            let policy = exp.policies[k % exp.policies.len()];
            for m in &rep.runs {
                w.serialize(SimRow {
                    grid_value: v,
                    policy: policy.name(),
                    avg_cost: m.avg_cost,
                    throughput: m.throughput,
                    decoded: m.decoded,
                    horizon: m.horizon,
                    dropped: m.dropped(),
                    seed: m.seed,
                })?;
            }
            points.push(PointSummary {
                grid_value: v,
                policy,
                avg_cost: rep.summary.avg_cost,
                throughput: rep.summary.throughput,
                decoded: rep.summary.decoded,
                dropped: rep.summary.dropped,
                avg_cost_after_warmup: rep.summary.avg_cost_after_warmup,
            });
        }
        w.flush()?;
    }
    let endpoints = exp
        .policies
        .iter()
        .map(|&p| {
            let curve: Vec<&PointSummary> = points.iter().filter(|q| q.policy == p).collect();
            let (a, b) = (curve[0], curve[curve.len() - 1]);
            EndpointChange {
                policy: p,
                first_grid_value: a.grid_value,
                last_grid_value: b.grid_value,
                cost_change: (b.avg_cost.mean - a.avg_cost.mean) / a.avg_cost.mean,
                throughput_change: (b.throughput.mean - a.throughput.mean) / a.throughput.mean,
            }
        })
        .collect();
    let summary = SimulateSummary {
        schema_version: SCHEMA_VERSION,
        name: exp.name.clone(),
        master_seed: seed,
        horizon: exp.horizon,
        replications: exp.replications,
        warmup: exp.warmup,
        sweep_path: exp.sweep.as_ref().map(|s| s.path.clone()),
        points,
        endpoints,
    };
    let json = serde_json::to_vec_pretty(&summary)?;
    Ok((summary, vec![(SIMULATE_CSV, csv_bytes), (SIMULATE_SUMMARY, json)]))
}

pub fn certify_cmd(
    exp: &ExperimentConfig,
    seed: u64,
    exec: Execution,
) -> Result<(CertifyReport, Vec<OutputFile>)> {
    exp.validate()?;
    let spec = exp.certify.clone().unwrap_or_default();
    let report = certify(&spec, seed, exec)?;
    let json = serde_json::to_vec_pretty(&report)?;
    Ok((report, vec![(CERTIFY_REPORT, json)]))
}

pub const ORDER_SWEEP_HEADER: &str =
    "# priority order at each grid value: position 1 is served first";

#[derive(Debug, Serialize)]
struct OrderRow {
    grid_value: f64,
    position: usize,
    user: usize,
    retx: usize,
    relay_rank: usize,
    index: f64,
}

/// A change in relative priority of two queues between adjacent grid values.
#[derive(Debug, Clone, Serialize)]
pub struct OrderFlip {
    /// Labels as `(user, retx, relay_rank)`, user 1-based.
    pub first: (usize, usize, usize),
    pub second: (usize, usize, usize),
    pub grid_low: f64,
    pub grid_high: f64,
    /// Bisected crossing point of the two index values.
    pub crossing: f64,
    /// Index difference at the crossing.
    pub index_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndicesReport {
    pub table: IndexTable,
    pub sweep_path: Option<String>,
    pub flips: Vec<OrderFlip>,
}

type LabelKey = (usize, usize, usize);

fn key_of(r: &crate::policy::IndexRow) -> LabelKey {
    (r.user, r.retx, r.relay_rank)
}

fn index_of(t: &IndexTable, k: LabelKey) -> f64 {
    t.rows.iter().find(|r| key_of(r) == k).map_or(f64::NAN, |r| r.index)
}

fn position_of(t: &IndexTable, k: LabelKey) -> usize {
    t.rows.iter().position(|r| key_of(r) == k).unwrap_or(usize::MAX)
}

pub fn indices(exp: &ExperimentConfig) -> Result<(IndicesReport, Vec<OutputFile>)> {
    exp.validate()?;
    let spec = exp.indices.clone().unwrap_or(IndicesSpec {
        policy: default_index_policy(),
        order_sweep: None,
        bisection_tolerance: default_bisection_tolerance(),
    });
    let table = index_table(spec.policy, &exp.system)?;
    let mut files = vec![(INDICES_CSV, table.to_csv_string()?.into_bytes())];
    let mut flips = Vec::new();

    if let Some(sweep) = &spec.order_sweep {
        let tables: Vec<IndexTable> = sweep
            .values
            .iter()
            .map(|&v| index_table(spec.policy, &sweep.apply(&exp.system, v)?))
            .collect::<Result<_>>()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(ORDER_SWEEP_HEADER.as_bytes());
        buf.push(b'\n');
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for (t, &v) in tables.iter().zip(&sweep.values) {
                for (p, r) in t.rows.iter().enumerate() {
                    w.serialize(OrderRow {
                        grid_value: v,
                        position: p + 1,
                        user: r.user,
                        retx: r.retx,
                        relay_rank: r.relay_rank,
                        index: r.index,
                    })?;
                }
            }
            w.flush()?;
        }
        files.push((ORDER_SWEEP_CSV, buf));

        for k in 1..tables.len() {
            let (lo_t, hi_t) = (&tables[k - 1], &tables[k]);
            let keys: Vec<LabelKey> = lo_t.rows.iter().map(key_of).collect();
            for (a, &p) in keys.iter().enumerate() {
                for &q in &keys[a + 1..] {
                    // p is ahead of q at the lower grid value
                    if position_of(hi_t, p) < position_of(hi_t, q) {
                        continue;
                    }
                    let flip = locate_flip(
                        &exp.system,
                        sweep,
                        spec.policy,
                        p,
                        q,
                        sweep.values[k - 1],
                        sweep.values[k],
                        spec.bisection_tolerance,
                    )?;
                    flips.push(flip);
                }
            }
        }
        let json = serde_json::to_vec_pretty(&flips)?;
        files.push((ORDER_FLIPS, json));
    }
    let report = IndicesReport {
        table,
        sweep_path: spec.order_sweep.as_ref().map(|s| s.path.clone()),
        flips,
    };
    Ok((report, files))
}

/// Bisects for the point where `p` stops preceding `q`.
#[allow(clippy::too_many_arguments)]
fn locate_flip(
    base: &SystemConfig,
    sweep: &Sweep,
    policy: PolicyKind,
    p: LabelKey,
    q: LabelKey,
    low: f64,
    high: f64,
    tol: f64,
) -> Result<OrderFlip> {
    let ahead = |v: f64| -> Result<(bool, f64)> {
        let t = index_table(policy, &sweep.apply(base, v)?)?;
        Ok((
            position_of(&t, p) < position_of(&t, q),
            index_of(&t, p) - index_of(&t, q),
        ))
    };
    let (mut a, mut b) = (low, high);
    while (b - a).abs() > tol {
        let mid = 0.5 * (a + b);
        if ahead(mid)?.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let crossing = 0.5 * (a + b);
    Ok(OrderFlip {
        first: p,
        second: q,
        grid_low: low,
        grid_high: high,
        crossing,
        index_gap: ahead(crossing)?.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::two_user_config;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: Some("test".into()),
            system: two_user_config(),
            sweep: Some(Sweep {
                path: "/relay_channel_params/0/1".into(),
                values: vec![0.2, 0.8],
                mode: SweepMode::Set,
            }),
            policies: vec![PolicyKind::RlpaIndex, PolicyKind::NoRelayIndex],
            horizon: 2_000,
            replications: 2,
            seed: 3,
            x_cap: None,
            warmup: 100,
            output_dir: None,
            certify: None,
            indices: None,
        }
    }

    #[test]
    fn config_round_trips() {
        let e = base();
        let text = e.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn schema_errors() {
        let mut v = serde_json::to_value(base()).unwrap();
        v["schema_version"] = 2.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(base()).unwrap();
        v["sweep"]["values"] = serde_json::json!([]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(base()).unwrap();
        v["sweep"]["path"] = "/retx_limits/7".into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(base()).unwrap();
        v["unknown_field"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn sweep_set_and_scale() {
        let e = base();
        let s = e.sweep.as_ref().unwrap();
        let c = s.apply(&e.system, 0.4).unwrap();
        assert_eq!(c.relay_channel_params[0][1], 0.4);
        let scale = Sweep {
            path: "/cost_rates/1".into(),
            values: vec![2.0],
            mode: SweepMode::Scale,
        };
        let c = scale.apply(&e.system, 2.0).unwrap();
        assert_eq!(c.cost_rates[1], vec![2.5, 3.0, 3.5]);
        // out-of-range probability is rejected
        assert!(s.apply(&e.system, 1.5).is_err());
    }

    #[test]
    fn simulate_outputs() {
        let (summary, files) = simulate(&base(), 3, Execution::Sequential).unwrap();
        let csv = String::from_utf8(files[0].1.clone()).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert_eq!(
            lines.next().unwrap(),
            "grid_value,policy,avg_cost,throughput,D,B,dropped,seed"
        );
        assert_eq!(lines.count(), 2 * 2 * 2);
        assert_eq!(summary.points.len(), 4);
        assert_eq!(summary.curve(PolicyKind::NoRelayIndex).len(), 2);
        let (_, again) = simulate(&base(), 3, Execution::Parallel { jobs: 2 }).unwrap();
        assert_eq!(files, again);
    }

    #[test]
    fn indices_without_relays_has_only_base_rows() {
        let mut e = base();
        e.system = e.system.without_relays();
        e.sweep = None;
        let (rep, files) = indices(&e).unwrap();
        assert_eq!(rep.table.rows.len(), 6);
        assert!(rep.table.rows.iter().all(|r| r.relay_rank == 0));
        assert_eq!(files.len(), 1);
    }

    #[test]
    fn order_flip_located_at_index_crossing() {
        let mut e = base();
        e.sweep = None;
        e.indices = Some(IndicesSpec {
            policy: PolicyKind::RlpaIndex,
            order_sweep: Some(Sweep {
                path: "/cost_rates/1".into(),
                values: vec![0.25, 0.5, 1.0, 2.0],
                mode: SweepMode::Scale,
            }),
            bisection_tolerance: 1e-12,
        });
        let (rep, files) = indices(&e).unwrap();
        assert_eq!(files.len(), 3);
        assert!(!rep.flips.is_empty());
        for f in &rep.flips {
            assert!(f.crossing > f.grid_low && f.crossing < f.grid_high);
            assert!(f.index_gap.abs() < 1e-9, "{f:?}");
        }
    }
}
