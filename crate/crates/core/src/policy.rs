//! Scheduling policies: the relay-aware priority-index rules and baselines.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::DecodeModel;
use crate::error::{Error, Result};
use crate::klimov::{
    build_rdck, build_rlpak, check_partial_order, klimov_ordering, rank_successors,
    KlimovInstance, PriorityOrdering, QueueLabel, TIE_TOLERANCE,
};
use crate::model::{SchedulingDecision, SystemConfig, SystemState, Transmitter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyKind {
    RlpaIndex,
    RdcIndex,
    NoRelayIndex,
    RoundRobin,
    LongestQueue,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::RlpaIndex,
        PolicyKind::RdcIndex,
        PolicyKind::NoRelayIndex,
        PolicyKind::RoundRobin,
        PolicyKind::LongestQueue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::RlpaIndex => "RLPA_INDEX",
            PolicyKind::RdcIndex => "RDC_INDEX",
            PolicyKind::NoRelayIndex => "NO_RELAY_INDEX",
            PolicyKind::RoundRobin => "ROUND_ROBIN",
            PolicyKind::LongestQueue => "LONGEST_QUEUE",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy {s:?}")))
    }
}

/// `a` beats `b` only by more than the relative tie tolerance.
fn strictly_greater(a: f64, b: f64) -> bool {
    a - b > TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Expected service times under every candidate transmitter.
#[derive(Debug, Clone)]
struct ServiceTable {
    num_relays: usize,
    /// `t[i][r][l][s]`: slot `s = 0` is the base station, `s = 1 + a` relay `a`.
    t: Vec<Vec<Vec<Vec<f64>>>>,
}

impl ServiceTable {
    fn new(inst: &KlimovInstance, model: &DecodeModel) -> Self {
        let cfg = model.config();
        let m = cfg.num_relays;
        let t_full = inst.full_service_times();
        let label_t = |i: usize, r: usize, l: usize| {
            let q = inst
                .index_of(&QueueLabel {
                    user: i,
                    retx: r,
                    stratum: None,
                    rank: l,
                })
                .expect("label present");
            t_full[q]
        };
        let mut t = Vec::with_capacity(cfg.num_users);
        for i in 0..cfg.num_users {
            let r_max = cfg.retx_limits[i];
            let mut per_r = Vec::with_capacity(r_max + 1);
            for r in 0..=r_max {
                let mut per_l = Vec::with_capacity(m + 1);
                for l in 0..=m {
                    let mut per_tx = vec![f64::NAN; m + 1];
                    for (s, slot) in per_tx.iter_mut().enumerate() {
                        let tx = if s == 0 {
                            Transmitter::BaseStation
                        } else {
                            Transmitter::Relay(s - 1)
                        };
                        // a relay below the best holder's rank is still a candidate
                        let g = model.user_failure(i, tx, r);
                        *slot = if r == r_max || g == 0.0 {
                            1.0
                        } else {
                            1.0 + g * rank_successors(model, i, r, l, tx)
                                .into_iter()
                                .map(|(n, p)| p * label_t(i, r + 1, n))
                                .sum::<f64>()
                        };
                    }
                    per_l.push(per_tx);
                }
                per_r.push(per_l);
            }
            t.push(per_r);
        }
        Self { num_relays: m, t }
    }
}

#[derive(Debug, Clone)]
struct DrainTables {
    instance: KlimovInstance,
    ordering: PriorityOrdering,
}

/// A scheduling policy with its precomputed tables. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Policy {
    kind: PolicyKind,
    model: DecodeModel,
    service: ServiceTable,
    /// `T` of `(i, r, 0)` with relays removed.
    no_relay_t: Vec<Vec<f64>>,
    drain: Option<DrainTables>,
}

impl Policy {
    /// Builds `kind` for `config`. Draining tables cover the configured
    /// initial backlog.
    pub fn new(kind: PolicyKind, config: &SystemConfig) -> Result<Self> {
        Self::with_drain_cap(kind, config, 0)
    }

    /// As [`Policy::new`], with draining tables extended to at least
    /// `x_cap` packets per user so any state of a truncated space is covered.
    pub fn with_drain_cap(kind: PolicyKind, config: &SystemConfig, x_cap: u32) -> Result<Self> {
        let model = DecodeModel::new(config)?;
        let inst = build_rlpak(config, &model)?;
        let service = ServiceTable::new(&inst, &model);

        let bare = config.without_relays();
        let bare_model = DecodeModel::new(&bare)?;
        let bare_inst = build_rlpak(&bare, &bare_model)?;
        let bare_t = bare_inst.full_service_times();
        let no_relay_t = (0..config.num_users)
            .map(|i| {
                (0..=config.retx_limits[i])
                    .map(|r| {
                        let q = bare_inst
                            .index_of(&QueueLabel {
                                user: i,
                                retx: r,
                                stratum: None,
                                rank: 0,
                            })
                            .expect("label present");
                        bare_t[q]
                    })
                    .collect()
            })
            .collect();

        let drain = if kind == PolicyKind::RdcIndex {
            if config.has_arrivals() {
                return Err(Error::InvalidConfig(
                    "RDC_INDEX applies to draining problems with zero arrival rates".into(),
                ));
            }
            let costs = config.drain_costs.as_ref().ok_or_else(|| {
                Error::InvalidConfig("RDC_INDEX requires drain_costs".into())
            })?;
            let strata: Vec<u32> = (0..config.num_users)
                .map(|i| config.backlog(i).max(x_cap))
                .collect();
            let instance = build_rdck(config, &strata, costs, &model)?;
            let ordering = klimov_ordering(&instance);
            check_partial_order(&instance, &ordering)?;
            Some(DrainTables { instance, ordering })
        } else {
            None
        };

        Ok(Self {
            kind,
            model,
            service,
            no_relay_t,
            drain,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn model(&self) -> &DecodeModel {
        &self.model
    }

    /// Draining priority order, for `RDC_INDEX` policies.
    pub fn drain_ordering(&self) -> Option<(&KlimovInstance, &PriorityOrdering)> {
        self.drain.as_ref().map(|d| (&d.instance, &d.ordering))
    }

    /// Best index of `user`'s HoL packet over the base station and every
    /// relay holding it, with the transmitter achieving it. A relay wins only
    /// by a strict improvement; among relays the lowest index wins ties.
    pub fn rlpa_index(&self, state: &SystemState, user: usize) -> Result<(f64, Transmitter)> {
        let cfg = self.model.config();
        if user >= cfg.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                value: user,
                max: cfg.num_users - 1,
            });
        }
        if state.bs.queue_lengths[user] == 0 {
            return Err(Error::ContractViolation(format!(
                "user {user} has an empty queue"
            )));
        }
        Ok(self.best_transmitter(state, user))
    }

    fn best_transmitter(&self, state: &SystemState, user: usize) -> (f64, Transmitter) {
        let r = state.bs.hol_retx[user];
        let c = self.model.config().cost_rates[user][r];
        let rank = self.model.ranking().best_rank(user, state.relay_flags(user));
        let row = &self.service.t[user][r][rank];
        let mut best = (c / row[0], Transmitter::BaseStation);
        for a in 0..self.service.num_relays {
            if state.relays[a].decoded[user] {
                let idx = c / row[a + 1];
                if strictly_greater(idx, best.0) {
                    best = (idx, Transmitter::Relay(a));
                }
            }
        }
        best
    }

    fn no_relay_index(&self, state: &SystemState, user: usize) -> f64 {
        let r = state.bs.hol_retx[user];
        self.model.config().cost_rates[user][r] / self.no_relay_t[user][r]
    }

    fn drain_position(&self, d: &DrainTables, state: &SystemState, user: usize) -> Result<usize> {
        let label = QueueLabel {
            user,
            retx: state.bs.hol_retx[user],
            stratum: Some(state.bs.queue_lengths[user]),
            rank: self.model.ranking().best_rank(user, state.relay_flags(user)),
        };
        let q = d.instance.index_of(&label).ok_or_else(|| {
            Error::ContractViolation(format!("state outside the draining tables: {label}"))
        })?;
        Ok(d.ordering.position[q])
    }

    /// Chooses the user and transmitter for the next slot. `last_served` is
    /// the round-robin cursor; other kinds ignore it.
    pub fn decide(
        &self,
        state: &SystemState,
        last_served: Option<usize>,
    ) -> Result<SchedulingDecision> {
        let n = self.model.config().num_users;
        let nonempty = |i: usize| state.bs.queue_lengths[i] > 0;
        if !(0..n).any(nonempty) {
            return Ok(SchedulingDecision::Idle);
        }
        let serve = |user, transmitter| SchedulingDecision::Serve { user, transmitter };
        let decision = match self.kind {
            PolicyKind::RlpaIndex => {
                let mut best: Option<(f64, usize, Transmitter)> = None;
                for i in (0..n).filter(|&i| nonempty(i)) {
                    let (idx, tx) = self.best_transmitter(state, i);
                    if best.is_none_or(|b| strictly_greater(idx, b.0)) {
                        best = Some((idx, i, tx));
                    }
                }
                let (_, i, tx) = best.expect("a nonempty queue");
                serve(i, tx)
            }
            PolicyKind::NoRelayIndex => {
                let mut best: Option<(f64, usize)> = None;
                for i in (0..n).filter(|&i| nonempty(i)) {
                    let idx = self.no_relay_index(state, i);
                    if best.is_none_or(|b| strictly_greater(idx, b.0)) {
                        best = Some((idx, i));
                    }
                }
                serve(best.expect("a nonempty queue").1, Transmitter::BaseStation)
            }
            PolicyKind::RdcIndex => {
                let d = self.drain.as_ref().expect("draining tables built");
                let mut best: Option<(usize, usize)> = None;
                for i in (0..n).filter(|&i| nonempty(i)) {
                    let pos = self.drain_position(d, state, i)?;
                    if best.is_none_or(|b| pos < b.0) {
                        best = Some((pos, i));
                    }
                }
                let (pos, i) = best.expect("a nonempty queue");
                serve(i, d.ordering.entries[pos].server)
            }
            PolicyKind::RoundRobin => {
                let start = last_served.map_or(0, |u| u + 1);
                let i = (0..n)
                    .map(|k| (start + k) % n)
                    .find(|&i| nonempty(i))
                    .expect("a nonempty queue");
                serve(i, self.best_transmitter(state, i).1)
            }
            PolicyKind::LongestQueue => {
                let mut best = 0;
                for i in 1..n {
                    if state.bs.queue_lengths[i] > state.bs.queue_lengths[best] {
                        best = i;
                    }
                }
                serve(best, self.best_transmitter(state, best).1)
            }
        };
        Ok(decision)
    }

    /// Whether decisions depend only on the current state.
    pub fn is_stationary(&self) -> bool {
        self.kind != PolicyKind::RoundRobin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexRow {
    /// 1-based user.
    pub user: usize,
    pub retx: usize,
    pub relay_rank: usize,
    pub transmitter: String,
    #[serde(rename = "T")]
    pub t: f64,
    pub cost_rate: f64,
    pub index: f64,
}

/// Every `(i, r, l)` queue with its index, highest priority first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexTable {
    pub kind: PolicyKind,
    pub rows: Vec<IndexRow>,
}

pub const INDEX_TABLE_HEADER: &str =
    "# priority index table: one row per (user, retransmission, relay rank), highest priority first";

impl IndexTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{INDEX_TABLE_HEADER}")?;
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Full index table of the linear-cost rules. `NO_RELAY_INDEX` tables hold
/// only `l = 0` rows computed without relays.
pub fn index_table(kind: PolicyKind, config: &SystemConfig) -> Result<IndexTable> {
    let cfg = match kind {
        PolicyKind::RlpaIndex => config.clone(),
        PolicyKind::NoRelayIndex => config.without_relays(),
        other => {
            return Err(Error::InvalidConfig(format!(
                "{other} has no linear-cost index table"
            )))
        }
    };
    let model = DecodeModel::new(&cfg)?;
    let inst = build_rlpak(&cfg, &model)?;
    let t = inst.full_service_times();
    let ordering = klimov_ordering(&inst);
    let mut rows = Vec::with_capacity(inst.len());
    for e in &ordering.entries {
        let q = e.queue;
        let ratio = inst.holding_costs[q] / t[q];
        if (ratio - e.index).abs() > 1e-9 * ratio.abs().max(1.0) {
            return Err(Error::Inconsistent(format!(
                "index of {} is {ratio} but the ordering assigns {}",
                e.label, e.index
            )));
        }
        rows.push(IndexRow {
            user: e.label.user + 1,
            retx: e.label.retx,
            relay_rank: e.label.rank,
            transmitter: inst.servers[q].to_string(),
            t: t[q],
            cost_rate: inst.holding_costs[q],
            index: ratio,
        });
    }
    if rows
        .windows(2)
        .any(|w| strictly_greater(w[1].index, w[0].index))
    {
        return Err(Error::Inconsistent(
            "ordering is not sorted by descending index".into(),
        ));
    }
    Ok(IndexTable { kind, rows })
}
