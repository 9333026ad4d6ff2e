//! System model: problem instance, base-station and relay state, scheduling
//! decisions, and the deterministic per-slot state update.
//!
//! Users and relays are indexed from zero internally. The per-slot order is
//! fixed: the stage cost is read from the state at slot start, one HoL packet
//! is transmitted, the outcome is applied, and arrivals join at slot end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_decay() -> f64 {
    0.9
}

/// Immutable problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub num_users: usize,
    pub num_relays: usize,
    /// Per-slot Poisson arrival rate for each user.
    pub arrival_rates: Vec<f64>,
    /// `cost_rates[i][r]`: holding cost of user `i`'s packet after `r` transmissions.
    pub cost_rates: Vec<Vec<f64>>,
    /// Maximum retransmission count `r_max` for each user.
    pub retx_limits: Vec<usize>,
    /// Base station to user channel parameter, one per user.
    pub bs_channel_params: Vec<f64>,
    /// `relay_channel_params[a][i]`: relay `a` to user `i` channel parameter.
    pub relay_channel_params: Vec<Vec<f64>>,
    /// Channel parameter of the link into each relay.
    pub bs_relay_params: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decode_decay: f64,
    /// Packets queued at the base station before the first slot. Empty means none.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_backlog: Vec<u32>,
    /// Per-user queue-length costs for the draining problem. When present the
    /// stage cost is `sum_i U_i(x_i)` instead of the linear holding cost.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drain_costs: Option<Vec<ConvexCost>>,
}

fn check_prob(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(Error::InvalidConfig(format!("{what} = {v} not in [0, 1]")));
    }
    Ok(())
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_users;
        let m = self.num_relays;
        if n == 0 {
            return Err(Error::InvalidConfig("num_users must be positive".into()));
        }
        let len_check = |what: &str, len: usize, want: usize| {
            if len != want {
                Err(Error::InvalidConfig(format!(
                    "{what} has length {len}, expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        len_check("arrival_rates", self.arrival_rates.len(), n)?;
        len_check("cost_rates", self.cost_rates.len(), n)?;
        len_check("retx_limits", self.retx_limits.len(), n)?;
        len_check("bs_channel_params", self.bs_channel_params.len(), n)?;
        len_check("relay_channel_params", self.relay_channel_params.len(), m)?;
        len_check("bs_relay_params", self.bs_relay_params.len(), m)?;
        if !self.initial_backlog.is_empty() {
            len_check("initial_backlog", self.initial_backlog.len(), n)?;
        }
        for (a, row) in self.relay_channel_params.iter().enumerate() {
            len_check(&format!("relay_channel_params[{a}]"), row.len(), n)?;
            for (i, &v) in row.iter().enumerate() {
                check_prob(&format!("relay_channel_params[{a}][{i}]"), v)?;
            }
        }
        for (a, &v) in self.bs_relay_params.iter().enumerate() {
            check_prob(&format!("bs_relay_params[{a}]"), v)?;
        }
        for i in 0..n {
            let lambda = self.arrival_rates[i];
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "arrival_rates[{i}] = {lambda} must be a finite nonnegative rate"
                )));
            }
            check_prob(&format!("bs_channel_params[{i}]"), self.bs_channel_params[i])?;
            let row = &self.cost_rates[i];
            len_check(
                &format!("cost_rates[{i}]"),
                row.len(),
                self.retx_limits[i] + 1,
            )?;
            for (r, &c) in row.iter().enumerate() {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "cost_rates[{i}][{r}] = {c} must be finite and nonnegative"
                    )));
                }
                if r > 0 && c < row[r - 1] {
                    return Err(Error::InvalidConfig(format!(
                        "cost_rates[{i}] must be nondecreasing in the retransmission count"
                    )));
                }
            }
        }
        if !(self.decode_decay > 0.0 && self.decode_decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decode_decay = {} not in (0, 1)",
                self.decode_decay
            )));
        }
        if let Some(costs) = &self.drain_costs {
            len_check("drain_costs", costs.len(), n)?;
            for c in costs {
                c.validate()?;
            }
        }
        Ok(())
    }

    pub fn has_arrivals(&self) -> bool {
        self.arrival_rates.iter().any(|&l| l > 0.0)
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.arrival_rates.iter().sum()
    }

    pub fn backlog(&self, user: usize) -> u32 {
        self.initial_backlog.get(user).copied().unwrap_or(0)
    }

    /// The same instance with every relay removed.
    pub fn without_relays(&self) -> SystemConfig {
        SystemConfig {
            num_relays: 0,
            relay_channel_params: Vec::new(),
            bs_relay_params: Vec::new(),
            ..self.clone()
        }
    }
}

/// Increasing queue-length cost `U(x)` with `U(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexCost {
    /// `U(x) = weight * x`
    Linear { weight: f64 },
    /// `U(x) = weight * x^2`
    Quadratic { weight: f64 },
    /// `U(x) = values[x - 1]` for `x >= 1`; grows linearly past the table
    /// with the last increment.
    Table { values: Vec<f64> },
}

impl ConvexCost {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexCost::Linear { weight } | ConvexCost::Quadratic { weight } => {
                if !(*weight > 0.0 && weight.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "cost weight {weight} must be positive"
                    )));
                }
            }
            ConvexCost::Table { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidConfig("empty cost table".into()));
                }
                let mut prev = 0.0;
                for &v in values {
                    if !(v > prev && v.is_finite()) {
                        return Err(Error::InvalidConfig(
                            "cost table must be strictly increasing from U(0) = 0".into(),
                        ));
                    }
                    prev = v;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: u32) -> f64 {
        let xf = f64::from(x);
        match self {
            ConvexCost::Linear { weight } => weight * xf,
            ConvexCost::Quadratic { weight } => weight * xf * xf,
            ConvexCost::Table { values } => {
                if x == 0 {
                    return 0.0;
                }
                let k = x as usize;
                if k <= values.len() {
                    values[k - 1]
                } else {
                    let last = values[values.len() - 1];
                    let before = if values.len() >= 2 {
                        values[values.len() - 2]
                    } else {
                        0.0
                    };
                    last + (last - before) * (k - values.len()) as f64
                }
            }
        }
    }
}

/// Who transmits the scheduled packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transmitter {
    BaseStation,
    Relay(usize),
}

impl std::fmt::Display for Transmitter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transmitter::BaseStation => write!(f, "BS"),
            Transmitter::Relay(a) => write!(f, "R{}", a + 1),
        }
    }
}

/// Queue lengths and HoL transmission counts at the base station.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaseStationState {
    pub queue_lengths: Vec<u32>,
    pub hol_retx: Vec<usize>,
}

impl BaseStationState {
    pub fn empty(num_users: usize) -> Self {
        Self {
            queue_lengths: vec![0; num_users],
            hol_retx: vec![0; num_users],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queue_lengths.iter().all(|&x| x == 0)
    }

    pub fn total_backlog(&self) -> u64 {
        self.queue_lengths.iter().map(|&x| u64::from(x)).sum()
    }
}

/// `decoded[i]` is set when this relay holds user `i`'s HoL packet and the
/// user has not decoded it yet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelayState {
    pub decoded: Vec<bool>,
}

impl RelayState {
    pub fn empty(num_users: usize) -> Self {
        Self {
            decoded: vec![false; num_users],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulingDecision {
    /// Only valid when every queue is empty.
    Idle,
    Serve { user: usize, transmitter: Transmitter },
}

impl SchedulingDecision {
    pub fn user(&self) -> Option<usize> {
        match self {
            SchedulingDecision::Idle => None,
            SchedulingDecision::Serve { user, .. } => Some(*user),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub user_decoded: bool,
    /// Relays that newly decoded the transmitted packet this slot.
    pub relay_decodes: Vec<usize>,
    pub arrivals: Vec<u32>,
}

/// What happened to the scheduled packet during a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServiceEvent {
    pub decoded: Option<usize>,
    /// Packet dropped after a failed attempt at `r_max`.
    pub discarded: Option<usize>,
}

/// Base station state together with every relay's state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemState {
    pub bs: BaseStationState,
    pub relays: Vec<RelayState>,
}

impl SystemState {
    pub fn empty(config: &SystemConfig) -> Self {
        Self {
            bs: BaseStationState::empty(config.num_users),
            relays: vec![RelayState::empty(config.num_users); config.num_relays],
        }
    }

    /// Empty relays and the configured initial backlog.
    pub fn initial(config: &SystemConfig) -> Self {
        let mut s = Self::empty(config);
        for i in 0..config.num_users {
            s.bs.queue_lengths[i] = config.backlog(i);
        }
        s
    }

    pub fn relay_flags(&self, user: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.relays
            .iter()
            .enumerate()
            .map(move |(a, r)| (a, r.decoded[user]))
    }

    /// Checks every state invariant against `config`.
    pub fn check(&self, config: &SystemConfig) -> Result<()> {
        let n = config.num_users;
        if self.bs.queue_lengths.len() != n
            || self.bs.hol_retx.len() != n
            || self.relays.len() != config.num_relays
            || self.relays.iter().any(|r| r.decoded.len() != n)
        {
            return Err(Error::ContractViolation("state dimensions mismatch config".into()));
        }
        for i in 0..n {
            let x = self.bs.queue_lengths[i];
            let r = self.bs.hol_retx[i];
            if r > config.retx_limits[i] {
                return Err(Error::ContractViolation(format!(
                    "user {i}: hol_retx {r} exceeds r_max {}",
                    config.retx_limits[i]
                )));
            }
            if x == 0 && r != 0 {
                return Err(Error::ContractViolation(format!(
                    "user {i}: empty queue with hol_retx {r}"
                )));
            }
            for (a, flag) in self.relay_flags(i) {
                if flag && (x == 0 || r == 0) {
                    return Err(Error::ContractViolation(format!(
                        "relay {a} holds user {i}'s packet that was never transmitted"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_decision(&self, decision: &SchedulingDecision) -> Result<()> {
        match *decision {
            SchedulingDecision::Idle => {
                if !self.bs.is_empty() {
                    return Err(Error::ContractViolation(
                        "idle decision with nonempty queues".into(),
                    ));
                }
            }
            SchedulingDecision::Serve { user, transmitter } => {
                if user >= self.bs.queue_lengths.len() {
                    return Err(Error::OutOfRange {
                        what: "user",
                        value: user,
                        max: self.bs.queue_lengths.len().saturating_sub(1),
                    });
                }
                if self.bs.queue_lengths[user] == 0 {
                    return Err(Error::ContractViolation(format!(
                        "user {user} scheduled with an empty queue"
                    )));
                }
                if let Transmitter::Relay(a) = transmitter {
                    if a >= self.relays.len() || !self.relays[a].decoded[user] {
                        return Err(Error::ContractViolation(format!(
                            "relay {a} has not decoded user {user}'s HoL packet"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies the transmission part of a slot in place.
    pub fn apply_service(
        &mut self,
        config: &SystemConfig,
        decision: &SchedulingDecision,
        user_decoded: bool,
        relay_decodes: &[usize],
    ) -> Result<ServiceEvent> {
        self.check_decision(decision)?;
        let SchedulingDecision::Serve { user, transmitter } = *decision else {
            return Ok(ServiceEvent::default());
        };
        for (k, &a) in relay_decodes.iter().enumerate() {
            if a >= self.relays.len() {
                return Err(Error::OutOfRange {
                    what: "relay",
                    value: a,
                    max: self.relays.len().saturating_sub(1),
                });
            }
            if self.relays[a].decoded[user] || transmitter == Transmitter::Relay(a) {
                return Err(Error::ContractViolation(format!(
                    "relay {a} reported a new decode of a packet it already holds"
                )));
            }
            if relay_decodes[..k].contains(&a) {
                return Err(Error::ContractViolation(format!(
                    "relay {a} listed twice in relay_decodes"
                )));
            }
        }

        let r = self.bs.hol_retx[user];
        let mut event = ServiceEvent::default();
        if user_decoded || r >= config.retx_limits[user] {
            self.bs.queue_lengths[user] -= 1;
            self.bs.hol_retx[user] = 0;
            for relay in &mut self.relays {
                relay.decoded[user] = false;
            }
            if user_decoded {
                event.decoded = Some(user);
            } else {
                event.discarded = Some(user);
            }
        } else {
            self.bs.hol_retx[user] = r + 1;
            for &a in relay_decodes {
                self.relays[a].decoded[user] = true;
            }
        }
        Ok(event)
    }

    /// Adds end-of-slot arrivals. With a cap, packets beyond it are dropped
    /// and counted into `dropped`.
    pub fn admit_arrivals(&mut self, arrivals: &[u32], cap: Option<u32>, dropped: &mut [u64]) {
        for (i, &k) in arrivals.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let x = self.bs.queue_lengths[i];
            let admitted = match cap {
                Some(c) => k.min(c.saturating_sub(x)),
                None => k,
            };
            dropped[i] += u64::from(k - admitted);
            self.bs.queue_lengths[i] = x + admitted;
        }
    }
}

/// Pure state update for one slot: transmission outcome, then arrivals.
pub fn apply_outcome(
    config: &SystemConfig,
    bs: &BaseStationState,
    relays: &[RelayState],
    decision: &SchedulingDecision,
    outcome: &SlotOutcome,
) -> Result<(BaseStationState, Vec<RelayState>)> {
    let mut state = SystemState {
        bs: bs.clone(),
        relays: relays.to_vec(),
    };
    state.apply_service(config, decision, outcome.user_decoded, &outcome.relay_decodes)?;
    if outcome.arrivals.len() != config.num_users {
        return Err(Error::ContractViolation(format!(
            "arrivals has length {}, expected {}",
            outcome.arrivals.len(),
            config.num_users
        )));
    }
    let mut dropped = vec![0; config.num_users];
    state.admit_arrivals(&outcome.arrivals, None, &mut dropped);
    Ok((state.bs, state.relays))
}

/// Linear holding cost `sum_i c_{i,0}(x_i - 1) + c_{i,r_i}` over nonempty queues.
pub fn instantaneous_cost_linear(bs: &BaseStationState, config: &SystemConfig) -> f64 {
    bs.queue_lengths
        .iter()
        .zip(&bs.hol_retx)
        .zip(&config.cost_rates)
        .map(|((&x, &r), c)| {
            if x == 0 {
                0.0
            } else {
                c[0] * f64::from(x - 1) + c[r]
            }
        })
        .sum()
}

/// Queue-length cost `sum_i U_i(x_i)`, independent of retransmission counts.
pub fn instantaneous_cost_convex(bs: &BaseStationState, cost_fns: &[ConvexCost]) -> f64 {
    bs.queue_lengths
        .iter()
        .zip(cost_fns)
        .map(|(&x, u)| u.eval(x))
        .sum()
}

/// Stage cost of `bs` under the objective `config` selects.
pub fn stage_cost(bs: &BaseStationState, config: &SystemConfig) -> f64 {
    match &config.drain_costs {
        Some(costs) => instantaneous_cost_convex(bs, costs),
        None => instantaneous_cost_linear(bs, config),
    }
}
