//! Exact MDP solvers on truncated state spaces.
//!
//! A slot is split into the service step, which only touches the served
//! user and the relays' copies of its packet, and the arrival step, which
//! acts on every queue independently. The kernel is stored in that factored
//! form: per action a short list of post-service states, and per
//! post-service state its arrival distribution.

use serde::Serialize;

use crate::channel::DecodeModel;
use crate::error::{Error, Result};
use crate::model::{stage_cost, SchedulingDecision, SystemConfig, SystemState, Transmitter};
use crate::policy::Policy;

pub const DEFAULT_STATE_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
struct LocalState {
    x: u32,
    r: usize,
    /// Bit `a` set when relay `a` holds the HoL packet.
    mask: u32,
}

/// Bijective index of every reachable state with `x_i <= caps[i]`.
#[derive(Debug, Clone)]
pub struct StateSpace {
    caps: Vec<u32>,
    num_relays: usize,
    locals: Vec<Vec<LocalState>>,
    /// Mixed-radix place value of each user.
    stride: Vec<usize>,
    len: usize,
}

fn local_count(cap: u32, r_max: usize, m: usize) -> usize {
    1 + cap as usize * (1 + r_max * (1usize << m))
}

impl StateSpace {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn caps(&self) -> &[u32] {
        &self.caps
    }

    fn local_index(&self, user: usize, l: LocalState) -> usize {
        if l.x == 0 {
            return 0;
        }
        let per_x = self.locals[user].len().saturating_sub(1) / self.caps[user].max(1) as usize;
        let within = if l.r == 0 {
            0
        } else {
            1 + (l.r - 1) * (1usize << self.num_relays) + l.mask as usize
        };
        1 + (l.x as usize - 1) * per_x + within
    }

    fn local_of(&self, state: &SystemState, user: usize) -> LocalState {
        let x = state.bs.queue_lengths[user];
        if x == 0 {
            return LocalState { x: 0, r: 0, mask: 0 };
        }
        let mask = state
            .relays
            .iter()
            .enumerate()
            .filter(|(_, r)| r.decoded[user])
            .fold(0u32, |m, (a, _)| m | (1 << a));
        LocalState {
            x,
            r: state.bs.hol_retx[user],
            mask,
        }
    }

    /// Index of `state`, or `None` when it lies outside the space.
    pub fn index_of(&self, state: &SystemState) -> Option<usize> {
        if state.bs.queue_lengths.len() != self.caps.len() || state.relays.len() != self.num_relays
        {
            return None;
        }
        let mut idx = 0;
        for i in 0..self.caps.len() {
            let l = self.local_of(state, i);
            if l.x > self.caps[i] || (l.r == 0 && l.mask != 0) {
                return None;
            }
            let k = self.local_index(i, l);
            if k >= self.locals[i].len() || self.locals[i][k] != l {
                return None;
            }
            idx += k * self.stride[i];
        }
        Some(idx)
    }

    /// The state with index `idx`.
    pub fn state(&self, idx: usize) -> SystemState {
        let n = self.caps.len();
        let mut s = SystemState {
            bs: crate::model::BaseStationState::empty(n),
            relays: vec![crate::model::RelayState::empty(n); self.num_relays],
        };
        for i in 0..n {
            let l = self.locals[i][(idx / self.stride[i]) % self.locals[i].len()];
            s.bs.queue_lengths[i] = l.x;
            s.bs.hol_retx[i] = l.r;
            for (a, relay) in s.relays.iter_mut().enumerate() {
                relay.decoded[i] = l.mask & (1 << a) != 0;
            }
        }
        s
    }
}

/// Enumerates every state with queue lengths capped per user.
pub fn enumerate_states_with_caps(
    config: &SystemConfig,
    caps: &[u32],
    limit: usize,
) -> Result<StateSpace> {
    config.validate()?;
    if caps.len() != config.num_users {
        return Err(Error::InvalidConfig("one queue cap per user required".into()));
    }
    let m = config.num_relays;
    if m > 16 {
        return Err(Error::StateSpaceTooLarge {
            states: usize::MAX,
            limit,
        });
    }
    let mut len: usize = 1;
    let mut stride = Vec::with_capacity(caps.len());
    let mut locals = Vec::with_capacity(caps.len());
    for (i, &cap) in caps.iter().enumerate() {
        let r_max = config.retx_limits[i];
        let count = local_count(cap, r_max, m);
        stride.push(len);
        len = len
            .checked_mul(count)
            .filter(|&n| n <= limit)
            .ok_or(Error::StateSpaceTooLarge {
                states: len.saturating_mul(count),
                limit,
            })?;
        let mut v = Vec::with_capacity(count);
        v.push(LocalState { x: 0, r: 0, mask: 0 });
        for x in 1..=cap {
            v.push(LocalState { x, r: 0, mask: 0 });
            for r in 1..=r_max {
                for mask in 0..(1u32 << m) {
                    v.push(LocalState { x, r, mask });
                }
            }
        }
        debug_assert_eq!(v.len(), count);
        locals.push(v);
    }
    Ok(StateSpace {
        caps: caps.to_vec(),
        num_relays: m,
        locals,
        stride,
        len,
    })
}

/// Enumerates every state with all queue lengths at most `x_cap`.
pub fn enumerate_states(config: &SystemConfig, x_cap: u32) -> Result<StateSpace> {
    enumerate_states_with_caps(config, &vec![x_cap; config.num_users], DEFAULT_STATE_LIMIT)
}

#[derive(Debug, Clone)]
pub struct MdpSpec {
    pub config: SystemConfig,
    /// Per-user queue caps; arrivals beyond a cap are dropped.
    pub caps: Vec<u32>,
    pub state_limit: usize,
}

impl MdpSpec {
    pub fn new(config: &SystemConfig, x_cap: u32) -> Self {
        Self {
            config: config.clone(),
            caps: vec![x_cap; config.num_users],
            state_limit: DEFAULT_STATE_LIMIT,
        }
    }

    /// Draining problem from the configured initial backlog.
    pub fn draining(config: &SystemConfig) -> Self {
        Self {
            config: config.clone(),
            caps: (0..config.num_users).map(|i| config.backlog(i)).collect(),
            state_limit: DEFAULT_STATE_LIMIT,
        }
    }
}

#[derive(Debug, Clone)]
struct Action {
    decision: SchedulingDecision,
    /// Post-service states and their probabilities.
    next: Vec<(usize, f64)>,
}

/// Finite MDP in factored form.
#[derive(Debug, Clone)]
pub struct Mdp {
    pub space: StateSpace,
    config: SystemConfig,
    costs: Vec<f64>,
    actions: Vec<Vec<Action>>,
    /// Arrival kernel in compressed rows; identity when there are no arrivals.
    arr_start: Vec<usize>,
    arr_entries: Vec<(usize, f64)>,
}

/// Poisson arrival counts for a queue with `room` free places; the tail
/// beyond `room` is lumped into the last entry.
fn arrival_pmf(lambda: f64, room: u32) -> Vec<f64> {
    let mut p = Vec::with_capacity(room as usize + 1);
    let mut term = (-lambda).exp();
    let mut acc = 0.0;
    for k in 0..room {
        p.push(term);
        acc += term;
        term *= lambda / f64::from(k + 1);
    }
    p.push((1.0 - acc).max(0.0));
    p
}

impl Mdp {
    pub fn build(spec: &MdpSpec) -> Result<Self> {
        let cfg = &spec.config;
        let model = DecodeModel::new(cfg)?;
        let space = enumerate_states_with_caps(cfg, &spec.caps, spec.state_limit)?;
        let n = cfg.num_users;
        let m = cfg.num_relays;

        let mut costs = Vec::with_capacity(space.len());
        let mut actions = Vec::with_capacity(space.len());
        for s in 0..space.len() {
            let state = space.state(s);
            costs.push(stage_cost(&state.bs, cfg));
            let mut acts = Vec::new();
            for i in (0..n).filter(|&i| state.bs.queue_lengths[i] > 0) {
                let r = state.bs.hol_retx[i];
                let mut txs = vec![Transmitter::BaseStation];
                txs.extend((0..m).filter(|&a| state.relays[a].decoded[i]).map(Transmitter::Relay));
                for tx in txs {
                    let decision = SchedulingDecision::Serve {
                        user: i,
                        transmitter: tx,
                    };
                    let g = model.user_failure(i, tx, r);
                    let eligible: Vec<usize> = (0..m)
                        .filter(|&a| !state.relays[a].decoded[i] && tx != Transmitter::Relay(a))
                        .collect();
                    let mut next: Vec<(usize, f64)> = Vec::new();
                    let mut push = |decoded: bool, relays: &[usize], p: f64| -> Result<()> {
                        if p <= 0.0 {
                            return Ok(());
                        }
                        let mut t = state.clone();
                        t.apply_service(cfg, &decision, decoded, relays)?;
                        let k = space.index_of(&t).ok_or_else(|| {
                            Error::Inconsistent("service left the state space".into())
                        })?;
                        match next.iter_mut().find(|e| e.0 == k) {
                            Some(e) => e.1 += p,
                            None => next.push((k, p)),
                        }
                        Ok(())
                    };
                    push(true, &[], 1.0 - g)?;
                    for subset in 0..(1u32 << eligible.len()) {
                        let mut p = g;
                        let mut joined = Vec::new();
                        for (b, &a) in eligible.iter().enumerate() {
                            let h = model.relay_failure(i, a, tx, r);
                            if subset & (1 << b) != 0 {
                                p *= 1.0 - h;
                                joined.push(a);
                            } else {
                                p *= h;
                            }
                        }
                        push(false, &joined, p)?;
                    }
                    let total: f64 = next.iter().map(|e| e.1).sum();
                    if (total - 1.0).abs() > 1e-12 {
                        return Err(Error::Inconsistent(format!(
                            "service row of state {s} sums to {total}"
                        )));
                    }
                    acts.push(Action { decision, next });
                }
            }
            if acts.is_empty() {
                acts.push(Action {
                    decision: SchedulingDecision::Idle,
                    next: vec![(s, 1.0)],
                });
            }
            actions.push(acts);
        }

        let mut arr_start = Vec::with_capacity(space.len() + 1);
        let mut arr_entries = Vec::new();
        let has_arrivals = cfg.has_arrivals();
        for s in 0..space.len() {
            arr_start.push(arr_entries.len());
            if !has_arrivals {
                arr_entries.push((s, 1.0));
                continue;
            }
            let state = space.state(s);
            // per-user (local index, probability) lists
            let mut factors: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
            for i in 0..n {
                let l = space.local_of(&state, i);
                let room = spec.caps[i] - l.x;
                let pmf = arrival_pmf(cfg.arrival_rates[i], room);
                let mut f = Vec::with_capacity(pmf.len());
                for (k, &p) in pmf.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let x = l.x + k as u32;
                    let nl = if l.x == 0 {
                        LocalState {
                            x,
                            r: 0,
                            mask: 0,
                        }
                    } else {
                        LocalState { x, ..l }
                    };
                    f.push((space.local_index(i, nl) * space.stride[i], p));
                }
                factors.push(f);
            }
            let mut combos = vec![(0usize, 1.0f64)];
            for f in &factors {
                let mut out = Vec::with_capacity(combos.len() * f.len());
                for &(base, p) in &combos {
                    for &(off, q) in f {
                        out.push((base + off, p * q));
                    }
                }
                combos = out;
            }
            let total: f64 = combos.iter().map(|e| e.1).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Inconsistent(format!(
                    "arrival row of state {s} sums to {total}"
                )));
            }
            arr_entries.extend(combos);
        }
        arr_start.push(arr_entries.len());

        Ok(Self {
            space,
            config: cfg.clone(),
            costs,
            actions,
            arr_start,
            arr_entries,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn stage_cost(&self, s: usize) -> f64 {
        self.costs[s]
    }

    pub fn decisions(&self, s: usize) -> impl Iterator<Item = &SchedulingDecision> {
        self.actions[s].iter().map(|a| &a.decision)
    }

    /// Largest deviation of any full kernel row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for acts in &self.actions {
            for a in acts {
                let total: f64 = a
                    .next
                    .iter()
                    .map(|&(k, p)| {
                        p * self.arr_entries[self.arr_start[k]..self.arr_start[k + 1]]
                            .iter()
                            .map(|e| e.1)
                            .sum::<f64>()
                    })
                    .sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    }

    /// Full transition row of `decision` at state `s`, or `None` if the
    /// decision is not available there.
    pub fn transition_row(&self, s: usize, decision: &SchedulingDecision) -> Option<Vec<(usize, f64)>> {
        let a = self.actions[s].iter().find(|a| a.decision == *decision)?;
        let mut row: Vec<(usize, f64)> = Vec::new();
        for &(k, p) in &a.next {
            for &(j, q) in &self.arr_entries[self.arr_start[k]..self.arr_start[k + 1]] {
                match row.iter_mut().find(|e| e.0 == j) {
                    Some(e) => e.1 += p * q,
                    None => row.push((j, p * q)),
                }
            }
        }
        Some(row)
    }

    fn after_arrivals(&self, v: &[f64], w: &mut [f64]) {
        for (k, wk) in w.iter_mut().enumerate() {
            *wk = self.arr_entries[self.arr_start[k]..self.arr_start[k + 1]]
                .iter()
                .map(|&(j, q)| q * v[j])
                .sum();
        }
    }

    fn action_value(&self, a: &Action, w: &[f64]) -> f64 {
        a.next.iter().map(|&(k, p)| p * w[k]).sum()
    }

    /// Index of the action matching the policy's decision at `s`.
    fn policy_action(&self, policy: &Policy, s: usize) -> Result<usize> {
        let d = policy.decide(&self.space.state(s), None)?;
        self.actions[s]
            .iter()
            .position(|a| a.decision == d)
            .ok_or_else(|| Error::Inconsistent(format!("policy chose unavailable {d:?} in state {s}")))
    }

    fn fixed_actions(&self, policy: &Policy) -> Result<Vec<usize>> {
        if !policy.is_stationary() {
            return Err(Error::ContractViolation(format!(
                "{} is not a stationary policy",
                policy.kind()
            )));
        }
        (0..self.len()).map(|s| self.policy_action(policy, s)).collect()
    }

    /// Work remaining in a draining state; every service strictly lowers it.
    fn work(&self, s: usize) -> u64 {
        let st = self.space.state(s);
        (0..self.config.num_users)
            .map(|i| {
                let r_max = self.config.retx_limits[i] as u64 + 1;
                u64::from(st.bs.queue_lengths[i]) * r_max - st.bs.hol_retx[i] as u64
            })
            .sum()
    }

    fn draining_sweep(&self, choose: impl Fn(usize, &[f64]) -> (f64, usize)) -> Result<DrainingSolution> {
        if self.config.has_arrivals() {
            return Err(Error::InvalidConfig(
                "draining solver requires zero arrival rates".into(),
            ));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&s| self.work(s));
        let mut values = vec![0.0; self.len()];
        let mut choice = vec![0; self.len()];
        // successors have strictly smaller work, so one pass in this order is exact
        for &s in &order {
            if self.actions[s][0].decision == SchedulingDecision::Idle {
                continue;
            }
            let (v, a) = choose(s, &values);
            values[s] = self.costs[s] + v;
            choice[s] = a;
        }
        // confirm the Bellman residual
        let mut residual: f64 = 0.0;
        for s in 0..self.len() {
            if self.actions[s][0].decision == SchedulingDecision::Idle {
                continue;
            }
            let (v, _) = choose(s, &values);
            residual = residual.max((self.costs[s] + v - values[s]).abs());
        }
        if residual >= 1e-10 {
            return Err(Error::NoConvergence {
                iterations: 2,
                residual,
            });
        }
        let actions = (0..self.len())
            .map(|s| self.actions[s][choice[s]].decision)
            .collect();
        Ok(DrainingSolution {
            values,
            actions,
            residual,
        })
    }

    /// Minimum total cost until every queue is empty, from each state.
    pub fn solve_draining(&self) -> Result<DrainingSolution> {
        self.draining_sweep(|s, v| {
            let mut best = (f64::INFINITY, 0);
            for (k, a) in self.actions[s].iter().enumerate() {
                let q = self.action_value(a, v);
                if q < best.0 - 1e-15 * q.abs().max(1.0) {
                    best = (q, k);
                }
            }
            best
        })
    }

    /// Exact total draining cost of a stationary policy.
    pub fn evaluate_draining_policy(&self, policy: &Policy) -> Result<DrainingSolution> {
        let fixed = self.fixed_actions(policy)?;
        self.draining_sweep(|s, v| (self.action_value(&self.actions[s][fixed[s]], v), fixed[s]))
    }

    fn relative_value_iteration(
        &self,
        opts: &AverageOptions,
        fixed: Option<&[usize]>,
    ) -> Result<AverageSolution> {
        if !self.config.has_arrivals() {
            return Err(Error::InvalidConfig(
                "average-cost solver requires positive arrival rates; use the draining solver"
                    .into(),
            ));
        }
        let n = self.len();
        let tau = opts.damping;
        let mut h = vec![0.0; n];
        let mut th = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut choice = vec![0usize; n];
        let mut span = f64::INFINITY;
        for it in 1..=opts.max_iterations {
            self.after_arrivals(&h, &mut w);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in 0..n {
                let (q, k) = match fixed {
                    Some(f) => (self.action_value(&self.actions[s][f[s]], &w), f[s]),
                    None => {
                        let mut best = (f64::INFINITY, 0);
                        for (k, a) in self.actions[s].iter().enumerate() {
                            let q = self.action_value(a, &w);
                            if q < best.0 - 1e-15 * q.abs().max(1.0) {
                                best = (q, k);
                            }
                        }
                        best
                    }
                };
                th[s] = self.costs[s] + tau * h[s] + (1.0 - tau) * q;
                choice[s] = k;
                let d = th[s] - h[s];
                lo = lo.min(d);
                hi = hi.max(d);
            }
            span = hi - lo;
            let base = th[0];
            for s in 0..n {
                h[s] = th[s] - base;
            }
            if span < opts.tolerance {
                return Ok(AverageSolution {
                    gain: 0.5 * (lo + hi),
                    lower: lo,
                    upper: hi,
                    iterations: it,
                    bias: h,
                    actions: choice
                        .iter()
                        .enumerate()
                        .map(|(s, &k)| self.actions[s][k].decision)
                        .collect(),
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: opts.max_iterations,
            residual: span,
        })
    }

    /// Optimal long-run average cost of the truncated problem.
    pub fn solve_average_cost(&self, opts: &AverageOptions) -> Result<AverageSolution> {
        self.relative_value_iteration(opts, None)
    }

    /// Long-run average cost of a stationary policy on the truncated problem.
    pub fn evaluate_average_policy(
        &self,
        policy: &Policy,
        opts: &AverageOptions,
    ) -> Result<AverageSolution> {
        let fixed = self.fixed_actions(policy)?;
        self.relative_value_iteration(opts, Some(&fixed))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DrainingSolution {
    pub values: Vec<f64>,
    pub actions: Vec<SchedulingDecision>,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AverageOptions {
    /// Stop once the gain bounds are closer than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Self-loop weight of the aperiodicity transform.
    pub damping: f64,
}

impl Default for AverageOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 1_000_000,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AverageSolution {
    pub gain: f64,
    /// Bounds on the gain from the last iteration.
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub actions: Vec<SchedulingDecision>,
}

/// Convenience wrapper: build and solve the draining problem of `spec`.
pub fn solve_draining(spec: &MdpSpec) -> Result<(Mdp, DrainingSolution)> {
    let mdp = Mdp::build(spec)?;
    let sol = mdp.solve_draining()?;
    Ok((mdp, sol))
}

/// Convenience wrapper: build and solve the average-cost problem of `spec`.
pub fn solve_average_cost(spec: &MdpSpec, opts: &AverageOptions) -> Result<(Mdp, AverageSolution)> {
    let mdp = Mdp::build(spec)?;
    let sol = mdp.solve_average_cost(opts)?;
    Ok((mdp, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::two_user_config;
    use crate::model::ConvexCost;
    use crate::policy::PolicyKind;

    fn single_user(r_max: usize, m: usize) -> SystemConfig {
        SystemConfig {
            num_users: 1,
            num_relays: m,
            arrival_rates: vec![0.0],
            cost_rates: vec![vec![1.0; r_max + 1]],
            retx_limits: vec![r_max],
            bs_channel_params: vec![0.5],
            relay_channel_params: vec![vec![0.3]; m],
            bs_relay_params: vec![0.5; m],
            decode_decay: 0.9,
            initial_backlog: vec![],
            drain_costs: None,
        }
    }

    fn draining_pair() -> SystemConfig {
        let mut cfg = two_user_config();
        cfg.arrival_rates = vec![0.0, 0.0];
        cfg.initial_backlog = vec![2, 2];
        cfg.drain_costs = Some(vec![
            ConvexCost::Quadratic { weight: 1.0 },
            ConvexCost::Linear { weight: 1.5 },
        ]);
        cfg
    }

    #[test]
    fn state_count_examples() {
        assert_eq!(enumerate_states(&single_user(1, 0), 1).unwrap().len(), 3);
        assert_eq!(enumerate_states(&single_user(1, 1), 1).unwrap().len(), 4);
        let cfg = two_user_config();
        let sp = enumerate_states(&cfg, 6).unwrap();
        assert_eq!(sp.len(), 31 * 31);
        let err = enumerate_states_with_caps(&cfg, &[6, 6], 100).unwrap_err();
        assert!(matches!(err, Error::StateSpaceTooLarge { .. }));
    }

    #[test]
    fn index_map_round_trips() {
        let cfg = two_user_config();
        let sp = enumerate_states(&cfg, 3).unwrap();
        for k in 0..sp.len() {
            let s = sp.state(k);
            s.check(&cfg).unwrap();
            assert_eq!(sp.index_of(&s), Some(k));
        }
        let mut out = sp.state(0);
        out.bs.queue_lengths[0] = 4;
        assert_eq!(sp.index_of(&out), None);
    }

    #[test]
    fn kernel_rows_are_stochastic() {
        let mdp = Mdp::build(&MdpSpec::new(&two_user_config(), 4)).unwrap();
        assert!(mdp.max_row_error() < 1e-12);
        let mdp = Mdp::build(&MdpSpec::draining(&draining_pair())).unwrap();
        assert!(mdp.max_row_error() < 1e-12);
    }

    #[test]
    fn empty_start_costs_nothing() {
        let cfg = draining_pair();
        let (mdp, sol) = solve_draining(&MdpSpec::draining(&cfg)).unwrap();
        let empty = mdp.space.index_of(&SystemState::empty(&cfg)).unwrap();
        assert_eq!(sol.values[empty], 0.0);
        assert_eq!(sol.actions[empty], SchedulingDecision::Idle);
    }

    #[test]
    fn one_slot_drain() {
        let mut cfg = single_user(0, 0);
        cfg.initial_backlog = vec![1];
        let (mdp, sol) = solve_draining(&MdpSpec::draining(&cfg)).unwrap();
        let s = mdp.space.index_of(&SystemState::initial(&cfg)).unwrap();
        assert!((sol.values[s] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn draining_values_grow_with_backlog() {
        let cfg = draining_pair();
        let (mdp, sol) = solve_draining(&MdpSpec::draining(&cfg)).unwrap();
        for k in 0..mdp.len() {
            assert!(sol.values[k] >= 0.0);
            let s = mdp.space.state(k);
            for i in 0..2 {
                let mut t = s.clone();
                t.bs.queue_lengths[i] += 1;
                if t.bs.queue_lengths[i] == 1 {
                    continue;
                }
                if let Some(j) = mdp.space.index_of(&t) {
                    assert!(sol.values[j] >= sol.values[k] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn index_policy_attains_draining_optimum() {
        let cfg = draining_pair();
        let (mdp, sol) = solve_draining(&MdpSpec::draining(&cfg)).unwrap();
        let p = Policy::with_drain_cap(PolicyKind::RdcIndex, &cfg, 2).unwrap();
        let ev = mdp.evaluate_draining_policy(&p).unwrap();
        let s = mdp.space.index_of(&SystemState::initial(&cfg)).unwrap();
        assert!((ev.values[s] - sol.values[s]).abs() < 1e-8);
        let lq = Policy::new(PolicyKind::LongestQueue, &cfg).unwrap();
        let ev = mdp.evaluate_draining_policy(&lq).unwrap();
        assert!(ev.values[s] >= sol.values[s] - 1e-12);
    }

    #[test]
    fn average_solver_rejects_draining_and_vice_versa() {
        let mdp = Mdp::build(&MdpSpec::draining(&draining_pair())).unwrap();
        assert!(mdp.solve_average_cost(&AverageOptions::default()).is_err());
        let mdp = Mdp::build(&MdpSpec::new(&two_user_config(), 2)).unwrap();
        assert!(mdp.solve_draining().is_err());
    }

    #[test]
    fn deterministic_service_gain() {
        // one-shot service, a single queue: cost is the mean backlog at slot start
        let mut cfg = single_user(0, 0);
        cfg.arrival_rates = vec![0.3];
        let (_, sol) = solve_average_cost(&MdpSpec::new(&cfg, 30), &AverageOptions::default()).unwrap();
        assert!(sol.upper - sol.lower < 1e-8);
        // slotted M/D/1 with service-then-arrival: E[x] = lambda + lambda^2 / (2 (1 - lambda))
        let l = 0.3;
        let expect = l + l * l / (2.0 * (1.0 - l));
        assert!((sol.gain - expect).abs() < 1e-6, "gain {}", sol.gain);
    }

    #[test]
    fn index_policy_gain_close_to_optimal() {
        let cfg = two_user_config();
        let mdp = Mdp::build(&MdpSpec::new(&cfg, 5)).unwrap();
        let opts = AverageOptions::default();
        let opt = mdp.solve_average_cost(&opts).unwrap();
        let p = Policy::new(PolicyKind::RlpaIndex, &cfg).unwrap();
        let ev = mdp.evaluate_average_policy(&p, &opts).unwrap();
        assert!(ev.gain >= opt.gain - 1e-7);
        assert!(opt.gain > 0.0);
        let rr = Policy::new(PolicyKind::RoundRobin, &cfg).unwrap();
        assert!(mdp.evaluate_average_policy(&rr, &opts).is_err());
    }
}
