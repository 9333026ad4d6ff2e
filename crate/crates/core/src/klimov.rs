//! Klimov transformation of the relay-assisted scheduling problems.
//!
//! Each user's HoL packet becomes a customer moving between labelled queues
//! `(i, r, l)`: `r` transmissions so far, `l` the rank of the best relay that
//! holds the packet (0 when none does). The draining variant adds the queue
//! length `x` as a stratum, `(i, r, x, l)`, and a decode moves the customer
//! to `(i, 0, x - 1, 0)`.
//!
//! Transitions only increase `r` within a stratum, so every expected service
//! time is obtained by one backward pass over a topological order.

use std::collections::HashMap;

use serde::Serialize;

use crate::channel::DecodeModel;
use crate::error::{Error, Result};
use crate::model::{ConvexCost, SystemConfig, Transmitter};

/// Relative tolerance under which two index values are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Per-user relay order `d_{i,1} .. d_{i,M}`, weakest link first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayRanking {
    /// `order[i][l - 1]` is the relay with rank `l` for user `i`.
    pub order: Vec<Vec<usize>>,
    /// `rank[i][a]` is relay `a`'s rank (1-based) for user `i`.
    #[serde(skip)]
    rank: Vec<Vec<usize>>,
}

impl RelayRanking {
    /// Relay with rank `rank` (1-based) for `user`.
    pub fn relay(&self, user: usize, rank: usize) -> usize {
        self.order[user][rank - 1]
    }

    pub fn rank(&self, user: usize, relay: usize) -> usize {
        self.rank[user][relay]
    }

    pub fn num_relays(&self) -> usize {
        self.order.first().map_or(0, Vec::len)
    }

    /// Highest rank among relays flagged in `flags` (indexed by relay), 0 if none.
    pub fn best_rank(&self, user: usize, flags: impl Iterator<Item = (usize, bool)>) -> usize {
        flags
            .filter(|&(_, f)| f)
            .map(|(a, _)| self.rank[user][a])
            .max()
            .unwrap_or(0)
    }
}

/// Orders relays for each user by link quality, ascending. A larger channel
/// parameter means a weaker link, so ranks ascend as the parameter falls;
/// equal parameters are ordered by relay index.
pub fn rank_relays(config: &SystemConfig) -> RelayRanking {
    let m = config.num_relays;
    let mut order = Vec::with_capacity(config.num_users);
    let mut rank = Vec::with_capacity(config.num_users);
    for i in 0..config.num_users {
        let mut relays: Vec<usize> = (0..m).collect();
        relays.sort_by(|&a, &b| {
            let (pa, pb) = (
                config.relay_channel_params[a][i],
                config.relay_channel_params[b][i],
            );
            pb.total_cmp(&pa).then(a.cmp(&b))
        });
        let mut r = vec![0; m];
        for (pos, &a) in relays.iter().enumerate() {
            r[a] = pos + 1;
        }
        order.push(relays);
        rank.push(r);
    }
    RelayRanking { order, rank }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct QueueLabel {
    pub user: usize,
    pub retx: usize,
    /// Queue length stratum, draining instances only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stratum: Option<u32>,
    pub rank: usize,
}

impl QueueLabel {
    /// Sort key for the documented tie-break: lower user first, then smaller
    /// stratum, higher retransmission count, higher relay rank.
    fn tie_key(&self) -> (usize, u32, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>) {
        (
            self.user,
            self.stratum.unwrap_or(0),
            std::cmp::Reverse(self.retx),
            std::cmp::Reverse(self.rank),
        )
    }
}

impl std::fmt::Display for QueueLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stratum {
            Some(x) => write!(f, "({},{},{},{})", self.user + 1, self.retx, x, self.rank),
            None => write!(f, "({},{},{})", self.user + 1, self.retx, self.rank),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstanceKind {
    /// Linear costs with Poisson arrivals.
    Rlpak,
    /// Draining with queue-length costs.
    Rdck,
}

/// A transformed multiclass queueing problem with unit service times.
#[derive(Debug, Clone, Serialize)]
pub struct KlimovInstance {
    pub kind: InstanceKind,
    pub labels: Vec<QueueLabel>,
    /// Sparse rows of the substochastic transition matrix.
    pub transitions: Vec<Vec<(usize, f64)>>,
    /// Probability of leaving the system after one service at each queue.
    pub departure: Vec<f64>,
    pub holding_costs: Vec<f64>,
    /// `(label, p_{i,0})` pairs: where external arrivals enter.
    pub arrival_probs: Vec<(usize, f64)>,
    pub service_times: Vec<f64>,
    /// Node serving each queue: the better of the base station and relay `d_{i,l}`.
    pub servers: Vec<Transmitter>,
    /// Failure probability of the serving node at each queue.
    pub user_failure: Vec<f64>,
    #[serde(skip)]
    topo: Vec<usize>,
    #[serde(skip)]
    lookup: HashMap<QueueLabel, usize>,
}

/// Serving node and user failure probability for label `(i, r, l)`.
fn serving_node(model: &DecodeModel, user: usize, r: usize, rank: usize) -> (Transmitter, f64) {
    let bs = model.user_failure(user, Transmitter::BaseStation, r);
    if rank == 0 {
        return (Transmitter::BaseStation, bs);
    }
    let relay = Transmitter::Relay(model.ranking().relay(user, rank));
    let g = model.user_failure(user, relay, r);
    if g < bs {
        (relay, g)
    } else {
        (Transmitter::BaseStation, bs)
    }
}

/// Distribution of the next relay rank after a failed attempt at `(i, r, l)`
/// served by `tx`: `(n, P(n))` for `n >= l`.
pub(crate) fn rank_successors(
    model: &DecodeModel,
    user: usize,
    r: usize,
    rank: usize,
    tx: Transmitter,
) -> Vec<(usize, f64)> {
    let m = model.config().num_relays;
    let ranking = model.ranking();
    let fail = |n: usize| model.relay_failure(user, ranking.relay(user, n), tx, r);
    let mut out = Vec::with_capacity(m - rank + 1);
    // probability that no relay ranked above n decodes
    let mut none_above = 1.0;
    for n in (rank + 1..=m).rev() {
        let h = fail(n);
        out.push((n, (1.0 - h) * none_above));
        none_above *= h;
    }
    out.push((rank, none_above));
    out.reverse();
    out
}

impl KlimovInstance {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &QueueLabel) -> Option<usize> {
        self.lookup.get(label).copied()
    }

    /// Label indices ordered so every queue appears after all its successors.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    fn finish(mut self) -> Result<Self> {
        self.lookup = self
            .labels
            .iter()
            .enumerate()
            .map(|(k, l)| (*l, k))
            .collect();
        // depth-first post-order yields successors first
        let n = self.labels.len();
        let mut state = vec![0u8; n];
        let mut topo = Vec::with_capacity(n);
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state[start] = 1;
            while let Some(&mut (q, ref mut next)) = stack.last_mut() {
                if let Some(&(j, _)) = self.transitions[q].get(*next) {
                    *next += 1;
                    match state[j] {
                        0 => {
                            state[j] = 1;
                            stack.push((j, 0));
                        }
                        1 => {
                            return Err(Error::Inconsistent(format!(
                                "transition cycle through {}",
                                self.labels[j]
                            )))
                        }
                        _ => {}
                    }
                } else {
                    state[q] = 2;
                    topo.push(q);
                    stack.pop();
                }
            }
        }
        self.topo = topo;
        Ok(self)
    }

    /// Expected total service time spent in `subset` starting from each of
    /// its queues. Entries outside the subset are 0.
    pub fn service_times_in(&self, subset: &[bool]) -> Vec<f64> {
        let mut t = vec![0.0; self.len()];
        for &q in &self.topo {
            if subset[q] {
                t[q] = self.service_times[q]
                    + self.transitions[q]
                        .iter()
                        .filter(|(j, _)| subset[*j])
                        .map(|(j, p)| p * t[*j])
                        .sum::<f64>();
            }
        }
        t
    }

    /// `T^(Omega)` for every queue.
    pub fn full_service_times(&self) -> Vec<f64> {
        self.service_times_in(&vec![true; self.len()])
    }
}

/// `T^(A)` for the queues of `subset` (given as label indices).
pub fn expected_service_time(
    instance: &KlimovInstance,
    subset: &[usize],
) -> Result<HashMap<QueueLabel, f64>> {
    if subset.is_empty() {
        return Err(Error::ContractViolation("empty queue subset".into()));
    }
    let mut mask = vec![false; instance.len()];
    for &q in subset {
        if q >= instance.len() {
            return Err(Error::OutOfRange {
                what: "queue index",
                value: q,
                max: instance.len() - 1,
            });
        }
        mask[q] = true;
    }
    let t = instance.service_times_in(&mask);
    Ok(subset.iter().map(|&q| (instance.labels[q], t[q])).collect())
}

/// Transformation of the linear-cost problem with arrivals.
pub fn build_rlpak(config: &SystemConfig, model: &DecodeModel) -> Result<KlimovInstance> {
    config.validate()?;
    let m = config.num_relays;
    let mut inst = KlimovInstance {
        kind: InstanceKind::Rlpak,
        labels: Vec::new(),
        transitions: Vec::new(),
        departure: Vec::new(),
        holding_costs: Vec::new(),
        arrival_probs: Vec::new(),
        service_times: Vec::new(),
        servers: Vec::new(),
        user_failure: Vec::new(),
        topo: Vec::new(),
        lookup: HashMap::new(),
    };
    let lambda = config.total_arrival_rate();
    let mut offset = 0;
    for i in 0..config.num_users {
        let r_max = config.retx_limits[i];
        let idx = |r: usize, l: usize| offset + r * (m + 1) + l;
        for r in 0..=r_max {
            for l in 0..=m {
                let (server, g) = serving_node(model, i, r, l);
                let mut row = Vec::new();
                if r < r_max && g > 0.0 {
                    for (n, p) in rank_successors(model, i, r, l, server) {
                        if p > 0.0 {
                            row.push((idx(r + 1, n), g * p));
                        }
                    }
                }
                let departure = if r < r_max { 1.0 - g } else { 1.0 };
                inst.labels.push(QueueLabel {
                    user: i,
                    retx: r,
                    stratum: None,
                    rank: l,
                });
                inst.transitions.push(row);
                inst.departure.push(departure);
                inst.holding_costs.push(config.cost_rates[i][r]);
                inst.service_times.push(1.0);
                inst.servers.push(server);
                inst.user_failure.push(g);
            }
        }
        if lambda > 0.0 {
            inst.arrival_probs
                .push((idx(0, 0), config.arrival_rates[i] / lambda));
        }
        offset += (r_max + 1) * (m + 1);
    }
    inst.finish()
}

/// Transformation of the draining problem from backlog `initial` with
/// queue-length costs `cost_fns`.
pub fn build_rdck(
    config: &SystemConfig,
    initial: &[u32],
    cost_fns: &[ConvexCost],
    model: &DecodeModel,
) -> Result<KlimovInstance> {
    config.validate()?;
    if config.has_arrivals() {
        return Err(Error::InvalidConfig(
            "draining transformation requires zero arrival rates".into(),
        ));
    }
    if initial.len() != config.num_users || cost_fns.len() != config.num_users {
        return Err(Error::InvalidConfig(
            "initial backlog and cost functions need one entry per user".into(),
        ));
    }
    for u in cost_fns {
        u.validate()?;
    }
    let m = config.num_relays;
    let mut inst = KlimovInstance {
        kind: InstanceKind::Rdck,
        labels: Vec::new(),
        transitions: Vec::new(),
        departure: Vec::new(),
        holding_costs: Vec::new(),
        arrival_probs: Vec::new(),
        service_times: Vec::new(),
        servers: Vec::new(),
        user_failure: Vec::new(),
        topo: Vec::new(),
        lookup: HashMap::new(),
    };
    let mut offset = 0;
    for i in 0..config.num_users {
        let r_max = config.retx_limits[i];
        let idx = |x: u32, r: usize, l: usize| {
            offset + ((x as usize - 1) * (r_max + 1) + r) * (m + 1) + l
        };
        for x in 1..=initial[i] {
            for r in 0..=r_max {
                for l in 0..=m {
                    let (server, g) = serving_node(model, i, r, l);
                    let mut row = Vec::new();
                    let mut leave = 1.0 - g;
                    if r < r_max {
                        if g > 0.0 {
                            for (n, p) in rank_successors(model, i, r, l, server) {
                                if p > 0.0 {
                                    row.push((idx(x, r + 1, n), g * p));
                                }
                            }
                        }
                    } else {
                        // a failure at r_max discards the packet
                        leave = 1.0;
                    }
                    let departure = if x > 1 {
                        row.push((idx(x - 1, 0, 0), leave));
                        0.0
                    } else {
                        leave
                    };
                    inst.labels.push(QueueLabel {
                        user: i,
                        retx: r,
                        stratum: Some(x),
                        rank: l,
                    });
                    inst.transitions.push(row);
                    inst.departure.push(departure);
                    inst.holding_costs.push(cost_fns[i].eval(x));
                    inst.service_times.push(1.0);
                    inst.servers.push(server);
                    inst.user_failure.push(g);
                }
            }
        }
        offset += initial[i] as usize * (r_max + 1) * (m + 1);
    }
    inst.finish()
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderEntry {
    pub label: QueueLabel,
    pub queue: usize,
    pub index: f64,
    pub server: Transmitter,
}

/// Static priority order, highest priority first.
#[derive(Debug, Clone, Serialize)]
pub struct PriorityOrdering {
    pub entries: Vec<OrderEntry>,
    /// `position[q]`: 0-based priority position of queue `q`.
    #[serde(skip)]
    pub position: Vec<usize>,
}

impl PriorityOrdering {
    pub fn queues(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.queue)
    }
}

fn better(a: (f64, &QueueLabel), b: (f64, &QueueLabel)) -> bool {
    let scale = a.0.abs().max(b.0.abs()).max(1.0);
    if (a.0 - b.0).abs() <= TIE_TOLERANCE * scale {
        a.1.tie_key() < b.1.tie_key()
    } else {
        a.0 > b.0
    }
}

/// Computes the optimal priority order by the adaptive-greedy recursion.
///
/// With `H` the queues already ranked, every other queue `q` gets
/// `(c_q - E[c at the first queue outside H]) / E[slots until leaving H]`,
/// counting the service at `q` itself; the largest value takes the next
/// position. Leaving the system costs 0. When holding costs never decrease
/// along transitions this equals ranking by `c_q / T_q^(Omega)`.
pub fn klimov_ordering(instance: &KlimovInstance) -> PriorityOrdering {
    let k = instance.len();
    let mut ranked = vec![false; k];
    let mut work = vec![0.0; k];
    let mut exit_cost = vec![0.0; k];
    let mut entries = Vec::with_capacity(k);
    let c = &instance.holding_costs;

    for _ in 0..k {
        for &q in instance.topological_order() {
            if ranked[q] {
                let (mut w, mut f) = (instance.service_times[q], 0.0);
                for &(j, p) in &instance.transitions[q] {
                    if ranked[j] {
                        w += p * work[j];
                        f += p * exit_cost[j];
                    } else {
                        f += p * c[j];
                    }
                }
                work[q] = w;
                exit_cost[q] = f;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for q in 0..k {
            if ranked[q] {
                continue;
            }
            let (mut w, mut f) = (instance.service_times[q], 0.0);
            for &(j, p) in &instance.transitions[q] {
                if ranked[j] {
                    w += p * work[j];
                    f += p * exit_cost[j];
                } else {
                    f += p * c[j];
                }
            }
            let nu = (c[q] - f) / w;
            let take = match best {
                None => true,
                Some((b, bv)) => better((nu, &instance.labels[q]), (bv, &instance.labels[b])),
            };
            if take {
                best = Some((q, nu));
            }
        }
        let (q, nu) = best.expect("unranked queue remains");
        ranked[q] = true;
        entries.push(OrderEntry {
            label: instance.labels[q],
            queue: q,
            index: nu,
            server: instance.servers[q],
        });
    }
    let mut position = vec![0; k];
    for (p, e) in entries.iter().enumerate() {
        position[e.queue] = p;
    }
    PriorityOrdering { entries, position }
}

/// Queues sorted by `c_q / T_q^(Omega)` descending with the standard tie-break.
pub fn ratio_ordering(instance: &KlimovInstance) -> Vec<(usize, f64)> {
    let t = instance.full_service_times();
    let mut v: Vec<(usize, f64)> = (0..instance.len())
        .map(|q| (q, instance.holding_costs[q] / t[q]))
        .collect();
    v.sort_by(|a, b| {
        if better((a.1, &instance.labels[a.0]), (b.1, &instance.labels[b.0])) {
            std::cmp::Ordering::Less
        } else if better((b.1, &instance.labels[b.0]), (a.1, &instance.labels[a.0])) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    v
}

/// Checks that an ordering respects the within-stratum partial order
/// `(i, r', x, m)` above `(i, r, x, l)` for `r' > r`, `m >= l`.
pub fn check_partial_order(instance: &KlimovInstance, ordering: &PriorityOrdering) -> Result<()> {
    for (a, la) in instance.labels.iter().enumerate() {
        for (b, lb) in instance.labels.iter().enumerate() {
            if la.user == lb.user
                && la.stratum == lb.stratum
                && la.retx > lb.retx
                && la.rank >= lb.rank
                && ordering.position[a] > ordering.position[b]
            {
                return Err(Error::Inconsistent(format!(
                    "queue {la} ranked below {lb}"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaItem {
    pub item: u8,
    pub description: &'static str,
    pub passed: bool,
    pub worst_violation: f64,
    /// Queue and set size at the worst violation.
    pub witness: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServiceBoundsReport {
    pub tolerance: f64,
    pub items: Vec<LemmaItem>,
}

impl ServiceBoundsReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn item(&self, n: u8) -> &LemmaItem {
        &self.items[usize::from(n) - 1]
    }
}

struct Tracker {
    worst: f64,
    witness: Option<String>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            worst: 0.0,
            witness: None,
        }
    }

    fn see(&mut self, v: f64, what: impl FnOnce() -> String) {
        if v > self.worst {
            self.worst = v;
            self.witness = Some(what());
        }
    }

    fn finish(self, item: u8, description: &'static str, tol: f64) -> LemmaItem {
        LemmaItem {
            item,
            description,
            passed: self.worst <= tol,
            worst_violation: self.worst,
            witness: self.witness,
        }
    }
}

/// Closed-form service time `1 + sum_{q=r}^{r_max-1} prod_{s=r}^{q} g(s)`.
pub fn closed_form_service_time(g: impl Fn(usize) -> f64, r: usize, r_max: usize) -> f64 {
    let mut total = 1.0;
    let mut prod = 1.0;
    for s in r..r_max {
        prod *= g(s);
        total += prod;
    }
    total
}

/// Numerically checks the five structural claims about the sets
/// `A_k = {alpha_1, .., alpha_k}` produced by the ordering of a linear-cost
/// instance.
pub fn verify_service_bounds(
    instance: &KlimovInstance,
    ordering: &PriorityOrdering,
    model: &DecodeModel,
    tolerance: f64,
) -> Result<ServiceBoundsReport> {
    if instance.kind != InstanceKind::Rlpak {
        return Err(Error::ContractViolation(
            "the service-time lemma applies to linear-cost instances".into(),
        ));
    }
    let cfg = model.config();
    let k = instance.len();
    let t_full = instance.full_service_times();
    let ratio: Vec<f64> = (0..k)
        .map(|q| instance.holding_costs[q] / t_full[q])
        .collect();

    let mut closure = Tracker::new();
    let mut bs_form = Tracker::new();
    let mut relay_form = Tracker::new();
    let mut monotone = Tracker::new();
    let mut argmin = Tracker::new();

    let mut members = vec![false; k];
    for set_size in 1..=k {
        members.fill(false);
        for e in &ordering.entries[..set_size] {
            members[e.queue] = true;
        }
        let t_a = instance.service_times_in(&members);
        let in_set: Vec<usize> = (0..k).filter(|&q| members[q]).collect();

        for &q in &in_set {
            let lq = instance.labels[q];
            let r_max = cfg.retx_limits[lq.user];
            for (p, lp) in instance.labels.iter().enumerate() {
                if lp.user != lq.user || lp.retx <= lq.retx || lp.rank < lq.rank {
                    continue;
                }
                if !members[p] {
                    closure.see(1.0, || format!("{lp} missing from A_{set_size} with {lq}"));
                }
                // item 4 compares only members of A_k
                if members[p] {
                    monotone.see(t_a[p] - t_a[q], || {
                        format!("T{lp} > T{lq} in A_{set_size}")
                    });
                }
            }
            let closed = if lq.rank == 0 {
                closed_form_service_time(
                    |s| model.user_failure(lq.user, Transmitter::BaseStation, s),
                    lq.retx,
                    r_max,
                )
            } else {
                let relay = Transmitter::Relay(model.ranking().relay(lq.user, lq.rank));
                closed_form_service_time(|s| model.user_failure(lq.user, relay, s), lq.retx, r_max)
            };
            let v = (t_a[q] - closed).abs().max((t_a[q] - t_full[q]).abs());
            let what = || format!("{lq} in A_{set_size}: T^A={} closed={closed}", t_a[q]);
            if lq.rank == 0 {
                bs_form.see(v, what);
            } else {
                relay_form.see(v, what);
            }
        }

        let alpha = ordering.entries[set_size - 1].queue;
        let min_ratio = in_set
            .iter()
            .map(|&q| ratio[q])
            .fold(f64::INFINITY, f64::min);
        argmin.see(ratio[alpha] - min_ratio, || {
            format!("alpha_{set_size} = {} not the argmin", instance.labels[alpha])
        });
    }

    Ok(ServiceBoundsReport {
        tolerance,
        items: vec![
            closure.finish(1, "A_k closed under later retransmissions and higher relay ranks", tolerance),
            bs_form.finish(2, "T^(A_k) of (i,r,0) equals the base-station closed form and T^(Omega)", tolerance),
            relay_form.finish(3, "T^(A_k) of (i,r,m>0) equals the relay closed form and T^(Omega)", tolerance),
            monotone.finish(4, "T^(A_k) nonincreasing towards later retransmissions and higher ranks", tolerance),
            argmin.finish(5, "alpha_k minimizes c/T^(Omega) over A_k", tolerance),
        ],
    })
}
