//! Decode-failure probabilities and per-slot outcome sampling.
//!
//! Every link uses the same parametric family: a transmission attempt made
//! after `r` earlier attempts fails with probability `eta * rho^r`, and the
//! attempt at `r = r_max` always succeeds. `eta` is the link's channel
//! parameter (larger means a weaker link). Links into a relay are keyed by
//! the receiving relay's `bs_relay_params` entry whichever node transmits.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::klimov::{rank_relays, RelayRanking};
use crate::model::{SchedulingDecision, SlotOutcome, SystemConfig, SystemState, Transmitter};

/// Failure probability of an attempt made after `r` earlier attempts.
pub fn decay_failure(param: f64, rho: f64, r: usize, r_max: usize) -> f64 {
    if r >= r_max {
        0.0
    } else {
        param * rho.powi(r as i32)
    }
}

/// Decode model for one configuration, plus its arrival law.
#[derive(Debug, Clone)]
pub struct DecodeModel {
    config: SystemConfig,
    ranking: RelayRanking,
    arrivals: Vec<Option<Poisson<f64>>>,
}

impl DecodeModel {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        let arrivals = config
            .arrival_rates
            .iter()
            .map(|&l| {
                if l > 0.0 {
                    Poisson::new(l)
                        .map(Some)
                        .map_err(|e| Error::InvalidConfig(format!("arrival rate {l}: {e}")))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ranking: rank_relays(config),
            config: config.clone(),
            arrivals,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn ranking(&self) -> &RelayRanking {
        &self.ranking
    }

    fn check_retx(&self, user: usize, r: usize) -> Result<usize> {
        if user >= self.config.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                value: user,
                max: self.config.num_users - 1,
            });
        }
        let r_max = self.config.retx_limits[user];
        if r > r_max {
            return Err(Error::OutOfRange {
                what: "retransmission count",
                value: r,
                max: r_max,
            });
        }
        Ok(r_max)
    }

    fn check_rank(&self, rank: usize, allow_bs: bool) -> Result<()> {
        let min = usize::from(!allow_bs);
        if rank < min || rank > self.config.num_relays {
            return Err(Error::OutOfRange {
                what: "relay rank",
                value: rank,
                max: self.config.num_relays,
            });
        }
        Ok(())
    }

    /// `g_i(r)`: the user fails to decode a base-station transmission.
    pub fn g_user_from_bs(&self, user: usize, r: usize) -> Result<f64> {
        self.check_retx(user, r)?;
        Ok(self.user_failure(user, Transmitter::BaseStation, r))
    }

    /// `g_{i,l}(r, 1)`: the user fails to decode a transmission by its rank-`l`
    /// relay (`1 <= l <= M`).
    pub fn g_user_from_relay(&self, user: usize, rank: usize, r: usize) -> Result<f64> {
        self.check_retx(user, r)?;
        self.check_rank(rank, false)?;
        let relay = self.ranking.relay(user, rank);
        Ok(self.user_failure(user, Transmitter::Relay(relay), r))
    }

    /// `g_{i,l,k}(r)`: the rank-`l` relay fails to decode a transmission by
    /// the rank-`k` node, where `k = 0` is the base station.
    pub fn g_relay_decode(
        &self,
        user: usize,
        target_rank: usize,
        transmitter_rank: usize,
        r: usize,
    ) -> Result<f64> {
        self.check_retx(user, r)?;
        self.check_rank(target_rank, false)?;
        self.check_rank(transmitter_rank, true)?;
        if target_rank == transmitter_rank {
            return Err(Error::ContractViolation(
                "a relay does not receive its own transmission".into(),
            ));
        }
        let target = self.ranking.relay(user, target_rank);
        let tx = if transmitter_rank == 0 {
            Transmitter::BaseStation
        } else {
            Transmitter::Relay(self.ranking.relay(user, transmitter_rank))
        };
        Ok(self.relay_failure(user, target, tx, r))
    }

    /// User failure probability by transmitter identity. Unchecked.
    pub fn user_failure(&self, user: usize, tx: Transmitter, r: usize) -> f64 {
        let c = &self.config;
        let param = match tx {
            Transmitter::BaseStation => c.bs_channel_params[user],
            Transmitter::Relay(a) => c.relay_channel_params[a][user],
        };
        decay_failure(param, c.decode_decay, r, c.retx_limits[user])
    }

    /// Failure probability of relay `relay` overhearing `tx`. Unchecked.
    pub fn relay_failure(&self, user: usize, relay: usize, _tx: Transmitter, r: usize) -> f64 {
        let c = &self.config;
        decay_failure(c.bs_relay_params[relay], c.decode_decay, r, c.retx_limits[user])
    }

    /// Draws the number of packets arriving for `user` in one slot.
    pub fn sample_arrivals<R: Rng + ?Sized>(&self, rng: &mut R, user: usize) -> u32 {
        match &self.arrivals[user] {
            Some(p) => p.sample(rng) as u32,
            None => 0,
        }
    }
}

/// Samples one slot: the scheduled user's decode, each eligible relay's
/// decode, then arrivals for every user. Draw order is fixed for reproducibility.
pub fn sample_outcome<R: Rng + ?Sized>(
    rng: &mut R,
    decision: &SchedulingDecision,
    state: &SystemState,
    model: &DecodeModel,
) -> SlotOutcome {
    let mut outcome = SlotOutcome {
        user_decoded: false,
        relay_decodes: Vec::new(),
        arrivals: Vec::new(),
    };
    sample_outcome_into(rng, decision, state, model, &mut outcome);
    outcome
}

/// Allocation-free variant of [`sample_outcome`] for the simulator hot loop.
pub fn sample_outcome_into<R: Rng + ?Sized>(
    rng: &mut R,
    decision: &SchedulingDecision,
    state: &SystemState,
    model: &DecodeModel,
    outcome: &mut SlotOutcome,
) {
    outcome.user_decoded = false;
    outcome.relay_decodes.clear();
    if let SchedulingDecision::Serve { user, transmitter } = *decision {
        let r = state.bs.hol_retx[user];
        let g = model.user_failure(user, transmitter, r);
        outcome.user_decoded = rng.random::<f64>() >= g;
        for (a, relay) in state.relays.iter().enumerate() {
            if relay.decoded[user] || transmitter == Transmitter::Relay(a) {
                continue;
            }
            let h = model.relay_failure(user, a, transmitter, r);
            if rng.random::<f64>() >= h {
                outcome.relay_decodes.push(a);
            }
        }
    }
    let n = model.config().num_users;
    outcome.arrivals.resize(n, 0);
    for i in 0..n {
        outcome.arrivals[i] = model.sample_arrivals(rng, i);
    }
}
