use harq_relay::certify::{random_draining_instance, CampaignSpec};
use harq_relay::klimov::{build_rdck, build_rlpak, klimov_ordering, verify_service_bounds};
use harq_relay::oracle::{Mdp, MdpSpec};
use harq_relay::{ConvexCost, DecodeModel, SystemConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_system() -> SystemConfig {
    SystemConfig {
        num_users: 2,
        num_relays: 1,
        arrival_rates: vec![0.3, 0.3],
        cost_rates: vec![vec![0.98, 1.0, 1.02], vec![1.25, 1.5, 1.75]],
        retx_limits: vec![2, 2],
        bs_channel_params: vec![0.9, 0.9],
        relay_channel_params: vec![vec![0.9, 0.3]],
        bs_relay_params: vec![0.5],
        decode_decay: 0.9,
        initial_backlog: vec![],
        drain_costs: None,
    }
}

#[test]
fn queue_counts_follow_label_formulas() {
    for seed in 0..50 {
        let cfg = random_draining_instance(seed, &CampaignSpec::default());
        let model = DecodeModel::new(&cfg).unwrap();
        let m = cfg.num_relays;
        let mut linear = cfg.clone();
        linear.arrival_rates = vec![0.1; cfg.num_users];
        let inst = build_rlpak(&linear, &model).unwrap();
        let k: usize = cfg.retx_limits.iter().map(|r| (m + 1) * (r + 1)).sum();
        assert_eq!(inst.len(), k);
        let costs = cfg.drain_costs.clone().unwrap();
        let inst = build_rdck(&cfg, &cfg.initial_backlog, &costs, &model).unwrap();
        for i in 0..cfg.num_users {
            let ki = (m + 1) * cfg.initial_backlog[i] as usize * (cfg.retx_limits[i] + 1);
            assert_eq!(inst.labels.iter().filter(|l| l.user == i).count(), ki);
        }
    }
}

#[test]
fn service_time_matches_monte_carlo_absorption() {
    let cfg = reference_system();
    let model = DecodeModel::new(&cfg).unwrap();
    let inst = build_rlpak(&cfg, &model).unwrap();
    let ord = klimov_ordering(&inst);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in [inst.len() / 2, inst.len()] {
        let mut members = vec![false; inst.len()];
        for e in &ord.entries[..k] {
            members[e.queue] = true;
        }
        let t = inst.service_times_in(&members);
        for q in (0..inst.len()).filter(|&q| members[q]) {
            let trials = 20_000;
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..trials {
                let mut cur = q;
                let mut steps = 0.0;
                loop {
                    steps += 1.0;
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let next = inst.transitions[cur].iter().find(|&&(_, p)| {
                        acc += p;
                        u < acc
                    });
                    match next {
                        Some(&(j, _)) if members[j] => cur = j,
                        _ => break,
                    }
                }
                sum += steps;
                sq += steps * steps;
            }
            let mean = sum / trials as f64;
            let sd = (sq / trials as f64 - mean * mean).max(0.0).sqrt();
            let se = sd / (trials as f64).sqrt();
            assert!(
                (mean - t[q]).abs() <= 3.0 * se + 1e-12,
                "{}: simulated {mean} vs {}",
                inst.labels[q],
                t[q]
            );
        }
    }
}

#[test]
fn transition_rows_are_stochastic() {
    for seed in 0..30 {
        let cfg = random_draining_instance(seed, &CampaignSpec::default());
        let model = DecodeModel::new(&cfg).unwrap();
        let costs = vec![ConvexCost::Quadratic { weight: 1.0 }; cfg.num_users];
        let inst = build_rdck(&cfg, &cfg.initial_backlog, &costs, &model).unwrap();
        for q in 0..inst.len() {
            let s: f64 = inst.transitions[q].iter().map(|e| e.1).sum::<f64>() + inst.departure[q];
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mdp = Mdp::build(&MdpSpec::draining(&cfg)).unwrap();
        assert!(mdp.max_row_error() < 1e-12);
    }
}

#[test]
fn reference_system_lemma_report() {
    let cfg = reference_system();
    let model = DecodeModel::new(&cfg).unwrap();
    let inst = build_rlpak(&cfg, &model).unwrap();
    let ord = klimov_ordering(&inst);
    let rep = verify_service_bounds(&inst, &ord, &model, 1e-12).unwrap();
    for k in [1u8, 4, 5] {
        assert!(rep.item(k).passed, "{:?}", rep.item(k));
    }
    // relays joining after a base-station attempt shorten the expected
    // service of (i, r, 0) below the base-station-only closed form
    assert!(!rep.item(2).passed);
    let bare = cfg.without_relays();
    let bm = DecodeModel::new(&bare).unwrap();
    let bi = build_rlpak(&bare, &bm).unwrap();
    assert!(verify_service_bounds(&bi, &klimov_ordering(&bi), &bm, 1e-12).unwrap().all_passed());
}
