use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smmsb::admm::{run_admm, solve_log_subproblem, AdmmConfig, ConsensusProblem, Hinge, LogTerm};
use smmsb::data::{holdout_split, load_network, Network, Split};
use smmsb::eval::{auc_from_scores, log_likelihood};
use smmsb::grounding::{ground, potential_value, VarAtom};
use smmsb::model::{e_step, row_sums, BatchTrainer, EmConfig, ModelState, Prior};
use smmsb::rules::{parse_rules, print_rules, RuleSet};
use smmsb::server::{decode, encode, AckCode, Message, Push};
use smmsb::stochastic::{remass_with_prior, BatchUpdate, RawStats, SufficientStats};
use smmsb::weights::{learn_weights, WeightLearnConfig};
use smmsb::EPS;

fn random_network(seed: u64, n: usize, density: f64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new("link");
    for i in 0..n {
        net.add_node(&format!("n{i}"));
    }
    for p in 0..n {
        for q in 0..n {
            if p != q && rng.random_bool(density) {
                net.add_edge(p, q, "link", true);
            }
        }
    }
    net
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ModelState {
    let mut pi = Array2::zeros((n, k));
    for mut row in pi.rows_mut() {
        for x in row.iter_mut() {
            *x = rng.random_range(0.01..1.0);
        }
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    ModelState {
        node_ids: (0..n).map(|i| format!("n{i}")).collect(),
        pi,
        b: Array2::from_shape_fn((k, k), |_| rng.random_range(0.01..0.99)),
        h_keys: Vec::new(),
        h: Vec::new(),
        alpha: 1.1,
        beta1: 1.0,
        beta2: 1.0,
        lambda: Vec::new(),
    }
}

// --- data -----------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn network_files_round_trip(seed in any::<u64>(), n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new("link");
        let mut ids: Vec<Option<usize>> = vec![None; n];
        let mut node = |net: &mut Network, i: usize| *ids[i].get_or_insert_with(|| net.add_node(&format!("v{i}")));
        for i in 0..rng.random_range(1..20) {
            let p = rng.random_range(0..n);
            let q = (p + rng.random_range(1..n)) % n;
            // the target relation must be present for the file to load
            let rel = if i == 0 { "link" } else { ["link", "cites"][rng.random_range(0..2)] };
            let value = i == 0 || rng.random_bool(0.8);
            let (a, b) = (node(&mut net, p), node(&mut net, q));
            net.add_edge(a, b, rel, value);
        }
        for _ in 0..rng.random_range(0..6) {
            let p = rng.random_range(0..n);
            let a = node(&mut net, p);
            net.set_feature(a, ["red", "tall"][rng.random_range(0..2)], rng.random_range(0..=4) as f64 / 4.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let (e, f) = (dir.path().join("e.tsv"), dir.path().join("f.tsv"));
        net.write_edges(std::fs::File::create(&e).unwrap()).unwrap();
        net.write_features(std::fs::File::create(&f).unwrap()).unwrap();
        let back = load_network(&e, Some(&f), "link").unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn holdout_is_a_partition(seed in any::<u64>(), n in 3usize..12, frac in 0.05f64..0.6) {
        let mut net = random_network(seed, n, 0.4);
        if net.target().link_count() < 2 {
            net.add_edge(0, 1, "link", true);
            net.add_edge(1, 2, "link", true);
        }
        let Ok(split) = holdout_split(&net, frac, seed) else {
            // only too few links to keep one for training is an error here
            prop_assert!(net.target().link_count() <= 2);
            return Ok(());
        };
        let train: HashSet<_> = split.train.iter().copied().collect();
        let test: HashSet<_> = split.test.iter().copied().collect();
        prop_assert_eq!(train.len(), split.train.len());
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n * (n - 1));
        prop_assert!(split.train.iter().chain(&split.test).all(|&(p, q)| p != q && p < n && q < n));
    }
}

// --- rules ----------------------------------------------------------------

fn literal(rng: &mut ChaCha8Rng, vars: &[&str]) -> String {
    let preds = [("link", 2), ("pi", 2), ("B", 2), ("sim", 2), ("tall", 1), ("near", 3)];
    let (name, arity) = preds[rng.random_range(0..preds.len())];
    let args: Vec<String> = (0..arity)
        .map(|_| match rng.random_range(0..10) {
            0 => "\"x y\"".to_string(),
            1 => rng.random_range(1..4).to_string(),
            _ => vars[rng.random_range(0..vars.len())].to_string(),
        })
        .collect();
    format!("{}{name}({})", if rng.random_bool(0.3) { "!" } else { "" }, args.join(","))
}

fn rule_source(seed: u64, n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = String::from("latent sim/2\n");
    for _ in 0..n {
        let body: Vec<String> = (0..rng.random_range(1..4)).map(|_| literal(&mut rng, &["a", "b", "c"])).collect();
        // heads reuse only `a`, which every body below is forced to contain
        let head = literal(&mut rng, &["a"]);
        let w = if rng.random_bool(0.2) {
            "learnable".to_string()
        } else {
            format!("{}", rng.random_range(0..50) as f64 / 8.0)
        };
        let exp = if rng.random_bool(0.3) { " ^2" } else { "" };
        src.push_str(&format!("{w}: link(a, a) & {} -> {head}{exp}\n", body.join(" & ")));
    }
    src
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn print_parse_print_is_stable(seed in any::<u64>(), n in 1usize..8) {
        let set = parse_rules(&rule_source(seed, n)).unwrap();
        let printed = print_rules(&set);
        let again = parse_rules(&printed).unwrap();
        prop_assert_eq!(&again, &set);
        prop_assert_eq!(print_rules(&again), printed);
    }

    #[test]
    fn grammar_breaking_mutations_are_rejected(seed in any::<u64>(), which in 0usize..6) {
        let src = rule_source(seed, 1);
        let line = src.lines().nth(1).unwrap().to_string();
        let broken = match which {
            0 => line.replacen("->", "", 1),
            1 => line.replacen(':', "", 1),
            2 => line.replacen(')', "", 1),
            3 => line.replacen(" & ", " && ", 1),
            4 => line.replacen('(', "[", 1),
            _ => format!("{line} trailing"),
        };
        prop_assert!(parse_rules(&format!("latent sim/2\n{broken}")).is_err(), "accepted {}", broken);
    }
}

// --- grounding ------------------------------------------------------------

/// Ground rule over constants only: literals are `pi(node, comm)` or `link(a, b)`.
fn constant_rule(rng: &mut ChaCha8Rng) -> (String, Vec<(bool, Option<(usize, usize)>, bool)>) {
    // (negated, Some((node, comm)) for pi or None for link(0,1), observed value)
    let mut lits = Vec::new();
    let mut text = Vec::new();
    for _ in 0..rng.random_range(2..5) {
        let neg = rng.random_bool(0.4);
        let bang = if neg { "!" } else { "" };
        if rng.random_bool(0.25) {
            let (a, b) = (rng.random_range(0..3), rng.random_range(0..3));
            text.push(format!("{bang}link(\"n{a}\", \"n{b}\")"));
            lits.push((neg, None, a == 0 && b == 1));
        } else {
            let (node, comm) = (rng.random_range(0..3), rng.random_range(0..2));
            text.push(format!("{bang}pi(\"n{node}\", {})", comm + 1));
            lits.push((neg, Some((node, comm)), false));
        }
    }
    let head = text.pop().unwrap();
    (format!("1.0 : {} -> {head}", text.join(" & ")), lits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn corners_agree_with_classical_implication(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (src, lits) = constant_rule(&mut rng);
        // heads must be pi atoms
        prop_assume!(lits.last().unwrap().1.is_some());
        let mut net = Network::new("link");
        for i in 0..3 {
            net.add_node(&format!("n{i}"));
        }
        net.add_edge(0, 1, "link", true);
        let g = ground(&parse_rules(&src).unwrap(), &net, 2).unwrap();
        prop_assert!(g.potentials.len() <= 1);
        let n = g.space.len();
        for corner in 0..(1u32 << n) {
            let x: Vec<f64> = (0..n).map(|i| ((corner >> i) & 1) as f64).collect();
            let truth = |(neg, atom, obs): &(bool, Option<(usize, usize)>, bool)| {
                let v = match atom {
                    Some((node, c)) => g.space.pi_id(*node, *c).map_or(false, |id| x[id] == 1.0),
                    None => *obs,
                };
                v != *neg
            };
            let (head, body) = lits.split_last().unwrap();
            // atoms absent from the space only occur in dropped groundings
            if g.potentials.is_empty() {
                continue;
            }
            let satisfied = !body.iter().all(truth) || truth(head);
            let v = potential_value(&g.potentials[0], &x).unwrap();
            prop_assert_eq!(v == 0.0, satisfied, "{} at {:?}: {}", src, x, v);
        }
    }

    #[test]
    fn potentials_are_midpoint_convex(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = random_network(seed, 5, 0.4);
        net.set_feature(0, "red", 1.0);
        net.set_feature(2, "red", 0.5);
        let rules = parse_rules(
            "latent sim/2\n1.0 : feature(p, T) & feature(q, T) -> sim(p, q) ^2\n1.0 : sim(p, q) & pi(p, K) -> pi(q, K)\n1.0 : link(p, q) & B(K1, K2) & pi(p, K1) -> pi(q, K2)",
        )
        .unwrap();
        let g = ground(&rules, &net, 2).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..g.space.len()).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..g.space.len()).map(|_| rng.random::<f64>()).collect();
            let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
            for p in &g.potentials {
                prop_assert!(p.value(&mid) <= 0.5 * (p.value(&x) + p.value(&y)) + 1e-12);
            }
        }
    }
}

// --- model ----------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn em_keeps_parameters_feasible(seed in any::<u64>(), n in 4usize..12, k in 1usize..4, with_rules in any::<bool>()) {
        let net = random_network(seed, n, 0.3);
        prop_assume!(net.target().link_count() > 0);
        let split = Split::all_train(&net);
        let rules = if with_rules {
            parse_rules("latent sim/2\n1.0 : link(p, r) & link(q, r) -> sim(p, q)\n1.0 : sim(p, q) & pi(p, K) -> pi(q, K)").unwrap()
        } else {
            RuleSet::default()
        };
        let cfg = EmConfig { k, seed, ..Default::default() };
        let mut trainer = BatchTrainer::new(&net, &split, &rules, &cfg).unwrap();
        for _ in 0..5 {
            let gamma = e_step(&trainer.state, &trainer.train_net, &split.train);
            for i in 0..gamma.pairs.len() {
                prop_assert!((gamma.get(i).sum() - 1.0).abs() < 1e-12);
            }
            trainer.step();
            for s in row_sums(&trainer.state.pi) {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert!(trainer.state.pi.iter().all(|&v| (0.0..=1.0).contains(&v)), "{:?}", trainer.state.pi);
            prop_assert!(trainer.state.b.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(trainer.state.h.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pair_likelihood_is_within_block_range(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, 4, k);
        let lo = state.b.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = state.b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for p in 0..4 {
            for q in 0..4 {
                let v = state.pair_likelihood(p, q);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn rule_free_run_matches_plain_trajectory() {
    let net = random_network(7, 8, 0.3);
    let split = Split::all_train(&net);
    let cfg = EmConfig {
        k: 3,
        seed: 4,
        max_iters: 20,
        tol: 0.0,
        ..Default::default()
    };
    let empty = parse_rules("latent sim/2\n").unwrap();
    let a = smmsb::model::train_batch(&net, &split, &RuleSet::default(), &cfg).unwrap();
    let b = smmsb::model::train_batch(&net, &split, &empty, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.state.pi, b.state.pi);
}

// --- admm -----------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn admm_output_is_feasible_and_no_worse(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..7);
        let mut prob = ConsensusProblem::new(n);
        prob.simplex_groups.push((0..rng.random_range(2..=n)).collect());
        for var in 0..n {
            prob.logs.push(LogTerm { var, a: rng.random_range(0.0..2.0), complement: rng.random_bool(0.3) });
        }
        for _ in 0..rng.random_range(1..5) {
            let mut terms = Vec::new();
            for v in 0..n {
                if rng.random_bool(0.5) {
                    terms.push((v, if rng.random_bool(0.5) { 1.0 } else { -1.0 }));
                }
            }
            if terms.is_empty() {
                continue;
            }
            prob.hinges.push(Hinge { weight: rng.random_range(0.1..3.0), exponent: rng.random_range(1..=2), constant: rng.random_range(-1.0..1.0), terms });
        }
        let g = prob.simplex_groups[0].len();
        let init: Vec<f64> = (0..n).map(|i| if i < g { 1.0 / g as f64 } else { 0.5 }).collect();
        let res = run_admm(&prob, &init, None, &AdmmConfig::default());
        let s: f64 = prob.simplex_groups[0].iter().map(|&i| res.x[i]).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(res.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(res.objective <= prob.objective(&init) + 1e-12);
    }

    #[test]
    fn log_terms_alone_give_normalized_counts(counts in prop::collection::vec(0.1f64..50.0, 2..6)) {
        let k = counts.len();
        let mut prob = ConsensusProblem::new(k);
        prob.simplex_groups.push((0..k).collect());
        prob.logs = counts.iter().enumerate().map(|(var, &a)| LogTerm { var, a, complement: false }).collect();
        prob.hinges.push(Hinge { weight: 0.0, exponent: 1, constant: 1.0, terms: vec![(0, 1.0)] });
        // a count far below the total makes fixed-rho ADMM slow, not wrong
        let cfg = AdmmConfig { eps_abs: 1e-9, eps_rel: 1e-9, max_iters: 2_000_000, ..Default::default() };
        let res = run_admm(&prob, &vec![1.0 / k as f64; k], None, &cfg);
        let total: f64 = counts.iter().sum();
        for (x, c) in res.x.iter().zip(&counts) {
            prop_assert!((x - c / total).abs() < 1e-5, "{} vs {}", x, c / total);
        }
    }

    #[test]
    fn log_subproblem_beats_random_points(a in 0.0f64..20.0, eta in -5.0f64..5.0, c in -3.0f64..3.0, rho in 0.05f64..20.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = |x: f64| -a * x.max(f64::MIN_POSITIVE).ln() + eta * (x - c) + 0.5 * rho * (x - c) * (x - c);
        let best = solve_log_subproblem(a, eta, c, rho);
        prop_assert!(best >= 0.0);
        let f = obj(best);
        for _ in 0..1000 {
            let x = rng.random_range(0.0..(2.0 * (best + c.abs()) + 1.0));
            prop_assert!(f <= obj(x) + 1e-9 * f.abs().max(1.0));
        }
    }
}

// --- stochastic -----------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derived_model_is_feasible(seed in any::<u64>(), n in 1usize..6, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut big = || 10f64.powf(rng.random_range(-12.0..6.0));
        let stats = SufficientStats {
            theta: Array2::from_shape_fn((n, k), |_| big()),
            phi: Array2::from_shape_fn((k, k), |_| big()),
            phi_prime: Array2::from_shape_fn((k, k), |_| big()),
            h: Vec::new(),
            t: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut state = random_state(&mut rng, n, k);
        stats.derive_into(&mut state);
        for s in row_sums(&state.pi) {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(state.b.iter().all(|&b| (EPS..=1.0 - EPS).contains(&b)));
    }

    #[test]
    fn remassing_conserves_mass(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let raw = RawStats {
            nodes: vec![0, 2, 3],
            s: Array2::from_shape_fn((n, k), |_| rng.random_range(0.0..30.0)),
            s_link: Array2::from_shape_fn((k, k), |_| rng.random_range(0.0..30.0)),
            s_nonlink: Array2::from_shape_fn((k, k), |_| rng.random_range(0.0..30.0)),
        };
        let star = random_state(&mut rng, n, k);
        let pi_in: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let b_in: Vec<bool> = (0..k * k).map(|_| rng.random_bool(0.5)).collect();
        let up = remass_with_prior(&raw, &star.pi, &star.b, &pi_in, &b_in);
        for (p, row) in &up.theta_rows {
            let before: f64 = (0..k).map(|c| raw.s[[*p, c]].max(EPS)).sum();
            let after: f64 = row.iter().sum();
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        }
        for i in 0..k {
            for j in 0..k {
                let before = raw.s_link[[i, j]].max(EPS) + raw.s_nonlink[[i, j]].max(EPS);
                let after = up.phi[[i, j]] + up.phi_prime[[i, j]];
                prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
            }
        }
    }
}

// --- weights --------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn weights_stay_in_bounds(seed in 0u64..1000, lr in 0.0f64..3.0, floor in 0.0f64..0.5, span in 0.1f64..2.0) {
        let net = random_network(seed, 7, 0.35);
        prop_assume!(net.target().link_count() > 1);
        let split = Split::all_train(&net);
        let rules = parse_rules("learnable : link(p, q) & pi(p, K) -> pi(q, K)\n0.5 : link(p, q) -> pi(q, 1)\nlearnable : link(p, q) & pi(p, K) -> !pi(q, K)").unwrap();
        let em = EmConfig { k: 2, seed, max_iters: 10, ..Default::default() };
        let cfg = WeightLearnConfig { learn_rate: lr, iterations: 6, floor, cap: floor + span };
        let out = learn_weights(&net, &split, &rules, &em, &cfg).unwrap();
        for step in &out.trace {
            prop_assert_eq!(step.weights[1], 0.5);
            for &i in &[0, 2] {
                prop_assert!(step.weights[i] >= floor && step.weights[i] <= floor + span);
            }
        }
    }
}

#[test]
fn raising_a_weight_raises_the_penalty_at_a_fixed_point() {
    let net = random_network(3, 6, 0.4);
    let rules = parse_rules("1.0 : link(p, q) & pi(p, K) -> pi(q, K)\n1.0 : link(p, q) -> pi(q, 1)").unwrap();
    let mut prior = Prior::new(&rules, &[1.0, 1.0], &net, 2, usize::MAX).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..prior.grounding.space.len()).map(|_| rng.random::<f64>()).collect();
    let per_rule = prior.rule_penalties(&x, 2);
    let base = prior.penalty(&x);
    for r in 0..2 {
        let mut w = vec![1.0, 1.0];
        w[r] = 1.5;
        prior.set_weights(&w);
        let raised = prior.penalty(&x);
        assert!(per_rule[r] > 0.0);
        assert!(raised > base);
        assert!((raised - base - 0.5 * per_rule[r]).abs() < 1e-9);
    }
}

// --- evaluation -----------------------------------------------------------

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 2..40), bits in any::<u64>()) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (bits >> (i % 64)) & 1 == 1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = auc_from_scores(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
        let cube: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        for t in [exp, affine, cube] {
            prop_assert_eq!(auc_from_scores(&t, &labels).unwrap(), base);
        }
    }
}

#[test]
fn likelihood_peaks_at_link_rate_for_one_community() {
    let net = random_network(11, 9, 0.3);
    let split = Split::all_train(&net);
    let rate = net.target().link_count() as f64 / split.train.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = random_state(&mut rng, 9, 1);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 1..10_000 {
        let b = i as f64 / 10_000.0;
        state.b[[0, 0]] = b;
        let ll = log_likelihood(&state, &net, &split.train);
        if ll > best.0 {
            best = (ll, b);
        }
    }
    assert!((best.1 - rate).abs() <= 1e-4, "{} vs {rate}", best.1);
}

// --- protocol -------------------------------------------------------------

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        let mant: f64 = rng.random_range(-1.0..1.0);
        mant * 10f64.powi(rng.random_range(-300..300))
    })
}

fn random_message(seed: u64) -> Message {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..4);
    let n = rng.random_range(1..6);
    match rng.random_range(0..6) {
        0 => Message::Hello { worker: rng.random() },
        1 => Message::ModelReq { worker: rng.random() },
        2 => Message::ModelSnapshot(SufficientStats {
            theta: random_matrix(&mut rng, n, k),
            phi: random_matrix(&mut rng, k, k),
            phi_prime: random_matrix(&mut rng, k, k),
            h: (0..rng.random_range(0..4)).map(|_| rng.random()).collect(),
            t: rng.random(),
        }),
        3 => Message::StatsPush(Push {
            worker: rng.random(),
            batch: rng.random(),
            t_base: rng.random(),
            update: BatchUpdate {
                theta_rows: (0..n).map(|p| (p * 3, random_matrix(&mut rng, 1, k).into_raw_vec_and_offset().0)).collect(),
                phi: random_matrix(&mut rng, k, k),
                phi_prime: random_matrix(&mut rng, k, k),
                h: (0..rng.random_range(0..3)).map(|i| (i, rng.random())).collect(),
            },
        }),
        4 => Message::Ack {
            code: [AckCode::Ok, AckCode::Stale, AckCode::Malformed][rng.random_range(0..3)],
            t: rng.random(),
        },
        _ => Message::Shutdown,
    }
}

proptest! {
    #[test]
    fn messages_survive_encoding(seed in any::<u64>()) {
        let msg = random_message(seed);
        prop_assert_eq!(decode(&encode(&msg)).unwrap(), msg);
    }
}

#[test]
fn unused_atoms_are_not_variables() {
    // pi atoms appear only once some rule touches them
    let net = random_network(1, 4, 0.5);
    let g = ground(&parse_rules("latent sim/2\n1.0 : link(p, q) -> sim(p, q)").unwrap(), &net, 2).unwrap();
    assert!(g.space.atoms().iter().all(|a| matches!(a, VarAtom::Latent { .. })));
}
