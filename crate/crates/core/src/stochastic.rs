//! Mini-batch stochastic EM over sufficient statistics.
//!
//! Global statistics `theta` (`N x K`), `phi` and `phi'` (`K x K`) define the
//! model: memberships are the normalized rows of `theta` and
//! `B = phi / (phi + phi')`. Each round samples nodes, runs the E-step on the
//! training pairs among them, rescales the counts by `1/g`, re-distributes
//! their mass according to the structured-prior optimum, and moves the global
//! statistics toward the result with step `rho_t`.

use std::collections::HashSet;
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::admm::AdmmConfig;
use crate::data::{Network, Pair, Split};
use crate::eval::log_likelihood;
use crate::model::{expected_counts, init_model_with, EmConfig, MStepDuals, ModelState, Prior};
use crate::rules::RuleSet;
use crate::EPS;

/// Attempts before giving up on drawing a non-empty batch.
pub const MAX_BATCH_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub theta: Array2<f64>,
    pub phi: Array2<f64>,
    pub phi_prime: Array2<f64>,
    /// Latent atom values, aligned with the prior's latent atoms.
    pub h: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl SufficientStats {
    /// Statistics whose derived model equals `state`, with row mass `mass_pi`
    /// and cell mass `mass_b`.
    pub fn from_state(state: &ModelState, mass_pi: f64, mass_b: f64) -> Self {
        SufficientStats {
            theta: state.pi.mapv(|v| (v * mass_pi).max(EPS)),
            phi: state.b.mapv(|v| (v * mass_b).max(EPS)),
            phi_prime: state.b.mapv(|v| ((1.0 - v) * mass_b).max(EPS)),
            h: state.h.clone(),
            t: 0,
        }
    }

    /// Writes the derived memberships, block matrix and latent values into `state`.
    pub fn derive_into(&self, state: &mut ModelState) {
        for (p, row) in self.theta.rows().into_iter().enumerate() {
            let s: f64 = row.iter().sum();
            for (k, &v) in row.iter().enumerate() {
                state.pi[[p, k]] = v / s;
            }
        }
        for ((b, &f), &fp) in state.b.iter_mut().zip(self.phi.iter()).zip(self.phi_prime.iter()) {
            *b = (f / (f + fp)).clamp(EPS, 1.0 - EPS);
        }
        state.h.clone_from(&self.h);
    }
}

/// `(tau0 + t)^(-kappa)`.
pub fn step_size(t: u64, tau0: f64, kappa: f64) -> f64 {
    (tau0 + t as f64).powf(-kappa)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Decay { tau0: f64, kappa: f64 },
    Constant(f64),
}

impl StepSchedule {
    /// Step for the `t`-th update (1-based).
    pub fn rho(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Decay { tau0, kappa } => step_size(t, tau0, kappa),
            StepSchedule::Constant(r) => r,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            StepSchedule::Decay { tau0, kappa } => {
                if !(kappa > 0.5 && kappa <= 1.0) {
                    return Err(format!("kappa must lie in (0.5, 1], got {kappa}"));
                }
                if !(tau0 >= 0.0) {
                    return Err(format!("tau0 must be non-negative, got {tau0}"));
                }
            }
            StepSchedule::Constant(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(format!("constant step must lie in (0, 1], got {r}"));
                }
            }
        }
        Ok(())
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Decay { tau0: 1024.0, kappa: 0.9 }
    }
}

/// Training pairs among a node sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub pairs: Vec<Pair>,
    /// Sampled nodes, ascending.
    pub nodes: Vec<usize>,
    /// `|pairs| / |training pairs|`.
    pub g: f64,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of batch `round` for sampling stream `stream` (0 for local runs,
/// the worker id for distributed ones).
pub fn batch_seed(base: u64, stream: u64, round: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ round)
}

/// Samples `ceil(fraction * N)` nodes and keeps the training pairs among them.
pub fn sample_minibatch(
    n: usize,
    test: &HashSet<Pair>,
    n_train: usize,
    node_fraction: f64,
    seed: u64,
) -> Option<MiniBatch> {
    let m = ((node_fraction * n as f64).ceil() as usize).clamp(1, n);
    for attempt in 0..MAX_BATCH_ATTEMPTS {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut nodes = rand::seq::index::sample(&mut rng, n, m).into_vec();
        nodes.sort_unstable();
        let mut pairs = Vec::new();
        for &p in &nodes {
            for &q in &nodes {
                if p != q && !test.contains(&(p, q)) {
                    pairs.push((p, q));
                }
            }
        }
        if !pairs.is_empty() {
            let g = pairs.len() as f64 / n_train as f64;
            return Some(MiniBatch { pairs, nodes, g, seed: s });
        }
    }
    None
}

/// Raw mini-batch statistics `s`, `s_k1k2` and `s'_k1k2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStats {
    /// Nodes covered by the batch, ascending.
    pub nodes: Vec<usize>,
    /// `N x K`; only rows of `nodes` are meaningful.
    pub s: Array2<f64>,
    pub s_link: Array2<f64>,
    pub s_nonlink: Array2<f64>,
}

/// Scales batch counts by `1/g` and adds the prior pseudo-counts.
pub fn expected_stats(
    counts: &crate::model::Counts,
    nodes: &[usize],
    g: f64,
    alpha: f64,
    beta1: f64,
    beta2: f64,
) -> RawStats {
    let inv = 1.0 / g;
    let mut s = Array2::zeros(counts.pi.raw_dim());
    for &p in nodes {
        for k in 0..s.ncols() {
            s[[p, k]] = inv * counts.pi[[p, k]] + alpha - 1.0;
        }
    }
    RawStats {
        nodes: nodes.to_vec(),
        s,
        s_link: counts.link.mapv(|c| inv * c + beta1 - 1.0),
        s_nonlink: counts.nonlink.mapv(|c| inv * c + beta2 - 1.0),
    }
}

/// Statistics after re-massing, ready to be applied.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchUpdate {
    /// `(node, row of s^PSL)` for every batch node.
    pub theta_rows: Vec<(usize, Vec<f64>)>,
    pub phi: Array2<f64>,
    pub phi_prime: Array2<f64>,
    /// `(latent index, optimum)` for latent atoms touched by the batch.
    pub h: Vec<(usize, f64)>,
}

static NEGATIVE_WARNING: std::sync::Once = std::sync::Once::new();

fn floor_eps(v: f64, what: &str) -> f64 {
    if v < EPS {
        if v < 0.0 {
            NEGATIVE_WARNING.call_once(|| warn!("negative {what} statistic {v} floored at {EPS} (reported once)"));
        }
        EPS
    } else {
        v
    }
}

/// Re-distributes each row's and cell's mass according to `pi_star` and `b_star`.
pub fn remass_with_prior(
    raw: &RawStats,
    pi_star: &Array2<f64>,
    b_star: &Array2<f64>,
    pi_in_prior: &[bool],
    b_in_prior: &[bool],
) -> BatchUpdate {
    let k = raw.s.ncols();
    let theta_rows = raw
        .nodes
        .iter()
        .map(|&p| {
            let row: Vec<f64> = (0..k).map(|c| floor_eps(raw.s[[p, c]], "membership")).collect();
            if !pi_in_prior[p] {
                return (p, row);
            }
            let total: f64 = row.iter().sum();
            (p, (0..k).map(|c| (pi_star[[p, c]] * total).max(EPS)).collect())
        })
        .collect();
    let mut phi = Array2::zeros((k, k));
    let mut phi_prime = Array2::zeros((k, k));
    for k1 in 0..k {
        for k2 in 0..k {
            let s1 = floor_eps(raw.s_link[[k1, k2]], "link");
            let s2 = floor_eps(raw.s_nonlink[[k1, k2]], "non-link");
            if b_in_prior[k1 * k + k2] {
                let total = s1 + s2;
                let b = b_star[[k1, k2]];
                phi[[k1, k2]] = (b * total).max(EPS);
                phi_prime[[k1, k2]] = ((1.0 - b) * total).max(EPS);
            } else {
                phi[[k1, k2]] = s1;
                phi_prime[[k1, k2]] = s2;
            }
        }
    }
    BatchUpdate {
        theta_rows,
        phi,
        phi_prime,
        h: Vec::new(),
    }
}

/// `x <- (1 - rho) x + rho s` on covered entries, floored at `EPS`; increments `t`.
pub fn global_update(stats: &mut SufficientStats, update: &BatchUpdate, rho: f64) {
    let mix = |old: f64, new: f64| ((1.0 - rho) * old + rho * new).max(EPS);
    for (p, row) in &update.theta_rows {
        for (k, &v) in row.iter().enumerate() {
            stats.theta[[*p, k]] = mix(stats.theta[[*p, k]], v);
        }
    }
    for (o, &n) in stats.phi.iter_mut().zip(update.phi.iter()) {
        *o = mix(*o, n);
    }
    for (o, &n) in stats.phi_prime.iter_mut().zip(update.phi_prime.iter()) {
        *o = mix(*o, n);
    }
    for &(i, v) in &update.h {
        stats.h[i] = ((1.0 - rho) * stats.h[i] + rho * v).clamp(0.0, 1.0);
    }
    stats.t += 1;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticConfig {
    pub em: EmConfig,
    pub node_fraction: f64,
    pub iterations: u64,
    pub schedule: StepSchedule,
    /// Trace interval in iterations; 0 records only the final iteration.
    pub trace_every: u64,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        StochasticConfig {
            em: EmConfig::default(),
            node_fraction: 0.1,
            iterations: 48_000,
            schedule: StepSchedule::default(),
            trace_every: 100,
        }
    }
}

impl StochasticConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.node_fraction > 0.0 && self.node_fraction <= 1.0) {
            return Err(format!("node fraction must lie in (0, 1], got {}", self.node_fraction));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub rho: f64,
    pub train_ll: f64,
    pub seconds: f64,
}

impl TraceRecord {
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}\t{}\t{:.3}", self.iteration, self.rho, self.train_ll, self.seconds)
    }
}

/// Everything a trainer or worker needs to turn a batch into an update.
pub struct StochasticContext {
    pub train_net: Network,
    pub train_pairs: Vec<Pair>,
    pub test: HashSet<Pair>,
    pub prior: Prior,
    pub cfg: StochasticConfig,
}

impl StochasticContext {
    /// Grounds the rules on the training view and builds the initial state
    /// and statistics.
    pub fn new(
        net: &Network,
        split: &Split,
        rules: &RuleSet,
        cfg: &StochasticConfig,
    ) -> crate::Result<(Self, ModelState, SufficientStats)> {
        cfg.validate().map_err(crate::Error::Config)?;
        let em = &cfg.em;
        let mut state = init_model_with(net, split, em.k, em.alpha, em.beta_sum, em.seed)?;
        let weights = rules.weights(em.initial_weight);
        let train_net = net.with_heldout(split);
        let prior = Prior::new(rules, &weights, &train_net, em.k, em.grounding_cap)?;
        prior.align_latent(&mut state, em.latent_init);
        state.lambda = weights;
        let n = net.node_count().max(1) as f64;
        let kk = (em.k * em.k) as f64;
        let n_train = split.train.len() as f64;
        let mass_pi = (2.0 * n_train / n + em.k as f64 * (em.alpha - 1.0)).max(1.0);
        let mass_b = (n_train / kk + state.beta1 + state.beta2 - 2.0).max(1.0);
        let stats = SufficientStats::from_state(&state, mass_pi, mass_b);
        // the model is always the one derived from the statistics
        stats.derive_into(&mut state);
        let ctx = StochasticContext {
            train_net,
            train_pairs: split.train.clone(),
            test: split.test.iter().copied().collect(),
            prior,
            cfg: *cfg,
        };
        Ok((ctx, state, stats))
    }

    pub fn sample(&self, stream: u64, round: u64) -> Option<MiniBatch> {
        sample_minibatch(
            self.train_net.node_count(),
            &self.test,
            self.train_pairs.len(),
            self.cfg.node_fraction,
            batch_seed(self.cfg.em.seed, stream, round),
        )
    }

    /// E-step on the batch, scaled statistics, batch-restricted ADMM, re-massing.
    pub fn compute_update(&self, state: &ModelState, batch: &MiniBatch, duals: &mut MStepDuals) -> BatchUpdate {
        let counts = expected_counts(state, &self.train_net, &batch.pairs);
        let mut covered = vec![false; state.n()];
        for &(p, q) in &batch.pairs {
            covered[p] = true;
            covered[q] = true;
        }
        let nodes: Vec<usize> = (0..state.n()).filter(|&p| covered[p]).collect();
        let raw = expected_stats(&counts, &nodes, batch.g, state.alpha, state.beta1, state.beta2);
        let k = state.k();
        let mut pi_star = state.pi.clone();
        let mut b_star = state.b.clone();
        let mut h = Vec::new();
        if !self.prior.is_empty() {
            let mut x = self.prior.assignment(state);
            let admm: &AdmmConfig = &self.cfg.em.admm;
            self.prior.solve_pi(&mut x, &raw.s, Some(&covered), &mut duals.pi, admm);
            self.prior.solve_b(&mut x, &raw.s_link, &raw.s_nonlink, Some(&covered), &mut duals.b, admm);
            let mut tmp = state.clone();
            self.prior.store(&x, &mut tmp);
            pi_star = tmp.pi;
            b_star = tmp.b;
            let space = &self.prior.grounding.space;
            for (i, &id) in space.latent_ids().iter().enumerate() {
                if x[id] != state.h[i] {
                    h.push((i, x[id]));
                }
            }
        }
        debug_assert_eq!(b_star.nrows(), k);
        let mut upd = remass_with_prior(&raw, &pi_star, &b_star, self.prior.pi_mask(), self.prior.b_mask());
        upd.h = h;
        upd
    }

    pub fn train_ll(&self, state: &ModelState) -> f64 {
        log_likelihood(state, &self.train_net, &self.train_pairs)
    }
}

#[derive(Debug, Clone)]
pub struct StochasticOutput {
    pub state: ModelState,
    pub stats: SufficientStats,
    pub trace: Vec<TraceRecord>,
}

/// Runs `cfg.iterations` rounds of stochastic EM on sampling stream 0.
pub fn train_stochastic(
    net: &Network,
    split: &Split,
    rules: &RuleSet,
    cfg: &StochasticConfig,
) -> crate::Result<StochasticOutput> {
    train_stochastic_with(net, split, rules, cfg, |_, _| {})
}

/// Same as [`train_stochastic`], calling `observer` with every trace record.
pub fn train_stochastic_with<F: FnMut(&TraceRecord, &ModelState)>(
    net: &Network,
    split: &Split,
    rules: &RuleSet,
    cfg: &StochasticConfig,
    mut observer: F,
) -> crate::Result<StochasticOutput> {
    let (ctx, mut state, mut stats) = StochasticContext::new(net, split, rules, cfg)?;
    let mut duals = MStepDuals::default();
    let start = Instant::now();
    let mut trace = Vec::new();
    for round in 0..cfg.iterations {
        let batch = ctx
            .sample(0, round)
            .ok_or_else(|| crate::Error::Config(format!("no training pairs in {MAX_BATCH_ATTEMPTS} sampled batches")))?;
        let update = ctx.compute_update(&state, &batch, &mut duals);
        let rho = cfg.schedule.rho(stats.t + 1);
        global_update(&mut stats, &update, rho);
        stats.derive_into(&mut state);
        let it = round + 1;
        let due = if cfg.trace_every == 0 {
            it == cfg.iterations
        } else {
            it % cfg.trace_every == 0 || it == cfg.iterations
        };
        if due {
            let ll = ctx.train_ll(&state);
            if !ll.is_finite() {
                return Err(crate::model::ModelError::NonFinite {
                    iteration: round as usize,
                    value: ll,
                }
                .into());
            }
            let rec = TraceRecord {
                iteration: it,
                rho,
                train_ll: ll,
                seconds: start.elapsed().as_secs_f64(),
            };
            info!("iteration {it}: rho {rho:.3e}, train LL {ll:.6}");
            observer(&rec, &state);
            trace.push(rec);
        }
    }
    Ok(StochasticOutput { state, stats, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Counts;

    fn complete(n: usize) -> Network {
        let mut net = Network::new("link");
        for i in 0..n {
            net.add_node(&i.to_string());
        }
        net.add_edge(0, 1, "link", true);
        net
    }

    #[test]
    fn step_size_values() {
        assert_eq!(step_size(1, 0.0, 1.0), 1.0);
        // 1024^0.9 = 2^9
        assert!((step_size(0, 1024.0, 0.9) - 1.0 / 512.0).abs() < 1e-15);
        assert!(StepSchedule::Decay { tau0: 1.0, kappa: 0.5 }.validate().is_err());
        assert!(StepSchedule::Decay { tau0: -1.0, kappa: 0.7 }.validate().is_err());
        assert!(StepSchedule::default().validate().is_ok());
    }

    #[test]
    fn minibatch_sampling() {
        let net = complete(10);
        let split = Split::all_train(&net);
        let test: HashSet<Pair> = HashSet::new();
        let full = sample_minibatch(10, &test, split.train.len(), 1.0, 5).unwrap();
        assert_eq!(full.pairs, split.train);
        assert_eq!(full.g, 1.0);
        let b = sample_minibatch(10, &test, split.train.len(), 0.2, 5).unwrap();
        assert_eq!(b.nodes.len(), 2);
        assert_eq!(b.pairs.len(), 2);
        assert!((b.g - 2.0 / 90.0).abs() < 1e-15);
        assert_eq!(b, sample_minibatch(10, &test, split.train.len(), 0.2, 5).unwrap());
        assert!(sample_minibatch(10, &test, 90, 0.05, 5).is_none());
    }

    #[test]
    fn batch_seed_separates_streams() {
        assert_ne!(batch_seed(1, 0, 0), batch_seed(1, 1, 0));
        assert_ne!(batch_seed(1, 0, 0), batch_seed(1, 0, 1));
        assert_eq!(batch_seed(7, 3, 9), batch_seed(7, 3, 9));
    }

    #[test]
    fn scaled_stats_single_pair() {
        let mut c = Counts::zeros(2, 2);
        c.add_pair(0, 1, true, &[1.0, 0.0, 0.0, 0.0]);
        let raw = expected_stats(&c, &[0, 1], 0.1, 1.0, 1.0, 1.0);
        assert!((raw.s_link[[0, 0]] - 10.0).abs() < 1e-12);
        assert_eq!(raw.s_link[[1, 1]], 0.0);
    }

    #[test]
    fn remassing_cases() {
        let mut s = Array2::zeros((1, 2));
        s[[0, 0]] = 3.0;
        s[[0, 1]] = 1.0;
        let raw = RawStats {
            nodes: vec![0],
            s,
            s_link: Array2::from_elem((2, 2), 2.0),
            s_nonlink: Array2::from_elem((2, 2), 6.0),
        };
        let uniform = Array2::from_elem((1, 2), 0.5);
        let ones = Array2::from_elem((2, 2), 1.0);
        let up = remass_with_prior(&raw, &uniform, &ones, &[true], &[true; 4]);
        assert_eq!(up.theta_rows[0].1, vec![2.0, 2.0]);
        assert_eq!(up.phi[[0, 0]], 8.0);
        assert_eq!(up.phi_prime[[0, 0]], EPS);
        // outside the prior the floored raw statistics pass through
        let up = remass_with_prior(&raw, &uniform, &ones, &[false], &[false; 4]);
        assert_eq!(up.theta_rows[0].1, vec![3.0, 1.0]);
        assert_eq!((up.phi[[0, 0]], up.phi_prime[[0, 0]]), (2.0, 6.0));
    }

    #[test]
    fn global_update_steps() {
        let mut st = SufficientStats {
            theta: Array2::from_elem((1, 1), 2.0),
            phi: Array2::from_elem((1, 1), 1.0),
            phi_prime: Array2::from_elem((1, 1), 1.0),
            h: vec![],
            t: 0,
        };
        let up = BatchUpdate {
            theta_rows: vec![(0, vec![4.0])],
            phi: Array2::from_elem((1, 1), 3.0),
            phi_prime: Array2::from_elem((1, 1), 5.0),
            h: vec![],
        };
        let mut a = st.clone();
        global_update(&mut a, &up, 0.5);
        assert_eq!(a.theta[[0, 0]], 3.0);
        assert_eq!(a.t, 1);
        let mut b = st.clone();
        global_update(&mut b, &up, 0.0);
        assert_eq!(b.theta, st.theta);
        global_update(&mut st, &up, 1.0);
        assert_eq!(st.theta[[0, 0]], 4.0);
        assert_eq!(st.phi_prime[[0, 0]], 5.0);
    }
}
