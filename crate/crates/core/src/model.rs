//! Model state, E-step, M-step, lower bound and the batch EM driver.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, warn};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist};
use rayon::prelude::*;
use thiserror::Error;

use crate::admm::{run_admm, AdmmConfig, ConsensusProblem, Duals, Hinge, LogTerm};
use crate::data::{link_rate, Network, Pair, Split};
use crate::grounding::{ground_with, Grounding, GroundingOptions, PotentialClass, Value, VarAtom, DEFAULT_GROUNDING_CAP, VACUOUS_TOL};
use crate::rules::RuleSet;
use crate::EPS;

const CHECKPOINT_HEADER: &str = "smmsb-checkpoint v1";
const CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("K must be at least 1")]
    NoCommunities,
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("lower bound is not finite at iteration {iteration}: {value}")]
    NonFinite { iteration: usize, value: f64 },
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("checkpoint does not match the network: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the model: memberships, block matrix, latent atoms,
/// hyperparameters and rule weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub node_ids: Vec<String>,
    /// `N x K`, rows on the simplex.
    pub pi: Array2<f64>,
    /// `K x K`, entries in `(0, 1)`.
    pub b: Array2<f64>,
    pub h_keys: Vec<String>,
    pub h: Vec<f64>,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: Vec<f64>,
}

/// `(beta1, beta2)` with `beta1 / (beta1 + beta2) = rate` and `beta1 + beta2 = sum`.
pub fn betas_from_link_rate(rate: f64, sum: f64) -> (f64, f64) {
    ((sum * rate).max(EPS), (sum * (1.0 - rate)).max(EPS))
}

/// Random initial state: Dirichlet(alpha) memberships, uniform `(0.05, 0.95)`
/// blocks and Beta hyperparameters matched to the training link rate.
pub fn init_model(net: &Network, split: &Split, k: usize, alpha: f64, seed: u64) -> Result<ModelState, ModelError> {
    init_model_with(net, split, k, alpha, 2.0, seed)
}

pub fn init_model_with(
    net: &Network,
    split: &Split,
    k: usize,
    alpha: f64,
    beta_sum: f64,
    seed: u64,
) -> Result<ModelState, ModelError> {
    if k == 0 {
        return Err(ModelError::NoCommunities);
    }
    if !(alpha > 0.0) {
        return Err(ModelError::BadHyper(format!("alpha must be positive, got {alpha}")));
    }
    if !(beta_sum > 0.0) {
        return Err(ModelError::BadHyper(format!("beta sum must be positive, got {beta_sum}")));
    }
    let n = net.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = GammaDist::new(alpha, 1.0).map_err(|e| ModelError::BadHyper(e.to_string()))?;
    let mut pi = Array2::zeros((n, k));
    for mut row in pi.rows_mut() {
        if k == 1 {
            row[0] = 1.0;
            continue;
        }
        for x in row.iter_mut() {
            *x = gamma.sample(&mut rng);
        }
        let s: f64 = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    let b = Array2::from_shape_fn((k, k), |_| rng.random_range(0.05..0.95));
    let (beta1, beta2) = betas_from_link_rate(link_rate(net, split), beta_sum);
    Ok(ModelState {
        node_ids: net.node_ids().to_vec(),
        pi,
        b,
        h_keys: Vec::new(),
        h: Vec::new(),
        alpha,
        beta1,
        beta2,
        lambda: Vec::new(),
    })
}

impl ModelState {
    pub fn n(&self) -> usize {
        self.pi.nrows()
    }

    pub fn k(&self) -> usize {
        self.pi.ncols()
    }

    /// Marginal link probability `pi_p' B pi_q`.
    pub fn pair_likelihood(&self, p: usize, q: usize) -> f64 {
        let k = self.k();
        let mut s = 0.0;
        for k1 in 0..k {
            let a = self.pi[[p, k1]];
            if a == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for k2 in 0..k {
                inner += self.b[[k1, k2]] * self.pi[[q, k2]];
            }
            s += a * inner;
        }
        s
    }

    pub fn h_value(&self, key: &str) -> Option<f64> {
        self.h_keys.iter().position(|k| k == key).map(|i| self.h[i])
    }

    /// Writes the plain-text checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let r = |x: f64| format!("{x:.16e}");
        let row = |v: ndarray::ArrayView1<f64>| v.iter().map(|&x| r(x)).collect::<Vec<_>>().join(" ");
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        writeln!(w, "nodes {}", self.n())?;
        for id in &self.node_ids {
            writeln!(w, "{id}")?;
        }
        writeln!(w, "k {}", self.k())?;
        writeln!(w, "alpha {}", r(self.alpha))?;
        writeln!(w, "beta1 {}", r(self.beta1))?;
        writeln!(w, "beta2 {}", r(self.beta2))?;
        writeln!(w, "pi")?;
        for p in self.pi.rows() {
            writeln!(w, "{}", row(p))?;
        }
        writeln!(w, "b")?;
        for p in self.b.rows() {
            writeln!(w, "{}", row(p))?;
        }
        writeln!(w, "latent {}", self.h.len())?;
        for (key, v) in self.h_keys.iter().zip(&self.h) {
            writeln!(w, "{key}\t{}", r(*v))?;
        }
        let lam: Vec<String> = self.lambda.iter().map(|&x| r(x)).collect();
        writeln!(w, "lambda {}", self.lambda.len())?;
        writeln!(w, "{}", lam.join(" "))?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<ModelState, ModelError> {
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let mut cur = CheckpointCursor { lines: &lines, pos: 0 };
        if cur.next()? != CHECKPOINT_HEADER {
            return Err(cur.err("unsupported checkpoint header"));
        }
        let n: usize = cur.keyed("nodes")?;
        let mut node_ids = Vec::with_capacity(n);
        for _ in 0..n {
            node_ids.push(cur.next()?.to_string());
        }
        let k: usize = cur.keyed("k")?;
        let alpha: f64 = cur.keyed("alpha")?;
        let beta1: f64 = cur.keyed("beta1")?;
        let beta2: f64 = cur.keyed("beta2")?;
        cur.expect("pi")?;
        let pi = cur.matrix(n, k)?;
        cur.expect("b")?;
        let b = cur.matrix(k, k)?;
        let nh: usize = cur.keyed("latent")?;
        let mut h_keys = Vec::with_capacity(nh);
        let mut h = Vec::with_capacity(nh);
        for _ in 0..nh {
            let line = cur.next()?.to_string();
            let (key, v) = line.rsplit_once('\t').ok_or_else(|| cur.err("expected key<TAB>value"))?;
            h_keys.push(key.to_string());
            h.push(v.parse().map_err(|_| cur.err("bad latent value"))?);
        }
        let nl: usize = cur.keyed("lambda")?;
        let lambda = if nl == 0 {
            let _ = cur.next();
            Vec::new()
        } else {
            cur.reals(nl)?
        };
        Ok(ModelState {
            node_ids,
            pi,
            b,
            h_keys,
            h,
            alpha,
            beta1,
            beta2,
            lambda,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState, ModelError> {
        ModelState::read_checkpoint(BufReader::new(File::open(path)?))
    }

    /// Fails unless the state's node labels match the network's.
    pub fn check_network(&self, net: &Network) -> Result<(), ModelError> {
        if self.node_ids != net.node_ids() {
            return Err(ModelError::Mismatch(format!(
                "checkpoint has {} nodes, network has {} (or labels differ)",
                self.n(),
                net.node_count()
            )));
        }
        Ok(())
    }
}

struct CheckpointCursor<'a> {
    lines: &'a [String],
    pos: usize,
}

impl CheckpointCursor<'_> {
    fn err(&self, msg: &str) -> ModelError {
        ModelError::Checkpoint {
            line: self.pos,
            msg: msg.to_string(),
        }
    }

    fn next(&mut self) -> Result<&str, ModelError> {
        let line = self.lines.get(self.pos).ok_or_else(|| ModelError::Checkpoint {
            line: self.pos + 1,
            msg: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(line.as_str())
    }

    fn expect(&mut self, word: &str) -> Result<(), ModelError> {
        if self.next()?.trim() != word {
            return Err(self.err(&format!("expected `{word}`")));
        }
        Ok(())
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ModelError> {
        let line = self.next()?.to_string();
        match line.split_once(' ') {
            Some((k, v)) if k == key => v.trim().parse().map_err(|_| self.err(&format!("bad value for `{key}`"))),
            _ => Err(self.err(&format!("expected `{key} <value>`"))),
        }
    }

    fn reals(&mut self, count: usize) -> Result<Vec<f64>, ModelError> {
        let line = self.next()?.to_string();
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| self.err("bad real"))?;
        if v.len() != count {
            return Err(self.err(&format!("expected {count} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, ModelError> {
        let mut m = Array2::zeros((rows, cols));
        for r in 0..rows {
            let v = self.reals(cols)?;
            for (c, x) in v.into_iter().enumerate() {
                m[[r, c]] = x;
            }
        }
        Ok(m)
    }
}

/// Writes `gamma` (length `K*K`, row-major) for one pair. Returns `false`
/// when every product vanished and the uniform fallback was used.
pub fn pair_gamma(state: &ModelState, p: usize, q: usize, y: bool, gamma: &mut [f64]) -> bool {
    let k = state.k();
    let mut sum = 0.0;
    for k1 in 0..k {
        let a = state.pi[[p, k1]];
        for k2 in 0..k {
            let bb = state.b[[k1, k2]];
            let g = if y { bb } else { 1.0 - bb } * a * state.pi[[q, k2]];
            gamma[k1 * k + k2] = g;
            sum += g;
        }
    }
    if sum > 0.0 && sum.is_finite() {
        gamma.iter_mut().for_each(|g| *g /= sum);
        true
    } else {
        gamma.iter_mut().for_each(|g| *g = 1.0 / (k * k) as f64);
        false
    }
}

/// Per-pair posteriors over the indicator pair `(z_{p->q}, z_{q->p})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gamma {
    pub k: usize,
    pub pairs: Vec<Pair>,
    /// `pairs.len() * K * K`, row-major per pair.
    pub values: Vec<f64>,
}

impl Gamma {
    pub fn get(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        let kk = self.k * self.k;
        ndarray::ArrayView2::from_shape((self.k, self.k), &self.values[i * kk..(i + 1) * kk]).unwrap()
    }
}

pub fn e_step(state: &ModelState, net: &Network, pairs: &[Pair]) -> Gamma {
    let k = state.k();
    let mut values = vec![0.0; pairs.len() * k * k];
    values
        .par_chunks_mut(k * k)
        .zip(pairs.par_iter())
        .for_each(|(g, &(p, q))| {
            if !pair_gamma(state, p, q, net.y(p, q), g) {
                warn!("all-zero posterior for pair ({p},{q}); using uniform");
            }
        });
    Gamma {
        k,
        pairs: pairs.to_vec(),
        values,
    }
}

/// Expected counts from one E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Counts {
    /// `sum_{q,k2} gamma_{p,q,k1,k2} + gamma_{q,p,k2,k1}`, `N x K`.
    pub pi: Array2<f64>,
    /// `sum gamma Y`, `K x K`.
    pub link: Array2<f64>,
    /// `sum gamma (1 - Y)`, `K x K`.
    pub nonlink: Array2<f64>,
    /// `-sum gamma log gamma`.
    pub entropy: f64,
}

impl Counts {
    pub fn zeros(n: usize, k: usize) -> Self {
        Counts {
            pi: Array2::zeros((n, k)),
            link: Array2::zeros((k, k)),
            nonlink: Array2::zeros((k, k)),
            entropy: 0.0,
        }
    }

    pub fn add_pair(&mut self, p: usize, q: usize, y: bool, gamma: &[f64]) {
        let k = self.link.nrows();
        let blk = if y { &mut self.link } else { &mut self.nonlink };
        for k1 in 0..k {
            for k2 in 0..k {
                let g = gamma[k1 * k + k2];
                self.pi[[p, k1]] += g;
                self.pi[[q, k2]] += g;
                blk[[k1, k2]] += g;
                if g > 0.0 {
                    self.entropy -= g * g.ln();
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.pi += &other.pi;
        self.link += &other.link;
        self.nonlink += &other.nonlink;
        self.entropy += other.entropy;
    }

    pub fn scale(&mut self, s: f64) {
        self.pi *= s;
        self.link *= s;
        self.nonlink *= s;
        self.entropy *= s;
    }
}

/// Counts accumulated from a stored [`Gamma`].
pub fn gamma_counts(gamma: &Gamma, net: &Network, n: usize) -> Counts {
    let kk = gamma.k * gamma.k;
    let mut c = Counts::zeros(n, gamma.k);
    for (i, &(p, q)) in gamma.pairs.iter().enumerate() {
        c.add_pair(p, q, net.y(p, q), &gamma.values[i * kk..(i + 1) * kk]);
    }
    c
}

/// E-step fused with count accumulation. Chunks are computed in parallel
/// and merged in order, so the result does not depend on the thread count.
pub fn expected_counts(state: &ModelState, net: &Network, pairs: &[Pair]) -> Counts {
    let (n, k) = (state.n(), state.k());
    let parts: Vec<Counts> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut c = Counts::zeros(n, k);
            let mut g = vec![0.0; k * k];
            for &(p, q) in chunk {
                let y = net.y(p, q);
                if !pair_gamma(state, p, q, y, &mut g) {
                    warn!("all-zero posterior for pair ({p},{q}); using uniform");
                }
                c.add_pair(p, q, y, &g);
            }
            c
        })
        .collect();
    let mut total = Counts::zeros(n, k);
    for part in &parts {
        total.merge(part);
    }
    total
}

/// Maximizer of `sum_k a_k log pi_k` on the simplex: `pi ∝ max(a, 0)`,
/// uniform when no entry is positive, entries floored at `EPS`.
pub fn closed_form_pi(a: &[f64]) -> Vec<f64> {
    let k = a.len();
    let pos: f64 = a.iter().map(|&x| x.max(0.0)).sum();
    if pos <= 0.0 {
        if a.iter().any(|&x| x < 0.0) {
            warn!("membership counts are all non-positive; using a uniform row");
        }
        return vec![1.0 / k as f64; k];
    }
    let mut out: Vec<f64> = a.iter().map(|&x| x.max(0.0) / pos).collect();
    if out.iter().any(|&x| x < EPS) {
        if a.iter().any(|&x| x < 0.0) {
            warn!("negative membership count clamped at {EPS}");
        }
        out.iter_mut().for_each(|x| *x = x.max(EPS));
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Maximizer over `[EPS, 1 - EPS]` of `a1 log b + a2 log(1 - b)`.
pub fn closed_form_b(a1: f64, a2: f64, current: f64) -> f64 {
    let lo = EPS;
    let hi = 1.0 - EPS;
    match (a1 > 0.0, a2 > 0.0) {
        (true, true) => (a1 / (a1 + a2)).clamp(lo, hi),
        (false, true) => lo,
        (true, false) => hi,
        (false, false) => {
            if a1 == 0.0 && a2 == 0.0 {
                return current.clamp(lo, hi);
            }
            let f = |b: f64| a1 * b.ln() + a2 * (1.0 - b).ln();
            if f(lo) >= f(hi) {
                lo
            } else {
                hi
            }
        }
    }
}

/// Coefficients of `log pi`: counts plus `alpha - 1`.
pub fn pi_coefficients(counts: &Counts, alpha: f64) -> Array2<f64> {
    counts.pi.mapv(|c| c + alpha - 1.0)
}

/// Coefficients of `log B` and `log(1 - B)`.
pub fn b_coefficients(counts: &Counts, beta1: f64, beta2: f64) -> (Array2<f64>, Array2<f64>) {
    (counts.link.mapv(|c| c + beta1 - 1.0), counts.nonlink.mapv(|c| c + beta2 - 1.0))
}

/// Closed-form M-step for rows and cells whose mask entry is `false`
/// (no mask: every entry).
pub fn m_step_closed_form(state: &mut ModelState, counts: &Counts, pi_mask: Option<&[bool]>, b_mask: Option<&[bool]>) {
    let a = pi_coefficients(counts, state.alpha);
    for p in 0..state.n() {
        if pi_mask.is_some_and(|m| m[p]) {
            continue;
        }
        let row = closed_form_pi(a.row(p).as_slice().unwrap());
        for (k, v) in row.into_iter().enumerate() {
            state.pi[[p, k]] = v;
        }
    }
    let (a1, a2) = b_coefficients(counts, state.beta1, state.beta2);
    let k = state.k();
    for k1 in 0..k {
        for k2 in 0..k {
            if b_mask.is_some_and(|m| m[k1 * k + k2]) {
                continue;
            }
            state.b[[k1, k2]] = closed_form_b(a1[[k1, k2]], a2[[k1, k2]], state.b[[k1, k2]]);
        }
    }
}

fn clamped_ln(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// Lower bound without the hinge terms.
pub fn lower_bound_mmsb(state: &ModelState, counts: &Counts) -> f64 {
    let a = pi_coefficients(counts, state.alpha);
    let (a1, a2) = b_coefficients(counts, state.beta1, state.beta2);
    let mut r = counts.entropy;
    r += a.iter().zip(state.pi.iter()).map(|(&c, &p)| c * clamped_ln(p)).sum::<f64>();
    for ((&c1, &c2), &b) in a1.iter().zip(a2.iter()).zip(state.b.iter()) {
        r += c1 * clamped_ln(b) + c2 * clamped_ln(1.0 - b);
    }
    r
}

/// Full lower bound: the MMSB part minus the weighted hinge penalty.
pub fn lower_bound(state: &ModelState, counts: &Counts, prior: &Prior) -> f64 {
    let x = prior.assignment(state);
    lower_bound_mmsb(state, counts) - prior.penalty(&x)
}

/// Samples a network from the generative process. Only links are stored.
pub fn generate_network(state: &ModelState, seed: u64, relation: &str) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(relation);
    for id in &state.node_ids {
        net.add_node(id);
    }
    let k = state.k();
    let draw = |row: usize, rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in 0..k {
            acc += state.pi[[row, c]];
            if u < acc {
                return c;
            }
        }
        k - 1
    };
    let n = state.n();
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            let z1 = draw(p, &mut rng);
            let z2 = draw(q, &mut rng);
            let u: f64 = rng.random();
            if u < state.b[[z1, z2]] {
                net.add_edge(p, q, relation, true);
            }
        }
    }
    net
}

/// Outcome of one structured M-step solve.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveOutcome {
    pub ran: bool,
    pub accepted: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Ground structured prior plus the bookkeeping for the two M-step solves.
#[derive(Debug, Clone)]
pub struct Prior {
    pub grounding: Grounding,
    n: usize,
    k: usize,
    /// Pi rows touched by at least one potential.
    pub pi_in_prior: Vec<bool>,
    /// B cells (row-major) touched by at least one potential.
    pub b_in_prior: Vec<bool>,
    latent_membership: Vec<bool>,
    latent_block: Vec<bool>,
    var_potentials: Vec<Vec<usize>>,
    latent_nodes: Vec<Vec<usize>>,
    pinned: Vec<bool>,
}

impl Prior {
    pub fn empty(n: usize, k: usize) -> Self {
        Prior::from_grounding(Grounding::default(), n, k)
    }

    /// Grounds `rules` against the training view of `net`.
    pub fn new(rules: &RuleSet, weights: &[f64], net: &Network, k: usize, cap: usize) -> crate::Result<Self> {
        let g = ground_with(rules, weights, net, k, GroundingOptions { cap })?;
        Ok(Prior::from_grounding(g, net.node_count(), k))
    }

    pub fn from_grounding(grounding: Grounding, n: usize, k: usize) -> Self {
        let nv = grounding.space.len();
        // latent atoms with no negative coefficient are pinned at 0; potentials
        // that then cannot turn positive are skipped
        let mut pushed_up = vec![false; nv];
        for pot in &grounding.potentials {
            for &(v, a) in &pot.terms {
                if a < 0.0 {
                    pushed_up[v] = true;
                }
            }
        }
        let pinned: Vec<bool> = (0..nv)
            .map(|v| matches!(grounding.space.atom(v), VarAtom::Latent { .. }) && !pushed_up[v])
            .collect();
        let mut pi_in_prior = vec![false; n];
        let mut b_in_prior = vec![false; k * k];
        let mut latent_membership = vec![false; nv];
        let mut latent_block = vec![false; nv];
        let mut var_potentials = vec![Vec::new(); nv];
        for (pi, pot) in grounding.potentials.iter().enumerate() {
            let reach: f64 = pot.constant
                + pot
                    .terms
                    .iter()
                    .filter(|&&(v, _)| !pinned[v])
                    .map(|&(_, a)| a.max(0.0))
                    .sum::<f64>();
            if reach <= VACUOUS_TOL {
                continue;
            }
            for &(v, _) in &pot.terms {
                if pinned[v] {
                    continue;
                }
                var_potentials[v].push(pi);
                match grounding.space.atom(v) {
                    VarAtom::Pi { node, .. } => pi_in_prior[*node] = true,
                    VarAtom::Block { from, to } => b_in_prior[from * k + to] = true,
                    VarAtom::Latent { .. } => match pot.class {
                        PotentialClass::Membership => latent_membership[v] = true,
                        PotentialClass::Block => latent_block[v] = true,
                    },
                }
            }
        }
        let latent_nodes = (0..nv)
            .map(|v| match grounding.space.atom(v) {
                VarAtom::Latent { args, .. } => args
                    .iter()
                    .filter_map(|a| match a {
                        Value::Node(n) => Some(*n),
                        _ => None,
                    })
                    .collect(),
                _ => Vec::new(),
            })
            .collect();
        Prior {
            grounding,
            n,
            k,
            pi_in_prior,
            b_in_prior,
            latent_membership,
            latent_block,
            var_potentials,
            latent_nodes,
            pinned,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grounding.potentials.is_empty()
    }

    /// Number of potentials that take part in the solves.
    pub fn active_potentials(&self) -> usize {
        let mut seen = vec![false; self.grounding.potentials.len()];
        for list in &self.var_potentials {
            for &p in list {
                seen[p] = true;
            }
        }
        seen.iter().filter(|&&s| s).count()
    }

    pub fn set_weights(&mut self, weights: &[f64]) {
        self.grounding.set_weights(weights);
    }

    /// Aligns `state.h` with this grounding's latent atoms, keeping values of
    /// atoms already present and starting new ones at `init`.
    pub fn align_latent(&self, state: &mut ModelState, init: f64) {
        let keys = self.grounding.space.latent_keys();
        let old: std::collections::HashMap<&str, f64> =
            state.h_keys.iter().map(String::as_str).zip(state.h.iter().copied()).collect();
        let ids = self.grounding.space.latent_ids();
        let h: Vec<f64> = keys
            .iter()
            .zip(ids)
            .map(|(k, &id)| {
                if self.pinned[id] {
                    0.0
                } else {
                    old.get(k.as_str()).copied().unwrap_or(init)
                }
            })
            .collect();
        state.h_keys = keys.to_vec();
        state.h = h;
    }

    /// Variable assignment read from the state.
    pub fn assignment(&self, state: &ModelState) -> Vec<f64> {
        let space = &self.grounding.space;
        let mut x = vec![0.0; space.len()];
        for (id, atom) in space.atoms().iter().enumerate() {
            x[id] = match atom {
                VarAtom::Pi { node, community } => state.pi[[*node, *community]],
                VarAtom::Block { from, to } => state.b[[*from, *to]],
                VarAtom::Latent { .. } => 0.0,
            };
        }
        for (i, &id) in space.latent_ids().iter().enumerate() {
            x[id] = state.h.get(i).copied().unwrap_or(0.5);
        }
        x
    }

    /// Writes solved values back: Pi rows in the prior, B cells in the prior, H.
    pub fn store(&self, x: &[f64], state: &mut ModelState) {
        let space = &self.grounding.space;
        for (id, atom) in space.atoms().iter().enumerate() {
            match atom {
                VarAtom::Pi { node, community } if self.pi_in_prior[*node] => state.pi[[*node, *community]] = x[id],
                VarAtom::Block { from, to } if self.b_in_prior[from * self.k + to] => state.b[[*from, *to]] = x[id],
                _ => {}
            }
        }
        state.h = space.latent_ids().iter().map(|&id| x[id]).collect();
    }

    /// `sum_j lambda_j psi_j(x)`.
    pub fn penalty(&self, x: &[f64]) -> f64 {
        self.grounding.potentials.par_iter().map(|p| p.weighted(x)).sum()
    }

    /// Unweighted `sum psi` per rule.
    pub fn rule_penalties(&self, x: &[f64], n_rules: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_rules];
        for p in &self.grounding.potentials {
            out[p.rule] += p.value(x);
        }
        out
    }

    fn var_touched(&self, v: usize, nodes: Option<&[bool]>) -> bool {
        let Some(nodes) = nodes else { return true };
        match self.grounding.space.atom(v) {
            VarAtom::Pi { node, .. } => nodes[*node],
            VarAtom::Block { .. } => true,
            VarAtom::Latent { .. } => self.latent_nodes[v].iter().all(|&n| nodes[n]),
        }
    }

    /// Membership solve over Pi rows in the prior and latent atoms of membership
    /// potentials. `a_pi` holds the true `log pi` coefficients (`N x K`).
    /// With `nodes`, only atoms of those nodes are free and only potentials
    /// whose atoms are all touched take part.
    pub fn solve_pi(
        &self,
        x: &mut [f64],
        a_pi: &Array2<f64>,
        nodes: Option<&[bool]>,
        duals: &mut Duals,
        cfg: &AdmmConfig,
    ) -> SolveOutcome {
        let space = &self.grounding.space;
        let mut free = Vec::new();
        let mut logs = Vec::new();
        let mut groups = Vec::new();
        for p in 0..self.n {
            if !self.pi_in_prior[p] || nodes.is_some_and(|m| !m[p]) {
                continue;
            }
            let mut g = Vec::with_capacity(self.k);
            for c in 0..self.k {
                let id = space.pi_id(p, c).expect("pi variables are registered together");
                g.push(id);
                free.push(id);
                logs.push((id, a_pi[[p, c]], false));
            }
            groups.push(g);
        }
        for &id in space.latent_ids() {
            if self.latent_membership[id] && self.var_touched(id, nodes) {
                free.push(id);
            }
        }
        self.solve_block(x, &free, &logs, &groups, nodes, duals, cfg, false)
    }

    /// Block-matrix solve over B cells in the prior and latent atoms of block
    /// potentials. `a1`, `a2` are the true `log B` and `log(1 - B)` coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_b(
        &self,
        x: &mut [f64],
        a1: &Array2<f64>,
        a2: &Array2<f64>,
        nodes: Option<&[bool]>,
        duals: &mut Duals,
        cfg: &AdmmConfig,
    ) -> SolveOutcome {
        let space = &self.grounding.space;
        let mut free = Vec::new();
        let mut logs = Vec::new();
        for k1 in 0..self.k {
            for k2 in 0..self.k {
                if !self.b_in_prior[k1 * self.k + k2] {
                    continue;
                }
                let id = space.block_id(k1, k2).expect("B variables are registered together");
                free.push(id);
                logs.push((id, a1[[k1, k2]], false));
                logs.push((id, a2[[k1, k2]], true));
            }
        }
        for &id in space.latent_ids() {
            if self.latent_block[id] && self.var_touched(id, nodes) {
                free.push(id);
            }
        }
        self.solve_block(x, &free, &logs, &[], nodes, duals, cfg, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn solve_block(
        &self,
        x: &mut [f64],
        free: &[usize],
        logs: &[(usize, f64, bool)],
        groups: &[Vec<usize>],
        nodes: Option<&[bool]>,
        duals: &mut Duals,
        cfg: &AdmmConfig,
        clamp_b: bool,
    ) -> SolveOutcome {
        if free.is_empty() {
            return SolveOutcome::default();
        }
        let mut local = vec![usize::MAX; x.len()];
        for (i, &v) in free.iter().enumerate() {
            local[v] = i;
        }
        let mut pots: Vec<usize> = free.iter().flat_map(|&v| self.var_potentials[v].iter().copied()).collect();
        pots.sort_unstable();
        pots.dedup();
        let pots: Vec<usize> = pots
            .into_iter()
            .filter(|&pi| {
                nodes.is_none()
                    || self.grounding.potentials[pi]
                        .terms
                        .iter()
                        .all(|&(v, _)| self.var_touched(v, nodes))
            })
            .collect();

        let mut problem = ConsensusProblem::new(free.len());
        problem.hinges = pots
            .iter()
            .map(|&pi| {
                let pot = &self.grounding.potentials[pi];
                let mut constant = pot.constant;
                let mut terms = Vec::new();
                for &(v, a) in &pot.terms {
                    if local[v] == usize::MAX {
                        constant += a * x[v];
                    } else {
                        terms.push((local[v], a));
                    }
                }
                Hinge {
                    weight: pot.weight,
                    exponent: pot.exponent,
                    constant,
                    terms,
                }
            })
            .collect();
        for &(v, a, complement) in logs {
            let lv = local[v];
            if a >= 0.0 {
                problem.logs.push(LogTerm { var: lv, a, complement });
            } else {
                // concave term: minimize its tangent at the current point instead
                let c0 = if complement { 1.0 - x[v] } else { x[v] }.max(EPS);
                problem.hinges.push(Hinge {
                    weight: -a / c0,
                    exponent: 1,
                    constant: if complement { 1.0 } else { 0.0 },
                    terms: vec![(lv, if complement { -1.0 } else { 1.0 })],
                });
            }
        }
        problem.simplex_groups = groups.iter().map(|g| g.iter().map(|&v| local[v]).collect()).collect();

        let objective = |vals: &[f64]| -> f64 {
            let hinge: f64 = problem.hinges[..pots.len()].iter().map(|h| h.penalty(vals)).sum();
            let log: f64 = logs
                .iter()
                .map(|&(v, a, complement)| {
                    let c = vals[local[v]];
                    -a * clamped_ln(if complement { 1.0 - c } else { c })
                })
                .sum();
            hinge + log
        };
        let init: Vec<f64> = free.iter().map(|&v| x[v]).collect();
        let old = objective(&init);
        let res = run_admm(&problem, &init, Some(duals), cfg);
        let mut new = res.x;
        if clamp_b {
            for &(v, _, _) in logs {
                let l = local[v];
                new[l] = new[l].clamp(EPS, 1.0 - EPS);
            }
        }
        let new_obj = objective(&new);
        let accepted = new_obj <= old;
        if accepted {
            for (i, &v) in free.iter().enumerate() {
                x[v] = new[i];
            }
        } else {
            debug!("structured solve rejected: {new_obj} > {old}");
        }
        SolveOutcome {
            ran: true,
            accepted,
            converged: res.converged,
            iterations: res.iterations,
        }
    }

    pub fn pi_mask(&self) -> &[bool] {
        &self.pi_in_prior
    }

    pub fn b_mask(&self) -> &[bool] {
        &self.b_in_prior
    }
}

/// Warm-start duals for the two structured solves.
#[derive(Debug, Clone, Default)]
pub struct MStepDuals {
    pub pi: Duals,
    pub b: Duals,
}

/// Full M-step: closed form for entries outside the prior, then the
/// membership solve, then the block-matrix solve.
pub fn m_step(state: &mut ModelState, counts: &Counts, prior: &Prior, duals: &mut MStepDuals, cfg: &AdmmConfig) {
    m_step_closed_form(state, counts, Some(prior.pi_mask()), Some(prior.b_mask()));
    if prior.is_empty() {
        return;
    }
    let mut x = prior.assignment(state);
    let a_pi = pi_coefficients(counts, state.alpha);
    let o1 = prior.solve_pi(&mut x, &a_pi, None, &mut duals.pi, cfg);
    let (a1, a2) = b_coefficients(counts, state.beta1, state.beta2);
    let o2 = prior.solve_b(&mut x, &a1, &a2, None, &mut duals.b, cfg);
    debug!("membership solve {o1:?}, block solve {o2:?}");
    prior.store(&x, state);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub alpha: f64,
    /// `beta1 + beta2`; the ratio follows the training link rate.
    pub beta_sum: f64,
    pub seed: u64,
    pub tol: f64,
    pub max_iters: usize,
    pub admm: AdmmConfig,
    pub grounding_cap: usize,
    /// Starting weight of `learnable` rules.
    pub initial_weight: f64,
    /// Starting value of latent atoms.
    pub latent_init: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            k: 5,
            alpha: 1.1,
            beta_sum: 2.0,
            seed: 0,
            tol: 1e-6,
            max_iters: 500,
            admm: AdmmConfig::default(),
            grounding_cap: DEFAULT_GROUNDING_CAP,
            initial_weight: 1.0,
            latent_init: 0.5,
        }
    }
}

impl EmConfig {
    /// Range checks on every field.
    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            (self.k >= 1, format!("k must be at least 1, got {}", self.k)),
            (self.alpha > 0.0, format!("alpha must be positive, got {}", self.alpha)),
            (self.beta_sum > 0.0, format!("beta sum must be positive, got {}", self.beta_sum)),
            (self.tol >= 0.0, format!("tol must be non-negative, got {}", self.tol)),
            (self.admm.rho > 0.0, format!("ADMM rho must be positive, got {}", self.admm.rho)),
            (
                self.admm.eps_abs > 0.0 && self.admm.eps_rel >= 0.0,
                format!("ADMM tolerances must be positive, got {} and {}", self.admm.eps_abs, self.admm.eps_rel),
            ),
            (
                self.initial_weight >= 0.0,
                format!("initial weight must be non-negative, got {}", self.initial_weight),
            ),
            (
                (0.0..=1.0).contains(&self.latent_init),
                format!("latent init must lie in [0, 1], got {}", self.latent_init),
            ),
        ];
        match checks.into_iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg),
            None => Ok(()),
        }
    }
}

/// Result of a batch run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: ModelState,
    /// Lower bound after each iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Batch EM over a fixed training split.
pub struct BatchTrainer {
    pub train_net: Network,
    pub train_pairs: Vec<Pair>,
    pub prior: Prior,
    pub state: ModelState,
    pub duals: MStepDuals,
    pub cfg: EmConfig,
}

impl BatchTrainer {
    pub fn new(net: &Network, split: &Split, rules: &RuleSet, cfg: &EmConfig) -> crate::Result<Self> {
        let state = init_model_with(net, split, cfg.k, cfg.alpha, cfg.beta_sum, cfg.seed)?;
        BatchTrainer::with_state(net, split, rules, cfg, state, rules.weights(cfg.initial_weight))
    }

    /// Starts from an existing state and explicit rule weights.
    pub fn with_state(
        net: &Network,
        split: &Split,
        rules: &RuleSet,
        cfg: &EmConfig,
        mut state: ModelState,
        weights: Vec<f64>,
    ) -> crate::Result<Self> {
        let train_net = net.with_heldout(split);
        let prior = Prior::new(rules, &weights, &train_net, state.k(), cfg.grounding_cap)?;
        prior.align_latent(&mut state, cfg.latent_init);
        state.lambda = weights;
        let (m1, m2) = prior.grounding.class_counts();
        debug!(
            "grounded {} membership and {} block potentials over {} variables",
            m1,
            m2,
            prior.grounding.space.len()
        );
        Ok(BatchTrainer {
            train_net,
            train_pairs: split.train.clone(),
            prior,
            state,
            duals: MStepDuals::default(),
            cfg: *cfg,
        })
    }

    /// One E-step and M-step; returns the lower bound at the new parameters.
    pub fn step(&mut self) -> f64 {
        let counts = expected_counts(&self.state, &self.train_net, &self.train_pairs);
        m_step(&mut self.state, &counts, &self.prior, &mut self.duals, &self.cfg.admm);
        lower_bound(&self.state, &counts, &self.prior)
    }

    /// Runs to convergence, calling `observer(iteration, state, bound)` after each step.
    pub fn run_with<F: FnMut(usize, &ModelState, f64)>(mut self, mut observer: F) -> Result<TrainOutput, ModelError> {
        let mut trace: Vec<f64> = Vec::new();
        let mut converged = false;
        for it in 0..self.cfg.max_iters {
            let r = self.step();
            if !r.is_finite() {
                return Err(ModelError::NonFinite { iteration: it, value: r });
            }
            observer(it, &self.state, r);
            let done = trace.last().is_some_and(|&prev| ((r - prev) / prev).abs() < self.cfg.tol);
            trace.push(r);
            if done {
                converged = true;
                break;
            }
        }
        Ok(TrainOutput {
            state: self.state,
            trace,
            converged,
        })
    }
}

/// Batch EM from a fresh random state.
pub fn train_batch(net: &Network, split: &Split, rules: &RuleSet, cfg: &EmConfig) -> crate::Result<TrainOutput> {
    train_batch_with(net, split, rules, cfg, |_, _, _| {})
}

pub fn train_batch_with<F: FnMut(usize, &ModelState, f64)>(
    net: &Network,
    split: &Split,
    rules: &RuleSet,
    cfg: &EmConfig,
    observer: F,
) -> crate::Result<TrainOutput> {
    Ok(BatchTrainer::new(net, split, rules, cfg)?.run_with(observer)?)
}

/// Row sums of `pi`; handy for invariant checks.
pub fn row_sums(pi: &Array2<f64>) -> Vec<f64> {
    pi.sum_axis(Axis(1)).to_vec()
}
