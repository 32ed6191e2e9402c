//! Consensus ADMM for hinge-loss potentials plus `-A log x` terms.
//!
//! Every potential and every log term owns local copies of the variables it
//! touches. One iteration solves all local problems in parallel, averages the
//! copies into the consensus (projecting simplex groups onto the simplex and
//! every other variable onto `[0, 1]`), then takes a dual step.

use rayon::prelude::*;

use crate::EPS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            eps_abs: 1e-5,
            eps_rel: 1e-4,
            max_iters: 1000,
        }
    }
}

/// `weight * max(constant + sum coeff * x, 0)^exponent` over problem variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Hinge {
    pub weight: f64,
    pub exponent: u8,
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Hinge {
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        let l = self.linear(x).max(0.0);
        self.weight * if self.exponent == 2 { l * l } else { l }
    }
}

/// `-a * log(x)`, or `-a * log(1 - x)` when `complement` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogTerm {
    pub var: usize,
    pub a: f64,
    pub complement: bool,
}

impl LogTerm {
    pub fn value(&self, x: &[f64]) -> f64 {
        let v = if self.complement { 1.0 - x[self.var] } else { x[self.var] };
        if self.a == 0.0 {
            0.0
        } else {
            -self.a * v.max(EPS).ln()
        }
    }
}

/// Minimize `sum hinges + sum log terms` subject to simplex groups and the unit box.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsensusProblem {
    pub n_vars: usize,
    pub hinges: Vec<Hinge>,
    pub logs: Vec<LogTerm>,
    pub simplex_groups: Vec<Vec<usize>>,
}

impl ConsensusProblem {
    pub fn new(n_vars: usize) -> Self {
        ConsensusProblem {
            n_vars,
            ..Default::default()
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.hinges.iter().map(|h| h.penalty(x)).sum::<f64>()
            + self.logs.iter().map(|l| l.value(x)).sum::<f64>()
    }

    fn copy_layout(&self) -> (Vec<usize>, Vec<usize>) {
        let mut offsets = Vec::with_capacity(self.hinges.len() + 1);
        let mut vars = Vec::new();
        for h in &self.hinges {
            offsets.push(vars.len());
            vars.extend(h.terms.iter().map(|&(i, _)| i));
        }
        offsets.push(vars.len());
        vars.extend(self.logs.iter().map(|l| l.var));
        (offsets, vars)
    }

    /// Number of local copies, i.e. the length of the dual vector.
    pub fn copy_count(&self) -> usize {
        self.hinges.iter().map(|h| h.terms.len()).sum::<usize>() + self.logs.len()
    }
}

/// Dual variables, reusable across solves of identically shaped problems.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Duals(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmResult {
    pub x: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Positive root of `rho c^2 + c (eta - rho C) - A = 0`, the minimizer of
/// `-A log c + eta (c - C) + rho/2 (c - C)^2`. With `A = 0` this is `max(C - eta/rho, 0)`.
pub fn solve_log_subproblem(a: f64, eta: f64, c: f64, rho: f64) -> f64 {
    let x = rho * c - eta;
    if a <= 0.0 {
        return x.max(0.0) / rho;
    }
    let disc = (x * x + 4.0 * rho * a).sqrt();
    let mut root = if x >= 0.0 {
        (x + disc) / (2.0 * rho)
    } else {
        2.0 * a / (disc - x)
    };
    // one Newton step removes the last bits of rounding error
    let f = rho * root * root - x * root - a;
    let df = 2.0 * rho * root - x;
    if df > 0.0 {
        let next = root - f / df;
        if next > 0.0 {
            root = next;
        }
    }
    root
}

/// Minimizer of `w max(l(c), 0)^e + sum eta_i (c_i - C_i) + rho/2 |c - C|^2`,
/// where `consensus` and `duals` are aligned with `hinge.terms`.
pub fn solve_hinge_subproblem(hinge: &Hinge, consensus: &[f64], duals: &[f64], rho: f64) -> Vec<f64> {
    let mut out = vec![0.0; hinge.terms.len()];
    hinge_local(hinge, consensus, duals, rho, &mut out);
    out
}

fn hinge_local(hinge: &Hinge, consensus: &[f64], duals: &[f64], rho: f64, out: &mut [f64]) {
    for ((o, &c), &y) in out.iter_mut().zip(consensus).zip(duals) {
        *o = c - y / rho;
    }
    if hinge.weight <= 0.0 {
        return;
    }
    let lv = hinge.constant
        + hinge
            .terms
            .iter()
            .zip(out.iter())
            .map(|(&(_, a), &v)| a * v)
            .sum::<f64>();
    if lv <= 0.0 {
        return;
    }
    let norm2: f64 = hinge.terms.iter().map(|&(_, a)| a * a).sum();
    if norm2 == 0.0 {
        return;
    }
    let t = if hinge.exponent == 2 {
        2.0 * hinge.weight * lv / (rho + 2.0 * hinge.weight * norm2)
    } else {
        // full linear step unless it overshoots the hinge, then stop on l = 0
        (hinge.weight / rho).min(lv / norm2)
    };
    for (o, &(_, a)) in out.iter_mut().zip(&hinge.terms) {
        *o -= t * a;
    }
}

fn log_local(term: &LogTerm, consensus: f64, dual: f64, rho: f64) -> f64 {
    if term.complement {
        1.0 - solve_log_subproblem(term.a, -dual, 1.0 - consensus, rho)
    } else {
        solve_log_subproblem(term.a, dual, consensus, rho)
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let w = vec![1.0; v.len()];
    project_simplex_weighted(v, &w);
}

/// Minimizes `sum_i w_i (z_i - v_i)^2` over the simplex, writing `z` into `v`.
///
/// Entries with zero weight are treated as weight one.
pub fn project_simplex_weighted(v: &mut [f64], w: &[f64]) {
    let n = v.len();
    if n == 0 {
        return;
    }
    let w: Vec<f64> = w.iter().map(|&x| if x > 0.0 { x } else { 1.0 }).collect();
    // z_i = max(v_i - theta / w_i, 0); breakpoints at theta = v_i w_i
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| (v[j] * w[j]).total_cmp(&(v[i] * w[i])));
    let mut sum_v = 0.0;
    let mut sum_inv = 0.0;
    let mut theta = 0.0;
    for &i in &order {
        let s_v = sum_v + v[i];
        let s_inv = sum_inv + 1.0 / w[i];
        let t = (s_v - 1.0) / s_inv;
        if v[i] * w[i] > t {
            sum_v = s_v;
            sum_inv = s_inv;
            theta = t;
        } else {
            break;
        }
    }
    for i in 0..n {
        v[i] = (v[i] - theta / w[i]).clamp(0.0, 1.0);
    }
    let total: f64 = v.iter().sum();
    if total > 0.0 && (total - 1.0).abs() > 1e-15 {
        for x in v.iter_mut() {
            *x /= total;
        }
    }
}

fn split_chunks<'a>(mut data: &'a mut [f64], offsets: &[usize]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(offsets.len().saturating_sub(1));
    for w in offsets.windows(2) {
        let (head, tail) = data.split_at_mut(w[1] - w[0]);
        out.push(head);
        data = tail;
    }
    out
}

fn project(problem: &ConsensusProblem, z: &mut [f64], weights: &[f64], in_group: &[bool]) {
    for group in &problem.simplex_groups {
        let mut v: Vec<f64> = group.iter().map(|&i| z[i]).collect();
        let w: Vec<f64> = group.iter().map(|&i| weights[i]).collect();
        project_simplex_weighted(&mut v, &w);
        for (&i, x) in group.iter().zip(v) {
            z[i] = x;
        }
    }
    for (i, x) in z.iter_mut().enumerate() {
        if !in_group[i] {
            *x = x.clamp(0.0, 1.0);
        }
    }
}

/// Runs consensus ADMM from `init`, optionally warm-starting the duals.
///
/// The returned point is the feasible consensus iterate with the lowest
/// objective seen, so it is never worse than the projected starting point.
pub fn run_admm(
    problem: &ConsensusProblem,
    init: &[f64],
    duals: Option<&mut Duals>,
    cfg: &AdmmConfig,
) -> AdmmResult {
    assert_eq!(init.len(), problem.n_vars);
    let rho = cfg.rho;
    let (offsets, copy_var) = problem.copy_layout();
    let n_copies = copy_var.len();
    let hinge_copies = offsets[problem.hinges.len()];

    let mut multiplicity = vec![0.0; problem.n_vars];
    for &v in &copy_var {
        multiplicity[v] += 1.0;
    }
    let mut in_group = vec![false; problem.n_vars];
    for g in &problem.simplex_groups {
        for &i in g {
            in_group[i] = true;
        }
    }

    let mut local_duals = Duals::default();
    let y_store = match duals {
        Some(d) => d,
        None => &mut local_duals,
    };
    if y_store.0.len() != n_copies {
        y_store.0 = vec![0.0; n_copies];
    }
    let y = &mut y_store.0;

    let mut z = init.to_vec();
    project(problem, &mut z, &multiplicity, &in_group);
    let mut best_obj = problem.objective(&z);
    let mut best = z.clone();
    let mut x = vec![0.0; n_copies];
    let mut acc = vec![0.0; problem.n_vars];
    let mut converged = false;
    let mut iterations = 0;
    let (mut r_norm, mut s_norm) = (f64::INFINITY, f64::INFINITY);
    let sqrt_p = (n_copies as f64).sqrt();

    for _ in 0..cfg.max_iters {
        iterations += 1;
        {
            let (xh, xl) = x.split_at_mut(hinge_copies);
            let (yh, yl) = y.split_at(hinge_copies);
            let chunks = split_chunks(xh, &offsets);
            chunks
                .into_par_iter()
                .with_min_len(256)
                .zip(problem.hinges.par_iter())
                .enumerate()
                .for_each(|(h, (out, hinge))| {
                    let lo = offsets[h];
                    let cons: Vec<f64> = hinge.terms.iter().map(|&(i, _)| z[i]).collect();
                    hinge_local(hinge, &cons, &yh[lo..lo + out.len()], rho, out);
                });
            xl.par_iter_mut()
                .with_min_len(1024)
                .zip(problem.logs.par_iter())
                .zip(yl.par_iter())
                .for_each(|((o, term), &yy)| {
                    *o = log_local(term, z[term.var], yy, rho);
                });
        }

        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..n_copies {
            acc[copy_var[j]] += x[j] + y[j] / rho;
        }
        let z_old = z.clone();
        for i in 0..problem.n_vars {
            if multiplicity[i] > 0.0 {
                z[i] = acc[i] / multiplicity[i];
            }
        }
        project(problem, &mut z, &multiplicity, &in_group);

        let mut r2 = 0.0;
        let mut s2 = 0.0;
        let mut x2 = 0.0;
        let mut z2 = 0.0;
        let mut y2 = 0.0;
        for j in 0..n_copies {
            let v = copy_var[j];
            let r = x[j] - z[v];
            y[j] += rho * r;
            r2 += r * r;
            let dz = z[v] - z_old[v];
            s2 += dz * dz;
            x2 += x[j] * x[j];
            z2 += z[v] * z[v];
            y2 += y[j] * y[j];
        }
        r_norm = r2.sqrt();
        s_norm = rho * s2.sqrt();

        let obj = problem.objective(&z);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&z);
        }
        let eps_pri = sqrt_p * cfg.eps_abs + cfg.eps_rel * x2.sqrt().max(z2.sqrt());
        let eps_dual = sqrt_p * cfg.eps_abs + cfg.eps_rel * y2.sqrt();
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
    }

    AdmmResult {
        x: best,
        converged,
        iterations,
        objective: best_obj,
        primal_residual: r_norm,
        dual_residual: s_norm,
    }
}
