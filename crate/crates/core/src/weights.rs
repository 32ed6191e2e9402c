//! Rule-weight learning by approximate maximum likelihood.
//!
//! The expectation of each rule's total penalty is replaced by its value at the
//! prior-only MAP state, and the observed value is read from the EM estimate.

use log::{info, warn};
use thiserror::Error;

use crate::admm::{run_admm, AdmmConfig, ConsensusProblem, Hinge, LogTerm};
use crate::data::{Network, Split};
use crate::grounding::VarAtom;
use crate::model::{init_model_with, BatchTrainer, EmConfig, ModelState, Prior};
use crate::rules::RuleSet;

#[derive(Debug, Error, PartialEq)]
pub enum WeightError {
    #[error("rule set has no learnable rules")]
    NoLearnable,
    #[error("invalid weight-learning config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightLearnConfig {
    pub learn_rate: f64,
    pub iterations: usize,
    pub floor: f64,
    pub cap: f64,
}

impl Default for WeightLearnConfig {
    fn default() -> Self {
        WeightLearnConfig {
            learn_rate: 0.1,
            iterations: 100,
            floor: 0.0,
            cap: 100.0,
        }
    }
}

impl WeightLearnConfig {
    pub fn validate(&self) -> Result<(), WeightError> {
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(WeightError::BadConfig(format!("learn_rate {} must be >= 0", self.learn_rate)));
        }
        if !(self.floor >= 0.0 && self.cap > self.floor) {
            return Err(WeightError::BadConfig(format!(
                "need cap > floor >= 0, got floor {} cap {}",
                self.floor, self.cap
            )));
        }
        Ok(())
    }
}

/// Per-rule `sum psi(map) - sum psi(obs)`.
pub fn weight_gradient(prior: &Prior, n_rules: usize, map: &[f64], obs: &[f64]) -> Vec<f64> {
    let at_map = prior.rule_penalties(map, n_rules);
    let at_obs = prior.rule_penalties(obs, n_rules);
    at_map.iter().zip(&at_obs).map(|(m, o)| m - o).collect()
}

/// MAP of the weighted hinge potentials alone, starting from `obs`.
///
/// Pi rows and B cells touched by the prior are free; latent atoms and
/// everything else stay at their values in `obs`.
pub fn map_state(prior: &Prior, obs: &[f64], cfg: &AdmmConfig) -> Vec<f64> {
    let space = &prior.grounding.space;
    let k = space.communities();
    let mut free = Vec::new();
    let mut groups = Vec::new();
    for p in 0..prior.pi_in_prior.len() {
        if !prior.pi_in_prior[p] {
            continue;
        }
        let row: Vec<usize> = (0..k).filter_map(|c| space.pi_id(p, c)).collect();
        free.extend_from_slice(&row);
        groups.push(row);
    }
    for (cell, &used) in prior.b_in_prior.iter().enumerate() {
        if used {
            if let Some(id) = space.block_id(cell / k, cell % k) {
                free.push(id);
            }
        }
    }
    let mut x = obs.to_vec();
    if free.is_empty() {
        return x;
    }
    let mut local = vec![usize::MAX; x.len()];
    for (i, &v) in free.iter().enumerate() {
        local[v] = i;
    }
    let mut problem = ConsensusProblem::new(free.len());
    for pot in &prior.grounding.potentials {
        let mut constant = pot.constant;
        let mut terms = Vec::new();
        for &(v, a) in &pot.terms {
            if local[v] == usize::MAX {
                constant += a * x[v];
            } else {
                terms.push((local[v], a));
            }
        }
        if terms.is_empty() {
            continue;
        }
        problem.hinges.push(Hinge {
            weight: pot.weight,
            exponent: pot.exponent,
            constant,
            terms,
        });
    }
    // zero-coefficient anchors give every free variable at least one copy
    problem.logs = (0..free.len())
        .map(|var| LogTerm {
            var,
            a: 0.0,
            complement: false,
        })
        .collect();
    problem.simplex_groups = groups.iter().map(|g| g.iter().map(|&v| local[v]).collect()).collect();
    let init: Vec<f64> = free.iter().map(|&v| x[v]).collect();
    let res = run_admm(&problem, &init, None, cfg);
    for (i, &v) in free.iter().enumerate() {
        x[v] = res.x[i];
    }
    debug_assert!(free.iter().all(|&v| !matches!(space.atom(v), VarAtom::Latent { .. })));
    x
}

/// One outer step of weight learning.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStep {
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub gradient: Vec<f64>,
    pub bound: f64,
}

impl WeightStep {
    /// `iteration bound w_1 .. w_n` tab-separated.
    pub fn tsv_line(&self) -> String {
        let mut out = format!("{}\t{}", self.iteration, self.bound);
        for w in &self.weights {
            out.push_str(&format!("\t{w}"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct WeightLearnOutput {
    pub weights: Vec<f64>,
    pub state: ModelState,
    pub trace: Vec<WeightStep>,
    pub stopped_early: bool,
}

/// Projected gradient ascent on the rule weights with EM re-inference of
/// Pi, B and H before every step. Fixed-weight rules keep their weight.
pub fn learn_weights(
    net: &Network,
    split: &Split,
    rules: &RuleSet,
    em: &EmConfig,
    cfg: &WeightLearnConfig,
) -> crate::Result<WeightLearnOutput> {
    let learnable: Vec<bool> = rules.rules.iter().map(|r| r.weight.is_learnable()).collect();
    if !learnable.iter().any(|&l| l) {
        return Err(WeightError::NoLearnable.into());
    }
    cfg.validate()?;
    let mut weights = rules.weights(em.initial_weight);
    for (w, &l) in weights.iter_mut().zip(&learnable) {
        if l {
            *w = w.clamp(cfg.floor, cfg.cap);
        }
    }
    let state = init_model_with(net, split, em.k, em.alpha, em.beta_sum, em.seed)?;
    let mut trainer = BatchTrainer::with_state(net, split, rules, em, state, weights.clone())?;
    let n_rules = rules.rules.len();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut at_cap = 0;
    let mut stopped_early = false;

    for it in 0..cfg.iterations {
        trainer.prior.set_weights(&weights);
        trainer.state.lambda.clone_from(&weights);
        let bound = reinfer(&mut trainer)?;
        let obs = trainer.prior.assignment(&trainer.state);
        let map = map_state(&trainer.prior, &obs, &em.admm);
        let gradient = weight_gradient(&trainer.prior, n_rules, &map, &obs);
        for r in 0..n_rules {
            if learnable[r] {
                weights[r] = (weights[r] + cfg.learn_rate * gradient[r]).clamp(cfg.floor, cfg.cap);
            }
        }
        info!("weight step {it}: bound {bound}, weights {weights:?}");
        trace.push(WeightStep {
            iteration: it,
            weights: weights.clone(),
            gradient,
            bound,
        });
        if learnable.iter().zip(&weights).any(|(&l, &w)| l && w >= cfg.cap) {
            at_cap += 1;
            if at_cap >= 10 {
                warn!("weights stayed at the cap {} for 10 steps; stopping", cfg.cap);
                stopped_early = true;
                break;
            }
        } else {
            at_cap = 0;
        }
    }
    trainer.prior.set_weights(&weights);
    trainer.state.lambda.clone_from(&weights);
    Ok(WeightLearnOutput {
        weights,
        state: trainer.state,
        trace,
        stopped_early,
    })
}

fn reinfer(trainer: &mut BatchTrainer) -> crate::Result<f64> {
    let mut prev: Option<f64> = None;
    let mut r = f64::NAN;
    for it in 0..trainer.cfg.max_iters.max(1) {
        r = trainer.step();
        if !r.is_finite() {
            return Err(crate::model::ModelError::NonFinite { iteration: it, value: r }.into());
        }
        if prev.is_some_and(|p| ((r - p) / p).abs() < trainer.cfg.tol) {
            break;
        }
        prev = Some(r);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::{GroundPotential, Grounding, PotentialClass, VariableSpace};

    fn single_hinge_prior() -> Prior {
        // one B cell, potential max(1 - s, 0)
        let space = VariableSpace::blocks(1, 1);
        let pot = GroundPotential {
            rule: 0,
            weight: 1.0,
            exponent: 1,
            constant: 1.0,
            terms: vec![(0, -1.0)],
            class: PotentialClass::Block,
        };
        Prior::from_grounding(
            Grounding {
                space,
                potentials: vec![pot],
            },
            1,
            1,
        )
    }

    #[test]
    fn gradient_of_single_hinge() {
        let prior = single_hinge_prior();
        let g = weight_gradient(&prior, 1, &[1.0], &[0.5]);
        assert_eq!(g, vec![-0.5]);
        assert_eq!(weight_gradient(&prior, 1, &[0.3], &[0.3]), vec![0.0]);
    }

    #[test]
    fn map_satisfies_single_hinge() {
        let prior = single_hinge_prior();
        let x = map_state(&prior, &[0.2], &AdmmConfig::default());
        assert!(x[0] > 0.999, "{x:?}");
    }

    #[test]
    fn config_checks() {
        assert!(WeightLearnConfig::default().validate().is_ok());
        let bad = WeightLearnConfig {
            cap: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
