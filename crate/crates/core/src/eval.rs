//! Held-out evaluation: data log-likelihood and AUC-ROC.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Network, Pair, Split};
use crate::model::ModelState;
use crate::EPS;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("AUC needs at least one link and one non-link, found {links} and {nonlinks}")]
    SingleClass { links: usize, nonlinks: usize },
    #[error("no pairs to evaluate")]
    NoPairs,
}

/// `sum Y log P + (1 - Y) log(1 - P)` with `P = pi_p' B pi_q` clamped to `[EPS, 1 - EPS]`.
pub fn log_likelihood(state: &ModelState, net: &Network, pairs: &[Pair]) -> f64 {
    pairs
        .par_iter()
        .with_min_len(1024)
        .map(|&(p, q)| {
            let prob = state.pair_likelihood(p, q).clamp(EPS, 1.0 - EPS);
            if net.y(p, q) {
                prob.ln()
            } else {
                (1.0 - prob).ln()
            }
        })
        .sum()
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn auc_from_scores(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let links = labels.iter().filter(|&&y| y).count();
    let nonlinks = labels.len() - links;
    if links == 0 || nonlinks == 0 {
        return Err(EvalError::SingleClass { links, nonlinks });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (l, n) = (links as f64, nonlinks as f64);
    Ok((rank_sum - l * (l + 1.0) / 2.0) / (l * n))
}

/// AUC of `pi_p' B pi_q` scores against the target relation.
pub fn auc_roc(state: &ModelState, net: &Network, pairs: &[Pair]) -> Result<f64, EvalError> {
    let scores: Vec<f64> = pairs.par_iter().map(|&(p, q)| state.pair_likelihood(p, q)).collect();
    let labels: Vec<bool> = pairs.iter().map(|&(p, q)| net.y(p, q)).collect();
    auc_from_scores(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub train_ll: f64,
    pub test_ll: f64,
    /// `None` when the test set has a single class.
    pub auc: Option<f64>,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
}

impl EvalReport {
    pub const FIELDS: [&'static str; 5] = ["train_ll", "test_ll", "auc", "n_train_pairs", "n_test_pairs"];

    fn values(&self) -> [String; 5] {
        [
            format!("{}", self.train_ll),
            format!("{}", self.test_ll),
            self.auc.map_or_else(|| "nan".to_string(), |a| format!("{a}")),
            self.n_train_pairs.to_string(),
            self.n_test_pairs.to_string(),
        ]
    }

    /// Single tab-separated line in [`FIELDS`](Self::FIELDS) order.
    pub fn tsv_line(&self) -> String {
        self.values().join("\t")
    }

    pub fn tsv_header() -> String {
        Self::FIELDS.join("\t")
    }

    /// `key=value` lines in [`FIELDS`](Self::FIELDS) order.
    pub fn key_values(&self) -> String {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tsv_line())
    }
}

/// Train and test log-likelihood plus test AUC.
pub fn evaluate(state: &ModelState, net: &Network, split: &Split) -> Result<EvalReport, EvalError> {
    if split.train.is_empty() && split.test.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let auc = if split.test.is_empty() {
        None
    } else {
        match auc_roc(state, net, &split.test) {
            Ok(a) => Some(a),
            Err(EvalError::SingleClass { .. }) => None,
            Err(e) => return Err(e),
        }
    };
    Ok(EvalReport {
        train_ll: log_likelihood(state, net, &split.train),
        test_ll: log_likelihood(state, net, &split.test),
        auc,
        n_train_pairs: split.train.len(),
        n_test_pairs: split.test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn state(pi: Array2<f64>, b: Array2<f64>) -> ModelState {
        ModelState {
            node_ids: (0..pi.nrows()).map(|i| i.to_string()).collect(),
            pi,
            b,
            h_keys: vec![],
            h: vec![],
            alpha: 1.1,
            beta1: 1.0,
            beta2: 1.0,
            lambda: vec![],
        }
    }

    #[test]
    fn single_pair_likelihood() {
        let mut net = Network::new("link");
        net.add_node("a");
        net.add_node("b");
        net.add_edge(0, 1, "link", true);
        let s = state(array![[1.0], [1.0]], array![[0.9]]);
        assert!((log_likelihood(&s, &net, &[(0, 1)]) - 0.9f64.ln()).abs() < 1e-15);
        assert!((0.9f64.ln() + 0.10536).abs() < 1e-5);
        let half = state(array![[1.0], [1.0]], array![[0.5]]);
        let pairs = vec![(0, 1); 10];
        assert!((log_likelihood(&half, &net, &pairs) - 10.0 * 0.5f64.ln()).abs() < 1e-12);
        let perfect = state(array![[1.0], [1.0]], array![[1.0]]);
        assert!(log_likelihood(&perfect, &net, &[(0, 1)]).abs() < 1e-9);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_from_scores(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc_from_scores(&[0.8, 0.4, 0.6], &[true, true, false]).unwrap(), 0.5);
        assert_eq!(
            auc_from_scores(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClass { links: 2, nonlinks: 0 })
        );
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let scores = [0.1, 0.5, 0.5, 0.7, 0.2, 0.5, 0.9];
        let labels = [false, true, false, true, true, false, false];
        let mut wins = 0.0;
        let mut total = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    total += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auc_from_scores(&scores, &labels).unwrap() - wins / total).abs() < 1e-15);
    }

    #[test]
    fn report_formats() {
        let r = EvalReport {
            train_ll: -1.5,
            test_ll: -0.25,
            auc: Some(0.75),
            n_train_pairs: 10,
            n_test_pairs: 2,
        };
        assert_eq!(r.tsv_line(), "-1.5\t-0.25\t0.75\t10\t2");
        assert_eq!(
            r.key_values(),
            "train_ll=-1.5\ntest_ll=-0.25\nauc=0.75\nn_train_pairs=10\nn_test_pairs=2\n"
        );
        assert_eq!(EvalReport::tsv_header(), "train_ll\ttest_ll\tauc\tn_train_pairs\tn_test_pairs");
    }
}
