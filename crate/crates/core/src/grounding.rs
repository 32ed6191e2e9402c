//! Rule grounding into hinge-loss potentials.
//!
//! Every substitution of a rule's variables produces the Lukasiewicz linear form
//! `l = sum_i val(b_i) - (n - 1) - val(h)` with `val(!a) = 1 - a`. Observed atoms
//! fold into the constant, repeated variables are merged, and groundings whose
//! `l` cannot exceed zero anywhere on the unit box are dropped.
//!
//! Argument sorts are fixed per predicate:
//!
//! | predicate                  | sorts                     | value                       |
//! |----------------------------|---------------------------|-----------------------------|
//! | `pi/2`                     | node, community           | membership variable         |
//! | `B/2`                      | community, community      | block-matrix variable       |
//! | latent                     | inferred (default node)   | latent variable             |
//! | `feature/2`                | node, feature name        | feature value               |
//! | `<feature>/1`              | node                      | feature value               |
//! | `<relation>/2`             | node, node                | adjacency                   |
//! | any other observed `/3`    | node, node, relation name | adjacency of that relation  |
//!
//! Communities are written 1-based in rule constants and atom keys.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::Network;
use crate::rules::{Literal, PredicateKind, Rule, RuleSet, Term};

/// Default cap on the number of ground potentials.
/// Potentials whose largest attainable value is at most this are dropped.
pub const VACUOUS_TOL: f64 = 1e-12;

pub const DEFAULT_GROUNDING_CAP: usize = 10_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum GroundingError {
    #[error("rule {rule}: predicate `{name}/{arity}` matches no relation or feature in the network")]
    UnknownPredicate {
        rule: usize,
        name: String,
        arity: usize,
    },
    #[error("rule {rule}: variable `{var}` used both as {first} and {second}")]
    SortConflict {
        rule: usize,
        var: String,
        first: Sort,
        second: Sort,
    },
    #[error("rule {rule}: constant `{value}` is not a valid {sort}")]
    BadConstant { rule: usize, value: String, sort: Sort },
    #[error("rule {rule} (`{text}`) exceeds the grounding cap of {cap} potentials")]
    TooManyPotentials {
        rule: usize,
        text: String,
        cap: usize,
    },
    #[error("K must be at least 1")]
    NoCommunities,
    #[error("variable id {0} has no assigned value")]
    Unassigned(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sort {
    Node,
    Community,
    Feature,
    Relation,
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sort::Node => "node",
            Sort::Community => "community",
            Sort::Feature => "feature name",
            Sort::Relation => "relation name",
        })
    }
}

/// Ground constant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Node(usize),
    /// 0-based community index.
    Community(usize),
    Symbol(String),
}

/// A ground atom that is a model variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarAtom {
    Pi { node: usize, community: usize },
    Block { from: usize, to: usize },
    Latent { predicate: String, args: Vec<Value> },
}

/// Which prior a potential belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PotentialClass {
    /// Touches only membership and latent variables (counted in `M^(1)`).
    Membership,
    /// Touches at least one block-matrix variable (counted in `M^(2)`).
    Block,
}

/// `weight * max(constant + sum coeff * x, 0)^exponent`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundPotential {
    pub rule: usize,
    pub weight: f64,
    pub exponent: u8,
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
    pub class: PotentialClass,
}

impl GroundPotential {
    /// Value of the linear function inside the hinge.
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }

    /// Unweighted potential `max(l, 0)^exponent`; panics on out-of-range ids.
    pub fn value(&self, x: &[f64]) -> f64 {
        let l = self.linear(x).max(0.0);
        if self.exponent == 2 {
            l * l
        } else {
            l
        }
    }

    /// Weighted potential.
    pub fn weighted(&self, x: &[f64]) -> f64 {
        self.weight * self.value(x)
    }
}

/// Unweighted potential value; fails when an id is outside the assignment.
pub fn potential_value(pot: &GroundPotential, x: &[f64]) -> Result<f64, GroundingError> {
    if let Some(&(i, _)) = pot.terms.iter().find(|(i, _)| *i >= x.len()) {
        return Err(GroundingError::Unassigned(i));
    }
    Ok(pot.value(x))
}

/// Bijection between variable atoms and dense ids.
///
/// Membership variables (all `N*K` of them once any is used) come first in
/// node-major order, then block-matrix variables, then latent atoms in
/// first-grounded order.
#[derive(Debug, Clone, Default)]
pub struct VariableSpace {
    atoms: Vec<VarAtom>,
    index: HashMap<VarAtom, usize>,
    latent: Vec<usize>,
    latent_keys: Vec<String>,
    node_count: usize,
    communities: usize,
}

impl VariableSpace {
    /// Space holding only the `k x k` block-matrix atoms.
    pub fn blocks(node_count: usize, k: usize) -> Self {
        let mut space = VariableSpace {
            node_count,
            communities: k,
            ..Default::default()
        };
        for from in 0..k {
            for to in 0..k {
                let atom = VarAtom::Block { from, to };
                space.index.insert(atom.clone(), space.atoms.len());
                space.atoms.push(atom);
            }
        }
        space
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, id: usize) -> &VarAtom {
        &self.atoms[id]
    }

    pub fn atoms(&self) -> &[VarAtom] {
        &self.atoms
    }

    pub fn id(&self, atom: &VarAtom) -> Option<usize> {
        self.index.get(atom).copied()
    }

    pub fn pi_id(&self, node: usize, community: usize) -> Option<usize> {
        self.id(&VarAtom::Pi { node, community })
    }

    pub fn block_id(&self, from: usize, to: usize) -> Option<usize> {
        self.id(&VarAtom::Block { from, to })
    }

    /// Variable ids of latent atoms, in latent order.
    pub fn latent_ids(&self) -> &[usize] {
        &self.latent
    }

    /// Printable keys of latent atoms, aligned with [`latent_ids`](Self::latent_ids).
    pub fn latent_keys(&self) -> &[String] {
        &self.latent_keys
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn communities(&self) -> usize {
        self.communities
    }

    pub fn count_pi(&self) -> usize {
        self.atoms
            .iter()
            .filter(|a| matches!(a, VarAtom::Pi { .. }))
            .count()
    }
}

/// Ground potentials over a variable space.
#[derive(Debug, Clone, Default)]
pub struct Grounding {
    pub space: VariableSpace,
    pub potentials: Vec<GroundPotential>,
}

impl Grounding {
    /// `(M^(1), M^(2))`.
    pub fn class_counts(&self) -> (usize, usize) {
        let block = self
            .potentials
            .iter()
            .filter(|p| p.class == PotentialClass::Block)
            .count();
        (self.potentials.len() - block, block)
    }

    /// Refreshes potential weights from per-rule weights.
    pub fn set_weights(&mut self, weights: &[f64]) {
        for p in &mut self.potentials {
            p.weight = weights[p.rule];
        }
    }

    /// Writes one potential per line:
    /// `rule_id<TAB>weight<TAB>exponent<TAB>constant<TAB>var:coeff,...`.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.potentials {
            let terms: Vec<String> = p.terms.iter().map(|(i, a)| format!("{i}:{a}")).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                p.rule,
                p.weight,
                p.exponent,
                p.constant,
                terms.join(",")
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroundingOptions {
    pub cap: usize,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        GroundingOptions {
            cap: DEFAULT_GROUNDING_CAP,
        }
    }
}

/// Printable key of a latent atom, e.g. `similarity(a,b)`.
pub fn latent_key(net: &Network, predicate: &str, args: &[Value]) -> String {
    let parts: Vec<String> = args
        .iter()
        .map(|v| match v {
            Value::Node(n) => net.node_label(*n).to_string(),
            Value::Community(k) => (k + 1).to_string(),
            Value::Symbol(s) => s.clone(),
        })
        .collect();
    format!("{predicate}({})", parts.join(","))
}

/// How a literal's atom is evaluated once its arguments are bound.
#[derive(Debug, Clone, PartialEq)]
enum Source {
    Pi,
    Block,
    Latent,
    /// `feature(p, T)`
    FeatureByName,
    /// `name(p)`
    FeatureUnary(String),
    /// `name(p, q)`
    Relation(String),
    /// `name(p, q, R)`
    RelationByName,
}

#[derive(Debug, Clone)]
enum Slot {
    Var(usize),
    Const(Value),
}

#[derive(Debug, Clone)]
struct CompiledLiteral {
    negated: bool,
    predicate: String,
    source: Source,
    args: Vec<Slot>,
}

#[derive(Debug)]
struct CompiledRule {
    index: usize,
    weight: f64,
    exponent: u8,
    body_len: usize,
    literals: Vec<CompiledLiteral>, // body then head
    var_sorts: Vec<Sort>,
}

fn signature(
    rule_idx: usize,
    lit: &Literal,
    kind: PredicateKind,
    net: &Network,
) -> Result<(Source, Vec<Option<Sort>>), GroundingError> {
    let arity = lit.args.len();
    let unknown = || GroundingError::UnknownPredicate {
        rule: rule_idx,
        name: lit.predicate.clone(),
        arity,
    };
    Ok(match kind {
        PredicateKind::Pi => (Source::Pi, vec![Some(Sort::Node), Some(Sort::Community)]),
        PredicateKind::Block => (
            Source::Block,
            vec![Some(Sort::Community), Some(Sort::Community)],
        ),
        PredicateKind::Latent => (Source::Latent, vec![None; arity]),
        PredicateKind::Observed => match arity {
            2 if lit.predicate == "feature" => (
                Source::FeatureByName,
                vec![Some(Sort::Node), Some(Sort::Feature)],
            ),
            1 if net.has_feature(&lit.predicate) => (
                Source::FeatureUnary(lit.predicate.clone()),
                vec![Some(Sort::Node)],
            ),
            2 if net.relation(&lit.predicate).is_some() => (
                Source::Relation(lit.predicate.clone()),
                vec![Some(Sort::Node), Some(Sort::Node)],
            ),
            3 => (
                Source::RelationByName,
                vec![Some(Sort::Node), Some(Sort::Node), Some(Sort::Relation)],
            ),
            _ => return Err(unknown()),
        },
    })
}

fn resolve_const(
    rule: usize,
    raw: &str,
    sort: Sort,
    net: &Network,
    k: usize,
) -> Result<Value, GroundingError> {
    let bad = || GroundingError::BadConstant {
        rule,
        value: raw.to_string(),
        sort,
    };
    match sort {
        Sort::Node => net.node(raw).map(Value::Node).ok_or_else(bad),
        Sort::Community => match raw.parse::<usize>() {
            Ok(c) if (1..=k).contains(&c) => Ok(Value::Community(c - 1)),
            _ => Err(bad()),
        },
        Sort::Feature | Sort::Relation => Ok(Value::Symbol(raw.to_string())),
    }
}

fn compile(
    rule_idx: usize,
    rule: &Rule,
    weight: f64,
    set: &RuleSet,
    net: &Network,
    k: usize,
) -> Result<CompiledRule, GroundingError> {
    let mut var_names: Vec<String> = Vec::new();
    let mut var_sorts: Vec<Option<Sort>> = Vec::new();
    let mut sigs = Vec::new();
    for lit in rule.literals() {
        let (source, sorts) = signature(rule_idx, lit, set.kind(&lit.predicate), net)?;
        for (term, sort) in lit.args.iter().zip(&sorts) {
            if let Term::Var(v) = term {
                let idx = match var_names.iter().position(|n| n == v) {
                    Some(i) => i,
                    None => {
                        var_names.push(v.clone());
                        var_sorts.push(None);
                        var_names.len() - 1
                    }
                };
                if let Some(s) = sort {
                    match var_sorts[idx] {
                        None => var_sorts[idx] = Some(*s),
                        Some(prev) if prev != *s => {
                            return Err(GroundingError::SortConflict {
                                rule: rule_idx,
                                var: v.clone(),
                                first: prev,
                                second: *s,
                            })
                        }
                        _ => {}
                    }
                }
            }
        }
        sigs.push((source, sorts));
    }
    let var_sorts: Vec<Sort> = var_sorts.into_iter().map(|s| s.unwrap_or(Sort::Node)).collect();
    let mut literals = Vec::new();
    for (lit, (source, sorts)) in rule.literals().zip(sigs) {
        let mut args = Vec::new();
        for (term, sort) in lit.args.iter().zip(sorts) {
            args.push(match term {
                Term::Var(v) => Slot::Var(var_names.iter().position(|n| n == v).unwrap()),
                Term::Const(c) => {
                    Slot::Const(resolve_const(rule_idx, c, sort.unwrap_or(Sort::Node), net, k)?)
                }
            });
        }
        literals.push(CompiledLiteral {
            negated: lit.negated,
            predicate: lit.predicate.clone(),
            source,
            args,
        });
    }
    Ok(CompiledRule {
        index: rule_idx,
        weight,
        exponent: rule.exponent,
        body_len: rule.body.len(),
        literals,
        var_sorts,
    })
}

enum Atom {
    Var(VarAtom),
    Obs(f64),
}

fn arg_value<'a>(slot: &'a Slot, binding: &'a [Option<Value>]) -> &'a Value {
    match slot {
        Slot::Var(i) => binding[*i].as_ref().expect("bound variable"),
        Slot::Const(v) => v,
    }
}

fn node_of(v: &Value) -> usize {
    match v {
        Value::Node(n) => *n,
        _ => unreachable!("sort checked at compile time"),
    }
}

fn comm_of(v: &Value) -> usize {
    match v {
        Value::Community(k) => *k,
        _ => unreachable!("sort checked at compile time"),
    }
}

fn sym_of(v: &Value) -> &str {
    match v {
        Value::Symbol(s) => s,
        _ => unreachable!("sort checked at compile time"),
    }
}

fn evaluate(lit: &CompiledLiteral, binding: &[Option<Value>], net: &Network) -> Atom {
    let a = |i: usize| arg_value(&lit.args[i], binding);
    match &lit.source {
        Source::Pi => Atom::Var(VarAtom::Pi {
            node: node_of(a(0)),
            community: comm_of(a(1)),
        }),
        Source::Block => Atom::Var(VarAtom::Block {
            from: comm_of(a(0)),
            to: comm_of(a(1)),
        }),
        Source::Latent => Atom::Var(VarAtom::Latent {
            predicate: lit.predicate.clone(),
            args: (0..lit.args.len()).map(|i| a(i).clone()).collect(),
        }),
        Source::FeatureByName => Atom::Obs(net.feature(node_of(a(0)), sym_of(a(1)))),
        Source::FeatureUnary(name) => Atom::Obs(net.feature(node_of(a(0)), name)),
        Source::Relation(name) => {
            let (p, q) = (node_of(a(0)), node_of(a(1)));
            Atom::Obs(if p == q { 0.0 } else { net.observed_relation(name, p, q) })
        }
        Source::RelationByName => {
            let (p, q) = (node_of(a(0)), node_of(a(1)));
            Atom::Obs(if p == q {
                0.0
            } else {
                net.observed_relation(sym_of(a(2)), p, q)
            })
        }
    }
}

/// A potential whose variables are still atoms rather than ids.
struct RawPotential {
    constant: f64,
    terms: Vec<(VarAtom, f64)>,
}

/// Builds the hinge for a fully bound rule; `None` when vacuous.
fn instantiate(rule: &CompiledRule, binding: &[Option<Value>], net: &Network) -> Option<RawPotential> {
    let mut constant = -(rule.body_len as f64 - 1.0);
    let mut terms: Vec<(VarAtom, f64)> = Vec::new();
    let mut add = |atom: Atom, sign: f64, negated: bool, constant: &mut f64| {
        // positive body: +a, negated body: 1 - a, positive head: -a, negated head: -(1 - a)
        let (c0, coeff) = if negated { (sign, -sign) } else { (0.0, sign) };
        *constant += c0;
        match atom {
            Atom::Obs(v) => *constant += coeff * v,
            Atom::Var(va) => match terms.iter_mut().find(|(a, _)| *a == va) {
                Some(t) => t.1 += coeff,
                None => terms.push((va, coeff)),
            },
        }
    };
    for (i, lit) in rule.literals.iter().enumerate() {
        let sign = if i < rule.body_len { 1.0 } else { -1.0 };
        add(evaluate(lit, binding, net), sign, lit.negated, &mut constant);
    }
    terms.retain(|(_, c)| *c != 0.0);
    let max_l = constant + terms.iter().map(|(_, c)| c.max(0.0)).sum::<f64>();
    if max_l <= VACUOUS_TOL {
        return None;
    }
    Some(RawPotential { constant, terms })
}

struct Domains {
    nodes: usize,
    communities: usize,
    features: Vec<String>,
    relations: Vec<String>,
}

impl Domains {
    fn values(&self, sort: Sort) -> Vec<Value> {
        match sort {
            Sort::Node => (0..self.nodes).map(Value::Node).collect(),
            Sort::Community => (0..self.communities).map(Value::Community).collect(),
            Sort::Feature => self.features.iter().cloned().map(Value::Symbol).collect(),
            Sort::Relation => self.relations.iter().cloned().map(Value::Symbol).collect(),
        }
    }
}

/// Nonzero support of observed literals, used to enumerate bindings sparsely.
fn support(lit: &CompiledLiteral, net: &Network, dom: &Domains) -> Option<Vec<Vec<Value>>> {
    let rel_support = |name: &str| -> Vec<(usize, usize)> {
        let mut v: Vec<_> = net
            .relation(name)
            .map(|r| {
                r.links()
                    .filter(|&(p, q)| net.observed_relation(name, p, q) > 0.0)
                    .collect()
            })
            .unwrap_or_default();
        v.sort_unstable();
        v
    };
    Some(match &lit.source {
        Source::FeatureByName => dom
            .features
            .iter()
            .flat_map(|f| {
                net.feature_support(f)
                    .into_iter()
                    .map(move |(n, _)| vec![Value::Node(n), Value::Symbol(f.clone())])
            })
            .collect(),
        Source::FeatureUnary(name) => net
            .feature_support(name)
            .into_iter()
            .map(|(n, _)| vec![Value::Node(n)])
            .collect(),
        Source::Relation(name) => rel_support(name)
            .into_iter()
            .map(|(p, q)| vec![Value::Node(p), Value::Node(q)])
            .collect(),
        Source::RelationByName => dom
            .relations
            .iter()
            .flat_map(|r| {
                rel_support(r)
                    .into_iter()
                    .map(move |(p, q)| vec![Value::Node(p), Value::Node(q), Value::Symbol(r.clone())])
            })
            .collect(),
        _ => return None,
    })
}

/// One step of the binding search.
enum Step {
    /// Bind through the nonzero support of a positive observed body literal.
    Generate {
        literal: usize,
        tuples: Vec<Vec<Value>>,
    },
    /// Enumerate a variable's full domain.
    Enumerate { var: usize, values: Vec<Value> },
}

fn plan(rule: &CompiledRule, net: &Network, dom: &Domains) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut covered = vec![false; rule.var_sorts.len()];
    for (i, lit) in rule.literals[..rule.body_len].iter().enumerate() {
        if lit.negated {
            continue;
        }
        if let Some(tuples) = support(lit, net, dom) {
            for s in &lit.args {
                if let Slot::Var(v) = s {
                    covered[*v] = true;
                }
            }
            steps.push(Step::Generate { literal: i, tuples });
        }
    }
    for (v, sort) in rule.var_sorts.iter().enumerate() {
        if !covered[v] {
            steps.push(Step::Enumerate {
                var: v,
                values: dom.values(*sort),
            });
        }
    }
    steps
}

fn try_bind(lit: &CompiledLiteral, tuple: &[Value], binding: &mut [Option<Value>], newly: &mut Vec<usize>) -> bool {
    for (slot, val) in lit.args.iter().zip(tuple) {
        match slot {
            Slot::Const(c) => {
                if c != val {
                    return false;
                }
            }
            Slot::Var(v) => match &binding[*v] {
                Some(b) => {
                    if b != val {
                        return false;
                    }
                }
                None => {
                    binding[*v] = Some(val.clone());
                    newly.push(*v);
                }
            },
        }
    }
    true
}

fn search(
    rule: &CompiledRule,
    steps: &[Step],
    depth: usize,
    binding: &mut Vec<Option<Value>>,
    net: &Network,
    out: &mut Vec<RawPotential>,
) {
    if depth == steps.len() {
        if let Some(p) = instantiate(rule, binding, net) {
            out.push(p);
        }
        return;
    }
    match &steps[depth] {
        Step::Generate { literal, tuples } => {
            let lit = &rule.literals[*literal];
            let mut newly = Vec::new();
            for t in tuples {
                newly.clear();
                if try_bind(lit, t, binding, &mut newly) {
                    search(rule, steps, depth + 1, binding, net, out);
                }
                for &v in &newly {
                    binding[v] = None;
                }
            }
        }
        Step::Enumerate { var, values } => {
            for v in values {
                binding[*var] = Some(v.clone());
                search(rule, steps, depth + 1, binding, net, out);
            }
            binding[*var] = None;
        }
    }
}

fn ground_compiled(rule: &CompiledRule, net: &Network, dom: &Domains) -> Vec<RawPotential> {
    let steps = plan(rule, net, dom);
    let nvars = rule.var_sorts.len();
    if steps.is_empty() {
        let mut out = Vec::new();
        search(rule, &steps, 0, &mut vec![None; nvars], net, &mut out);
        return out;
    }
    // split the first step across threads; results keep their sequential order
    let first_len = match &steps[0] {
        Step::Generate { tuples, .. } => tuples.len(),
        Step::Enumerate { values, .. } => values.len(),
    };
    let chunks: Vec<Vec<RawPotential>> = (0..first_len)
        .into_par_iter()
        .map(|i| {
            let mut binding = vec![None; nvars];
            let mut out = Vec::new();
            match &steps[0] {
                Step::Generate { literal, tuples } => {
                    let mut newly = Vec::new();
                    if try_bind(&rule.literals[*literal], &tuples[i], &mut binding, &mut newly) {
                        search(rule, &steps, 1, &mut binding, net, &mut out);
                    }
                }
                Step::Enumerate { var, values } => {
                    binding[*var] = Some(values[i].clone());
                    search(rule, &steps, 1, &mut binding, net, &mut out);
                }
            }
            out
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Grounds `rules` against `net` with `k` communities, using each rule's
/// weight from `weights`.
pub fn ground_with(
    rules: &RuleSet,
    weights: &[f64],
    net: &Network,
    k: usize,
    opts: GroundingOptions,
) -> Result<Grounding, GroundingError> {
    if k == 0 {
        return Err(GroundingError::NoCommunities);
    }
    assert_eq!(weights.len(), rules.rules.len());
    let dom = Domains {
        nodes: net.node_count(),
        communities: k,
        features: net.feature_names().map(String::from).collect(),
        relations: net.relation_names().map(String::from).collect(),
    };
    let mut raw: Vec<(usize, f64, u8, RawPotential)> = Vec::new();
    for (ri, rule) in rules.rules.iter().enumerate() {
        let compiled = compile(ri, rule, weights[ri], rules, net, k)?;
        let pots = ground_compiled(&compiled, net, &dom);
        if raw.len() + pots.len() > opts.cap {
            return Err(GroundingError::TooManyPotentials {
                rule: ri,
                text: rule.to_string(),
                cap: opts.cap,
            });
        }
        raw.extend(
            pots.into_iter()
                .map(|p| (compiled.index, compiled.weight, compiled.exponent, p)),
        );
    }

    // variable layout: all pi, then all B, then latent atoms in first-seen order
    let mut any_pi = false;
    let mut any_block = false;
    let mut latent: Vec<VarAtom> = Vec::new();
    let mut seen_latent: HashMap<&VarAtom, ()> = HashMap::new();
    for (_, _, _, p) in &raw {
        for (a, _) in &p.terms {
            match a {
                VarAtom::Pi { .. } => any_pi = true,
                VarAtom::Block { .. } => any_block = true,
                VarAtom::Latent { .. } => {
                    if seen_latent.insert(a, ()).is_none() {
                        latent.push(a.clone());
                    }
                }
            }
        }
    }
    let mut space = VariableSpace {
        node_count: net.node_count(),
        communities: k,
        ..Default::default()
    };
    let push = |space: &mut VariableSpace, atom: VarAtom| {
        let id = space.atoms.len();
        space.index.insert(atom.clone(), id);
        space.atoms.push(atom);
        id
    };
    if any_pi {
        for node in 0..net.node_count() {
            for community in 0..k {
                push(&mut space, VarAtom::Pi { node, community });
            }
        }
    }
    if any_block {
        for from in 0..k {
            for to in 0..k {
                push(&mut space, VarAtom::Block { from, to });
            }
        }
    }
    for atom in latent {
        if let VarAtom::Latent { predicate, args } = &atom {
            space.latent_keys.push(latent_key(net, predicate, args));
        }
        let id = push(&mut space, atom);
        space.latent.push(id);
    }

    let potentials = raw
        .into_iter()
        .map(|(rule, weight, exponent, p)| {
            let class = if p.terms.iter().any(|(a, _)| matches!(a, VarAtom::Block { .. })) {
                PotentialClass::Block
            } else {
                PotentialClass::Membership
            };
            GroundPotential {
                rule,
                weight,
                exponent,
                constant: p.constant,
                terms: p.terms.iter().map(|(a, c)| (space.index[a], *c)).collect(),
                class,
            }
        })
        .collect();
    Ok(Grounding { space, potentials })
}

/// Grounds with the rules' own weights (`learnable` rules start at 1).
pub fn ground(rules: &RuleSet, net: &Network, k: usize) -> Result<Grounding, GroundingError> {
    ground_with(rules, &rules.weights(1.0), net, k, GroundingOptions::default())
}
