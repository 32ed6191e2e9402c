//! Weighted first-order rule language.
//!
//! ```text
//! rule    := weight ":" literal ("&" literal)* "->" literal ["^" digit] ["."]
//! weight  := decimal | "learnable"
//! literal := ["!"] name "(" term ("," term)* ")"
//! term    := identifier | "\"" text "\"" | digits
//! decl    := "latent" name "/" arity
//! ```
//!
//! Identifiers in argument position are variables; quoted strings and digit
//! strings are constants. `pi/2` and `B/2` are the membership and block-matrix
//! predicates; `latent` declarations introduce latent atoms; every other
//! predicate is observed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("line {line}, column {column}: {msg}")]
    Syntax {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("line {line}: negative weight {weight}")]
    NegativeWeight { line: usize, weight: f64 },
    #[error("line {line}: exponent {exponent} must be 1 or 2")]
    BadExponent { line: usize, exponent: u32 },
    #[error("line {line}: head variable `{var}` does not occur in the body")]
    Unsafe { line: usize, var: String },
    #[error("line {line}: predicate `{name}` used with arity {found}, expected {expected}")]
    Arity {
        line: usize,
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: predicate `{name}` declared twice")]
    DuplicateDecl { line: usize, name: String },
}

/// Rule weight: a fixed nonnegative value or a weight to be learned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Fixed(f64),
    Learnable,
}

impl Weight {
    pub fn is_learnable(&self) -> bool {
        matches!(self, Weight::Learnable)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    Const(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Literal {
    pub negated: bool,
    pub predicate: String,
    pub args: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub weight: Weight,
    pub body: Vec<Literal>,
    pub head: Literal,
    /// Hinge exponent, 1 or 2.
    pub exponent: u8,
}

impl Rule {
    /// All literals, body first then head.
    pub fn literals(&self) -> impl Iterator<Item = &Literal> {
        self.body.iter().chain(std::iter::once(&self.head))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredicateKind {
    Observed,
    Pi,
    Block,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateDecl {
    pub name: String,
    pub arity: usize,
    pub kind: PredicateKind,
}

/// Parsed rule file: rules plus predicate declarations (explicit and inferred).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub decls: Vec<PredicateDecl>,
}

impl RuleSet {
    pub fn decl(&self, name: &str) -> Option<&PredicateDecl> {
        self.decls.iter().find(|d| d.name == name)
    }

    pub fn kind(&self, name: &str) -> PredicateKind {
        self.decl(name).map(|d| d.kind).unwrap_or(PredicateKind::Observed)
    }

    /// Rule weights with `learnable` rules set to `initial`.
    pub fn weights(&self, initial: f64) -> Vec<f64> {
        self.rules
            .iter()
            .map(|r| match r.weight {
                Weight::Fixed(w) => w,
                Weight::Learnable => initial,
            })
            .collect()
    }

    /// Copy with every weight replaced by the given numeric value.
    pub fn with_weights(&self, weights: &[f64]) -> RuleSet {
        assert_eq!(weights.len(), self.rules.len());
        let mut out = self.clone();
        for (r, &w) in out.rules.iter_mut().zip(weights) {
            r.weight = Weight::Fixed(w);
        }
        out
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => f.write_str(v),
            Term::Const(c) if !c.is_empty() && c.bytes().all(|b| b.is_ascii_digit()) => {
                f.write_str(c)
            }
            Term::Const(c) => write!(f, "\"{c}\""),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("!")?;
        }
        write!(f, "{}(", self.predicate)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.weight {
            Weight::Fixed(w) => write!(f, "{w:?} : ")?,
            Weight::Learnable => f.write_str("learnable : ")?,
        }
        for (i, l) in self.body.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, " -> {}", self.head)?;
        if self.exponent == 2 {
            f.write_str(" ^2")?;
        }
        Ok(())
    }
}

/// Canonical text form. Explicit latent declarations come first, then one rule per line.
pub fn print_rules(set: &RuleSet) -> String {
    let mut out = String::new();
    for d in set.decls.iter().filter(|d| d.kind == PredicateKind::Latent) {
        out.push_str(&format!("latent {}/{}\n", d.name, d.arity));
    }
    for r in &set.rules {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, RuleError> {
        Err(RuleError::Syntax {
            line: self.line,
            column: self.src[..self.pos].chars().count() + 1,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), RuleError> {
        if self.eat(token) {
            Ok(())
        } else {
            let found = self.peek().map(|c| format!("`{c}`")).unwrap_or("end of line".into());
            self.err(format!("expected `{token}`, found {found}"))
        }
    }

    fn ident(&mut self) -> Result<String, RuleError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[self.pos..];
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return self.err("expected identifier"),
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos = start + end;
        Ok(rest[..end].to_string())
    }

    fn number(&mut self) -> Result<f64, RuleError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let end = rest
            .char_indices()
            .find(|&(i, c)| {
                !(c.is_ascii_digit()
                    || c == '.'
                    || c == 'e'
                    || c == 'E'
                    || ((c == '-' || c == '+') && (i == 0 || rest[..i].ends_with(['e', 'E']))))
            })
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        match rest[..end].parse::<f64>() {
            Ok(v) if end > 0 && v.is_finite() => {
                self.pos += end;
                Ok(v)
            }
            _ => self.err("expected numeric weight or `learnable`"),
        }
    }

    fn term(&mut self) -> Result<Term, RuleError> {
        self.skip_ws();
        match self.peek() {
            Some('"') => {
                self.pos += 1;
                let rest = &self.src[self.pos..];
                match rest.find('"') {
                    Some(end) => {
                        let s = rest[..end].to_string();
                        self.pos += end + 1;
                        Ok(Term::Const(s))
                    }
                    None => self.err("unterminated string constant"),
                }
            }
            Some(c) if c.is_ascii_digit() => {
                let rest = &self.src[self.pos..];
                let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
                self.pos += end;
                Ok(Term::Const(rest[..end].to_string()))
            }
            _ => Ok(Term::Var(self.ident()?)),
        }
    }

    fn literal(&mut self) -> Result<Literal, RuleError> {
        let negated = self.eat("!");
        let predicate = self.ident()?;
        self.expect("(")?;
        let mut args = vec![self.term()?];
        while self.eat(",") {
            args.push(self.term()?);
        }
        self.expect(")")?;
        Ok(Literal {
            negated,
            predicate,
            args,
        })
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.src.len()
    }
}

fn strip_comment(line: &str) -> &str {
    // `#` starts a comment unless it sits inside a quoted constant
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_rule(src: &str, line: usize) -> Result<Rule, RuleError> {
    let mut cur = Cursor { src, pos: 0, line };
    cur.skip_ws();
    let weight = if cur.src[cur.pos..].starts_with("learnable") {
        cur.pos += "learnable".len();
        Weight::Learnable
    } else {
        let neg = cur.eat("-");
        let w = cur.number()?;
        let w = if neg { -w } else { w };
        if w < 0.0 {
            return Err(RuleError::NegativeWeight { line, weight: w });
        }
        Weight::Fixed(w)
    };
    cur.expect(":")?;
    let mut body = vec![cur.literal()?];
    while cur.eat("&") {
        body.push(cur.literal()?);
    }
    cur.expect("->")?;
    let head = cur.literal()?;
    let mut exponent = 1u8;
    if cur.eat("^") {
        cur.skip_ws();
        let rest = &cur.src[cur.pos..];
        let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        if end == 0 {
            return cur.err("expected exponent digits after `^`");
        }
        let e: u32 = rest[..end].parse().unwrap_or(u32::MAX);
        cur.pos += end;
        if e != 1 && e != 2 {
            return Err(RuleError::BadExponent { line, exponent: e });
        }
        exponent = e as u8;
    }
    cur.eat(".");
    if !cur.at_end() {
        return cur.err("unexpected trailing input");
    }
    let body_vars: HashSet<&String> = body
        .iter()
        .flat_map(|l| &l.args)
        .filter_map(|t| match t {
            Term::Var(v) => Some(v),
            Term::Const(_) => None,
        })
        .collect();
    for t in &head.args {
        if let Term::Var(v) = t {
            if !body_vars.contains(v) {
                return Err(RuleError::Unsafe {
                    line,
                    var: v.clone(),
                });
            }
        }
    }
    Ok(Rule {
        weight,
        body,
        head,
        exponent,
    })
}

fn parse_decl(src: &str, line: usize) -> Result<(String, usize), RuleError> {
    let mut cur = Cursor { src, pos: 0, line };
    cur.expect("latent")?;
    let name = cur.ident()?;
    cur.expect("/")?;
    cur.skip_ws();
    let rest = &cur.src[cur.pos..];
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let arity: usize = match rest[..end].parse() {
        Ok(a) if a > 0 => a,
        _ => return cur.err("expected positive arity"),
    };
    cur.pos += end;
    if !cur.at_end() {
        return cur.err("unexpected trailing input");
    }
    Ok((name, arity))
}

fn is_decl(line: &str) -> bool {
    let t = line.trim_start();
    t.strip_prefix("latent")
        .is_some_and(|r| r.starts_with(char::is_whitespace))
}

/// Parses a rule file into rules and predicate declarations.
pub fn parse_rules(source: &str) -> Result<RuleSet, RuleError> {
    let mut rules = Vec::new();
    let mut rule_lines = Vec::new();
    let mut decls: BTreeMap<String, (PredicateDecl, usize)> = BTreeMap::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let text = strip_comment(raw);
        if text.trim().is_empty() {
            continue;
        }
        if is_decl(text) {
            let (name, arity) = parse_decl(text, line)?;
            if decls.contains_key(&name) {
                return Err(RuleError::DuplicateDecl { line, name });
            }
            decls.insert(
                name.clone(),
                (
                    PredicateDecl {
                        name,
                        arity,
                        kind: PredicateKind::Latent,
                    },
                    line,
                ),
            );
        } else {
            rules.push(parse_rule(text, line)?);
            rule_lines.push(line);
        }
    }

    // explicit declarations first, in source order
    let mut explicit: Vec<(PredicateDecl, usize)> = decls.into_values().collect();
    explicit.sort_by_key(|(_, l)| *l);
    let mut out: Vec<PredicateDecl> = explicit.into_iter().map(|(d, _)| d).collect();

    for (rule, &line) in rules.iter().zip(&rule_lines) {
        for lit in rule.literals() {
            let found = lit.args.len();
            if let Some(d) = out.iter().find(|d| d.name == lit.predicate) {
                if d.arity != found {
                    return Err(RuleError::Arity {
                        line,
                        name: lit.predicate.clone(),
                        expected: d.arity,
                        found,
                    });
                }
                continue;
            }
            let kind = match lit.predicate.as_str() {
                "pi" => PredicateKind::Pi,
                "B" => PredicateKind::Block,
                _ => PredicateKind::Observed,
            };
            let expected = match kind {
                PredicateKind::Pi | PredicateKind::Block => 2,
                _ => found,
            };
            if found != expected {
                return Err(RuleError::Arity {
                    line,
                    name: lit.predicate.clone(),
                    expected,
                    found,
                });
            }
            out.push(PredicateDecl {
                name: lit.predicate.clone(),
                arity: found,
                kind,
            });
        }
    }
    Ok(RuleSet { rules, decls: out })
}
