//! Networks, node features and train/test splits.
//!
//! A [`Network`] holds directed binary relations over a fixed node set, sparse
//! node features in `[0, 1]`, and the set of held-out ordered pairs. Explicit
//! zero-valued edges are kept so that a loaded file round-trips unchanged.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ordered node pair `(sender, receiver)`.
pub type Pair = (usize, usize);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}:{line}: feature value {value} outside [0,1]")]
    FeatureRange { path: String, line: usize, value: f64 },
    #[error("{path}:{line}: edge {src}->{dst} in relation `{relation}` conflicts with an earlier line")]
    Conflict {
        path: String,
        line: usize,
        src: String,
        dst: String,
        relation: String,
    },
    #[error("target relation `{0}` not present in the edges file")]
    MissingTarget(String),
    #[error("network needs at least two nodes, found {0}")]
    TooFewNodes(usize),
    #[error("holdout fraction {0} must lie in (0,1)")]
    BadFraction(f64),
    #[error("holdout leaves no training links")]
    NoTrainingLinks,
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("split file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Sparse binary adjacency with explicit 0/1 entries; missing pairs read as 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relation {
    entries: HashMap<Pair, bool>,
}

impl Relation {
    pub fn get(&self, p: usize, q: usize) -> Option<bool> {
        self.entries.get(&(p, q)).copied()
    }

    pub fn is_link(&self, p: usize, q: usize) -> bool {
        self.entries.get(&(p, q)).copied().unwrap_or(false)
    }

    /// Pairs whose value is 1.
    pub fn links(&self) -> impl Iterator<Item = Pair> + '_ {
        self.entries.iter().filter(|(_, v)| **v).map(|(k, _)| *k)
    }

    pub fn link_count(&self) -> usize {
        self.entries.values().filter(|v| **v).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EdgeRecord {
    src: usize,
    dst: usize,
    relation: String,
    value: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct FeatureRecord {
    node: usize,
    name: String,
    value: f64,
}

/// A directed multi-relational network with node features.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    node_ids: Vec<String>,
    node_index: HashMap<String, usize>,
    relations: BTreeMap<String, Relation>,
    target: String,
    features: BTreeMap<String, HashMap<usize, f64>>,
    heldout: HashSet<Pair>,
    // insertion order, used when writing files back out
    edge_log: Vec<EdgeRecord>,
    feature_log: Vec<FeatureRecord>,
}

impl Network {
    /// Creates an empty network whose target relation exists but holds no edges.
    pub fn new(target_relation: &str) -> Self {
        let mut relations = BTreeMap::new();
        relations.insert(target_relation.to_string(), Relation::default());
        Network {
            node_ids: Vec::new(),
            node_index: HashMap::new(),
            relations,
            target: target_relation.to_string(),
            features: BTreeMap::new(),
            heldout: HashSet::new(),
            edge_log: Vec::new(),
            feature_log: Vec::new(),
        }
    }

    /// Returns the index of `label`, adding the node if it is new.
    pub fn add_node(&mut self, label: &str) -> usize {
        if let Some(&i) = self.node_index.get(label) {
            return i;
        }
        let i = self.node_ids.len();
        self.node_ids.push(label.to_string());
        self.node_index.insert(label.to_string(), i);
        i
    }

    /// Inserts an edge. Identical duplicates are ignored; conflicting ones return `false`.
    pub fn add_edge(&mut self, src: usize, dst: usize, relation: &str, value: bool) -> bool {
        assert!(src != dst, "self-pairs are not part of the model");
        let rel = self.relations.entry(relation.to_string()).or_default();
        match rel.entries.get(&(src, dst)) {
            Some(&v) => v == value,
            None => {
                rel.entries.insert((src, dst), value);
                self.edge_log.push(EdgeRecord {
                    src,
                    dst,
                    relation: relation.to_string(),
                    value,
                });
                true
            }
        }
    }

    /// Sets a feature value, which must lie in `[0, 1]`.
    pub fn set_feature(&mut self, node: usize, name: &str, value: f64) {
        assert!((0.0..=1.0).contains(&value));
        let prev = self
            .features
            .entry(name.to_string())
            .or_default()
            .insert(node, value);
        match prev {
            Some(_) => {
                if let Some(r) = self
                    .feature_log
                    .iter_mut()
                    .find(|r| r.node == node && r.name == name)
                {
                    r.value = value;
                }
            }
            None => self.feature_log.push(FeatureRecord {
                node,
                name: name.to_string(),
                value,
            }),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_label(&self, i: usize) -> &str {
        &self.node_ids[i]
    }

    pub fn node(&self, label: &str) -> Option<usize> {
        self.node_index.get(label).copied()
    }

    pub fn target_relation(&self) -> &str {
        &self.target
    }

    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.get(name)
    }

    pub fn relation_names(&self) -> impl Iterator<Item = &str> {
        self.relations.keys().map(String::as_str)
    }

    pub fn target(&self) -> &Relation {
        &self.relations[&self.target]
    }

    /// `Y_{p,q}` of the target relation.
    pub fn y(&self, p: usize, q: usize) -> bool {
        self.target().is_link(p, q)
    }

    /// Relation value as seen by the structured prior: held-out target pairs read as 0.
    pub fn observed_relation(&self, relation: &str, p: usize, q: usize) -> f64 {
        if relation == self.target && self.heldout.contains(&(p, q)) {
            return 0.0;
        }
        match self.relations.get(relation) {
            Some(r) if r.is_link(p, q) => 1.0,
            _ => 0.0,
        }
    }

    /// Feature value; missing entries default to 0.
    pub fn feature(&self, node: usize, name: &str) -> f64 {
        self.features
            .get(name)
            .and_then(|m| m.get(&node))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn has_feature(&self, name: &str) -> bool {
        self.features.contains_key(name)
    }

    /// Nodes with a nonzero value for `name`.
    pub fn feature_support(&self, name: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<_> = self
            .features
            .get(name)
            .map(|m| m.iter().filter(|(_, &x)| x > 0.0).map(|(&n, &x)| (n, x)).collect())
            .unwrap_or_default();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    pub fn heldout(&self) -> &HashSet<Pair> {
        &self.heldout
    }

    pub fn is_heldout(&self, p: usize, q: usize) -> bool {
        self.heldout.contains(&(p, q))
    }

    /// Copy of this network with the split's test pairs marked held out.
    pub fn with_heldout(&self, split: &Split) -> Network {
        let mut net = self.clone();
        net.heldout = split.test.iter().copied().collect();
        net
    }

    /// Number of ordered pairs `p != q`.
    pub fn pair_count(&self) -> usize {
        let n = self.node_count();
        n * n.saturating_sub(1)
    }

    /// Writes the edges TSV in insertion order.
    pub fn write_edges<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.edge_log {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                self.node_ids[e.src],
                self.node_ids[e.dst],
                e.relation,
                u8::from(e.value)
            )?;
        }
        Ok(())
    }

    /// Writes the features TSV in insertion order.
    pub fn write_features<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for f in &self.feature_log {
            writeln!(w, "{}\t{}\t{}", self.node_ids[f.node], f.name, f.value)?;
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Options for [`load_network_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Emit both directions for every edge line.
    pub undirected: bool,
}

/// Loads a network from an edges TSV and an optional features TSV.
pub fn load_network(
    edges_path: &Path,
    features_path: Option<&Path>,
    target_relation: &str,
) -> Result<Network, DataError> {
    load_network_with(edges_path, features_path, target_relation, LoadOptions::default())
}

pub fn load_network_with(
    edges_path: &Path,
    features_path: Option<&Path>,
    target_relation: &str,
    opts: LoadOptions,
) -> Result<Network, DataError> {
    let file = File::open(edges_path).map_err(|e| io_err(edges_path, e))?;
    let mut net = Network::new(target_relation);
    net.relations.clear();
    let ep = edges_path.display().to_string();
    let mut saw_edge = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(edges_path, e))?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        let malformed = |msg: String| DataError::Malformed {
            path: ep.clone(),
            line: lineno,
            msg,
        };
        if cols.len() != 4 {
            return Err(malformed(format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        if cols[..3].iter().any(|c| c.is_empty()) {
            return Err(malformed("empty column".into()));
        }
        let value = match cols[3].trim() {
            "0" => false,
            "1" => true,
            other => return Err(malformed(format!("edge value must be 0 or 1, got `{other}`"))),
        };
        if cols[0] == cols[1] {
            return Err(malformed(format!("self-pair `{}`", cols[0])));
        }
        let src = net.add_node(cols[0]);
        let dst = net.add_node(cols[1]);
        saw_edge = true;
        let mut pairs = vec![(src, dst)];
        if opts.undirected {
            pairs.push((dst, src));
        }
        for (a, b) in pairs {
            if !net.add_edge(a, b, cols[2], value) {
                return Err(DataError::Conflict {
                    path: ep.clone(),
                    line: lineno,
                    src: net.node_ids[a].clone(),
                    dst: net.node_ids[b].clone(),
                    relation: cols[2].to_string(),
                });
            }
        }
    }
    if !net.relations.contains_key(target_relation) {
        if saw_edge {
            return Err(DataError::MissingTarget(target_relation.to_string()));
        }
        net.relations
            .insert(target_relation.to_string(), Relation::default());
    }

    if let Some(fp) = features_path {
        let file = File::open(fp).map_err(|e| io_err(fp, e))?;
        let path = fp.display().to_string();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(fp, e))?;
            let lineno = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            if cols.len() != 3 || cols[0].is_empty() || cols[1].is_empty() {
                return Err(DataError::Malformed {
                    path,
                    line: lineno,
                    msg: "expected `node<TAB>feature<TAB>value`".into(),
                });
            }
            let value: f64 = cols[2].trim().parse().map_err(|_| DataError::Malformed {
                path: path.clone(),
                line: lineno,
                msg: format!("bad feature value `{}`", cols[2]),
            })?;
            if !(0.0..=1.0).contains(&value) {
                return Err(DataError::FeatureRange {
                    path,
                    line: lineno,
                    value,
                });
            }
            let node = net.add_node(cols[0]);
            net.set_feature(node, cols[1], value);
        }
    }
    Ok(net)
}

/// Partition of all ordered pairs `p != q` into training and test pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    /// Sorted training pairs.
    pub train: Vec<Pair>,
    /// Sorted test pairs.
    pub test: Vec<Pair>,
    pub seed: u64,
}

impl Split {
    /// Every ordered pair is a training pair.
    pub fn all_train(net: &Network) -> Split {
        let n = net.node_count();
        let train = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .collect();
        Split {
            train,
            test: Vec::new(),
            seed: 0,
        }
    }

    /// Builds a split from an explicit test set; the training set is the complement.
    pub fn from_test(net: &Network, mut test: Vec<Pair>, seed: u64) -> Result<Split, DataError> {
        let n = net.node_count();
        test.sort_unstable();
        test.dedup();
        if let Some(&(p, q)) = test.iter().find(|&&(p, q)| p >= n || q >= n || p == q) {
            return Err(DataError::InvalidSplit(format!("pair ({p},{q}) is not a valid pair")));
        }
        let test_set: HashSet<Pair> = test.iter().copied().collect();
        let train = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .filter(|pq| !test_set.contains(pq))
            .collect();
        Ok(Split { train, test, seed })
    }

    pub fn write_json(&self, net: &Network, path: &Path) -> Result<(), DataError> {
        let label = |&(p, q): &Pair| [net.node_label(p).to_string(), net.node_label(q).to_string()];
        let file = SplitFile {
            seed: self.seed,
            train: self.train.iter().map(label).collect(),
            test: self.test.iter().map(label).collect(),
        };
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &file).map_err(|source| {
            DataError::Json {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn read_json(net: &Network, path: &Path) -> Result<Split, DataError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let file: SplitFile =
            serde_json::from_reader(BufReader::new(f)).map_err(|source| DataError::Json {
                path: path.display().to_string(),
                source,
            })?;
        let resolve = |pair: &[String; 2]| -> Result<Pair, DataError> {
            let p = net
                .node(&pair[0])
                .ok_or_else(|| DataError::UnknownNode(pair[0].clone()))?;
            let q = net
                .node(&pair[1])
                .ok_or_else(|| DataError::UnknownNode(pair[1].clone()))?;
            Ok((p, q))
        };
        let test: Vec<Pair> = file.test.iter().map(resolve).collect::<Result<_, _>>()?;
        let split = Split::from_test(net, test, file.seed)?;
        let mut train: Vec<Pair> = file.train.iter().map(resolve).collect::<Result<_, _>>()?;
        train.sort_unstable();
        if train != split.train {
            return Err(DataError::InvalidSplit(
                "train and test pairs do not partition the pair set".into(),
            ));
        }
        Ok(split)
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    train: Vec<[String; 2]>,
    test: Vec<[String; 2]>,
}

/// Stratified pair-level holdout over the target relation.
///
/// The test set holds `floor(f * links)` links and `floor(f * nonlinks)` non-links,
/// drawn uniformly without replacement.
pub fn holdout_split(net: &Network, test_fraction: f64, seed: u64) -> Result<Split, DataError> {
    let n = net.node_count();
    if n < 2 {
        return Err(DataError::TooFewNodes(n));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let mut links = Vec::new();
    let mut nonlinks = Vec::new();
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            if net.y(p, q) {
                links.push((p, q));
            } else {
                nonlinks.push((p, q));
            }
        }
    }
    let (n_links, n_nonlinks) = stratified_counts(links.len(), nonlinks.len(), test_fraction);
    if links.len() - n_links == 0 {
        return Err(DataError::NoTrainingLinks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    links.shuffle(&mut rng);
    nonlinks.shuffle(&mut rng);
    let mut test: Vec<Pair> = links[..n_links].to_vec();
    test.extend_from_slice(&nonlinks[..n_nonlinks]);
    Split::from_test(net, test, seed)
}

/// Number of test links and test non-links drawn for a given fraction.
pub fn stratified_counts(links: usize, nonlinks: usize, test_fraction: f64) -> (usize, usize) {
    let take = |len: usize| (test_fraction * len as f64 + 1e-9).floor() as usize;
    (take(links), take(nonlinks))
}

/// Fraction of training pairs that are links of the target relation.
pub fn link_rate(net: &Network, split: &Split) -> f64 {
    assert!(!split.train.is_empty(), "link rate needs training pairs");
    let links = split.train.iter().filter(|&&(p, q)| net.y(p, q)).count();
    links as f64 / split.train.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_edge() {
        let e = write_tmp("a\tb\tlink\t1\n");
        let net = load_network(e.path(), None, "link").unwrap();
        assert_eq!(net.node_count(), 2);
        assert!(net.y(0, 1));
        assert!(!net.y(1, 0));
        assert_eq!(net.target().link_count(), 1);
    }

    #[test]
    fn feature_only_nodes() {
        let e = write_tmp("# nothing here\n");
        let f = write_tmp("x\tred\t1\ny\tred\t0.5\nz\tblue\t0\n");
        let net = load_network(e.path(), Some(f.path()), "link").unwrap();
        assert_eq!(net.node_count(), 3);
        assert_eq!(net.target().link_count(), 0);
        assert_eq!(net.feature(1, "red"), 0.5);
        assert_eq!(net.feature(2, "red"), 0.0);
    }

    #[test]
    fn conflicting_duplicate() {
        let e = write_tmp("a\tb\tlink\t1\na\tb\tlink\t0\n");
        let err = load_network(e.path(), None, "link").unwrap_err();
        assert!(matches!(err, DataError::Conflict { line: 2, .. }), "{err}");
    }

    #[test]
    fn identical_duplicate_is_idempotent() {
        let e = write_tmp("a\tb\tlink\t1\na\tb\tlink\t1\n");
        let net = load_network(e.path(), None, "link").unwrap();
        assert_eq!(net.target().len(), 1);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let e = write_tmp("a\tb\tlink\t1\na\tb\tlink\n");
        match load_network(e.path(), None, "link").unwrap_err() {
            DataError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
        let e = write_tmp("a\tb\tlink\t2\n");
        assert!(matches!(
            load_network(e.path(), None, "link"),
            Err(DataError::Malformed { line: 1, .. })
        ));
        let e = write_tmp("a\ta\tlink\t1\n");
        assert!(load_network(e.path(), None, "link").is_err());
    }

    #[test]
    fn feature_out_of_range() {
        let e = write_tmp("a\tb\tlink\t1\n");
        let f = write_tmp("a\tred\t1.5\n");
        assert!(matches!(
            load_network(e.path(), Some(f.path()), "link"),
            Err(DataError::FeatureRange { line: 1, .. })
        ));
    }

    #[test]
    fn missing_target() {
        let e = write_tmp("a\tb\tfriend\t1\n");
        assert!(matches!(
            load_network(e.path(), None, "link"),
            Err(DataError::MissingTarget(_))
        ));
    }

    #[test]
    fn undirected_emits_both_directions() {
        let e = write_tmp("a\tb\tlink\t1\n");
        let net = load_network_with(e.path(), None, "link", LoadOptions { undirected: true }).unwrap();
        assert!(net.y(0, 1) && net.y(1, 0));
    }

    fn ring(n: usize, links: &[Pair]) -> Network {
        let mut net = Network::new("link");
        for i in 0..n {
            net.add_node(&format!("n{i}"));
        }
        for &(p, q) in links {
            net.add_edge(p, q, "link", true);
        }
        net
    }

    #[test]
    fn stratified_arithmetic() {
        assert_eq!(stratified_counts(10, 90, 0.2), (2, 18));
        assert_eq!(stratified_counts(1, 5, 0.999), (0, 4));
    }

    #[test]
    fn stratified_split_on_graph() {
        // 10 nodes: 90 ordered pairs, 10 links, 80 non-links.
        let n = 10;
        let links: Vec<Pair> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let net = ring(n, &links);
        let split = holdout_split(&net, 0.2, 3).unwrap();
        let test_links = split.test.iter().filter(|&&(p, q)| net.y(p, q)).count();
        assert_eq!((test_links, split.test.len() - test_links), (2, 16));
        assert_eq!(split.train.len() + split.test.len(), 90);
    }

    #[test]
    fn split_is_deterministic() {
        let net = ring(6, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(holdout_split(&net, 0.3, 9).unwrap(), holdout_split(&net, 0.3, 9).unwrap());
    }

    #[test]
    fn zero_training_links_is_an_error() {
        // Exhaustive oracle: error iff links - floor(f * links) == 0.
        for n_links in 0..4usize {
            let links: Vec<Pair> = (0..n_links).map(|i| (i, i + 1)).collect();
            let net = ring(5, &links);
            for f in [0.1, 0.5, 0.9, 0.999] {
                let expect_err = n_links - (f * n_links as f64 + 1e-9).floor() as usize == 0;
                let got = holdout_split(&net, f, 1);
                assert_eq!(got.is_err(), expect_err, "links={n_links} f={f}");
            }
        }
        let net = ring(3, &[(0, 1)]);
        assert!(holdout_split(&net, 0.999, 0).is_ok());
        let net = ring(3, &[]);
        assert!(matches!(holdout_split(&net, 0.5, 0), Err(DataError::NoTrainingLinks)));
        assert!(matches!(holdout_split(&net, 1.0, 0), Err(DataError::BadFraction(_))));
    }

    #[test]
    fn link_rate_counts() {
        // 4-node fixture: 12 ordered pairs, 3 links.
        let net = ring(4, &[(0, 1), (1, 2), (2, 3)]);
        let split = Split::all_train(&net);
        assert_eq!(link_rate(&net, &split), 0.25);

        let full: Vec<Pair> = (0..3)
            .flat_map(|p| (0..3).filter(move |&q| q != p).map(move |q| (p, q)))
            .collect();
        let net = ring(3, &full);
        assert_eq!(link_rate(&net, &Split::all_train(&net)), 1.0);
    }

    #[test]
    fn link_rate_five_of_twenty() {
        // 5 nodes = 20 ordered pairs, 5 links.
        let net = ring(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        assert_eq!(link_rate(&net, &Split::all_train(&net)), 0.25);
    }

    #[test]
    fn heldout_target_reads_as_zero() {
        let net = ring(3, &[(0, 1)]);
        let split = Split::from_test(&net, vec![(0, 1)], 0).unwrap();
        let held = net.with_heldout(&split);
        assert_eq!(held.observed_relation("link", 0, 1), 0.0);
        assert_eq!(net.observed_relation("link", 0, 1), 1.0);
    }

    #[test]
    fn split_json_round_trip() {
        let net = ring(5, &[(0, 1), (1, 2), (3, 4)]);
        let split = holdout_split(&net, 0.4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        split.write_json(&net, &path).unwrap();
        assert_eq!(Split::read_json(&net, &path).unwrap(), split);
    }
}
