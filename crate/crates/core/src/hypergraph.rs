//! Local hypergraphs: one per start token, built from a tag sequence.
//!
//! A virtual B-node anchors the graph. Each tag adds the nodes of one time
//! step: `I` adds an I-node, `E(c)` adds an I-node and an E(c)-node at the
//! same position, and `O` adds a single O-node and ends the graph. Every
//! new node is linked to every node of the previous step. A path from B to
//! an E(c)-node through I-nodes only marks the span from the start token to
//! the E-node's position as an entity of class `c`.

use std::collections::BTreeSet;
use std::fmt;

use crate::corpus::Entity;
use crate::error::{Error, Result};

/// One emitted tag. The B-node is never emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    I,
    O,
    E(usize),
}

impl Tag {
    /// Number of tags for `n_classes` entity classes.
    pub fn alphabet_size(n_classes: usize) -> usize {
        n_classes + 2
    }

    /// Dense index: O = 0, I = 1, E(c) = 2 + c.
    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::I => 1,
            Tag::E(c) => 2 + c,
        }
    }

    pub fn from_index(index: usize, n_classes: usize) -> Result<Tag> {
        match index {
            0 => Ok(Tag::O),
            1 => Ok(Tag::I),
            i if i < n_classes + 2 => Ok(Tag::E(i - 2)),
            i => Err(Error::Tags(format!(
                "tag index {i} outside a {}-tag alphabet",
                n_classes + 2
            ))),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::I => write!(f, "I"),
            Tag::O => write!(f, "O"),
            Tag::E(c) => write!(f, "E{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    B,
    I,
    O,
    E(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Virtual,
    Token(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    /// Time step; the B-node is step 0.
    pub step: usize,
    pub position: Position,
    pub node_type: NodeType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalHypergraph {
    pub start: usize,
    /// Nodes in creation order.
    pub nodes: Vec<Node>,
    /// `(from, to)` indices into `nodes`.
    pub edges: BTreeSet<(usize, usize)>,
}

impl LocalHypergraph {
    /// Number of time steps after the B-node.
    pub fn steps(&self) -> usize {
        self.nodes.iter().map(|n| n.step).max().unwrap_or(0)
    }

    /// Node indices at time step `step`, in creation order.
    pub fn step_nodes(&self, step: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].step == step)
            .collect()
    }
}

/// Builds the hypergraph of `tags` for the query token `start`.
pub fn build_hypergraph(start: usize, tags: &[Tag]) -> Result<LocalHypergraph> {
    if tags.is_empty() {
        return Err(Error::Tags("empty tag sequence".into()));
    }
    if let Some(i) = tags[..tags.len() - 1].iter().position(|t| *t == Tag::O) {
        return Err(Error::Tags(format!(
            "O at step {} of {} is not last",
            i + 1,
            tags.len()
        )));
    }
    let mut nodes = vec![Node {
        step: 0,
        position: Position::Virtual,
        node_type: NodeType::B,
    }];
    let mut edges = BTreeSet::new();
    let mut prev = vec![0usize];
    for (j, tag) in tags.iter().enumerate() {
        let step = j + 1;
        let position = Position::Token(start + j);
        let types: &[NodeType] = match *tag {
            Tag::I => &[NodeType::I],
            Tag::O => &[NodeType::O],
            Tag::E(c) => &[NodeType::I, NodeType::E(c)],
        };
        let mut current = Vec::with_capacity(types.len());
        for &node_type in types {
            let id = nodes.len();
            nodes.push(Node {
                step,
                position,
                node_type,
            });
            edges.extend(prev.iter().map(|&p| (p, id)));
            current.push(id);
        }
        prev = current;
    }
    Ok(LocalHypergraph {
        start,
        nodes,
        edges,
    })
}

/// Entities read off the E-nodes: `(start, position, c)` for each E(c).
pub fn extract_entities(hg: &LocalHypergraph) -> BTreeSet<Entity> {
    hg.nodes
        .iter()
        .filter_map(|n| match (n.node_type, n.position) {
            (NodeType::E(c), Position::Token(p)) => Some(Entity::new(hg.start, p, c)),
            _ => None,
        })
        .collect()
}

/// Entities read off literal paths B → I … I → E(c).
pub fn extract_entities_by_paths(hg: &LocalHypergraph) -> BTreeSet<Entity> {
    let mut out = BTreeSet::new();
    let Some(b) = hg.nodes.iter().position(|n| n.node_type == NodeType::B) else {
        return out;
    };
    let mut frontier = vec![b];
    let mut seen = BTreeSet::new();
    while let Some(u) = frontier.pop() {
        if !seen.insert(u) {
            continue;
        }
        for &(_, v) in hg.edges.range((u, 0)..=(u, usize::MAX)) {
            let node = hg.nodes[v];
            match (node.node_type, node.position) {
                (NodeType::E(c), Position::Token(p)) => {
                    out.insert(Entity::new(hg.start, p, c));
                }
                (NodeType::I, _) => frontier.push(v),
                _ => {}
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTags {
    pub tags: Vec<Tag>,
    /// Positions where several classes end; only the smallest class id is
    /// encoded.
    pub conflicts: Vec<usize>,
}

/// Tag sequence whose hypergraph yields `entities`, all starting at `start`.
///
/// The sequence covers `start..=M` for the largest end `M`, then one `O` if
/// a token follows `M`. Without entities it is `[O]`.
pub fn gold_tag_sequence<'a>(
    entities: impl IntoIterator<Item = &'a Entity>,
    start: usize,
    sentence_len: usize,
) -> Result<GoldTags> {
    let mut ends: BTreeSet<(usize, usize)> = BTreeSet::new();
    for e in entities {
        if e.start != start {
            return Err(Error::Tags(format!(
                "entity {e:?} does not start at {start}"
            )));
        }
        if e.end < e.start || e.end >= sentence_len {
            return Err(Error::EntityRange {
                start: e.start,
                end: e.end,
                len: sentence_len,
            });
        }
        ends.insert((e.end, e.class_id));
    }
    let Some(&(max_end, _)) = ends.iter().next_back() else {
        return Ok(GoldTags {
            tags: vec![Tag::O],
            conflicts: Vec::new(),
        });
    };
    let mut tags = vec![Tag::I; max_end - start + 1];
    let mut conflicts = Vec::new();
    for &(end, class) in &ends {
        let slot = &mut tags[end - start];
        match *slot {
            Tag::I => *slot = Tag::E(class),
            _ => {
                if conflicts.last() != Some(&end) {
                    conflicts.push(end);
                }
            }
        }
    }
    if max_end + 1 < sentence_len {
        tags.push(Tag::O);
    }
    Ok(GoldTags { tags, conflicts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    /// A node type outside {B, I, O, E(c)} at its step, or a step whose node
    /// set is not {I}, {I, E(c)} or {O}.
    StepNodeSet,
    /// Not exactly one B-node, or the B-node is not virtual at step 0.
    SingleVirtualB,
    /// A non-B node with a virtual position or a position other than
    /// `start + step − 1`.
    Position,
    /// More than one O-node, or a node after the O-node.
    OLast,
    /// A node lacks an edge from some node of the previous step, or an edge
    /// joins nodes that are not in consecutive steps.
    FullEdges,
    /// Steps are not numbered contiguously from 1.
    StepOrder,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Rule::StepNodeSet => "step-node-set",
            Rule::SingleVirtualB => "single-virtual-b",
            Rule::Position => "position",
            Rule::OLast => "o-last",
            Rule::FullEdges => "full-edges",
            Rule::StepOrder => "step-order",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    /// Offending node index, when one can be named.
    pub node: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{} violation at node {n}: {}", self.rule, self.message),
            None => write!(f, "{} violation: {}", self.rule, self.message),
        }
    }
}

/// Every structural rule the graph breaks; empty for a well-formed graph.
pub fn validate(hg: &LocalHypergraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |rule, node, message: String| {
        out.push(Violation {
            rule,
            node,
            message,
        })
    };

    let bs: Vec<usize> = (0..hg.nodes.len())
        .filter(|&i| hg.nodes[i].node_type == NodeType::B)
        .collect();
    if bs.len() != 1 {
        flag(
            Rule::SingleVirtualB,
            bs.get(1).copied(),
            format!("{} B-nodes", bs.len()),
        );
    }
    for &b in &bs {
        let n = hg.nodes[b];
        if n.position != Position::Virtual || n.step != 0 {
            flag(
                Rule::SingleVirtualB,
                Some(b),
                "B-node must be virtual at step 0".into(),
            );
        }
    }

    for (i, n) in hg.nodes.iter().enumerate() {
        if n.node_type == NodeType::B {
            continue;
        }
        if n.step == 0 {
            flag(
                Rule::StepOrder,
                Some(i),
                "only the B-node may sit at step 0".into(),
            );
            continue;
        }
        let want = Position::Token(hg.start + n.step - 1);
        if n.position != want {
            flag(
                Rule::Position,
                Some(i),
                format!("at {:?}, expected {want:?}", n.position),
            );
        }
    }

    let last = hg.steps();
    let mut o_step = None;
    for step in 1..=last {
        let ids = hg.step_nodes(step);
        if ids.is_empty() {
            flag(Rule::StepOrder, None, format!("step {step} has no nodes"));
            continue;
        }
        let types: Vec<NodeType> = ids.iter().map(|&i| hg.nodes[i].node_type).collect();
        if let Some(os) = o_step {
            flag(
                Rule::OLast,
                Some(ids[0]),
                format!("node at step {step} follows the O-node at step {os}"),
            );
        }
        let legal = match types.as_slice() {
            [NodeType::I] | [NodeType::O] => true,
            [a, b] => matches!(
                (a, b),
                (NodeType::I, NodeType::E(_)) | (NodeType::E(_), NodeType::I)
            ),
            _ => false,
        };
        if !legal {
            flag(
                Rule::StepNodeSet,
                Some(ids[0]),
                format!("step {step} holds {types:?}"),
            );
        }
        for &i in &ids {
            if hg.nodes[i].node_type == NodeType::O {
                if o_step.is_some() {
                    flag(Rule::OLast, Some(i), "second O-node".into());
                }
                o_step.get_or_insert(step);
            }
        }
        let prev = hg.step_nodes(step - 1);
        for &i in &ids {
            for &p in &prev {
                if !hg.edges.contains(&(p, i)) {
                    flag(Rule::FullEdges, Some(i), format!("no edge from node {p}"));
                }
            }
        }
    }

    for &(a, b) in &hg.edges {
        let ok =
            a < hg.nodes.len() && b < hg.nodes.len() && hg.nodes[b].step == hg.nodes[a].step + 1;
        if !ok {
            flag(
                Rule::FullEdges,
                Some(b.min(hg.nodes.len())),
                format!("edge {a}->{b} skips or reverses a step"),
            );
        }
    }
    out
}

fn node_label(n: &Node, class_names: &[String]) -> String {
    let kind = match n.node_type {
        NodeType::B => "B".to_string(),
        NodeType::I => "I".to_string(),
        NodeType::O => "O".to_string(),
        NodeType::E(c) => match class_names.get(c) {
            Some(name) => format!("E-{name}"),
            None => format!("E{c}"),
        },
    };
    match n.position {
        Position::Virtual => kind,
        Position::Token(p) => format!("{kind}@{p}"),
    }
}

/// One line per time step after the B-node:
/// `position<TAB>nodes<TAB>edges from the previous step`.
pub fn dump(hg: &LocalHypergraph, class_names: &[String]) -> String {
    let mut out = String::new();
    for step in 1..=hg.steps() {
        let ids = hg.step_nodes(step);
        let position = match hg.nodes[ids[0]].position {
            Position::Token(p) => p.to_string(),
            Position::Virtual => "-".into(),
        };
        let nodes: Vec<String> = ids
            .iter()
            .map(|&i| node_label(&hg.nodes[i], class_names))
            .collect();
        let edges: Vec<String> = hg
            .edges
            .iter()
            .filter(|(_, b)| ids.contains(b))
            .map(|&(a, b)| {
                format!(
                    "{}->{}",
                    node_label(&hg.nodes[a], class_names),
                    node_label(&hg.nodes[b], class_names)
                )
            })
            .collect();
        out.push_str(&format!(
            "{position}\t{}\t{}\n",
            nodes.join(","),
            edges.join(",")
        ));
    }
    out
}
