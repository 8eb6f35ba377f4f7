use std::collections::BTreeMap;

use crate::captioner::data::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<usize, usize>,
    /// Label ending here, reached through an EOS edge.
    label: Option<usize>,
}

/// Prefix tree over tokenized labels, each terminated by EOS so that a label
/// that is a prefix of another ("car" / "carpet") still has its own leaf.
#[derive(Debug, Clone)]
pub struct LabelTrie {
    nodes: Vec<Node>,
}

pub type NodeId = usize;

impl LabelTrie {
    pub fn new(labels: &[Vec<usize>]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("label trie needs at least one label".into()));
        }
        let mut nodes = vec![Node::default()];
        for (label, tokens) in labels.iter().enumerate() {
            if tokens.contains(&EOS) {
                return Err(Error::InvalidArgument(format!("label {label} contains the EOS token")));
            }
            let mut cur = 0;
            for &t in tokens.iter().chain(std::iter::once(&EOS)) {
                cur = match nodes[cur].children.get(&t) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(t, next);
                        next
                    }
                };
            }
            if let Some(prev) = nodes[cur].label {
                return Err(Error::InvalidArgument(format!("labels {prev} and {label} have the same tokens")));
            }
            nodes[cur].label = Some(label);
        }
        Ok(Self { nodes })
    }

    pub fn root(&self) -> NodeId {
        0
    }

    /// Tokens allowed after reaching `node`, ascending.
    pub fn valid_next(&self, node: NodeId) -> Vec<usize> {
        self.nodes[node].children.keys().copied().collect()
    }

    pub fn child(&self, node: NodeId, token: usize) -> Option<NodeId> {
        self.nodes[node].children.get(&token).copied()
    }

    /// Label id if `node` is a leaf (the target of an EOS edge).
    pub fn label(&self, node: NodeId) -> Option<usize> {
        self.nodes[node].label
    }

    /// Node reached by following `tokens` from the root.
    pub fn walk(&self, tokens: &[usize]) -> Option<NodeId> {
        tokens.iter().try_fold(self.root(), |n, &t| self.child(n, t))
    }
}
