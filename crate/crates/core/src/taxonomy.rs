//! Rooted class trees.
//!
//! The root itself is not a class. Its children sit at level 0, and every
//! other node is one level below its parent. The set of classes `V` (one
//! hyperplane each) is every non-root node, in insertion order; that order
//! is the column order of score volumes and never changes when the tree
//! grows. Background is not a node: it is the reserved label [`BACKGROUND`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

/// Label value for pixels that belong to no class of the current label space.
pub const BACKGROUND: NodeId = u32::MAX;
/// Label value for pixels excluded from every loss term.
pub const IGNORE: NodeId = u32::MAX - 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
}

impl NodeRecord {
    pub fn new(id: NodeId, name: impl Into<String>, parent: Option<NodeId>) -> Self {
        Self { id, name: name.into(), parent }
    }
}

/// On-disk taxonomy document: `{"nodes":[{"id":..,"name":..,"parent":..}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyDoc {
    pub nodes: Vec<NodeRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    records: Vec<NodeRecord>,
    root: NodeId,
    position: HashMap<NodeId, usize>,
    children: HashMap<NodeId, Vec<NodeId>>,
    classes: Vec<NodeId>,
    class_index: HashMap<NodeId, usize>,
    depth: HashMap<NodeId, usize>,
    ancestors: HashMap<NodeId, Vec<NodeId>>,
    descendants: HashMap<NodeId, Vec<NodeId>>,
}

impl Taxonomy {
    /// Validates a document and computes closures. Records are ordered by id.
    pub fn load(doc: &TaxonomyDoc) -> Result<Self> {
        let mut records = doc.nodes.clone();
        records.sort_by_key(|r| r.id);
        Self::build(records)
    }

    /// Like [`Taxonomy::load`] but keeps the document's record order, so a
    /// grown taxonomy written by [`Taxonomy::to_doc`] gets its columns back.
    pub fn load_in_order(doc: &TaxonomyDoc) -> Result<Self> {
        Self::build(doc.nodes.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaxonomyDoc = serde_json::from_str(text)?;
        Self::load(&doc)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_doc(&self) -> TaxonomyDoc {
        TaxonomyDoc { nodes: self.records.clone() }
    }

    fn build(records: Vec<NodeRecord>) -> Result<Self> {
        let mut position = HashMap::new();
        let mut names = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.id >= IGNORE {
                return Err(Error::Config(format!("node id {} is reserved", r.id)));
            }
            if position.insert(r.id, i).is_some() {
                return Err(Error::DuplicateId(r.id));
            }
            if !names.insert(r.name.as_str()) {
                return Err(Error::DuplicateName(r.name.clone()));
            }
        }
        for r in &records {
            if let Some(p) = r.parent {
                if !position.contains_key(&p) {
                    return Err(Error::OrphanNode { node: r.id, parent: p });
                }
            }
        }
        // walk up from every node; a walk longer than the node count loops
        for r in &records {
            let mut cur = r.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if p == r.id || steps > records.len() {
                    return Err(Error::CycleDetected(r.id));
                }
                cur = records[position[&p]].parent;
            }
        }
        let roots: Vec<NodeId> =
            records.iter().filter(|r| r.parent.is_none()).map(|r| r.id).collect();
        if roots.len() != 1 {
            return Err(Error::MultipleRoots(roots.len()));
        }
        let root = roots[0];

        let mut children: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for r in &records {
            children.entry(r.id).or_default();
            if let Some(p) = r.parent {
                children.entry(p).or_default().push(r.id);
            }
        }
        let classes: Vec<NodeId> =
            records.iter().filter(|r| r.id != root).map(|r| r.id).collect();
        let class_index = classes.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let mut depth = HashMap::new();
        let mut ancestors = HashMap::new();
        for &v in &classes {
            let mut chain = vec![v];
            let mut cur = records[position[&v]].parent;
            while let Some(p) = cur {
                if p == root {
                    break;
                }
                chain.push(p);
                cur = records[position[&p]].parent;
            }
            depth.insert(v, chain.len() - 1);
            ancestors.insert(v, chain);
        }
        let mut descendants: HashMap<NodeId, Vec<NodeId>> =
            classes.iter().map(|&v| (v, Vec::new())).collect();
        for &v in &classes {
            for a in &ancestors[&v] {
                descendants.get_mut(a).expect("ancestor is a class").push(v);
            }
        }
        for d in descendants.values_mut() {
            d.sort_unstable();
        }

        Ok(Self {
            records,
            root,
            position,
            children,
            classes,
            class_index,
            depth,
            ancestors,
            descendants,
        })
    }

    /// Appends new nodes. Existing nodes keep their column positions.
    pub fn grow(&self, increment: &[NodeRecord]) -> Result<Self> {
        if increment.is_empty() {
            return Ok(self.clone());
        }
        let mut known: BTreeSet<NodeId> = self.records.iter().map(|r| r.id).collect();
        let mut names: BTreeSet<&str> = self.records.iter().map(|r| r.name.as_str()).collect();
        for r in increment {
            match r.parent {
                Some(p) if known.contains(&p) => {}
                Some(p) => return Err(Error::UnknownParent(p)),
                None => return Err(Error::MultipleRoots(2)),
            }
            if !known.insert(r.id) {
                return Err(Error::DuplicateId(r.id));
            }
            if !names.insert(r.name.as_str()) {
                return Err(Error::DuplicateName(r.name.clone()));
            }
        }
        let mut records = self.records.clone();
        records.extend(increment.iter().cloned());
        Self::build(records)
    }

    /// The sub-tree spanned by `keep` and all their ancestors, in this tree's order.
    pub fn restrict(&self, keep: &BTreeSet<NodeId>) -> Result<Self> {
        let mut wanted = BTreeSet::new();
        wanted.insert(self.root);
        for &k in keep {
            wanted.extend(self.ancestors(k)?.iter().copied());
        }
        let records = self.records.iter().filter(|r| wanted.contains(&r.id)).cloned().collect();
        Self::build(records)
    }

    /// Same leaves, all attached directly to the root.
    pub fn flattened(&self) -> Self {
        let mut records = vec![self.records[self.position[&self.root]].clone()];
        for r in &self.records {
            if r.id != self.root && self.is_leaf(r.id) {
                records.push(NodeRecord::new(r.id, r.name.clone(), Some(self.root)));
            }
        }
        Self::build(records).expect("flattening preserves validity")
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn records(&self) -> &[NodeRecord] {
        &self.records
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.position.contains_key(&id)
    }

    /// Class nodes in column order.
    pub fn classes(&self) -> &[NodeId] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, id: NodeId) -> Option<usize> {
        self.class_index.get(&id).copied()
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.position.get(&id).map(|&i| self.records[i].name.as_str())
    }

    pub fn id_by_name(&self, name: &str) -> Option<NodeId> {
        self.records.iter().find(|r| r.name == name).map(|r| r.id)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.position.get(&id).and_then(|&i| self.records[i].parent)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn root_children(&self) -> &[NodeId] {
        self.children(self.root)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children(id).is_empty()
    }

    /// Level index; root children are level 0.
    pub fn depth(&self, id: NodeId) -> Result<usize> {
        self.depth.get(&id).copied().ok_or(Error::UnknownNode(id))
    }

    /// Number of class levels (`max depth + 1`), 0 for an empty tree.
    pub fn num_levels(&self) -> usize {
        self.depth.values().map(|d| d + 1).max().unwrap_or(0)
    }

    /// Ancestor-or-self chain, starting at `id` and ending at a root child.
    pub fn ancestors(&self, id: NodeId) -> Result<&[NodeId]> {
        self.ancestors.get(&id).map(Vec::as_slice).ok_or(Error::UnknownNode(id))
    }

    /// Descendant-or-self set sorted by id.
    pub fn descendants(&self, id: NodeId) -> Result<&[NodeId]> {
        self.descendants.get(&id).map(Vec::as_slice).ok_or(Error::UnknownNode(id))
    }

    /// Current leaves in column order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.classes.iter().copied().filter(|&v| self.is_leaf(v)).collect()
    }

    /// The level-0 ancestor of `id`.
    pub fn top_ancestor(&self, id: NodeId) -> Result<NodeId> {
        Ok(*self.ancestors(id)?.last().expect("chain contains self"))
    }

    /// Binary target over `V`: `1` exactly on the ancestor-or-self set of `label`.
    pub fn node_targets(&self, label: NodeId) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.classes.len()];
        if label == BACKGROUND {
            return Ok(out);
        }
        for a in self.ancestors(label)? {
            out[self.class_index[a]] = 1.0;
        }
        Ok(out)
    }

    /// Ancestor-or-self and descendant-or-self closures in column-index space,
    /// each sorted by node id.
    pub fn index_closures(&self) -> Closures {
        let to_idx = |ids: &[NodeId]| {
            let mut v: Vec<(NodeId, usize)> =
                ids.iter().map(|id| (*id, self.class_index[id])).collect();
            v.sort_unstable();
            v.into_iter().map(|(_, i)| i).collect::<Vec<_>>()
        };
        Closures {
            ancestors: self.classes.iter().map(|v| to_idx(&self.ancestors[v])).collect(),
            descendants: self.classes.iter().map(|v| to_idx(&self.descendants[v])).collect(),
        }
    }

    /// Names keyed by id, for reports.
    pub fn names(&self) -> BTreeMap<NodeId, String> {
        self.records.iter().map(|r| (r.id, r.name.clone())).collect()
    }
}

/// Per-column closure lists used by the aggregation operators.
#[derive(Clone, Debug, PartialEq)]
pub struct Closures {
    pub ancestors: Vec<Vec<usize>>,
    pub descendants: Vec<Vec<usize>>,
}
