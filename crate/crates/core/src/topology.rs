//! The N-layer aggregation tree.
//!
//! Layer 0 holds the devices, layers `1..N-1` the edge servers and layer `N`
//! the single cloud server. Node ids are dense per-layer indices assigned in
//! construction order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology needs at least one aggregation layer above the devices")]
    TooFewLayers,
    #[error("layer {layer} is empty")]
    EmptyLayer { layer: usize },
    #[error("top layer must hold exactly one cloud server, found {found}")]
    NotSingleRoot { found: usize },
    #[error("node {index} in layer {layer} has no parent")]
    OrphanNode { layer: usize, index: usize },
    #[error("server {index} in layer {layer} has no children")]
    EmptyServer { layer: usize, index: usize },
    #[error("node {index} in layer {layer} points at layer {parent_layer}; parents must sit in the adjacent layer")]
    LayerSkip {
        layer: usize,
        index: usize,
        parent_layer: usize,
    },
    #[error("node {index} in layer {layer} points at missing parent {parent}")]
    InvalidParent {
        layer: usize,
        index: usize,
        parent: usize,
    },
    #[error("fan-out rule {fan_outs:?} does not match layer sizes {layer_sizes:?}")]
    FanOutMismatch {
        layer_sizes: Vec<usize>,
        fan_outs: Vec<usize>,
    },
    #[error("cannot remove {removed} layers from a {layers}-layer topology")]
    TooDeep { removed: usize, layers: usize },
    #[error("depth reduction needs a topology built from a uniform fan-out rule")]
    NotUniform,
}

/// Address of a node: its layer and its index within that layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

/// How children are attached to parents.
#[derive(Clone, Debug)]
pub enum ChildAssignment {
    /// `fan_outs[n]` children per node of layer `n + 1`, filled in order.
    FanOut(Vec<usize>),
    /// `parents[n][i]` is the parent of node `i` in layer `n`.
    Parents(Vec<Vec<NodeId>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    layer_sizes: Vec<usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<Vec<usize>>>,
    subtree: Vec<Vec<usize>>,
    fan_outs: Option<Vec<usize>>,
}

impl Topology {
    /// Validates an explicit tree description.
    pub fn build(
        layer_sizes: &[usize],
        assignment: ChildAssignment,
    ) -> Result<Self, TopologyError> {
        if layer_sizes.len() < 2 {
            return Err(TopologyError::TooFewLayers);
        }
        if let Some(layer) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(TopologyError::EmptyLayer { layer });
        }
        let top = *layer_sizes.last().unwrap();
        if top != 1 {
            return Err(TopologyError::NotSingleRoot { found: top });
        }
        let n_layers = layer_sizes.len() - 1;
        let (parents, fan_outs) = match assignment {
            ChildAssignment::FanOut(f) => {
                let consistent = f.len() == n_layers
                    && f.iter().all(|&k| k > 0)
                    && (0..n_layers).all(|n| layer_sizes[n] == layer_sizes[n + 1] * f[n]);
                if !consistent {
                    return Err(TopologyError::FanOutMismatch {
                        layer_sizes: layer_sizes.to_vec(),
                        fan_outs: f,
                    });
                }
                let parents = (0..n_layers)
                    .map(|n| (0..layer_sizes[n]).map(|i| i / f[n]).collect())
                    .collect();
                (parents, Some(f))
            }
            ChildAssignment::Parents(p) => {
                let mut parents = Vec::with_capacity(n_layers);
                for layer in 0..n_layers {
                    let given = p.get(layer).map(Vec::as_slice).unwrap_or(&[]);
                    if given.len() < layer_sizes[layer] {
                        return Err(TopologyError::OrphanNode {
                            layer,
                            index: given.len(),
                        });
                    }
                    let mut row = Vec::with_capacity(layer_sizes[layer]);
                    for (index, parent) in given.iter().take(layer_sizes[layer]).enumerate() {
                        if parent.layer != layer + 1 {
                            return Err(TopologyError::LayerSkip {
                                layer,
                                index,
                                parent_layer: parent.layer,
                            });
                        }
                        if parent.index >= layer_sizes[layer + 1] {
                            return Err(TopologyError::InvalidParent {
                                layer,
                                index,
                                parent: parent.index,
                            });
                        }
                        row.push(parent.index);
                    }
                    parents.push(row);
                }
                (parents, None)
            }
        };
        Self::from_parents(layer_sizes.to_vec(), parents, fan_outs)
    }

    /// Uniform tree: `fan_outs[0]` devices per layer-1 server, `fan_outs[n]`
    /// layer-`n` nodes per layer-`n+1` node.
    pub fn uniform(fan_outs: &[usize]) -> Result<Self, TopologyError> {
        if fan_outs.is_empty() {
            return Err(TopologyError::TooFewLayers);
        }
        let mut sizes = vec![1usize];
        for &f in fan_outs.iter().rev() {
            sizes.push(sizes.last().unwrap() * f);
        }
        sizes.reverse();
        Self::build(&sizes, ChildAssignment::FanOut(fan_outs.to_vec()))
    }

    /// Tree given by parent indices into the next layer up.
    pub fn from_parent_indices(
        layer_sizes: &[usize],
        parents: &[Vec<usize>],
    ) -> Result<Self, TopologyError> {
        let p = parents
            .iter()
            .enumerate()
            .map(|(layer, row)| row.iter().map(|&i| NodeId::new(layer + 1, i)).collect())
            .collect();
        Self::build(layer_sizes, ChildAssignment::Parents(p))
    }

    fn from_parents(
        layer_sizes: Vec<usize>,
        parents: Vec<Vec<usize>>,
        fan_outs: Option<Vec<usize>>,
    ) -> Result<Self, TopologyError> {
        let n_layers = layer_sizes.len() - 1;
        let mut children: Vec<Vec<Vec<usize>>> = vec![Vec::new()];
        for layer in 1..=n_layers {
            let mut c = vec![Vec::new(); layer_sizes[layer]];
            for (i, &p) in parents[layer - 1].iter().enumerate() {
                c[p].push(i);
            }
            if let Some(index) = c.iter().position(Vec::is_empty) {
                return Err(TopologyError::EmptyServer { layer, index });
            }
            children.push(c);
        }
        let mut subtree = vec![vec![1usize; layer_sizes[0]]];
        for layer in 1..=n_layers {
            let below = &subtree[layer - 1];
            let row = children[layer]
                .iter()
                .map(|kids| kids.iter().map(|&k| below[k]).sum())
                .collect();
            subtree.push(row);
        }
        Ok(Self {
            layer_sizes,
            parents,
            children,
            subtree,
            fan_outs,
        })
    }

    /// Number of aggregation layers `N`.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `N_tot`.
    pub fn num_devices(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layer_size(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn fan_outs(&self) -> Option<&[usize]> {
        self.fan_outs.as_deref()
    }

    /// Parent of a non-cloud node.
    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        (node.layer < self.num_layers())
            .then(|| NodeId::new(node.layer + 1, self.parents[node.layer][node.index]))
    }

    /// Parent indices of layer `layer` (which must be below the cloud).
    pub fn parent_indices(&self, layer: usize) -> &[usize] {
        &self.parents[layer]
    }

    /// Children (indices in `layer - 1`) of a server.
    pub fn children(&self, node: NodeId) -> &[usize] {
        assert!(node.layer >= 1, "devices have no children");
        &self.children[node.layer][node.index]
    }

    /// Number of devices below `node` (1 for a device).
    pub fn subtree_devices(&self, node: NodeId) -> usize {
        self.subtree[node.layer][node.index]
    }

    pub fn subtree_counts(&self, layer: usize) -> &[usize] {
        &self.subtree[layer]
    }

    /// Device indices under `node`, in order.
    pub fn devices_under(&self, node: NodeId) -> Vec<usize> {
        let mut frontier = vec![node.index];
        for layer in (1..=node.layer).rev() {
            frontier = frontier
                .iter()
                .flat_map(|&i| self.children[layer][i].iter().copied())
                .collect();
        }
        frontier
    }

    /// `(C_1, ..., C_{N-1}, N_tot)`.
    pub fn layer_counts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.layer_sizes[1..self.num_layers()].to_vec();
        v.push(self.num_devices());
        v
    }

    /// Server counts `C_1..C_{N-1}` only.
    pub fn server_counts(&self) -> &[usize] {
        &self.layer_sizes[1..self.num_layers()]
    }

    /// Removes the lowest `k` edge layers and attaches the orphaned children
    /// directly to the next surviving layer.
    pub fn reduce_depth(&self, k: usize) -> Result<Self, TopologyError> {
        if k >= self.num_layers() {
            return Err(TopologyError::TooDeep {
                removed: k,
                layers: self.num_layers(),
            });
        }
        let f = self.fan_outs.as_ref().ok_or(TopologyError::NotUniform)?;
        let mut reduced = vec![f[..=k].iter().product()];
        reduced.extend_from_slice(&f[k + 1..]);
        Self::uniform(&reduced)
    }
}

/// File form of a topology: layer sizes plus, per non-cloud layer, the
/// parent index of every node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub layer_sizes: Vec<usize>,
    pub parents: Vec<Vec<usize>>,
}

impl TopologyDoc {
    pub fn from_topology(t: &Topology) -> Self {
        Self {
            layer_sizes: t.layer_sizes.clone(),
            parents: t.parents.clone(),
        }
    }

    pub fn to_topology(&self) -> Result<Topology, TopologyError> {
        Topology::from_parent_indices(&self.layer_sizes, &self.parents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A ragged 3-layer tree with 11 devices.
    fn ragged_tree() -> Topology {
        let sizes = [11, 4, 2, 1];
        let devices = vec![0, 0, 0, 1, 2, 2, 3, 3, 3, 3, 3];
        let layer1 = vec![0, 0, 1, 1];
        let layer2 = vec![0, 0];
        Topology::from_parent_indices(&sizes, &[devices, layer1, layer2]).unwrap()
    }

    #[test]
    fn ragged_tree_subtree_counts() {
        let t = ragged_tree();
        assert_eq!(t.subtree_counts(1), &[3, 1, 2, 5]);
        assert_eq!(t.subtree_counts(2), &[4, 7]);
        assert_eq!(t.subtree_counts(3), &[11]);
        assert_eq!(t.layer_counts(), vec![4, 2, 11]);
    }

    #[test]
    fn single_device_chain() {
        let t = Topology::uniform(&[1]).unwrap();
        assert_eq!(t.num_layers(), 1);
        assert_eq!(t.subtree_devices(NodeId::new(1, 0)), 1);
        assert_eq!(t.layer_counts(), vec![1]);
        let t = Topology::uniform(&[1, 1, 1]).unwrap();
        assert_eq!(t.layer_counts(), vec![1, 1, 1]);
    }

    #[test]
    fn six_layer_baseline() {
        let t = Topology::uniform(&[3, 2, 2, 2, 2, 2]).unwrap();
        assert_eq!(t.layer_sizes(), &[96, 32, 16, 8, 4, 2, 1]);
        assert!(t.subtree_counts(1).iter().all(|&c| c == 3));
        assert!(t.subtree_counts(5).iter().all(|&c| c == 48));
        assert_eq!(t.subtree_counts(5).iter().sum::<usize>(), 96);
        assert_eq!(t.layer_counts(), vec![32, 16, 8, 4, 2, 96]);
    }

    #[test]
    fn reduced_depth_setups() {
        let t = Topology::uniform(&[3, 2, 2, 2, 2, 2]).unwrap();
        let four = t.reduce_depth(2).unwrap();
        assert_eq!(four.num_layers(), 4);
        assert!(four.subtree_counts(1).iter().all(|&c| c == 12));
        let one = t.reduce_depth(5).unwrap();
        assert_eq!(one.num_layers(), 1);
        assert_eq!(one.children(NodeId::new(1, 0)).len(), 96);
        assert_eq!(t.reduce_depth(0).unwrap(), t);
        assert_eq!(
            t.reduce_depth(6),
            Err(TopologyError::TooDeep {
                removed: 6,
                layers: 6
            })
        );
    }

    #[test]
    fn reduce_depth_needs_uniform() {
        assert_eq!(
            ragged_tree().reduce_depth(1),
            Err(TopologyError::NotUniform)
        );
    }

    #[test]
    fn rejects_malformed_trees() {
        // device 1 lacks a parent entry
        let err = Topology::from_parent_indices(&[2, 1], &[vec![0]]).unwrap_err();
        assert_eq!(err, TopologyError::OrphanNode { layer: 0, index: 1 });
        // server 1 in layer 1 has no children
        let err = Topology::from_parent_indices(&[2, 2, 1], &[vec![0, 0], vec![0, 0]]).unwrap_err();
        assert_eq!(err, TopologyError::EmptyServer { layer: 1, index: 1 });
        // device points straight at the cloud over an edge layer
        let parents = vec![
            vec![NodeId::new(2, 0), NodeId::new(1, 0)],
            vec![NodeId::new(2, 0)],
        ];
        let err = Topology::build(&[2, 1, 1], ChildAssignment::Parents(parents)).unwrap_err();
        assert_eq!(
            err,
            TopologyError::LayerSkip {
                layer: 0,
                index: 0,
                parent_layer: 2
            }
        );
        // a forest
        let err = Topology::from_parent_indices(&[2, 2], &[vec![0, 1]]).unwrap_err();
        assert_eq!(err, TopologyError::NotSingleRoot { found: 2 });
        let err = Topology::from_parent_indices(&[2, 1], &[vec![0, 3]]).unwrap_err();
        assert_eq!(
            err,
            TopologyError::InvalidParent {
                layer: 0,
                index: 1,
                parent: 3
            }
        );
    }

    #[test]
    fn devices_under_follow_tree() {
        let t = ragged_tree();
        assert_eq!(
            t.devices_under(NodeId::new(2, 1)),
            vec![4, 5, 6, 7, 8, 9, 10]
        );
        assert_eq!(t.devices_under(NodeId::new(0, 3)), vec![3]);
    }

    #[test]
    fn doc_round_trip() {
        let t = ragged_tree();
        let doc = TopologyDoc::from_topology(&t);
        let json = serde_json::to_string(&doc).unwrap();
        let back: TopologyDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(
            back.to_topology().unwrap().subtree_counts(1),
            t.subtree_counts(1)
        );
    }
}
