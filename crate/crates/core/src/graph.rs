//! Electrical and communication graphs.
//!
//! The electrical network is two graphs over the same bus set: lines between
//! buses (`B_e`, one `-1`/`+1` pair per column) and generator connectors
//! (`B_e^G`, one `+1` per column). The communication network is a weighted
//! undirected graph over the generators.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("line {line} endpoint bus {bus} does not exist (graph has {n_buses} buses)")]
    DanglingLine { line: usize, bus: usize, n_buses: usize },
    #[error("line {line} connects bus {bus} to itself")]
    SelfLoop { line: usize, bus: usize },
    #[error("generator {gen} attaches to bus {bus}, which does not exist (graph has {n_buses} buses)")]
    DanglingGenerator { gen: usize, bus: usize, n_buses: usize },
    #[error("communication weight matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("communication weight a[{i}][{j}] = {value} is negative or not finite")]
    InvalidWeight { i: usize, j: usize, value: f64 },
    #[error("communication weights are asymmetric: a[{i}][{j}] = {a_ij} but a[{j}][{i}] = {a_ji}")]
    Asymmetric { i: usize, j: usize, a_ij: f64, a_ji: f64 },
    #[error("communication weight a[{i}][{i}] = {value} on the diagonal must be zero")]
    NonZeroDiagonal { i: usize, value: f64 },
    #[error("communication link ({i}, {j}) references a node outside 0..{n_nodes}")]
    LinkOutOfRange { i: usize, j: usize, n_nodes: usize },
}

/// Bus/line/generator topology of the electrical network.
///
/// Indices are zero-based. Line `j` is oriented `from -> to`: its incidence
/// column carries `-1` at `from` and `+1` at `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalGraph {
    n_buses: usize,
    lines: Vec<(usize, usize)>,
    gen_bus: Vec<usize>,
}

impl ElectricalGraph {
    pub fn new(
        n_buses: usize,
        lines: Vec<(usize, usize)>,
        gen_bus: Vec<usize>,
    ) -> Result<Self, GraphError> {
        for (line, &(from, to)) in lines.iter().enumerate() {
            for bus in [from, to] {
                if bus >= n_buses {
                    return Err(GraphError::DanglingLine { line, bus, n_buses });
                }
            }
            if from == to {
                return Err(GraphError::SelfLoop { line, bus: from });
            }
        }
        for (gen, &bus) in gen_bus.iter().enumerate() {
            if bus >= n_buses {
                return Err(GraphError::DanglingGenerator { gen, bus, n_buses });
            }
        }
        Ok(Self { n_buses, lines, gen_bus })
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_gens(&self) -> usize {
        self.gen_bus.len()
    }

    /// `(from, to)` per line.
    pub fn line_endpoints(&self) -> &[(usize, usize)] {
        &self.lines
    }

    /// Attachment bus per generator.
    pub fn gen_bus(&self) -> &[usize] {
        &self.gen_bus
    }

    /// Returns `(B_e, B_e^G)` as dense sign matrices of shape
    /// `n_buses x n_lines` and `n_buses x n_gens`.
    pub fn incidence_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut b_lines = DMatrix::zeros(self.n_buses, self.lines.len());
        for (j, &(from, to)) in self.lines.iter().enumerate() {
            b_lines[(from, j)] = -1.0;
            b_lines[(to, j)] = 1.0;
        }
        let mut b_gens = DMatrix::zeros(self.n_buses, self.gen_bus.len());
        for (i, &bus) in self.gen_bus.iter().enumerate() {
            b_gens[(bus, i)] = 1.0;
        }
        (b_lines, b_gens)
    }
}

/// Weighted undirected communication graph between generators.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    weights: DMatrix<f64>,
}

impl CommGraph {
    /// Validates symmetry, nonnegativity and a zero diagonal.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self, GraphError> {
        let (rows, cols) = weights.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            for j in 0..cols {
                let a = weights[(i, j)];
                if !a.is_finite() || a < 0.0 {
                    return Err(GraphError::InvalidWeight { i, j, value: a });
                }
                if i == j && a != 0.0 {
                    return Err(GraphError::NonZeroDiagonal { i, value: a });
                }
                if j > i && a != weights[(j, i)] {
                    return Err(GraphError::Asymmetric { i, j, a_ij: a, a_ji: weights[(j, i)] });
                }
            }
        }
        Ok(Self { weights })
    }

    /// Builds a graph from undirected links `(i, j, a_ij)`.
    pub fn from_links(n_nodes: usize, links: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        let mut weights = DMatrix::zeros(n_nodes, n_nodes);
        for &(i, j, w) in links {
            if i >= n_nodes || j >= n_nodes {
                return Err(GraphError::LinkOutOfRange { i, j, n_nodes });
            }
            if i == j {
                return Err(GraphError::NonZeroDiagonal { i, value: w });
            }
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
        Self::from_weights(weights)
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Positive-weight links `(i, j, a_ij)` with `i < j`, in row-major order.
    /// Link masks elsewhere in the crate index into this list.
    pub fn links(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Neighbor set `N_i` with weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n_nodes()).filter_map(move |j| {
            let w = self.weights[(i, j)];
            (w > 0.0).then_some((j, w))
        })
    }

    /// In-degree `d_i`.
    pub fn degree(&self, i: usize) -> f64 {
        self.weights.row(i).sum()
    }

    /// `L = D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut lap = -self.weights.clone();
        for i in 0..n {
            // Row sum of the off-diagonal entries, so that L 1 = 0 holds exactly.
            let mut d = 0.0;
            for j in 0..n {
                if j != i {
                    d += self.weights[(i, j)];
                }
            }
            lap[(i, i)] = d;
        }
        lap
    }

    /// Breadth-first reachability over positive-weight edges.
    pub fn is_connected(&self) -> bool {
        let all = vec![true; self.n_nodes()];
        self.is_connected_among(&all)
    }

    /// Connectivity of the subgraph induced by `active` nodes. An empty
    /// active set counts as connected.
    pub fn is_connected_among(&self, active: &[bool]) -> bool {
        let n = self.n_nodes();
        let Some(start) = (0..n).find(|&i| active[i]) else {
            return true;
        };
        let mut seen = vec![false; n];
        let mut queue = VecDeque::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for (j, _) in self.neighbors(i) {
                if active[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        (0..n).all(|i| !active[i] || seen[i])
    }

    /// Copy with every link touching an inactive node, or switched off in
    /// `link_on` (indexed like [`CommGraph::links`]), removed.
    pub fn masked(&self, node_active: &[bool], link_on: &[bool]) -> CommGraph {
        let mut weights = DMatrix::zeros(self.n_nodes(), self.n_nodes());
        for (k, (i, j, w)) in self.links().into_iter().enumerate() {
            if node_active[i] && node_active[j] && link_on.get(k).copied().unwrap_or(true) {
                weights[(i, j)] = w;
                weights[(j, i)] = w;
            }
        }
        CommGraph { weights }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;

    fn fig4_comm(weight: f64) -> CommGraph {
        let links = [(0, 1), (1, 2), (1, 4), (2, 3), (2, 4), (3, 5), (4, 5)];
        let links: Vec<_> = links.iter().map(|&(i, j)| (i, j, weight)).collect();
        CommGraph::from_links(6, &links).unwrap()
    }

    #[test]
    fn single_line_orientation() {
        let g = ElectricalGraph::new(2, vec![(0, 1)], vec![]).unwrap();
        let (b, bg) = g.incidence_matrices();
        assert_eq!(b[(0, 0)], -1.0);
        assert_eq!(b[(1, 0)], 1.0);
        assert_eq!(bg.ncols(), 0);
    }

    #[test]
    fn single_attachment() {
        let g = ElectricalGraph::new(1, vec![], vec![0]).unwrap();
        let (_, bg) = g.incidence_matrices();
        assert_eq!(bg, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn fig4_incidence_column_sums() {
        let lines = vec![(0, 1), (1, 6), (6, 2), (2, 3), (3, 7), (6, 4), (7, 5), (4, 5)];
        let g = ElectricalGraph::new(8, lines, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let (b, bg) = g.incidence_matrices();
        assert_eq!(b.shape(), (8, 8));
        assert_eq!(bg.shape(), (8, 6));
        for j in 0..8 {
            assert_eq!(b.column(j).sum(), 0.0);
        }
        for i in 0..6 {
            assert_eq!(bg.column(i).sum(), 1.0);
        }
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            ElectricalGraph::new(2, vec![(0, 2)], vec![]),
            Err(GraphError::DanglingLine { line: 0, bus: 2, .. })
        ));
        assert!(matches!(
            ElectricalGraph::new(2, vec![(1, 1)], vec![]),
            Err(GraphError::SelfLoop { .. })
        ));
        assert!(matches!(
            ElectricalGraph::new(2, vec![], vec![5]),
            Err(GraphError::DanglingGenerator { gen: 0, bus: 5, .. })
        ));
    }

    #[test]
    fn two_node_laplacian() {
        let g = CommGraph::from_links(2, &[(0, 1, 1.0)]).unwrap();
        let l = g.laplacian();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn disconnected_nullity_two() {
        let g = CommGraph::from_links(3, &[(0, 1, 1.0)]).unwrap();
        let eig = symmetric_eigenvalues(&g.laplacian());
        let zeros = eig.iter().filter(|e| e.abs() < 1e-12).count();
        assert_eq!(zeros, 2);
        assert!(!g.is_connected());
    }

    #[test]
    fn fig4_laplacian_rank_five() {
        let g = fig4_comm(1.0);
        assert!(g.is_connected());
        let eig = symmetric_eigenvalues(&g.laplacian());
        let zeros = eig.iter().filter(|e| e.abs() < 1e-10).count();
        assert_eq!(zeros, 1, "rank must be 5, eigenvalues {eig:?}");
        assert!(eig.iter().all(|&e| e > -1e-12));
    }

    #[test]
    fn fig4_without_dg4_still_connected() {
        let g = fig4_comm(1.0);
        let mut active = vec![true; 6];
        active[3] = false;
        assert!(g.is_connected_among(&active));
        let reduced = g.masked(&active, &[]);
        assert_eq!(reduced.degree(3), 0.0);
        assert_eq!(reduced.links().len(), 5);
    }

    #[test]
    fn connectivity_small_cases() {
        let k3 = CommGraph::from_links(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        assert!(k3.is_connected());
        let isolated = CommGraph::from_links(2, &[]).unwrap();
        assert!(!isolated.is_connected());
    }

    #[test]
    fn weight_validation() {
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 2.0;
        assert!(matches!(CommGraph::from_weights(w), Err(GraphError::Asymmetric { .. })));
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 1)] = -1.0;
        w[(1, 0)] = -1.0;
        assert!(matches!(CommGraph::from_weights(w), Err(GraphError::InvalidWeight { .. })));
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = 1.0;
        assert!(matches!(CommGraph::from_weights(w), Err(GraphError::NonZeroDiagonal { .. })));
    }

    #[test]
    fn masked_links_respect_link_flags() {
        let g = fig4_comm(2.0);
        let links = g.links();
        let mut on = vec![true; links.len()];
        on[0] = false;
        let m = g.masked(&[true; 6], &on);
        assert_eq!(m.weight(0, 1), 0.0);
        assert_eq!(m.weight(1, 2), 2.0);
        assert!(!m.is_connected());
    }
}
