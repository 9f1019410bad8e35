//! Grid graphs, time-indexed vertex costs and the time-dependent shortest-path
//! solver.
//!
//! A plan of horizon `T` visits exactly one vertex per time row `0..T`. Row 0
//! holds the start vertex, row `T - 1` the goal, and consecutive rows are joined
//! by a grid edge or a self-loop ("wait"). The objective is the inner product
//! of the plan's indicator matrix with the cost tensor, start row included.
//!
//! The time-expanded graph is a DAG, so [`solve_tdsp`] runs a layered dynamic
//! program rather than Dijkstra. It is exact for arbitrary finite real costs,
//! which matters because the backward pass of the differentiable layer feeds it
//! perturbed, possibly negative, costs.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Enumeration guard for [`brute_force_tdsp`]: `5^T` may not exceed this.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Agent actions on the grid. Declaration order is the tie-break order used by
/// every argmax over actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    NoOp,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::NoOp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "Up",
            Action::Down => "Down",
            Action::Left => "Left",
            Action::Right => "Right",
            Action::NoOp => "NoOp",
        }
    }

    pub fn from_name(name: &str) -> Option<Action> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Row and column displacement.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::NoOp => (0, 0),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed 4-neighbour grid with a self-loop on every vertex.
///
/// Vertex ids are `row * width + col`. Neighbour lists are sorted ascending
/// and include the vertex itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGraph {
    height: usize,
    width: usize,
    adjacency: Vec<Vec<usize>>,
}

impl GridGraph {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_vertices(&self) -> usize {
        self.height * self.width
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn vertex(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, v: usize) -> (usize, usize) {
        (v / self.width, v % self.width)
    }

    pub fn contains(&self, v: usize) -> bool {
        v < self.num_vertices()
    }

    pub fn is_adjacent(&self, v: usize, w: usize) -> bool {
        self.contains(v) && self.adjacency[v].binary_search(&w).is_ok()
    }

    /// Manhattan distance, which is the hop distance on the grid.
    pub fn hop_distance(&self, v: usize, w: usize) -> usize {
        let (r0, c0) = self.coords(v);
        let (r1, c1) = self.coords(w);
        r0.abs_diff(r1) + c0.abs_diff(c1)
    }

    /// Vertex reached by `action` from `v`; moves that would leave the grid
    /// stay in place.
    pub fn apply_action(&self, v: usize, action: Action) -> usize {
        let (row, col) = self.coords(v);
        let (dr, dc) = action.delta();
        let r = row as isize + dr;
        let c = col as isize + dc;
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            v
        } else {
            self.vertex(r as usize, c as usize)
        }
    }
}

pub fn build_grid_graph(height: usize, width: usize) -> Result<GridGraph> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    let mut adjacency = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let v = row * width + col;
            let mut nbrs = vec![v];
            if row > 0 {
                nbrs.push(v - width);
            }
            if row + 1 < height {
                nbrs.push(v + width);
            }
            if col > 0 {
                nbrs.push(v - 1);
            }
            if col + 1 < width {
                nbrs.push(v + 1);
            }
            nbrs.sort_unstable();
            adjacency.push(nbrs);
        }
    }
    Ok(GridGraph {
        height,
        width,
        adjacency,
    })
}

/// The inverse model: which action realises the edge `v -> v_next`.
pub fn edge_to_action(graph: &GridGraph, v: usize, v_next: usize) -> Result<Action> {
    if !graph.is_adjacent(v, v_next) {
        return Err(Error::InvalidEdge {
            from: v,
            to: v_next,
        });
    }
    let (r0, c0) = graph.coords(v);
    let (r1, c1) = graph.coords(v_next);
    let action = match (r1 as isize - r0 as isize, c1 as isize - c0 as isize) {
        (0, 0) => Action::NoOp,
        (-1, 0) => Action::Up,
        (1, 0) => Action::Down,
        (0, -1) => Action::Left,
        (0, 1) => Action::Right,
        _ => unreachable!("adjacency only holds unit displacements"),
    };
    Ok(action)
}

/// Real values indexed by `(time row, vertex)`, stored row-major.
///
/// Used both for solver costs and for gradients with respect to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTensor {
    horizon: usize,
    num_vertices: usize,
    values: Vec<f64>,
}

/// Gradient of a loss with respect to a [`CostTensor`]; same layout.
pub type CostGradient = CostTensor;

impl CostTensor {
    pub fn new(horizon: usize, num_vertices: usize, values: Vec<f64>) -> Result<Self> {
        if horizon == 0 || num_vertices == 0 {
            return Err(Error::InvalidArgument(
                "cost tensor needs a positive horizon and vertex count".into(),
            ));
        }
        if values.len() != horizon * num_vertices {
            return Err(Error::InvalidArgument(format!(
                "expected {} cost entries, got {}",
                horizon * num_vertices,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cost entry {i} is not finite"
            )));
        }
        Ok(Self {
            horizon,
            num_vertices,
            values,
        })
    }

    pub fn filled(horizon: usize, num_vertices: usize, value: f64) -> Result<Self> {
        Self::new(horizon, num_vertices, vec![value; horizon * num_vertices])
    }

    pub fn zeros(horizon: usize, num_vertices: usize) -> Result<Self> {
        Self::filled(horizon, num_vertices, 0.0)
    }

    pub fn from_fn(
        horizon: usize,
        num_vertices: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(horizon * num_vertices);
        for t in 0..horizon {
            for v in 0..num_vertices {
                values.push(f(t, v));
            }
        }
        Self::new(horizon, num_vertices, values)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.num_vertices + v]
    }

    pub fn set(&mut self, t: usize, v: usize, value: f64) {
        self.values[t * self.num_vertices + v] = value;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.num_vertices..(t + 1) * self.num_vertices]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_shape(&self, horizon: usize, num_vertices: usize) -> bool {
        self.horizon == horizon && self.num_vertices == num_vertices
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &CostTensor, scale: f64) -> Result<CostTensor> {
        if !other.same_shape(self.horizon, self.num_vertices) {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.horizon, self.num_vertices, other.horizon, other.num_vertices
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        CostTensor::new(self.horizon, self.num_vertices, values)
    }

    /// Repeats the last time row until the tensor spans `horizon` rows.
    pub fn extend_last_row(&self, horizon: usize) -> CostTensor {
        let mut values = self.values.clone();
        let last = self.row(self.horizon - 1).to_vec();
        for _ in self.horizon..horizon {
            values.extend_from_slice(&last);
        }
        CostTensor {
            horizon: horizon.max(self.horizon),
            num_vertices: self.num_vertices,
            values,
        }
    }
}

/// Binary indicator of visited vertices, one row per time step.
///
/// Instances built by the solver always have exactly one active entry per
/// row; [`PathMatrix::from_dense`] accepts arbitrary binary matrices so that
/// malformed input can be represented and rejected downstream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathMatrix {
    horizon: usize,
    num_vertices: usize,
    cells: Vec<u8>,
}

impl PathMatrix {
    pub fn from_vertices(num_vertices: usize, vertices: &[usize]) -> Result<Self> {
        if vertices.is_empty() || num_vertices == 0 {
            return Err(Error::InvalidArgument(
                "path needs at least one time step and one vertex".into(),
            ));
        }
        let mut cells = vec![0u8; vertices.len() * num_vertices];
        for (t, &v) in vertices.iter().enumerate() {
            if v >= num_vertices {
                return Err(Error::InvalidArgument(format!(
                    "vertex {v} out of range at time {t}"
                )));
            }
            cells[t * num_vertices + v] = 1;
        }
        Ok(Self {
            horizon: vertices.len(),
            num_vertices,
            cells,
        })
    }

    pub fn from_dense(horizon: usize, num_vertices: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != horizon * num_vertices || horizon == 0 || num_vertices == 0 {
            return Err(Error::InvalidArgument(format!(
                "expected {horizon}x{num_vertices} cells, got {}",
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::InvalidArgument("path entries must be 0 or 1".into()));
        }
        Ok(Self {
            horizon,
            num_vertices,
            cells,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn get(&self, t: usize, v: usize) -> bool {
        self.cells[t * self.num_vertices + v] == 1
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn count_active(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// The unique active vertex of every row.
    pub fn vertex_sequence(&self) -> Result<Vec<usize>> {
        extract_vertex_sequence(self)
    }

    /// Checks every admissibility condition against `graph`.
    pub fn validate(&self, graph: &GridGraph, start: usize, goal: usize) -> Result<()> {
        if self.num_vertices != graph.num_vertices() {
            return Err(Error::InvalidPath(format!(
                "path spans {} vertices, graph has {}",
                self.num_vertices,
                graph.num_vertices()
            )));
        }
        let seq = self.vertex_sequence()?;
        if seq[0] != start {
            return Err(Error::InvalidPath(format!(
                "path starts at {} instead of {start}",
                seq[0]
            )));
        }
        if seq[seq.len() - 1] != goal {
            return Err(Error::InvalidPath(format!(
                "path ends at {} instead of {goal}",
                seq[seq.len() - 1]
            )));
        }
        for (t, pair) in seq.windows(2).enumerate() {
            if !graph.is_adjacent(pair[0], pair[1]) {
                return Err(Error::InvalidPath(format!(
                    "step {t}: {} -> {} is not an edge",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }

    /// The matrix as real values, for arithmetic with cost tensors.
    pub fn to_tensor(&self) -> CostTensor {
        CostTensor {
            horizon: self.horizon,
            num_vertices: self.num_vertices,
            values: self.cells.iter().map(|&c| f64::from(c)).collect(),
        }
    }
}

pub fn extract_vertex_sequence(path: &PathMatrix) -> Result<Vec<usize>> {
    let n = path.num_vertices;
    (0..path.horizon)
        .map(|t| {
            let row = &path.cells[t * n..(t + 1) * n];
            let mut active = row.iter().enumerate().filter(|(_, &c)| c == 1);
            match (active.next(), active.next()) {
                (Some((v, _)), None) => Ok(v),
                (None, _) => Err(Error::InvalidPath(format!("row {t} has no active vertex"))),
                (Some(_), Some(_)) => Err(Error::InvalidPath(format!(
                    "row {t} has more than one active vertex"
                ))),
            }
        })
        .collect()
}

/// Inner product of a cost tensor with a path matrix.
pub fn path_cost(costs: &CostTensor, path: &PathMatrix) -> Result<f64> {
    if !costs.same_shape(path.horizon, path.num_vertices) {
        return Err(Error::InvalidArgument(format!(
            "cost tensor is {}x{}, path is {}x{}",
            costs.horizon, costs.num_vertices, path.horizon, path.num_vertices
        )));
    }
    Ok(costs
        .values
        .iter()
        .zip(&path.cells)
        .filter(|(_, &y)| y == 1)
        .fold(0.0, |acc, (c, _)| acc + c))
}

fn check_query(graph: &GridGraph, costs: &CostTensor, start: usize, goal: usize) -> Result<()> {
    if costs.num_vertices != graph.num_vertices() {
        return Err(Error::InvalidArgument(format!(
            "cost tensor covers {} vertices, graph has {}",
            costs.num_vertices,
            graph.num_vertices()
        )));
    }
    for v in [start, goal] {
        if !graph.contains(v) {
            return Err(Error::InvalidArgument(format!("vertex {v} out of range")));
        }
    }
    Ok(())
}

/// Minimum-cost admissible plan from `start` (row 0) to `goal` (last row).
///
/// Among equal-cost predecessors the smallest vertex id wins, so the result is
/// the optimal plan whose vertex sequence, read from the last row backwards,
/// is lexicographically smallest.
pub fn solve_tdsp(
    graph: &GridGraph,
    costs: &CostTensor,
    start: usize,
    goal: usize,
) -> Result<PathMatrix> {
    check_query(graph, costs, start, goal)?;
    let n = graph.num_vertices();
    let horizon = costs.horizon;

    let mut prev = vec![f64::INFINITY; n];
    prev[start] = costs.get(0, start);
    let mut next = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; horizon * n];

    for t in 1..horizon {
        let row = costs.row(t);
        for v in 0..n {
            let mut best = f64::INFINITY;
            let mut arg = usize::MAX;
            for &u in graph.neighbors(v) {
                if prev[u] < best {
                    best = prev[u];
                    arg = u;
                }
            }
            next[v] = best + row[v];
            parent[t * n + v] = arg;
        }
        std::mem::swap(&mut prev, &mut next);
    }

    if !prev[goal].is_finite() {
        return Err(Error::UnreachableGoal {
            start,
            goal,
            horizon,
        });
    }

    let mut seq = vec![0usize; horizon];
    let mut v = goal;
    for t in (0..horizon).rev() {
        seq[t] = v;
        if t > 0 {
            v = parent[t * n + v];
        }
    }
    debug_assert_eq!(seq[0], start);
    PathMatrix::from_vertices(n, &seq)
}

/// Exhaustive search over every admissible vertex sequence.
///
/// Test oracle for [`solve_tdsp`]; applies the same tie-break.
pub fn brute_force_tdsp(
    graph: &GridGraph,
    costs: &CostTensor,
    start: usize,
    goal: usize,
) -> Result<PathMatrix> {
    check_query(graph, costs, start, goal)?;
    let horizon = costs.horizon;
    let fits = u32::try_from(horizon)
        .ok()
        .and_then(|h| 5u64.checked_pow(h))
        .is_some_and(|count| count <= BRUTE_FORCE_LIMIT);
    if !fits {
        return Err(Error::TooLarge(format!(
            "5^{horizon} sequences exceed the limit of {BRUTE_FORCE_LIMIT}"
        )));
    }

    struct Search<'a> {
        graph: &'a GridGraph,
        costs: &'a CostTensor,
        goal: usize,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, acc: f64) {
            let t = self.current.len();
            if t == self.costs.horizon {
                if self.current[t - 1] != self.goal {
                    return;
                }
                let better = match &self.best {
                    None => true,
                    Some((cost, seq)) => {
                        acc < *cost
                            || (acc == *cost && self.current.iter().rev().lt(seq.iter().rev()))
                    }
                };
                if better {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            let last = self.current[t - 1];
            // Remaining hops must still fit before the final row.
            if self.graph.hop_distance(last, self.goal) > self.costs.horizon - t {
                return;
            }
            for i in 0..self.graph.neighbors(last).len() {
                let v = self.graph.neighbors(last)[i];
                self.current.push(v);
                self.visit(acc + self.costs.get(t, v));
                self.current.pop();
            }
        }
    }

    let mut search = Search {
        graph,
        costs,
        goal,
        current: vec![start],
        best: None,
    };
    search.visit(costs.get(0, start));
    match search.best {
        Some((_, seq)) => PathMatrix::from_vertices(graph.num_vertices(), &seq),
        None => Err(Error::UnreachableGoal {
            start,
            goal,
            horizon,
        }),
    }
}
