//! Centerline extraction by 3D thinning.
//!
//! Foreground uses 26-connectivity and background 6-connectivity. A voxel is
//! simple when removing it changes neither the number of 26-connected
//! foreground components nor the number of 6-connected background components
//! in its 3x3x3 neighborhood. Thinning peels border voxels in six directional
//! sub-iterations per pass, re-testing simplicity at the moment of deletion,
//! until a whole pass deletes nothing. Endpoints (exactly one foreground
//! neighbor) are kept so branch tips survive.

use std::collections::{BTreeSet, VecDeque};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, BinaryVolume, Voxel};

/// One centerline node: a world-space position, plus the voxel it came from
/// when the graph was produced by thinning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterlinePoint {
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CenterlineGraph {
    pub points: Vec<CenterlinePoint>,
    pub edges: Vec<(usize, usize)>,
}

impl CenterlineGraph {
    /// Graph over bare world positions (no voxel provenance).
    pub fn from_positions(positions: Vec<[f64; 3]>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let graph = Self {
            points: positions
                .into_iter()
                .map(|position| CenterlinePoint {
                    position,
                    voxel: None,
                })
                .collect(),
            edges,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.points[i].position
    }

    pub fn edge_length(&self, (a, b): (usize, usize)) -> f64 {
        distance(self.points[a].position, self.points[b].position)
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|&e| self.edge_length(e)).sum()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.points.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Component label per point plus the number of components.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; self.points.len()];
        let mut count = 0;
        for start in 0..self.points.len() {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            let mut queue = VecDeque::from([start]);
            while let Some(p) = queue.pop_front() {
                for &q in &adj[p] {
                    if label[q] == usize::MAX {
                        label[q] = count;
                        queue.push_back(q);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn validate(&self) -> Result<()> {
        for &(a, b) in &self.edges {
            if a >= self.points.len() || b >= self.points.len() {
                return Err(Error::MalformedCase(format!(
                    "edge ({a}, {b}) references a missing point ({} points)",
                    self.points.len()
                )));
            }
            if a == b {
                return Err(Error::MalformedCase(format!("self-edge at point {a}")));
            }
            if let (Some(va), Some(vb)) = (self.points[a].voxel, self.points[b].voxel) {
                if chebyshev(va, vb) != 1 {
                    return Err(Error::MalformedCase(format!(
                        "edge ({a}, {b}) joins voxels {va:?} and {vb:?} that are not 26-adjacent"
                    )));
                }
            }
        }
        if let Some(p) = self
            .points
            .iter()
            .position(|p| p.position.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::MalformedCase(format!("point {p} is not finite")));
        }
        Ok(())
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn chebyshev(a: Voxel, b: Voxel) -> usize {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0)
}

// Neighborhood cube indexing: (dx+1) + 3(dy+1) + 9(dz+1), center = 13.
const CENTER: usize = 13;

fn cube_offset(i: usize) -> [i64; 3] {
    [(i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1]
}

struct CubeTables {
    /// 26-adjacency among the 26 non-center cells.
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency among the 18 cells of N18 (faces and edges, no corners).
    adj6_n18: Vec<Vec<usize>>,
    n18: Vec<usize>,
    faces: Vec<usize>,
}

fn tables() -> &'static CubeTables {
    static TABLES: OnceLock<CubeTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let manhattan = |o: [i64; 3]| o.iter().map(|c| c.abs()).sum::<i64>();
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        let n18: Vec<usize> = (0..27)
            .filter(|&i| i != CENTER && manhattan(cube_offset(i)) <= 2)
            .collect();
        let faces: Vec<usize> = (0..27)
            .filter(|&i| manhattan(cube_offset(i)) == 1)
            .collect();
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == CENTER || j == CENTER {
                    continue;
                }
                let (a, b) = (cube_offset(i), cube_offset(j));
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                if d.iter().all(|c| c.abs() <= 1) {
                    adj26[i].push(j);
                }
                if manhattan(d) == 1 && n18.contains(&i) && n18.contains(&j) {
                    adj6_n18[i].push(j);
                }
            }
        }
        CubeTables {
            adj26,
            adj6_n18,
            n18,
            faces,
        }
    })
}

/// Number of 26-connected foreground components among the 26 neighbors.
fn foreground_components(cube: &[bool; 27]) -> usize {
    let t = tables();
    let mut seen = [false; 27];
    let mut count = 0;
    for start in 0..27 {
        if start == CENTER || !cube[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &t.adj26[p] {
                if cube[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}

/// Number of 6-connected background components in N18 that touch the center
/// through a face.
fn background_components(cube: &[bool; 27]) -> usize {
    let t = tables();
    let mut seen = [false; 27];
    let mut count = 0;
    for &start in &t.faces {
        if cube[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &t.adj6_n18[p] {
                if !cube[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    debug_assert!(t.n18.len() == 18);
    count
}

/// Simple-point test for (26, 6) connectivity on a 3x3x3 occupancy cube.
pub fn is_simple(cube: &[bool; 27]) -> bool {
    foreground_components(cube) == 1 && background_components(cube) == 1
}

struct Grid {
    dims: [usize; 3],
    cells: Vec<bool>,
}

impl Grid {
    fn get(&self, v: Voxel, o: [i64; 3]) -> bool {
        let mut q = [0usize; 3];
        for a in 0..3 {
            let c = v[a] as i64 + o[a];
            if c < 0 || c >= self.dims[a] as i64 {
                return false;
            }
            q[a] = c as usize;
        }
        self.cells[linear_index(self.dims, q)]
    }

    fn cube(&self, v: Voxel) -> [bool; 27] {
        let mut cube = [false; 27];
        for (i, cell) in cube.iter_mut().enumerate() {
            *cell = self.get(v, cube_offset(i));
        }
        cube
    }

    fn set(&mut self, v: Voxel, value: bool) {
        let i = linear_index(self.dims, v);
        self.cells[i] = value;
    }
}

fn neighbor_count(cube: &[bool; 27]) -> usize {
    cube.iter()
        .enumerate()
        .filter(|&(i, &c)| i != CENTER && c)
        .count()
}

/// True when `v` could still be removed from `mask` without changing topology
/// and it is not a branch tip.
pub fn is_deletable(mask: &BinaryVolume, v: Voxel) -> bool {
    let grid = Grid {
        dims: mask.dims(),
        cells: mask.to_grid(),
    };
    let cube = grid.cube(v);
    cube[CENTER] && neighbor_count(&cube) != 1 && is_simple(&cube)
}

const DIRECTIONS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// Thins a vessel mask down to a one-voxel-wide centerline.
pub fn skeletonize(mask: &BinaryVolume) -> Result<BinaryVolume> {
    if mask.is_empty() {
        return Err(Error::EmptyInput("skeletonize: mask has no foreground".into()));
    }
    let mut grid = Grid {
        dims: mask.dims(),
        cells: mask.to_grid(),
    };
    let mut alive: BTreeSet<Voxel> = mask.voxels().collect();
    loop {
        let mut deleted = 0usize;
        for dir in DIRECTIONS {
            let border: Vec<Voxel> = alive
                .iter()
                .copied()
                .filter(|&v| !grid.get(v, dir))
                .collect();
            for v in border {
                let cube = grid.cube(v);
                if neighbor_count(&cube) == 1 || !is_simple(&cube) {
                    continue;
                }
                grid.set(v, false);
                alive.remove(&v);
                deleted += 1;
            }
        }
        if deleted == 0 {
            break;
        }
    }
    BinaryVolume::new(mask.dims(), mask.spacing(), alive)
}

/// Number of 26-connected foreground components.
pub fn component_count(mask: &BinaryVolume) -> usize {
    let grid = Grid {
        dims: mask.dims(),
        cells: mask.to_grid(),
    };
    let mut seen: BTreeSet<Voxel> = BTreeSet::new();
    let mut count = 0;
    for start in mask.voxels() {
        if !seen.insert(start) {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for i in 0..27 {
                if i == CENTER {
                    continue;
                }
                let o = cube_offset(i);
                if grid.get(v, o) {
                    let q = [
                        (v[0] as i64 + o[0]) as usize,
                        (v[1] as i64 + o[1]) as usize,
                        (v[2] as i64 + o[2]) as usize,
                    ];
                    if seen.insert(q) {
                        stack.push(q);
                    }
                }
            }
        }
    }
    count
}

/// One node per foreground voxel (lexicographic order), one edge per
/// 26-adjacent pair.
pub fn to_centerline_graph(skeleton: &BinaryVolume) -> Result<CenterlineGraph> {
    if skeleton.is_empty() {
        return Err(Error::EmptyInput("centerline graph of an empty skeleton".into()));
    }
    let voxels: Vec<Voxel> = skeleton.voxels().collect();
    let index: std::collections::HashMap<Voxel, usize> =
        voxels.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut edges = Vec::new();
    for (i, &v) in voxels.iter().enumerate() {
        // Visiting only the 13 lexicographically larger offsets reports each pair once.
        for c in (CENTER + 1)..27 {
            let o = cube_offset(c);
            let q = [v[0] as i64 + o[0], v[1] as i64 + o[1], v[2] as i64 + o[2]];
            if q.iter().any(|&x| x < 0) {
                continue;
            }
            let q = [q[0] as usize, q[1] as usize, q[2] as usize];
            if let Some(&j) = index.get(&q) {
                edges.push((i.min(j), i.max(j)));
            }
        }
    }
    edges.sort_unstable();
    let points = voxels
        .iter()
        .map(|&v| CenterlinePoint {
            position: skeleton.world_position(v),
            voxel: Some(v),
        })
        .collect();
    Ok(CenterlineGraph { points, edges })
}
