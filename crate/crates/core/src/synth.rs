//! Procedural coronary-like cases for training and evaluation at desk scale.
//!
//! Every category root becomes an ostium (first root LD, second RD). Each
//! vessel is a jittered polyline; children leave their parent either as side
//! branches at interior points or, for `terminal_branching` classes, all at the
//! parent's end. Branch direction depends on the child's index among its
//! parent's category children, and attachment position on a per-sibling band
//! along the parent, so labels are learnable from geometry. Vessels are then
//! cut at attachment points into segments exactly as the tree builder would
//! cut the emitted centerline.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::CenterlineGraph;
use crate::topology::CategoryTopology;
use crate::tree::{Domain, DomainRoot, Segment, VesselTree};
use crate::volume::{linear_index, BinaryVolume, IntensityVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Tube radius in voxels for trunk classes.
    pub trunk_radius: f64,
    /// Tube radius in voxels for every other class.
    pub branch_radius: f64,
    /// Standard deviation of additive intensity noise.
    pub noise: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            trunk_radius: 1.5,
            branch_radius: 1.0,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub cases: usize,
    /// Presence probability per class, conditional on the parent being present.
    pub presence: BTreeMap<String, f64>,
    pub default_presence: f64,
    /// Always present, whatever `presence` says.
    pub trunk_classes: Vec<String>,
    /// Classes whose children all leave from the vessel end.
    pub terminal_branching: Vec<String>,
    pub max_instances: BTreeMap<String, usize>,
    /// Instance cap for leaf classes without an explicit entry.
    pub leaf_instances: usize,
    /// Inclusive range of points per vessel, excluding its shared first point.
    pub lengths: BTreeMap<String, [usize; 2]>,
    pub default_length: [usize; 2],
    pub step_mm: f64,
    pub branch_angle_deg: f64,
    /// Standard deviation of branch polar and azimuth angles.
    pub angle_jitter_deg: f64,
    /// Standard deviation of the per-step direction change (radians).
    pub curvature: f64,
    /// Standard deviation of per-point positional noise (mm).
    pub jitter_mm: f64,
    /// Half-width of the per-case random rotation.
    pub rotation_deg: f64,
    /// Spread of sibling attachment positions within their band, in `[0, 1]`.
    pub band_spread: f64,
    pub ostium_separation_mm: f64,
    pub volume: Option<VolumeConfig>,
    /// Rate of a separately emitted noisy labeling; gold labels stay clean.
    pub label_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut lengths = BTreeMap::new();
        lengths.insert("LM".to_string(), [3, 5]);
        for t in ["LAD", "LCX", "RCA"] {
            lengths.insert(t.to_string(), [14, 19]);
        }
        Self {
            seed: 0,
            cases: 250,
            presence: BTreeMap::new(),
            default_presence: 0.85,
            trunk_classes: names(&["LM", "LAD", "LCX", "RCA"]),
            terminal_branching: names(&["LM"]),
            max_instances: BTreeMap::new(),
            leaf_instances: 2,
            lengths,
            default_length: [4, 8],
            step_mm: 2.0,
            branch_angle_deg: 50.0,
            angle_jitter_deg: 6.0,
            curvature: 0.06,
            jitter_mm: 0.15,
            rotation_deg: 10.0,
            band_spread: 0.5,
            ostium_separation_mm: 40.0,
            volume: None,
            label_noise: 0.0,
        }
    }
}

/// Per-class generation parameters resolved against a topology.
#[derive(Debug, Clone)]
struct Plan {
    presence: Vec<f64>,
    instances: Vec<usize>,
    lengths: Vec<[usize; 2]>,
    terminal: Vec<bool>,
    trunk: Vec<bool>,
    roots: Vec<usize>,
}

impl GeneratorConfig {
    fn plan(&self, topo: &CategoryTopology) -> Result<Plan> {
        let k = topo.num_classes();
        let index = |name: &String| {
            topo.class_index(name)
                .map_err(|_| Error::Config(format!("generator config names unknown class {name}")))
        };
        let mut presence = vec![self.default_presence; k];
        for (name, &p) in &self.presence {
            presence[index(name)?] = p;
        }
        let mut trunk = vec![false; k];
        for name in &self.trunk_classes {
            let c = index(name)?;
            trunk[c] = true;
            presence[c] = 1.0;
        }
        for r in topo.roots() {
            presence[r] = 1.0;
        }
        if let Some((c, p)) = presence.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!(
                "presence of {} is {p}; probabilities must lie in [0, 1]",
                topo.class_name(c)
            )));
        }
        for &(p, c) in topo.edges() {
            if presence[p] == 0.0 && presence[c] > 0.0 {
                return Err(Error::Config(format!(
                    "{} can be present but its parent {} never is",
                    topo.class_name(c),
                    topo.class_name(p)
                )));
            }
        }
        let mut instances: Vec<usize> = (0..k)
            .map(|c| if topo.children_of(c).is_empty() { self.leaf_instances } else { 1 })
            .collect();
        for (name, &n) in &self.max_instances {
            let c = index(name)?;
            if n > 1 && !topo.children_of(c).is_empty() {
                return Err(Error::Config(format!(
                    "{name} has child classes and cannot have more than one instance"
                )));
            }
            instances[c] = n;
        }
        if let Some(c) = instances.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("{} has a zero instance cap", topo.class_name(c))));
        }
        let mut lengths = vec![self.default_length; k];
        for (name, &range) in &self.lengths {
            lengths[index(name)?] = range;
        }
        if let Some(c) = lengths.iter().position(|r| r[0] < 1 || r[1] < r[0]) {
            return Err(Error::Config(format!(
                "length range {:?} of {} is invalid",
                lengths[c],
                topo.class_name(c)
            )));
        }
        let mut terminal = vec![false; k];
        for name in &self.terminal_branching {
            terminal[index(name)?] = true;
        }
        let roots = topo.roots();
        if roots.is_empty() || roots.len() > 2 {
            return Err(Error::Config(format!(
                "the generator needs one or two category roots (one per domain), found {}",
                roots.len()
            )));
        }
        for (what, v) in [
            ("step_mm", self.step_mm),
            ("ostium_separation_mm", self.ostium_separation_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be positive")));
            }
        }
        for (what, v) in [
            ("angle_jitter_deg", self.angle_jitter_deg),
            ("curvature", self.curvature),
            ("jitter_mm", self.jitter_mm),
            ("rotation_deg", self.rotation_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.band_spread) || !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("band_spread and label_noise must lie in [0, 1]".into()));
        }
        Ok(Plan {
            presence,
            instances,
            lengths,
            terminal,
            trunk,
            roots,
        })
    }

    pub fn validate(&self, topo: &CategoryTopology) -> Result<()> {
        self.plan(topo).map(|_| ())
    }
}

/// A generated case: segments with gold classes, the centerline they were cut
/// from, and optionally a rendered volume.
#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub id: String,
    pub tree: VesselTree,
    pub gold: Vec<usize>,
    pub centerline: CenterlineGraph,
    pub roots: Vec<DomainRoot>,
    pub volume: Option<Raster>,
    /// Gold labels with a fraction replaced by random classes.
    pub noisy: Option<Vec<usize>>,
}

struct Vessel {
    class: usize,
    domain: Domain,
    /// `points[0]` is shared with the parent (or is the ostium).
    points: Vec<[f64; 3]>,
    /// Parent vessel and the index of the shared point on it.
    parent: Option<(usize, usize)>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn case_rng(seed: u64, case_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(case_seed)))
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sd
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        [1.0, 0.0, 0.0]
    }
}

/// Direction at polar angle `theta` from `axis` and azimuth `phi` in a frame
/// fixed by the global z axis.
fn cone_direction(axis: [f64; 3], theta: f64, phi: f64) -> [f64; 3] {
    let up = if axis[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = unit(cross(axis, up));
    let e2 = cross(axis, e1);
    let radial = add(scale(e1, phi.cos()), scale(e2, phi.sin()));
    unit(add(scale(axis, theta.cos()), scale(radial, theta.sin())))
}

/// Rotation by `angle` around unit `axis` (Rodrigues).
fn rotate(p: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    add(
        add(scale(p, c), scale(cross(axis, p), s)),
        scale(axis, dot(axis, p) * (1.0 - c)),
    )
}

struct Builder<'a> {
    config: &'a GeneratorConfig,
    topo: &'a CategoryTopology,
    plan: &'a Plan,
    rng: ChaCha8Rng,
    vessels: Vec<Vessel>,
}

impl Builder<'_> {
    fn sample_length(&mut self, class: usize) -> usize {
        let [lo, hi] = self.plan.lengths[class];
        self.rng.random_range(lo..=hi)
    }

    fn grow(&mut self, start: [f64; 3], mut dir: [f64; 3], new_points: usize) -> Vec<[f64; 3]> {
        let mut points = vec![start];
        let mut p = start;
        for _ in 0..new_points {
            let noise = [0; 3].map(|_| gauss(&mut self.rng, self.config.jitter_mm));
            p = add(add(p, scale(dir, self.config.step_mm)), noise);
            points.push(p);
            let bend = [0; 3].map(|_| gauss(&mut self.rng, self.config.curvature));
            dir = unit(add(dir, bend));
        }
        points
    }

    /// Child instances `(class, sibling index, sibling count)` of a vessel.
    fn draw_children(&mut self, class: usize) -> Vec<(usize, usize, usize)> {
        let kids = self.topo.children_of(class);
        let m = kids.len();
        let mut out = Vec::new();
        for (j, &c) in kids.iter().enumerate() {
            if self.rng.random::<f64>() >= self.plan.presence[c] && self.plan.presence[c] < 1.0 {
                continue;
            }
            let n = self.rng.random_range(1..=self.plan.instances[c]);
            out.extend(std::iter::repeat_n((c, j, m), n));
        }
        out
    }

    fn vessel(
        &mut self,
        class: usize,
        domain: Domain,
        start: [f64; 3],
        dir: [f64; 3],
        parent: Option<(usize, usize)>,
    ) {
        let children = self.draw_children(class);
        let terminal = self.plan.terminal[class] && children.len() >= 2;
        let side = if terminal { 0 } else { children.len() };
        // Side branches need distinct interior points at least two apart.
        let new_points = self.sample_length(class).max(2 * side + 1);
        let points = self.grow(start, dir, new_points);
        let n = points.len();
        let id = self.vessels.len();
        self.vessels.push(Vessel {
            class,
            domain,
            points,
            parent,
        });

        let jitter = self.config.angle_jitter_deg.to_radians();
        let mut attach: Vec<(usize, (usize, usize, usize))> = if terminal {
            children.iter().map(|&ch| (n - 1, ch)).collect()
        } else {
            let mut targets: Vec<(f64, (usize, usize, usize))> = children
                .iter()
                .map(|&(c, j, m)| {
                    let spread = self.config.band_spread;
                    let u = 0.5 + spread * (self.rng.random::<f64>() - 0.5);
                    ((j as f64 + u) / m as f64, (c, j, m))
                })
                .collect();
            targets.sort_by(|a, b| a.0.total_cmp(&b.0));
            // Interior points 1..=n-2, spaced by at least 2.
            let k = targets.len();
            let mut idx: Vec<usize> = targets
                .iter()
                .map(|(f, _)| 1 + (f * (n - 2) as f64).floor().min((n - 3) as f64) as usize)
                .collect();
            for i in 0..k {
                let lo = if i == 0 { 1 } else { idx[i - 1] + 2 };
                idx[i] = idx[i].max(lo);
            }
            for i in (0..k).rev() {
                let hi = if i + 1 == k { n - 2 } else { idx[i + 1] - 2 };
                idx[i] = idx[i].min(hi);
            }
            idx.into_iter().zip(targets.into_iter().map(|t| t.1)).collect()
        };
        attach.sort_by_key(|a| a.0);
        for (at, (c, j, m)) in attach {
            let pts = &self.vessels[id].points;
            let tangent = if at + 1 < pts.len() {
                unit(sub(pts[at + 1], pts[at - 1]))
            } else {
                unit(sub(pts[at], pts[at - 1]))
            };
            let base_phi = std::f64::consts::TAU * j as f64 / m as f64;
            let phi = base_phi + gauss(&mut self.rng, jitter);
            let theta = self.config.branch_angle_deg.to_radians() + gauss(&mut self.rng, jitter);
            let dir = cone_direction(tangent, theta, phi);
            let start = pts[at];
            self.vessel(c, domain, start, dir, Some((id, at)));
        }
    }
}

/// Generates one case, deterministic in `(config.seed, case_seed)`.
pub fn generate_case(
    config: &GeneratorConfig,
    topo: &CategoryTopology,
    case_seed: u64,
) -> Result<GeneratedCase> {
    let plan = config.plan(topo)?;
    let mut b = Builder {
        config,
        topo,
        plan: &plan,
        rng: case_rng(config.seed, case_seed),
        vessels: Vec::new(),
    };
    let half = 0.5 * config.ostium_separation_mm;
    let ostia = [
        (Domain::LD, [-half, 0.0, 0.0], unit([-0.5, -1.0, 0.3])),
        (Domain::RD, [half, 0.0, 0.0], unit([0.6, -1.0, -0.3])),
    ];
    for (&root, &(domain, start, dir)) in plan.roots.iter().zip(&ostia) {
        b.vessel(root, domain, start, dir, None);
    }
    let rot = config.rotation_deg.to_radians();
    let axis = unit([0; 3].map(|_| gauss(&mut b.rng, 1.0)));
    let angle = rot * (2.0 * b.rng.random::<f64>() - 1.0);
    for v in &mut b.vessels {
        for p in &mut v.points {
            *p = rotate(*p, axis, angle);
        }
    }
    let mut rng = b.rng;
    let vessels = b.vessels;
    let (tree, gold, centerline, roots) = decompose(&vessels);
    let noisy = (config.label_noise > 0.0)
        .then(|| apply_label_noise(&gold, config.label_noise, topo.num_classes(), &mut rng));
    let volume = match &config.volume {
        Some(vc) => {
            let radii: Vec<f64> = gold
                .iter()
                .map(|&c| if plan.trunk[c] { vc.trunk_radius } else { vc.branch_radius })
                .collect();
            Some(rasterize(&tree, vc, &RadiusProfile::PerSegment(radii), &mut rng)?)
        }
        None => None,
    };
    let (tree, centerline) = match &volume {
        Some(r) => (r.tree.clone(), r.transform.apply_graph(&centerline)),
        None => (tree, centerline),
    };
    Ok(GeneratedCase {
        id: format!("case{case_seed:04}"),
        tree,
        gold,
        centerline,
        roots,
        volume,
        noisy,
    })
}

/// Cuts vessels at attachment points into segments and assembles the shared
/// centerline graph.
fn decompose(vessels: &[Vessel]) -> (VesselTree, Vec<usize>, CenterlineGraph, Vec<DomainRoot>) {
    let mut cuts: Vec<Vec<usize>> = vessels.iter().map(|v| vec![0, v.points.len() - 1]).collect();
    for v in vessels {
        if let Some((p, at)) = v.parent {
            cuts[p].push(at);
        }
    }
    for c in &mut cuts {
        c.sort_unstable();
        c.dedup();
    }

    let mut positions = Vec::new();
    let mut edges = Vec::new();
    let mut node_of: Vec<Vec<usize>> = Vec::with_capacity(vessels.len());
    let mut roots = Vec::new();
    for v in vessels {
        let mut nodes = Vec::with_capacity(v.points.len());
        match v.parent {
            Some((p, at)) => nodes.push(node_of[p][at]),
            None => {
                roots.push(DomainRoot {
                    domain: v.domain,
                    index: positions.len(),
                });
                nodes.push(positions.len());
                positions.push(v.points[0]);
            }
        }
        for &pt in &v.points[1..] {
            edges.push((*nodes.last().unwrap(), positions.len()));
            nodes.push(positions.len());
            positions.push(pt);
        }
        node_of.push(nodes);
    }
    let centerline = CenterlineGraph::from_positions(positions, edges).expect("generated graph is valid");

    let mut tree = VesselTree::default();
    let mut gold = Vec::new();
    // Segment of each vessel ending at a given point index.
    let mut ending: Vec<HashMap<usize, usize>> = Vec::with_capacity(vessels.len());
    for (vi, v) in vessels.iter().enumerate() {
        let mut ends = HashMap::new();
        for (k, w) in cuts[vi].windows(2).enumerate() {
            let id = tree.segments.len();
            tree.segments.push(Segment {
                id,
                domain: v.domain,
                points: v.points[w[0]..=w[1]].to_vec(),
            });
            gold.push(v.class);
            if k == 0 {
                match v.parent {
                    Some((p, at)) => tree.connections.push((ending[p][&at], id)),
                    None => tree.roots.push((v.domain, id)),
                }
            } else {
                tree.connections.push((id - 1, id));
            }
            ends.insert(w[1], id);
        }
        ending.push(ends);
    }
    (tree, gold, centerline, roots)
}

/// Generates `config.cases` cases with case seeds `0..cases`, in parallel.
pub fn generate_dataset(config: &GeneratorConfig, topo: &CategoryTopology) -> Result<Vec<GeneratedCase>> {
    config.validate(topo)?;
    (0..config.cases as u64)
        .into_par_iter()
        .map(|s| generate_case(config, topo, s))
        .collect()
}

/// Replaces each label with a uniformly drawn different class with
/// probability `rate`.
pub fn apply_label_noise(labels: &[usize], rate: f64, num_classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| {
            if num_classes > 1 && rng.random::<f64>() < rate {
                let r = rng.random_range(0..num_classes - 1);
                if r >= l {
                    r + 1
                } else {
                    r
                }
            } else {
                l
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RadiusProfile {
    Constant(f64),
    PerSegment(Vec<f64>),
}

/// World-space similarity `p -> (p - center) * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub center: [f64; 3],
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Transform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        add(scale(sub(p, self.center), self.scale), self.offset)
    }

    pub fn apply_graph(&self, g: &CenterlineGraph) -> CenterlineGraph {
        let mut out = g.clone();
        for p in &mut out.points {
            p.position = self.apply(p.position);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Raster {
    pub mask: BinaryVolume,
    pub intensity: IntensityVolume,
    /// The input tree moved into volume world coordinates.
    pub tree: VesselTree,
    pub transform: Transform,
}

/// Renders a tree as a union of balls along its segment polylines, centered
/// in the volume and shrunk (with a warning) if it would not fit. Intensity is
/// the box-smoothed mask plus Gaussian noise.
pub fn rasterize(
    tree: &VesselTree,
    config: &VolumeConfig,
    radius: &RadiusProfile,
    rng: &mut impl Rng,
) -> Result<Raster> {
    if tree.is_empty() {
        return Err(Error::EmptyInput("cannot rasterize an empty tree".into()));
    }
    let dims = config.dims;
    let spacing = config.spacing;
    let radii: Vec<f64> = match radius {
        RadiusProfile::Constant(r) => vec![*r; tree.len()],
        RadiusProfile::PerSegment(r) if r.len() == tree.len() => r.clone(),
        RadiusProfile::PerSegment(r) => {
            return Err(Error::Input(format!("{} radii for {} segments", r.len(), tree.len())))
        }
    };
    if radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Input("radii must be positive".into()));
    }
    let max_r = radii.iter().copied().fold(0.0, f64::max);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in tree.segments.iter().flat_map(|s| &s.points) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let mut fit = 1.0f64;
    for a in 0..3 {
        let room = (dims[a] as f64 - 1.0 - 2.0 * (max_r + 1.0)) * spacing[a];
        if room <= 0.0 {
            return Err(Error::Input(format!("volume dims {dims:?} too small for radius {max_r}")));
        }
        let extent = hi[a] - lo[a];
        if extent > room {
            fit = fit.min(room / extent);
        }
    }
    if fit < 1.0 {
        log::warn!("tree does not fit in {dims:?}; scaled by {fit:.3}");
    }
    let transform = Transform {
        center,
        scale: fit,
        offset: [0, 1, 2].map(|a| 0.5 * (dims[a] as f64 - 1.0) * spacing[a]),
    };
    let mut moved = tree.clone();
    for s in &mut moved.segments {
        for p in &mut s.points {
            *p = transform.apply(*p);
        }
    }

    let total: usize = dims.iter().product();
    let mut grid = vec![false; total];
    let mut stamp = |q: [f64; 3], r: f64| {
        let v = [0, 1, 2].map(|a| q[a] / spacing[a]);
        let lo = [0, 1, 2].map(|a| (v[a] - r).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((v[a] + r).ceil() as usize).min(dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = [x as f64 - v[0], y as f64 - v[1], z as f64 - v[2]];
                    if dot(d, d) <= r * r {
                        grid[linear_index(dims, [x, y, z])] = true;
                    }
                }
            }
        }
    };
    let min_spacing = spacing.iter().copied().fold(f64::INFINITY, f64::min);
    for (s, &r) in moved.segments.iter().zip(&radii) {
        stamp(s.points[0], r);
        for w in s.points.windows(2) {
            let len = dot(sub(w[1], w[0]), sub(w[1], w[0])).sqrt();
            let steps = ((len / (0.25 * min_spacing)).ceil() as usize).max(1);
            for t in 1..=steps {
                let f = t as f64 / steps as f64;
                stamp(add(w[0], scale(sub(w[1], w[0]), f)), r);
            }
        }
    }
    let mask = BinaryVolume::from_grid(dims, spacing, &grid)?;

    let mut values = vec![0.0; total];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let q = [x as i64 + dx, y as i64 + dy, z as i64 + dz];
                            if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < dims[a]) {
                                let q = q.map(|c| c as usize);
                                sum += f64::from(u8::from(grid[linear_index(dims, q)]));
                                count += 1.0;
                            }
                        }
                    }
                }
                let noise: f64 = StandardNormal.sample(rng);
                // Stored as f32 on disk; keep values exactly representable.
                values[linear_index(dims, [x, y, z])] = f64::from((sum / count + config.noise * noise) as f32);
            }
        }
    }
    let intensity = IntensityVolume::new(dims, spacing, values)?;
    Ok(Raster {
        mask,
        intensity,
        tree: moved,
        transform,
    })
}

/// Order-independent description of a segment decomposition: sorted point
/// lists, and connections as pairs of point lists.
pub type CanonicalTree = (Vec<Vec<[u64; 3]>>, Vec<(Vec<[u64; 3]>, Vec<[u64; 3]>)>);

pub fn canonical_form(tree: &VesselTree) -> CanonicalTree {
    let key = |s: &Segment| -> Vec<[u64; 3]> { s.points.iter().map(|p| p.map(f64::to_bits)).collect() };
    let mut segments: Vec<_> = tree.segments.iter().map(key).collect();
    segments.sort();
    let mut connections: Vec<_> = tree
        .connections
        .iter()
        .map(|&(p, c)| (key(&tree.segments[p]), key(&tree.segments[c])))
        .collect();
    connections.sort();
    (segments, connections)
}
