//! The labeling network.
//!
//! Point features (from a coordinate MLP or a sampled 3D feature map) plus
//! learnable positional encodings are grouped per segment behind a learnable
//! segment query and run through a transformer encoder; the query's output
//! state is the segment embedding. Graph convolution over the segment tree
//! mixes neighboring segments, and the result is fused with the pre-GCN
//! embedding. Each parent->child connection is then scored against the fixed
//! connection templates by temperature-scaled cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gcn_layer, propagation_matrix, ConvEncoder, Graph, Initializer, LayerNorm, Linear, Mlp,
    ParamStore, Tensor, TransformerBlock, Var,
};
use crate::topology::{build_templates, CategoryTopology, TemplateSet};
use crate::tree::VesselTree;
use crate::volume::IntensityVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureBackend {
    /// Normalized world coordinates through an MLP; needs no image.
    CoordMlp,
    /// Stride-4 3D convolutional encoder sampled trilinearly at each point.
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Anatomy-aware connection classifier over template pairs.
    Connection,
    /// Independent per-segment linear classifier.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Transformer,
    /// Mean of point features (intra-segment attention ablated).
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub backend: FeatureBackend,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            backend: FeatureBackend::CoordMlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    pub layers: usize,
    /// Use the bare adjacency matrix instead of `D^-1/2 (A + I) D^-1/2`.
    pub raw_adjacency: bool,
    /// `false` drops inter-segment interaction entirely.
    pub enabled: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            raw_adjacency: false,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub tau: f64,
    pub features: FeatureConfig,
    pub gcn: GcnConfig,
    pub classifier: ClassifierKind,
    pub aggregator: Aggregator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            transformer_blocks: 3,
            heads: 4,
            ffn_multiplier: 4,
            tau: 0.05,
            features: FeatureConfig::default(),
            gcn: GcnConfig::default(),
            classifier: ClassifierKind::Connection,
            aggregator: Aggregator::Transformer,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channel dimension must be even, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channel dimension {} is not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("ffn_multiplier must be at least 1".into()));
        }
        Ok(())
    }
}

/// One case in the form the network consumes.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// World-space points of each segment.
    pub segments: Vec<Vec<[f64; 3]>>,
    /// Tree connections, parent first.
    pub connections: Vec<(usize, usize)>,
    /// Connections scored by the classifier: the tree connections plus a
    /// self-connection for every segment no tree connection covers.
    pub scored: Vec<(usize, usize)>,
    /// Points mapped into roughly `[-1, 1]^3` per case.
    pub normalized: Vec<Vec<[f64; 3]>>,
    pub volume: Option<IntensityVolume>,
}

impl ModelInput {
    pub fn new(tree: &VesselTree, volume: Option<IntensityVolume>) -> Result<Self> {
        if tree.is_empty() {
            return Err(Error::EmptyInput("case has no segments".into()));
        }
        let segments: Vec<Vec<[f64; 3]>> =
            tree.segments.iter().map(|s| s.points.clone()).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in segments.iter().flatten() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let half = (0..3)
            .map(|a| 0.5 * (hi[a] - lo[a]))
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let normalized = segments
            .iter()
            .map(|s| {
                s.iter()
                    .map(|p| [0, 1, 2].map(|a| (p[a] - center[a]) / half))
                    .collect()
            })
            .collect();
        let mut covered = vec![false; segments.len()];
        for &(p, c) in &tree.connections {
            covered[p] = true;
            covered[c] = true;
        }
        let mut scored = tree.connections.clone();
        scored.extend((0..segments.len()).filter(|&s| !covered[s]).map(|s| (s, s)));
        Ok(Self {
            segments,
            connections: tree.connections.clone(),
            scored,
            normalized,
            volume,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn num_points(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

/// Intermediate features of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CaseFeatures {
    /// `[sum L_i, C]` point features including positional encodings.
    pub points: Var,
    /// `[N, C]` aggregated segment embeddings.
    pub aggregated: Var,
    /// `[N, C]` embeddings after inter-segment interaction and fusion.
    pub fused: Var,
    /// Log-probabilities: `[N_scored, N_g]` for the connection classifier,
    /// `[N, K]` for the linear classifier.
    pub log_probs: Var,
}

/// Model definition: layer layout, fixed templates, and hyperparameters.
#[derive(Debug, Clone)]
pub struct TopoLab {
    config: ModelConfig,
    topology: CategoryTopology,
    templates: TemplateSet,
    /// Row-normalized templates, transposed to `[2C, N_g]`.
    templates_t: Tensor,
    coord_mlp: Mlp,
    conv: ConvEncoder,
    position_mlp: Mlp,
    blocks: Vec<TransformerBlock>,
    encoder_norm: LayerNorm,
    gcn: Vec<String>,
    fuse: Linear,
    classifier_mlp: Mlp,
    linear_head: Linear,
}

pub const SEGMENT_QUERY: &str = "segment_query";
pub const SEGMENT_QUERY_POSITION: &str = "segment_query_position";

impl TopoLab {
    pub fn new(config: ModelConfig, topology: CategoryTopology) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let templates = build_templates(&topology, c)?;
        let ng = templates.len();
        let mut t = vec![0.0; 2 * c * ng];
        for (j, row) in templates.rows().iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (i, v) in row.iter().enumerate() {
                t[i * ng + j] = v / norm;
            }
        }
        let blocks = (0..config.transformer_blocks)
            .map(|b| {
                TransformerBlock::new(
                    &format!("encoder.block{b}"),
                    c,
                    config.heads,
                    config.ffn_multiplier * c,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            coord_mlp: Mlp::new("features.coord_mlp", &[3, c, c, c]),
            conv: ConvEncoder::new("features.conv", c),
            position_mlp: Mlp::new("position_mlp", &[3, c, c]),
            blocks,
            encoder_norm: LayerNorm::new("encoder.norm", c),
            gcn: (0..config.gcn.layers)
                .map(|l| format!("interaction.gcn{l}.weight"))
                .collect(),
            fuse: Linear::without_bias("interaction.fuse", 2 * c, c),
            classifier_mlp: Mlp::new("classifier.mlp", &[2 * c, 2 * c, 2 * c]),
            linear_head: Linear::new("classifier.linear", c, topology.num_classes()),
            templates_t: Tensor::new(vec![2 * c, ng], t)?,
            templates,
            topology,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &CategoryTopology {
        &self.topology
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    /// Registers and initializes every parameter the configuration uses.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        let mut init = Initializer::new(seed);
        let c = self.config.channels;
        match self.config.features.backend {
            FeatureBackend::CoordMlp => self.coord_mlp.init(&mut store, &mut init)?,
            FeatureBackend::Conv => self.conv.init(&mut store, &mut init)?,
        }
        if self.config.aggregator == Aggregator::Transformer {
            self.position_mlp.init(&mut store, &mut init)?;
            store.insert(SEGMENT_QUERY, init.uniform(&[1, c], c))?;
            store.insert(SEGMENT_QUERY_POSITION, init.uniform(&[1, c], c))?;
            for b in &self.blocks {
                b.init(&mut store, &mut init)?;
            }
            self.encoder_norm.init(&mut store)?;
        }
        if self.config.gcn.enabled {
            for name in &self.gcn {
                store.insert(name, init.uniform(&[c, c], c))?;
            }
            self.fuse.init(&mut store, &mut init)?;
        }
        match self.config.classifier {
            ClassifierKind::Connection => self.classifier_mlp.init(&mut store, &mut init)?,
            ClassifierKind::Linear => self.linear_head.init(&mut store, &mut init)?,
        }
        Ok(store)
    }

    /// `[sum L_i, C]` point features (without positional encodings).
    pub fn point_features(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput) -> Result<Var> {
        match self.config.features.backend {
            FeatureBackend::CoordMlp => {
                let coords: Vec<f64> = input.normalized.iter().flatten().flatten().copied().collect();
                let x = g.constant(Tensor::new(vec![input.num_points(), 3], coords)?);
                self.coord_mlp.forward(g, store, x)
            }
            FeatureBackend::Conv => {
                let volume = input.volume.as_ref().ok_or_else(|| {
                    Error::Input("the conv feature backend needs an intensity volume".into())
                })?;
                let (padded, _) = volume.pad_to_multiple(4);
                let x = g.constant(ConvEncoder::volume_tensor(&padded));
                let fmap = self.conv.forward(g, store, x)?;
                let spacing = padded.spacing();
                let grid: Vec<[f64; 3]> = input
                    .segments
                    .iter()
                    .flatten()
                    .map(|p| [0, 1, 2].map(|a| p[a] / (4.0 * spacing[a])))
                    .collect();
                let (features, clamped) = g.trilinear(fmap, &grid)?;
                if clamped > 0 {
                    log::warn!("{clamped} centerline points fell outside the feature map and were clamped");
                }
                Ok(features)
            }
        }
    }

    /// Segment embeddings `[N, C]` from point features: each segment's points
    /// (plus positional encodings) follow the segment query through the
    /// transformer, and the query's output state is kept.
    pub fn aggregate_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        point_features: Var,
        normalized: &[Vec<[f64; 3]>],
    ) -> Result<Var> {
        let total: usize = normalized.iter().map(Vec::len).sum();
        if g.shape(point_features) != [total, self.config.channels] {
            return Err(Error::Shape(format!(
                "point features {:?} for {total} points",
                g.shape(point_features)
            )));
        }
        if let Some(i) = normalized.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("segment {i} has no points")));
        }
        if self.config.aggregator == Aggregator::MeanPool {
            let n = normalized.len();
            let mut avg = vec![0.0; n * total];
            let mut off = 0;
            for (i, s) in normalized.iter().enumerate() {
                for j in 0..s.len() {
                    avg[i * total + off + j] = 1.0 / s.len() as f64;
                }
                off += s.len();
            }
            let a = g.constant(Tensor::new(vec![n, total], avg)?);
            return g.matmul(a, point_features);
        }
        let coords: Vec<f64> = normalized.iter().flatten().flatten().copied().collect();
        let xyz = g.constant(Tensor::new(vec![total, 3], coords)?);
        let pos = self.position_mlp.forward(g, store, xyz)?;
        let points = g.add(point_features, pos)?;
        let q = g.param(store, SEGMENT_QUERY)?;
        let qp = g.param(store, SEGMENT_QUERY_POSITION)?;
        let query = g.add(q, qp)?;
        // Row 0 is the query; point p of the packed list is row p + 1.
        let pool = g.concat_rows(query, points)?;
        let mut order = Vec::with_capacity(total + normalized.len());
        let mut spans = Vec::with_capacity(normalized.len());
        let mut query_rows = Vec::with_capacity(normalized.len());
        let mut off = 0;
        for s in normalized {
            let start = order.len();
            query_rows.push(start);
            order.push(0);
            order.extend((0..s.len()).map(|j| 1 + off + j));
            off += s.len();
            spans.push((start, order.len()));
        }
        let mut tokens = g.gather_rows(pool, &order)?;
        for block in &self.blocks {
            tokens = block.forward_spans(g, store, tokens, &spans)?;
        }
        let tokens = self.encoder_norm.forward(g, store, tokens)?;
        g.gather_rows(tokens, &query_rows)
    }

    /// Graph convolution over the undirected segment graph followed by
    /// fusion with the input: `[gcn(E), E] W_f`.
    pub fn interact_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aggregated: Var,
        connections: &[(usize, usize)],
    ) -> Result<Var> {
        if !self.config.gcn.enabled {
            return Ok(aggregated);
        }
        let n = g.shape(aggregated)[0];
        if let Some(&(a, b)) = connections.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Shape(format!("connection ({a}, {b}) for {n} segments")));
        }
        let a_hat = g.constant(propagation_matrix(n, connections, self.config.gcn.raw_adjacency));
        let mut e = aggregated;
        for name in &self.gcn {
            let w = g.param(store, name)?;
            e = gcn_layer(g, e, a_hat, w)?;
        }
        let cat = g.concat_cols(e, aggregated)?;
        self.fuse.forward(g, store, cat)
    }

    /// Connection features `P = [E_parent, E_child]`, fused by the classifier
    /// MLP into `P_hat` (`[N_c, 2C]`).
    pub fn connection_embeddings(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        connections: &[(usize, usize)],
    ) -> Result<Var> {
        if connections.is_empty() {
            return Err(Error::Input("no connections to classify".into()));
        }
        let parents: Vec<usize> = connections.iter().map(|c| c.0).collect();
        let children: Vec<usize> = connections.iter().map(|c| c.1).collect();
        let ep = g.gather_rows(fused, &parents)?;
        let ec = g.gather_rows(fused, &children)?;
        let p = g.concat_cols(ep, ec)?;
        self.classifier_mlp.forward(g, store, p)
    }

    /// Log-probabilities over templates: `log softmax_j(cos(p_hat, g_j) / tau)`.
    pub fn classify_connections(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        connections: &[(usize, usize)],
    ) -> Result<Var> {
        let p_hat = self.connection_embeddings(g, store, fused, connections)?;
        let unit = g.normalize_rows(p_hat)?;
        let gt = g.constant(self.templates_t.clone());
        let sim = g.matmul(unit, gt)?;
        let logits = g.scale(sim, 1.0 / self.config.tau);
        g.log_softmax_rows(logits)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput) -> Result<CaseFeatures> {
        let points = self.point_features(g, store, input)?;
        let aggregated = self.aggregate_segments(g, store, points, &input.normalized)?;
        let fused = self.interact_segments(g, store, aggregated, &input.connections)?;
        let log_probs = match self.config.classifier {
            ClassifierKind::Connection => self.classify_connections(g, store, fused, &input.scored)?,
            ClassifierKind::Linear => {
                let logits = self.linear_head.forward(g, store, fused)?;
                g.log_softmax_rows(logits)?
            }
        };
        g.ensure_finite()?;
        Ok(CaseFeatures {
            points,
            aggregated,
            fused,
            log_probs,
        })
    }

    /// Classification targets for a case with per-segment gold classes: a
    /// template index per scored connection, or the class per segment for the
    /// linear head.
    pub fn targets(&self, input: &ModelInput, gold: &[usize]) -> Result<Vec<usize>> {
        if gold.len() != input.num_segments() {
            return Err(Error::Label(format!(
                "{} gold labels for {} segments",
                gold.len(),
                input.num_segments()
            )));
        }
        if let Some(&c) = gold.iter().find(|&&c| c >= self.topology.num_classes()) {
            return Err(Error::Label(format!("class index {c} out of range")));
        }
        match self.config.classifier {
            ClassifierKind::Linear => Ok(gold.to_vec()),
            ClassifierKind::Connection => input
                .scored
                .iter()
                .map(|&(p, c)| {
                    self.templates.index_of(gold[p], gold[c]).ok_or_else(|| {
                        Error::Label(format!(
                            "connection {p} -> {c} is labeled {} -> {}, which the topology does not allow",
                            self.topology.class_name(gold[p]),
                            self.topology.class_name(gold[c])
                        ))
                    })
                })
                .collect(),
        }
    }

    /// Summed negative log-likelihood of the targets.
    pub fn loss(&self, g: &mut Graph, features: &CaseFeatures, targets: &[usize]) -> Result<Var> {
        g.nll(features.log_probs, targets)
    }

    /// Labels every segment of a case.
    pub fn predict(&self, store: &ParamStore, input: &ModelInput) -> Result<CasePrediction> {
        let mut g = Graph::new();
        let features = self.forward(&mut g, store, input)?;
        let rows = probability_rows(g.value(features.log_probs));
        match self.config.classifier {
            ClassifierKind::Connection => {
                let segments = infer_labels(&rows, &input.scored, &self.templates, input.num_segments())?;
                let connections = input
                    .scored
                    .iter()
                    .zip(&rows)
                    .map(|(&pair, row)| {
                        let (best, p) = argmax(row);
                        ConnectionPrediction {
                            pair,
                            classes: self.templates.pair(best),
                            probability: p,
                        }
                    })
                    .collect();
                Ok(CasePrediction {
                    segments,
                    connections,
                })
            }
            ClassifierKind::Linear => {
                let segments: Vec<SegmentLabel> = rows
                    .iter()
                    .map(|row| {
                        let (class, confidence) = argmax(row);
                        SegmentLabel { class, confidence }
                    })
                    .collect();
                let connections = input
                    .connections
                    .iter()
                    .map(|&(p, c)| ConnectionPrediction {
                        pair: (p, c),
                        classes: (segments[p].class, segments[c].class),
                        probability: segments[p].confidence * segments[c].confidence,
                    })
                    .collect();
                Ok(CasePrediction {
                    segments,
                    connections,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentLabel {
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionPrediction {
    pub pair: (usize, usize),
    /// Decoded `(parent class, child class)`.
    pub classes: (usize, usize),
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasePrediction {
    pub segments: Vec<SegmentLabel>,
    pub connections: Vec<ConnectionPrediction>,
}

impl CasePrediction {
    pub fn classes(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.class).collect()
    }
}

pub fn probability_rows(log_probs: &Tensor) -> Vec<Vec<f64>> {
    (0..log_probs.rows())
        .map(|i| log_probs.row(i).iter().map(|v| v.exp()).collect())
        .collect()
}

/// Index and value of the largest entry; the first wins ties.
fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Per-connection template probabilities `softmax_j(cos(p_hat_k, g_j) / tau)`
/// computed directly from embedding rows.
pub fn connection_probabilities(
    p_hat: &[Vec<f64>],
    templates: &[Vec<f64>],
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    p_hat
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let np = norm(p);
            if !(np > 0.0) {
                return Err(Error::Numerical(format!(
                    "connection {k} has a zero embedding; cosine similarity is undefined"
                )));
            }
            let logits: Vec<f64> = templates
                .iter()
                .map(|t| p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (np * norm(t)) / tau)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            Ok(exps.into_iter().map(|e| e / z).collect())
        })
        .collect()
}

/// `sum_i -log rows[i][targets[i]]`.
pub fn classification_loss(rows: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if rows.len() != targets.len() {
        return Err(Error::Label(format!(
            "{} targets for {} rows",
            targets.len(),
            rows.len()
        )));
    }
    rows.iter()
        .zip(targets)
        .map(|(row, &t)| {
            row.get(t)
                .map(|p| -p.ln())
                .ok_or_else(|| Error::Label(format!("target {t} out of range for {} templates", row.len())))
        })
        .sum()
}

/// Segment labels from connection probabilities. Each segment takes the
/// connection covering it whose top template probability is highest (lowest
/// connection index on ties), decodes that template's class pair, and keeps
/// the parent class if it sits in the parent slot and the child class
/// otherwise.
pub fn infer_labels(
    rows: &[Vec<f64>],
    connections: &[(usize, usize)],
    templates: &TemplateSet,
    num_segments: usize,
) -> Result<Vec<SegmentLabel>> {
    if rows.len() != connections.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} connections",
            rows.len(),
            connections.len()
        )));
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; num_segments];
    for (k, (&(p, c), row)) in connections.iter().zip(rows).enumerate() {
        let (_, conf) = argmax(row);
        for s in [p, c] {
            if s >= num_segments {
                return Err(Error::Shape(format!("connection ({p}, {c}) for {num_segments} segments")));
            }
            match best[s] {
                Some((_, b)) if b >= conf => {}
                _ => best[s] = Some((k, conf)),
            }
        }
    }
    best.iter()
        .enumerate()
        .map(|(s, b)| {
            let (k, confidence) = b.ok_or_else(|| {
                Error::Input(format!("segment {s} is not covered by any connection"))
            })?;
            let (template, _) = argmax(&rows[k]);
            let (x, y) = templates.pair(template);
            let class = if connections[k].0 == s { x } else { y };
            Ok(SegmentLabel { class, confidence })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{Domain, Segment};

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            transformer_blocks: 1,
            heads: 2,
            gcn: GcnConfig {
                layers: 2,
                ..GcnConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn segment(id: usize, domain: Domain, points: Vec<[f64; 3]>) -> Segment {
        Segment { id, domain, points }
    }

    /// LD: 0 -> {1, 2}; RD: single segment 3.
    fn toy_tree() -> VesselTree {
        VesselTree {
            segments: vec![
                segment(0, Domain::LD, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
                segment(1, Domain::LD, vec![[2.0, 0.0, 0.0], [3.0, 1.0, 0.0]]),
                segment(2, Domain::LD, vec![[2.0, 0.0, 0.0], [3.0, -1.0, 0.0], [4.0, -2.0, 0.0]]),
                segment(3, Domain::RD, vec![[9.0, 0.0, 0.0], [9.0, 1.0, 0.0]]),
            ],
            connections: vec![(0, 1), (0, 2)],
            roots: vec![(Domain::LD, 0), (Domain::RD, 3)],
        }
    }

    fn model(config: ModelConfig) -> TopoLab {
        TopoLab::new(config, CategoryTopology::default_14()).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            channels: 7,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            channels: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            tau: 0.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn uncovered_segments_get_self_connections() {
        let input = ModelInput::new(&toy_tree(), None).unwrap();
        assert_eq!(input.scored, vec![(0, 1), (0, 2), (3, 3)]);
        let flat: Vec<f64> = input.normalized.iter().flatten().flatten().copied().collect();
        assert!(flat.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn aggregation_shape_for_various_lengths() {
        let m = model(small_config());
        let store = m.init_params(1).unwrap();
        for len in [1usize, 7, 500] {
            let pts: Vec<[f64; 3]> = (0..len).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
            let mut g = Graph::new();
            let feats = g.constant(Tensor::filled(&[len, 8], 0.3));
            let out = m.aggregate_segments(&mut g, &store, feats, &[pts]).unwrap();
            assert_eq!(g.shape(out), &[1, 8]);
        }
    }

    #[test]
    fn identical_segments_aggregate_identically() {
        let m = model(small_config());
        let store = m.init_params(2).unwrap();
        let pts = vec![[0.1, 0.2, 0.3], [0.2, 0.1, 0.0], [0.5, 0.5, 0.5]];
        let mut g = Graph::new();
        let f: Vec<f64> = (0..6 * 8).map(|i| ((i % 24) as f64).sin()).collect();
        let feats = g.constant(Tensor::new(vec![6, 8], f).unwrap());
        let out = m
            .aggregate_segments(&mut g, &store, feats, &[pts.clone(), pts])
            .unwrap();
        let v = g.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn reversal_changes_nothing_without_positional_encoding() {
        let m = model(small_config());
        let mut store = m.init_params(3).unwrap();
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("position_mlp") || *n == SEGMENT_QUERY_POSITION)
            .map(String::from)
            .collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64 * 0.2, 0.1 * i as f64, -0.3]).collect();
        let feats: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64 * 0.37).cos()).collect())
            .collect();
        let run = |pts: Vec<[f64; 3]>, feats: Vec<Vec<f64>>| {
            let mut g = Graph::new();
            let f = g.constant(Tensor::from_rows(&feats).unwrap());
            let out = m.aggregate_segments(&mut g, &store, f, &[pts]).unwrap();
            g.value(out).data().to_vec()
        };
        let forward = run(pts.clone(), feats.clone());
        let reversed = run(
            pts.into_iter().rev().collect(),
            feats.into_iter().rev().collect(),
        );
        for (a, b) in forward.iter().zip(&reversed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_with_zeroed_input_half_depends_only_on_gcn_output() {
        let m = model(small_config());
        let mut store = m.init_params(4).unwrap();
        // W_f = [I; 0]: the fused embedding equals the final GCN output.
        let w = store.get_mut("interaction.fuse.weight").unwrap();
        let d = w.data_mut();
        d.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..8 {
            d[i * 8 + i] = 1.0;
        }
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap());
        let fused = m.interact_segments(&mut g, &store, e, &[]).unwrap();
        let mut g2 = Graph::new();
        let e2 = g2.constant(g.value(e).clone());
        let a = g2.constant(propagation_matrix(1, &[], false));
        let mut x = e2;
        for l in 0..2 {
            let w = g2.param(&store, &format!("interaction.gcn{l}.weight")).unwrap();
            x = gcn_layer(&mut g2, x, a, w).unwrap();
        }
        assert_eq!(g.value(fused).data(), g2.value(x).data());
    }

    #[test]
    fn disconnected_segments_do_not_interact() {
        let m = model(small_config());
        let store = m.init_params(5).unwrap();
        let run = |bump: f64| {
            let mut g = Graph::new();
            let mut data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.61).sin()).collect();
            data[3 * 8] += bump;
            let e = g.constant(Tensor::new(vec![4, 8], data).unwrap());
            let out = m.interact_segments(&mut g, &store, e, &[(0, 1), (0, 2)]).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(0.0), run(5.0));
        assert_eq!(a.shape(), &[4, 8]);
        for s in 0..3 {
            assert_eq!(a.row(s), b.row(s));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn template_match_probability_closed_form() {
        // Template y equals p_hat; the other 25 are orthogonal to it.
        let ng = 26;
        let templates: Vec<Vec<f64>> = (0..ng)
            .map(|j| (0..ng).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let p_hat = vec![templates[7].clone()];
        let rows = connection_probabilities(&p_hat, &templates, 0.05).unwrap();
        let expected = 20f64.exp() / (20f64.exp() + 25.0);
        assert!((rows[0][7] - expected).abs() < 1e-12);
        assert!((rows[0][7] - (1.0 - 5.152e-8)).abs() < 1e-10);
        let scaled = connection_probabilities(&[p_hat[0].iter().map(|v| v * 3.7).collect()], &templates, 0.05)
            .unwrap();
        for (a, b) in rows[0].iter().zip(&scaled[0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(connection_probabilities(&[vec![0.0; ng]], &templates, 0.05).is_err());
    }

    #[test]
    fn loss_edge_cases() {
        let one_hot = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(classification_loss(&one_hot, &[1, 0]).unwrap(), 0.0);
        let uniform = vec![vec![1.0 / 26.0; 26]];
        assert!((classification_loss(&uniform, &[4]).unwrap() - 26f64.ln()).abs() < 1e-12);
        assert!((26f64.ln() - 3.258).abs() < 1e-3);
        assert!(matches!(classification_loss(&uniform, &[26]), Err(Error::Label(_))));
    }

    #[test]
    fn graph_probabilities_match_direct_route() {
        let m = model(small_config());
        let store = m.init_params(6).unwrap();
        let input = ModelInput::new(&toy_tree(), None).unwrap();
        let mut g = Graph::new();
        let f = m.forward(&mut g, &store, &input).unwrap();
        let p_hat = m.connection_embeddings(&mut g, &store, f.fused, &input.scored).unwrap();
        let ph: Vec<Vec<f64>> = (0..3).map(|i| g.value(p_hat).row(i).to_vec()).collect();
        let direct = connection_probabilities(&ph, m.templates().rows(), 0.05).unwrap();
        let via_graph = probability_rows(g.value(f.log_probs));
        for (a, b) in direct.iter().flatten().zip(via_graph.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in &via_graph {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_decodes_parent_and_child_slots() {
        let topo = CategoryTopology::default_14();
        let t = build_templates(&topo, 8).unwrap();
        let idx = |p: &str, c: &str| {
            t.index_of(topo.class_index(p).unwrap(), topo.class_index(c).unwrap()).unwrap()
        };
        let one_hot = |k: usize, p: f64| {
            let mut row = vec![(1.0 - p) / 25.0; 26];
            row[k] = p;
            row
        };
        let labels = infer_labels(&[one_hot(idx("LM", "LAD"), 0.9)], &[(0, 1)], &t, 2).unwrap();
        assert_eq!(labels[0].class, topo.class_index("LM").unwrap());
        assert_eq!(labels[1].class, topo.class_index("LAD").unwrap());
        // Segment 1 is the child of 0 (says LAD, 0.9) and the parent of 2 (says D, 0.6).
        let rows = vec![one_hot(idx("LM", "LAD"), 0.9), one_hot(idx("D", "D"), 0.6)];
        let labels = infer_labels(&rows, &[(0, 1), (1, 2)], &t, 3).unwrap();
        assert_eq!(labels[1].class, topo.class_index("LAD").unwrap());
        assert!((labels[1].confidence - 0.9).abs() < 1e-15);
        assert_eq!(labels[2].class, topo.class_index("D").unwrap());
        // Ties go to the lower connection index.
        let rows = vec![one_hot(idx("LM", "LAD"), 0.7), one_hot(idx("LCX", "OM"), 0.7)];
        let labels = infer_labels(&rows, &[(0, 1), (1, 2)], &t, 3).unwrap();
        assert_eq!(labels[1].class, topo.class_index("LAD").unwrap());
        assert!(infer_labels(&rows, &[(0, 1), (1, 2)], &t, 4).is_err());
    }

    #[test]
    fn invalid_gold_pairs_are_label_errors() {
        let m = model(small_config());
        let input = ModelInput::new(&toy_tree(), None).unwrap();
        let topo = m.topology();
        let c = |n: &str| topo.class_index(n).unwrap();
        let ok = m.targets(&input, &[c("LAD"), c("D"), c("LAD"), c("RCA")]).unwrap();
        assert_eq!(ok.len(), 3);
        assert!(matches!(
            m.targets(&input, &[c("LM"), c("D"), c("LAD"), c("RCA")]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn end_to_end_prediction_shapes_for_both_heads() {
        for kind in [ClassifierKind::Connection, ClassifierKind::Linear] {
            let m = model(ModelConfig {
                classifier: kind,
                ..small_config()
            });
            let store = m.init_params(7).unwrap();
            let input = ModelInput::new(&toy_tree(), None).unwrap();
            let pred = m.predict(&store, &input).unwrap();
            assert_eq!(pred.segments.len(), 4);
            assert!(pred.segments.iter().all(|s| s.class < 14 && s.confidence <= 1.0));
        }
    }

    #[test]
    fn tau_scales_logits_but_not_argmax() {
        let templates: Vec<Vec<f64>> = (0..5)
            .map(|j| (0..4).map(|i| ((i + 2 * j) as f64).sin()).collect())
            .collect();
        let p = vec![vec![0.3, -0.2, 0.9, 0.1]];
        let a = connection_probabilities(&p, &templates, 0.05).unwrap();
        let b = connection_probabilities(&p, &templates, 0.5).unwrap();
        assert_eq!(argmax(&a[0]).0, argmax(&b[0]).0);
        // Multiplying logits by 10 equals dividing tau by 10.
        let c = connection_probabilities(&p, &templates, 0.005).unwrap();
        let logit_ratio = |r: &Vec<f64>| (r[0] / r[1]).ln();
        assert!((logit_ratio(&c[0]) - 10.0 * logit_ratio(&a[0])).abs() < 1e-9);
    }
}
