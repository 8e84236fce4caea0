//! The category topological tree and its connection templates.
//!
//! Every anatomically allowed parent->child class pair, plus one
//! self-connection per class, gets a fixed template row
//! `[enc(parent), enc(child)]` built from sinusoidal class encodings.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The shipped 14-class default.
pub const DEFAULT_TOPOLOGY_JSON: &str = include_str!("../../../config/topology_14.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TopologyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    classes: Vec<String>,
    edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTopology {
    classes: Vec<String>,
    edges: Vec<(usize, usize)>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
}

impl CategoryTopology {
    pub fn new(classes: Vec<String>, edges: &[(String, String)]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Config(format!("class `{c}` listed twice")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownClass(name.to_string()))
        };
        let mut parent = vec![None; classes.len()];
        let mut resolved = Vec::with_capacity(edges.len());
        for (p, c) in edges {
            let (pi, ci) = (lookup(p)?, lookup(c)?);
            if pi == ci {
                return Err(Error::Config(format!(
                    "edge {p} -> {c} is a self-loop; self-connections are implicit"
                )));
            }
            if parent[ci].replace(pi).is_some() {
                return Err(Error::Config(format!("class `{c}` has two parents")));
            }
            resolved.push((pi, ci));
        }
        // With single parents, a cycle is the only way to break the forest property.
        for start in 0..classes.len() {
            let mut cur = start;
            for _ in 0..=classes.len() {
                match parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
                if cur == start {
                    return Err(Error::Config(format!(
                        "class `{}` lies on a cycle",
                        classes[start]
                    )));
                }
            }
        }
        Ok(Self {
            classes,
            edges: resolved,
            index,
            parent,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TopologyFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("topology config: {e}")))?;
        Self::new(file.classes, &file.edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn default_14() -> Self {
        Self::from_json(DEFAULT_TOPOLOGY_JSON).expect("shipped topology config is valid")
    }

    pub fn to_json(&self) -> String {
        let file = TopologyFile {
            note: None,
            classes: self.classes.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(p, c)| (self.classes[p].clone(), self.classes[c].clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("topology serializes")
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn class_name(&self, idx: usize) -> &str {
        &self.classes[idx]
    }

    pub fn parent_of(&self, class: usize) -> Option<usize> {
        self.parent[class]
    }

    pub fn children_of(&self, class: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(p, _)| p == class)
            .map(|&(_, c)| c)
            .collect()
    }

    /// Classes without a parent, in class order.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.parent[c].is_none())
            .collect()
    }

    pub fn depth(&self, class: usize) -> usize {
        let mut d = 0;
        let mut cur = class;
        while let Some(p) = self.parent[cur] {
            d += 1;
            cur = p;
        }
        d
    }

    /// Index-based form of [`is_valid_connection`].
    pub fn allows(&self, parent: usize, child: usize) -> bool {
        parent == child || self.parent.get(child).copied().flatten() == Some(parent)
    }
}

/// True iff `(parent, child)` is a topology edge or a self-connection.
pub fn is_valid_connection(topo: &CategoryTopology, parent: &str, child: &str) -> Result<bool> {
    let p = topo.class_index(parent)?;
    let c = topo.class_index(child)?;
    Ok(topo.allows(p, c))
}

/// Transformer-style sinusoidal encoding of a class index:
/// `out[2k] = sin(i / 10000^(2k/dim))`, `out[2k+1] = cos(i / 10000^(2k/dim))`.
pub fn sinusoidal_encode(class_index: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs a positive even dimension, got {dim}"
        )));
    }
    let pos = class_index as f64;
    let mut out = vec![0.0; dim];
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * k as f64 / dim as f64);
        out[2 * k] = (pos / freq).sin();
        out[2 * k + 1] = (pos / freq).cos();
    }
    Ok(out)
}

/// Fixed template embeddings, one row per allowed ordered class pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    dim: usize,
    rows: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
    lookup: HashMap<(usize, usize), usize>,
}

impl TemplateSet {
    /// Number of templates `N_g`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row width (twice the class encoding dimension).
    pub fn width(&self) -> usize {
        2 * self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn pair(&self, i: usize) -> (usize, usize) {
        self.pairs[i]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn index_of(&self, parent: usize, child: usize) -> Option<usize> {
        self.lookup.get(&(parent, child)).copied()
    }

    /// Row-major `[N_g, 2C]` matrix of the templates.
    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Rows: topology edges in config order, then `(c, c)` for every class.
pub fn build_templates(topo: &CategoryTopology, dim: usize) -> Result<TemplateSet> {
    let enc: Vec<Vec<f64>> = (0..topo.num_classes())
        .map(|c| sinusoidal_encode(c, dim))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = topo
        .edges()
        .iter()
        .copied()
        .chain((0..topo.num_classes()).map(|c| (c, c)))
        .collect();
    let rows = pairs
        .iter()
        .map(|&(x, y)| enc[x].iter().chain(&enc[y]).copied().collect())
        .collect();
    let lookup = pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    Ok(TemplateSet {
        dim,
        rows,
        pairs,
        lookup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_of_zero_alternates_sin_cos() {
        assert_eq!(sinusoidal_encode(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_of_one_in_two_dims() {
        let e = sinusoidal_encode(1, 2).unwrap();
        assert!((e[0] - 0.8414709848078965).abs() < 1e-15);
        assert!((e[1] - 0.5403023058681398).abs() < 1e-15);
    }

    #[test]
    fn odd_dimension_is_rejected() {
        assert!(matches!(sinusoidal_encode(0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn encodings_are_pairwise_distinct() {
        let enc: Vec<_> = (0..14).map(|c| sinusoidal_encode(c, 64).unwrap()).collect();
        for i in 0..14 {
            for j in (i + 1)..14 {
                let d: f64 = enc[i]
                    .iter()
                    .zip(&enc[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 1e-3, "classes {i} and {j} differ by only {d}");
            }
        }
    }

    #[test]
    fn default_topology_has_26_templates() {
        let topo = CategoryTopology::default_14();
        assert_eq!(topo.num_classes(), 14);
        assert_eq!(topo.edges().len(), 12);
        let t = build_templates(&topo, 64).unwrap();
        assert_eq!(t.len(), 26);
        assert_eq!(t.width(), 128);
    }

    #[test]
    fn single_class_has_only_a_self_template() {
        let topo = CategoryTopology::new(vec!["A".into()], &[]).unwrap();
        let t = build_templates(&topo, 8).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.pair(0), (0, 0));
    }

    #[test]
    fn lm_lad_row_is_the_concatenated_encodings() {
        let topo = CategoryTopology::default_14();
        let t = build_templates(&topo, 64).unwrap();
        let (lm, lad) = (topo.class_index("LM").unwrap(), topo.class_index("LAD").unwrap());
        let row = t.row(t.index_of(lm, lad).unwrap());
        let mut expected = sinusoidal_encode(lm, 64).unwrap();
        expected.extend(sinusoidal_encode(lad, 64).unwrap());
        assert_eq!(row, expected.as_slice());
    }

    #[test]
    fn validity_follows_edges_and_self_pairs() {
        let topo = CategoryTopology::default_14();
        assert!(is_valid_connection(&topo, "LM", "LAD").unwrap());
        assert!(is_valid_connection(&topo, "RCA", "RCA").unwrap());
        assert!(!is_valid_connection(&topo, "LM", "D").unwrap());
        assert!(!is_valid_connection(&topo, "LAD", "LM").unwrap());
        assert!(matches!(
            is_valid_connection(&topo, "LM", "XYZ"),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn malformed_topologies_are_rejected() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let e = |p: &str, c: &str| (p.to_string(), c.to_string());
        assert!(CategoryTopology::new(s(&["A", "A"]), &[]).is_err());
        assert!(CategoryTopology::new(s(&["A", "B"]), &[e("A", "C")]).is_err());
        assert!(CategoryTopology::new(s(&["A", "B", "C"]), &[e("A", "C"), e("B", "C")]).is_err());
        assert!(CategoryTopology::new(s(&["A", "B"]), &[e("A", "B"), e("B", "A")]).is_err());
    }

    #[test]
    fn json_round_trip_rebuilds_identical_templates() {
        let topo = CategoryTopology::default_14();
        let again = CategoryTopology::from_json(&topo.to_json()).unwrap();
        assert_eq!(topo, again);
        assert_eq!(
            build_templates(&topo, 64).unwrap(),
            build_templates(&again, 64).unwrap()
        );
    }
}
