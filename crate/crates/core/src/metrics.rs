//! Classification and topology-violation metrics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::CategoryTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold segments of this class.
    pub support: usize,
    /// Segments predicted as this class.
    pub predicted: usize,
    /// Set when a zero denominator forced one of the values to 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub segments: usize,
}

/// Per-class precision/recall/F1 and their gold-support-weighted averages.
/// Classes without gold support are left out of the averages.
pub fn classification_metrics(
    pred: &[usize],
    gold: &[usize],
    classes: &[String],
) -> Result<ClassificationMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    let k = classes.len();
    if let Some(&c) = pred.iter().chain(gold).find(|&&c| c >= k) {
        return Err(Error::Input(format!("class index {c} outside the {k}-class list")));
    }
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    for (&p, &g) in pred.iter().zip(gold) {
        support[g] += 1;
        predicted[p] += 1;
        if p == g {
            tp[g] += 1;
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassMetrics {
                class: classes[c].clone(),
                precision: precision.unwrap_or(0.0),
                recall: recall.unwrap_or(0.0),
                f1: f1.unwrap_or(0.0),
                support: support[c],
                predicted: predicted[c],
                undefined: precision.is_none() || recall.is_none(),
            }
        })
        .collect();
    let total: usize = support.iter().sum();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            return 0.0;
        }
        per_class
            .iter()
            .filter(|m| m.support > 0)
            .map(|m| m.support as f64 * f(m))
            .sum::<f64>()
            / total as f64
    };
    Ok(ClassificationMetrics {
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        segments: total,
        per_class,
    })
}

/// Whether a predicted class pair on a parent->child connection is allowed.
pub fn connection_valid(topo: &CategoryTopology, parent: usize, child: usize, directed: bool) -> bool {
    topo.allows(parent, child) || (!directed && topo.allows(child, parent))
}

/// Number of violating connections, each counted at most once.
pub fn count_violations(
    pred: &[usize],
    connections: &[(usize, usize)],
    topo: &CategoryTopology,
    directed: bool,
) -> Result<usize> {
    connections.iter().try_fold(0, |n, &(p, c)| {
        let (Some(&a), Some(&b)) = (pred.get(p), pred.get(c)) else {
            return Err(Error::Input(format!(
                "connection ({p}, {c}) for {} predicted segments",
                pred.len()
            )));
        };
        Ok(n + usize::from(!connection_valid(topo, a, b, directed)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viola {
    pub value: f64,
    pub violations: usize,
    pub connections: usize,
    /// No connections: the value is defined as 0.
    pub empty: bool,
}

/// Fraction of connections whose predicted class pair the topology forbids.
pub fn viola(
    pred: &[usize],
    connections: &[(usize, usize)],
    topo: &CategoryTopology,
    directed: bool,
) -> Result<Viola> {
    let violations = count_violations(pred, connections, topo, directed)?;
    let n = connections.len();
    Ok(Viola {
        value: if n == 0 { 0.0 } else { violations as f64 / n as f64 },
        violations,
        connections: n,
        empty: n == 0,
    })
}

/// Fraction of cases with at least one violating connection.
pub fn viola_case(violations_per_case: &[usize]) -> Result<f64> {
    if violations_per_case.is_empty() {
        return Err(Error::Input("viola^c needs at least one case".into()));
    }
    let bad = violations_per_case.iter().filter(|&&v| v > 0).count();
    Ok(bad as f64 / violations_per_case.len() as f64)
}

/// Predictions and references for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseLabels {
    pub id: String,
    pub pred: Vec<usize>,
    pub gold: Vec<usize>,
    pub connections: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseViolations {
    pub id: String,
    pub violations: usize,
    pub connections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classification: ClassificationMetrics,
    /// Violating connections over all connections, pooled across cases.
    pub viola: f64,
    pub viola_c: f64,
    pub violations: usize,
    pub connections: usize,
    pub cases: usize,
    pub cases_with_violations: usize,
    pub directed: bool,
    /// Set when there were no connections and viola was defined as 0.
    pub no_connections: bool,
    pub per_case: Vec<CaseViolations>,
}

/// Dataset-level report. Segment labels are pooled across cases for the
/// classification metrics.
pub fn evaluate(cases: &[CaseLabels], topo: &CategoryTopology, directed: bool) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Input("no cases to evaluate".into()));
    }
    let per_case: Vec<CaseViolations> = cases
        .par_iter()
        .map(|c| {
            if c.pred.len() != c.gold.len() {
                return Err(Error::Input(format!(
                    "case {}: {} predictions for {} gold labels",
                    c.id,
                    c.pred.len(),
                    c.gold.len()
                )));
            }
            Ok(CaseViolations {
                id: c.id.clone(),
                violations: count_violations(&c.pred, &c.connections, topo, directed)?,
                connections: c.connections.len(),
            })
        })
        .collect::<Result<_>>()?;
    let pred: Vec<usize> = cases.iter().flat_map(|c| c.pred.iter().copied()).collect();
    let gold: Vec<usize> = cases.iter().flat_map(|c| c.gold.iter().copied()).collect();
    let classification = classification_metrics(&pred, &gold, topo.classes())?;
    let violations: usize = per_case.iter().map(|c| c.violations).sum();
    let connections: usize = per_case.iter().map(|c| c.connections).sum();
    let counts: Vec<usize> = per_case.iter().map(|c| c.violations).collect();
    Ok(MetricsReport {
        classification,
        viola: if connections == 0 { 0.0 } else { violations as f64 / connections as f64 },
        viola_c: viola_case(&counts)?,
        violations,
        connections,
        cases: cases.len(),
        cases_with_violations: counts.iter().filter(|&&v| v > 0).count(),
        directed,
        no_connections: connections == 0,
        per_case,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let width = self
            .classification
            .per_class
            .iter()
            .map(|m| m.class.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "class", "precision", "recall", "f1", "support"
        );
        for m in &self.classification.per_class {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}{}",
                m.class,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.undefined { "  *" } else { "" }
            );
        }
        let c = &self.classification;
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "weighted", c.weighted_precision, c.weighted_recall, c.weighted_f1, c.segments
        );
        let _ = writeln!(
            s,
            "viola    {:.4}  ({} / {} connections, {})",
            self.viola,
            self.violations,
            self.connections,
            if self.directed { "directed" } else { "undirected" }
        );
        let _ = writeln!(
            s,
            "viola^c  {:.4}  ({} / {} cases)",
            self.viola_c, self.cases_with_violations, self.cases
        );
        s
    }
}
