//! End-to-end orchestration shared by the command-line tool and the tests:
//! dataset generation, training runs, inference, and evaluation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    case_path, load_cases, load_json, read_text, save_json, write_bytes, write_text, write_volume, CasePredictions,
    CaseFile, ConnectionRecord, LoadedCase, Manifest, Predictions, SegmentPrediction, MANIFEST,
};
use crate::metrics::{evaluate, CaseLabels, MetricsReport};
use crate::model::{FeatureBackend, ModelConfig, ModelInput, TopoLab};
use crate::nn::ParamStore;
use crate::synth::{generate_dataset, GeneratedCase, GeneratorConfig};
use crate::topology::CategoryTopology;
use crate::train::{log_csv, prepare_cases, train, TrainConfig, TrainOutcome};

/// Everything a `--config` file may set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    /// Cases held out for testing by `generate` (the last ones).
    pub test_cases: usize,
}

impl RunConfig {
    pub fn benchmark() -> Self {
        Self {
            test_cases: 50,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let run: Self = load_json(path).map_err(|e| match e {
            Error::Parse { .. } => Error::Config(e.to_string()),
            other => other,
        })?;
        run.model.validate()?;
        run.train.validate()?;
        Ok(run)
    }
}

/// Writes generated cases as a dataset directory. The last `test` cases form
/// the test split.
pub fn write_dataset(
    dir: &Path,
    cases: &[GeneratedCase],
    topo: &CategoryTopology,
    test: usize,
    generator: &GeneratorConfig,
) -> Result<Manifest> {
    if test > cases.len() {
        return Err(Error::Config(format!(
            "{test} test cases requested from {} generated",
            cases.len()
        )));
    }
    for c in cases {
        let mut file = CaseFile::from_tree(&c.id, &c.tree, Some(&c.gold), topo);
        if let Some(r) = &c.volume {
            let rel = PathBuf::from(format!("volumes/{}.json", c.id));
            write_volume(&dir.join(&rel), &r.intensity)?;
            file.volume = Some(Path::new("..").join(rel));
        }
        save_json(&case_path(dir, &c.id), &file)?;
    }
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = cases.len() - test;
    let mut meta = std::collections::BTreeMap::new();
    meta.insert(
        "generator".to_string(),
        serde_json::to_value(generator).expect("serializable"),
    );
    meta.insert(
        "topology".to_string(),
        serde_json::from_str(&topo.to_json()).expect("valid json"),
    );
    let manifest = Manifest {
        train: ids[..split].to_vec(),
        test: ids[split..].to_vec(),
        meta,
    };
    save_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn generate_to_dir(dir: &Path, run: &RunConfig, topo: &CategoryTopology) -> Result<Manifest> {
    let cases = generate_dataset(&run.generator, topo)?;
    write_dataset(dir, &cases, topo, run.test_cases, &run.generator)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    load_json(&dir.join(MANIFEST))
}

pub fn model_input(model: &TopoLab, case: &LoadedCase) -> Result<ModelInput> {
    let volume = match model.config().features.backend {
        FeatureBackend::Conv => Some(case.volume.clone().ok_or_else(|| {
            Error::Input(format!("case {} has no volume for the conv backend", case.file.id))
        })?),
        FeatureBackend::CoordMlp => None,
    };
    ModelInput::new(&case.tree, volume)
}

pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Architecture and category tree needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub topology: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub excluded: Vec<String>,
    pub checkpoint: PathBuf,
}

/// Trains on already loaded cases, writing the model description, final and
/// periodic checkpoints, the loss log, and the resolved configuration to
/// `out`.
pub fn train_cases(
    cases: &[LoadedCase],
    run: &RunConfig,
    topo: &CategoryTopology,
    out: &Path,
) -> Result<TrainSummary> {
    run.train.validate()?;
    let model = TopoLab::new(run.model.clone(), topo.clone())?;
    let mut raw = Vec::with_capacity(cases.len());
    let mut unlabeled = Vec::new();
    for c in cases {
        match &c.gold {
            Some(g) => raw.push((c.file.id.clone(), model_input(&model, c)?, g.clone())),
            None => unlabeled.push(c.file.id.clone()),
        }
    }
    let (prepared, excluded) = prepare_cases(&model, raw)?;
    let unusable = unlabeled.len() + excluded.len();
    if unusable * 10 > cases.len() {
        return Err(Error::Validation(format!(
            "{unusable} of {} training cases are unusable; unlabeled: {}",
            cases.len(),
            unlabeled.join(", ")
        )));
    }
    let mut excluded: Vec<String> = excluded.into_iter().map(|(id, _)| id).collect();
    excluded.extend(unlabeled);

    save_json(&out.join(CONFIG_FILE), run)?;
    save_json(
        &out.join(MODEL_FILE),
        &ModelSpec {
            model: run.model.clone(),
            topology: serde_json::from_str(&topo.to_json()).expect("valid json"),
        },
    )?;
    let store = model.init_params(run.train.seed)?;
    let ckpt_dir = out.join("checkpoints");
    let outcome = train(&model, store, &prepared, &run.train, |step, store| {
        write_bytes(&ckpt_dir.join(format!("step_{step:06}.ckpt")), &store.to_checkpoint())
    })?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    write_bytes(&checkpoint, &outcome.store.to_checkpoint())?;
    write_text(&out.join(LOG_FILE), &log_csv(&outcome.log))?;
    Ok(TrainSummary {
        outcome,
        excluded,
        checkpoint,
    })
}

/// Rebuilds a trained model from a directory written by [`train_cases`].
pub fn load_model(dir: &Path) -> Result<(TopoLab, ParamStore)> {
    let spec: ModelSpec = load_json(&dir.join(MODEL_FILE))?;
    let topo = CategoryTopology::from_json(&spec.topology.to_string())?;
    let model = TopoLab::new(spec.model, topo)?;
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let store = ParamStore::from_checkpoint(&bytes)?;
    let expected = model.init_params(0)?;
    for (name, t) in expected.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok((model, store))
}

/// Labels every case; cases run in parallel and results keep input order.
pub fn predict_cases(model: &TopoLab, store: &ParamStore, cases: &[LoadedCase]) -> Result<Predictions> {
    let topo = model.topology();
    let cases = cases
        .par_iter()
        .map(|c| {
            let input = model_input(model, c)?;
            let pred = model.predict(store, &input)?;
            let ids: Vec<usize> = c.tree.segments.iter().map(|s| s.id).collect();
            Ok(CasePredictions {
                id: c.file.id.clone(),
                segments: pred
                    .segments
                    .iter()
                    .zip(&ids)
                    .map(|(s, &id)| SegmentPrediction {
                        id,
                        class: topo.class_name(s.class).to_string(),
                        confidence: s.confidence,
                    })
                    .collect(),
                connections: pred
                    .connections
                    .iter()
                    .map(|p| ConnectionRecord {
                        pair: (ids[p.pair.0], ids[p.pair.1]),
                        classes: (
                            topo.class_name(p.classes.0).to_string(),
                            topo.class_name(p.classes.1).to_string(),
                        ),
                        probability: p.probability,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Predictions { cases })
}

/// Scores predictions against the gold labels of the matching cases.
pub fn evaluate_predictions(
    predictions: &Predictions,
    cases: &[LoadedCase],
    topo: &CategoryTopology,
    directed: bool,
) -> Result<MetricsReport> {
    let by_id: std::collections::HashMap<&str, &LoadedCase> =
        cases.iter().map(|c| (c.file.id.as_str(), c)).collect();
    let labels = predictions
        .cases
        .iter()
        .map(|p| {
            let case = by_id
                .get(p.id.as_str())
                .ok_or_else(|| Error::Input(format!("no case {} for its predictions", p.id)))?;
            let gold = case
                .gold
                .clone()
                .ok_or_else(|| Error::Input(format!("case {} has no gold labels", p.id)))?;
            Ok(CaseLabels {
                id: p.id.clone(),
                pred: p.classes_for(&case.tree, topo)?,
                gold,
                connections: case.tree.connections.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&labels, topo, directed)
}

/// Loads the named split (`train` or `test`) of a dataset directory.
pub fn load_split(dir: &Path, split: &str, topo: &CategoryTopology) -> Result<Vec<LoadedCase>> {
    let manifest = load_manifest(dir)?;
    let ids = match split {
        "train" => manifest.train,
        "test" => manifest.test,
        "all" => manifest.train.into_iter().chain(manifest.test).collect(),
        other => return Err(Error::Config(format!("unknown split {other}; use train, test or all"))),
    };
    load_cases(dir, &ids, topo)
}

pub fn load_predictions(path: &Path) -> Result<Predictions> {
    crate::io::parse_json(path, &read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GcnConfig;

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                channels: 8,
                transformer_blocks: 1,
                heads: 2,
                gcn: GcnConfig {
                    layers: 1,
                    ..GcnConfig::default()
                },
                ..ModelConfig::default()
            },
            train: TrainConfig {
                total_iterations: 3,
                batch_size: 2,
                checkpoint_interval: 2,
                ..TrainConfig::default()
            },
            generator: GeneratorConfig {
                cases: 6,
                ..GeneratorConfig::default()
            },
            test_cases: 2,
        }
    }

    #[test]
    fn generate_train_infer_eval() {
        let dir = tempfile::tempdir().unwrap();
        let topo = CategoryTopology::default_14();
        let run = tiny_run();
        let data = dir.path().join("data");
        let manifest = generate_to_dir(&data, &run, &topo).unwrap();
        assert_eq!((manifest.train.len(), manifest.test.len()), (4, 2));
        let train_set = load_split(&data, "train", &topo).unwrap();
        let out = dir.path().join("run");
        let summary = train_cases(&train_set, &run, &topo, &out).unwrap();
        assert_eq!(summary.outcome.state.t, 3);
        assert!(out.join("checkpoints/step_000002.ckpt").exists());
        let (model, store) = load_model(&out).unwrap();
        assert_eq!(store.to_checkpoint(), summary.outcome.store.to_checkpoint());
        let test_set = load_split(&data, "test", &topo).unwrap();
        let preds = predict_cases(&model, &store, &test_set).unwrap();
        let p = dir.path().join("preds.json");
        save_json(&p, &preds).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), preds);
        let report = evaluate_predictions(&preds, &test_set, &topo, true).unwrap();
        assert_eq!(report.cases, 2);
    }

    #[test]
    fn gold_as_prediction_scores_perfectly() {
        let topo = CategoryTopology::default_14();
        let run = tiny_run();
        let cases: Vec<LoadedCase> = generate_dataset(&run.generator, &topo)
            .unwrap()
            .into_iter()
            .map(|c| LoadedCase {
                file: CaseFile::from_tree(&c.id, &c.tree, Some(&c.gold), &topo),
                tree: c.tree,
                gold: Some(c.gold),
                volume: None,
            })
            .collect();
        let preds = Predictions {
            cases: cases
                .iter()
                .map(|c| CasePredictions {
                    id: c.file.id.clone(),
                    segments: c
                        .tree
                        .segments
                        .iter()
                        .zip(c.gold.as_ref().unwrap())
                        .map(|(s, &g)| SegmentPrediction {
                            id: s.id,
                            class: topo.class_name(g).into(),
                            confidence: 1.0,
                        })
                        .collect(),
                    connections: vec![],
                })
                .collect(),
        };
        let r = evaluate_predictions(&preds, &cases, &topo, true).unwrap();
        assert_eq!(r.classification.weighted_f1, 1.0);
        assert_eq!(r.viola, 0.0);
        assert_eq!(r.viola_c, 0.0);
    }
}
