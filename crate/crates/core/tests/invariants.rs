use proptest::prelude::*;

use topolab::io::{parse_json, CaseFile};
use topolab::model::{connection_probabilities, infer_labels};
use topolab::nn::{ParamStore, Tensor};
use topolab::skeleton::{component_count, skeletonize, CenterlineGraph};
use topolab::synth::{generate_case, GeneratorConfig};
use topolab::topology::{build_templates, CategoryTopology};
use topolab::train::cosine_lr;
use topolab::tree::{build_vessel_tree, minimum_spanning_tree};
use topolab::volume::BinaryVolume;

fn graph_strategy() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), n),
            prop::collection::vec((0..n, 0..n), 0..3 * n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spanning_forest_keeps_components((points, edges) in graph_strategy()) {
        let edges: Vec<(usize, usize)> = edges.into_iter().filter(|(a, b)| a != b).collect();
        let graph = CenterlineGraph::from_positions(points, edges.clone()).unwrap();
        let forest = minimum_spanning_tree(&graph);
        let (_, before) = graph.components();
        let (_, after) = forest.components();
        prop_assert_eq!(before, after);
        prop_assert_eq!(forest.edges.len(), graph.len() - after);
        for e in &forest.edges {
            prop_assert!(edges.contains(e) || edges.contains(&(e.1, e.0)));
        }
        prop_assert!(forest.total_length() <= graph.total_length() + 1e-9);
    }

    #[test]
    fn generated_centerlines_rebuild_to_the_same_tree(seed in 0u64..10_000) {
        let topo = CategoryTopology::default_14();
        let config = GeneratorConfig { cases: 1, seed, ..GeneratorConfig::default() };
        let case = generate_case(&config, &topo, 0).unwrap();
        let rebuilt = build_vessel_tree(&case.centerline, &case.roots).unwrap();
        rebuilt.validate(None).unwrap();
        prop_assert_eq!(rebuilt.len(), case.tree.len());
        prop_assert_eq!(rebuilt.connections.len(), case.tree.connections.len());
        let points = |t: &topolab::tree::VesselTree| t.segments.iter().map(|s| s.len()).sum::<usize>();
        prop_assert_eq!(points(&rebuilt), points(&case.tree));
    }

    #[test]
    fn case_files_round_trip(seed in 0u64..10_000) {
        let topo = CategoryTopology::default_14();
        let config = GeneratorConfig { cases: 1, seed, ..GeneratorConfig::default() };
        let case = generate_case(&config, &topo, 0).unwrap();
        let file = CaseFile::from_tree(&case.id, &case.tree, Some(&case.gold), &topo);
        let text = serde_json::to_string(&file).unwrap();
        let back: CaseFile = parse_json(std::path::Path::new("case.json"), &text).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_tree().unwrap(), case.tree.clone());
        prop_assert_eq!(back.gold_indices(&topo).unwrap(), Some(case.gold.clone()));
    }

    #[test]
    fn checkpoints_round_trip(
        tensors in prop::collection::vec(
            (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                (Just(vec![r, c]), prop::collection::vec(prop::num::f64::ANY, r * c))
            }),
            1..6,
        )
    ) {
        let mut store = ParamStore::new(0);
        for (i, (shape, data)) in tensors.iter().enumerate() {
            store.insert(format!("p{i}.weight"), Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
        }
        let back = ParamStore::from_checkpoint(&store.to_checkpoint()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, t) in store.iter() {
            let b = back.get(name).unwrap();
            prop_assert_eq!(b.shape(), t.shape());
            let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn cosine_schedule_is_bounded_and_non_increasing(total in 1usize..5000, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for t in (0..=total).step_by((total / 50).max(1)) {
            let lr = cosine_lr(t, total, base);
            prop_assert!((0.0..=base).contains(&lr));
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert!(cosine_lr(total, total, base).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn decoded_labels_are_well_formed(
        seed in 0u64..10_000,
        embed in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 1..40),
    ) {
        let topo = CategoryTopology::default_14();
        let templates = build_templates(&topo, 4).unwrap();
        let config = GeneratorConfig { cases: 1, seed, ..GeneratorConfig::default() };
        let case = generate_case(&config, &topo, 0).unwrap();
        let connections = &case.tree.connections;
        let rows: Vec<Vec<f64>> = (0..connections.len())
            .map(|k| {
                let mut r = embed[k % embed.len()].clone();
                r[k % 8] += 1.0;
                r
            })
            .collect();
        let probs = connection_probabilities(&rows, templates.rows(), 0.05).unwrap();
        for row in &probs {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let labels = infer_labels(&probs, connections, &templates, case.tree.len()).unwrap();
        prop_assert_eq!(labels.len(), case.tree.len());
        for l in &labels {
            prop_assert!(l.class < topo.num_classes());
            prop_assert!((0.0..=1.0).contains(&l.confidence));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn thinning_invariants(cells in prop::collection::vec(any::<bool>(), 10 * 10 * 10), fill in 0.3f64..0.9) {
        let grid: Vec<bool> = cells
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let (x, y, z) = (i % 10, (i / 10) % 10, i / 100);
                let edge = [x, y, z].iter().any(|&c| c == 0 || c == 9);
                !edge && (b || (i as f64 * 0.618).fract() < fill)
            })
            .collect();
        prop_assume!(grid.iter().any(|&b| b));
        let mask = BinaryVolume::from_grid([10, 10, 10], [1.0; 3], &grid).unwrap();
        let skel = skeletonize(&mask).unwrap();
        prop_assert!(skel.is_subset(&mask));
        prop_assert_eq!(component_count(&skel), component_count(&mask));
        prop_assert_eq!(skeletonize(&skel).unwrap(), skel);
    }
}
