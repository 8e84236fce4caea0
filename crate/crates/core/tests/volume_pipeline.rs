use topolab::io::{mask_to_volume, read_volume, threshold, write_volume};
use topolab::skeleton::{distance, skeletonize, to_centerline_graph};
use topolab::synth::{generate_dataset, GeneratorConfig, VolumeConfig};
use topolab::topology::CategoryTopology;
use topolab::tree::{build_vessel_tree, DomainRoot};

#[test]
fn rendered_cases_skeletonize_into_two_rooted_trees() {
    let topo = CategoryTopology::default_14();
    let config = GeneratorConfig {
        cases: 4,
        seed: 12,
        volume: Some(VolumeConfig::default()),
        ..GeneratorConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    for case in generate_dataset(&config, &topo).unwrap() {
        let raster = case.volume.as_ref().unwrap();
        let header = dir.path().join(format!("{}.json", case.id));
        write_volume(&header, &raster.intensity).unwrap();
        let mask = threshold(&read_volume(&header).unwrap()).unwrap();
        let overlap = mask.voxels().filter(|&v| raster.mask.contains(v)).count();
        assert!(overlap * 10 >= mask.len() * 9, "{}: threshold drifts from the mask", case.id);

        let skel = skeletonize(&raster.mask).unwrap();
        assert!(skel.is_subset(&raster.mask));
        let graph = to_centerline_graph(&skel).unwrap();

        let roots: Vec<DomainRoot> = case
            .roots
            .iter()
            .map(|r| {
                let ostium = case.centerline.position(r.index);
                let nearest = (0..graph.len())
                    .min_by(|&a, &b| {
                        distance(graph.position(a), ostium).total_cmp(&distance(graph.position(b), ostium))
                    })
                    .unwrap();
                DomainRoot {
                    domain: r.domain,
                    index: nearest,
                }
            })
            .collect();
        let tree = build_vessel_tree(&graph, &roots).unwrap();
        tree.validate(None).unwrap();
        assert_eq!(tree.roots.len(), 2, "{}", case.id);
        assert!(tree.len() >= 4, "{}: {} segments", case.id, tree.len());
    }
}

#[test]
fn mask_volume_round_trip() {
    let topo = CategoryTopology::default_14();
    let config = GeneratorConfig {
        cases: 1,
        volume: Some(VolumeConfig {
            dims: [32, 32, 32],
            ..VolumeConfig::default()
        }),
        ..GeneratorConfig::default()
    };
    let case = generate_dataset(&config, &topo).unwrap().remove(0);
    let mask = case.volume.unwrap().mask;
    let back = threshold(&mask_to_volume(&mask).unwrap()).unwrap();
    assert_eq!(back, mask);
}
