use negdyn::scene::{export_dataset, DatasetSidecar};
use negdyn::{build_world, ArchitectureManifest, TensorContainer, WorldSpec};

#[test]
fn export_writes_tensors_and_a_matching_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let world = build_world(&WorldSpec::lab(), 0).unwrap();
    let (tensors, sidecar) = (dir.path().join("data.npdl"), dir.path().join("data.json"));
    let provenance = serde_json::json!({"schedule": "scaled_linear"});
    let meta = export_dataset(&world, 40, 0.25, 9, provenance.clone(), &tensors, &sidecar).unwrap();

    let c = TensorContainer::read_file(&tensors).unwrap();
    let k = world.components.len();
    assert_eq!(c.get("images").unwrap().shape, vec![40, 16, 16]);
    assert_eq!(c.get("component_ids").unwrap().shape, vec![40]);
    assert_eq!(c.get("component_means").unwrap().shape, vec![k, 16, 16]);

    let on_disk: DatasetSidecar = serde_json::from_slice(&std::fs::read(&sidecar).unwrap()).unwrap();
    assert_eq!(on_disk, meta);
    assert_eq!(on_disk.vocabulary, world.vocabulary.tokens());
    assert_eq!(on_disk.provenance, provenance);
    assert_eq!(on_disk.split.iter().filter(|s| *s == "val").count(), 10);
    assert!(on_disk.split.iter().all(|s| s == "train" || s == "val"));

    let ids = &c.get("component_ids").unwrap().data;
    for (i, caption) in on_disk.captions.iter().enumerate() {
        assert_eq!(caption, &on_disk.component_captions[ids[i] as usize]);
    }
    let means = &c.get("component_means").unwrap().data;
    for (j, comp) in world.components.iter().enumerate() {
        let stored = &means[j * 256..(j + 1) * 256];
        assert!(stored.iter().zip(&comp.mean_image).all(|(a, b)| (*a as f64 - b).abs() < 1e-6));
    }

    // the trainer builds its network from a manifest over the same vocabulary
    let manifest = ArchitectureManifest::new(on_disk.vocabulary.clone(), on_disk.height, on_disk.width);
    manifest.validate().unwrap();
    let path = dir.path().join("arch.json");
    manifest.write(&path).unwrap();
    assert_eq!(ArchitectureManifest::read(&path).unwrap(), manifest);

    let again = dir.path().join("again.npdl");
    export_dataset(&world, 40, 0.25, 9, provenance, &again, &dir.path().join("again.json")).unwrap();
    assert_eq!(std::fs::read(&tensors).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn export_rejects_bad_split() {
    let dir = tempfile::tempdir().unwrap();
    let world = build_world(&WorldSpec::basic(), 0).unwrap();
    let res = export_dataset(&world, 4, 1.0, 0, serde_json::Value::Null, &dir.path().join("a"), &dir.path().join("b"));
    assert!(res.is_err());
}
