use seqenc::cells::{CellConfig, CellKind};
use seqenc::encoder::{EncoderConfig, IGNORE};
use seqenc::synthdata::{generate_dataset, read_dataset, write_dataset, SceneSpec, Split};
use seqenc::tensor::Mode;
use seqenc::training::{evaluate_split, fit, load_checkpoint, save_checkpoint, TrainConfig};

fn spec() -> SceneSpec {
    SceneSpec { tile: 10, t: 8, n_classes: 4, min_obs: Some(5), seed: 17, ..SceneSpec::default() }
}

#[test]
fn generate_train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec();
    let data = generate_dataset(&spec, 18, [4, 1, 1]).unwrap();
    let path = dir.path().join("d.mtse");
    write_dataset(&data, &path).unwrap();
    let data = read_dataset(&path).unwrap();

    let model = EncoderConfig::new(CellConfig::conv(CellKind::Gru, 4, spec.depth(), 3), spec.n_classes, 3);
    let config = TrainConfig { batch: 3, epochs: 2, n_keep: Some(4), seed: 1, checkpoint_every: Some(2), ..TrainConfig::default() };
    let mut snapshots = Vec::new();
    let result = fit(&data.split(Split::Train), &data.split(Split::Validation), model.clone(), config, &mut |ck| {
        snapshots.push(ck.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(result.trainer.step, 8);
    assert_eq!(snapshots, [2, 4, 6, 8]);
    assert!(result.trainer.history.iter().all(|h| h.loss.is_finite() && h.loss > 0.0));
    let validation = result.validation.expect("validation split is non-empty");
    assert!((0.0..=1.0).contains(&validation.overall_accuracy));

    let ck_path = dir.path().join("c.mtck");
    save_checkpoint(&result.trainer.checkpoint(serde_json::json!({})), &ck_path).unwrap();
    let ck = load_checkpoint(&ck_path, Some(&model)).unwrap();
    let report = evaluate_split(&ck.encoder, &data, Split::Test, false).unwrap();
    let counted: usize = data
        .split(Split::Test)
        .iter()
        .map(|s| s.labels.labels.iter().filter(|&&l| l != IGNORE).count())
        .sum();
    assert_eq!(report.pixels as usize, counted);
}

#[test]
fn predictions_are_distributions_over_classes() {
    let spec = spec();
    let data = generate_dataset(&spec, 6, [1, 1, 1]).unwrap();
    let model = EncoderConfig::new(CellConfig::conv(CellKind::Lstm, 3, spec.depth(), 3), spec.n_classes, 3);
    let encoder = seqenc::encoder::Encoder::new(model, 4).unwrap();
    for s in &data.samples {
        let y = encoder.predict(&s.sample, Mode::Infer).unwrap();
        assert_eq!(y.shape(), [10, 10, 4]);
        for row in y.data().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
