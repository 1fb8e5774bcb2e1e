//! Raising the burst cap from 1 to 2 helps the early spiking layers of a
//! small CNN more than the last one.

use adacal::*;

#[test]
fn early_layers_gain_more_from_bursts_than_the_last() {
    let spec = SyntheticSpec {
        classes: 4,
        sample_shape: vec![1, 8, 8],
        noise: 0.2,
        ..SyntheticSpec::default_for(SyntheticKind::Blobs, 800, 2)
    };
    let data = make_synthetic_with::<f32>(&spec).unwrap();
    let (train, test) = data.split_at(600).unwrap();
    let init = ModelBuilder::new(&[1, 8, 8])
        .conv2d(4, 3, 1, 1)
        .relu()
        .avg_pool(2, 2)
        .conv2d(8, 3, 1, 1)
        .relu()
        .avg_pool(2, 2)
        .flatten()
        .dense(16)
        .relu()
        .dense(4)
        .build::<f32>(3)
        .unwrap();
    let opts = TrainOptions { epochs: 60, lr: 0.05, seed: 0, batch_size: 32 };
    let (model, _) = train_reference(&init, &train, &opts).unwrap();
    let ann = test.accuracy(&model.predict(test.images()).unwrap());
    assert!(ann >= 0.95, "reference accuracy {ann}");

    let cache = build_calibration_cache(&model, &train, 128, 0).unwrap();
    let conv = convert(&model, &cache, &ConvertOptions::default()).unwrap();
    let table = build_table(
        &conv.model,
        &conv.configs,
        &cache,
        4,
        ParamKind::Phi,
        &[1, 2],
        &EnergyModel::default(),
        &SimOptions::default(),
    )
    .unwrap();
    let drops: Vec<f64> = table.sensitivity.iter().map(|s| s[0] - s[1]).collect();
    assert_eq!(drops.len(), 3);
    let last = drops[2];
    for (i, d) in drops[..2].iter().enumerate() {
        assert!(*d > last, "layer {i} drop {d} not above last layer {last}: {drops:?}");
    }
}
