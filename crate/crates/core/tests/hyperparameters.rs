//! Architecture and optimizer constants.

use sgscn::segnet::{init_params, ParamSet, SegNetConfig};
use sgscn::tensor::Tensor;
use sgscn::trainer::TrainConfig;

#[test]
fn three_conv_blocks_of_100_filters() {
    let c = SegNetConfig::new(3);
    assert_eq!(c.num_layers, 3);
    assert_eq!((c.kernel, c.stride, c.pad), (3, 1, 1));
    assert_eq!(c.filters, 100);
    let p: ParamSet<f32> = init_params(&c, 0).unwrap();
    assert_eq!(p.layers[0].weight.value.shape(), &[100, 3, 3, 3]);
}

#[test]
fn response_map_keeps_spatial_size() {
    let p: ParamSet<f32> = init_params(&SegNetConfig::new(3), 0).unwrap();
    let x = Tensor::from_fn([3, 64, 64], |i| (i % 7) as f32 / 7.0);
    assert_eq!(p.forward(&x).unwrap().shape(), &[100, 64, 64]);
}

#[test]
fn optimizer_profiles() {
    let derm = TrainConfig::dermoscopy();
    assert_eq!((derm.lr, derm.momentum), (0.1, 0.9));
    let us = TrainConfig::ultrasound();
    assert_eq!((us.lr, us.momentum), (0.05, 0.9));
    assert_eq!(derm.filters, 100);
}

#[test]
fn kmeans_baseline_uses_three_clusters() {
    let opts = sgscn::harness::RunOptions::new("in", "out");
    assert_eq!(opts.k, 3);
}
