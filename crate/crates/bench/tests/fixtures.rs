use candle_core::{Device, Tensor};
use spa_bench::{batch, classifier, generator, rotation, SHAPE};
use spa_core::manipulator::ApplyMode;

#[test]
fn batches_are_seeded_unit_range_images() {
    let (x, y) = batch(12, 4);
    assert_eq!(x.dims(), &[12, SHAPE.0, SHAPE.1, SHAPE.2]);
    assert_eq!(y.len(), 12);
    let again = batch(12, 4).0;
    assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), again.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    let lo = x.min_all().unwrap().to_scalar::<f32>().unwrap();
    let hi = x.max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(lo >= 0.0 && hi <= 1.0);
}

#[test]
fn fixture_components_accept_the_fixture_batch() {
    let (x, y) = batch(4, 1);
    assert_eq!(classifier().predict(&x).unwrap().len(), 4);
    let alpha = Tensor::full(10f32, (4, 1), &Device::Cpu).unwrap();
    assert_eq!(rotation().apply(&x, &alpha, ApplyMode::Attack).unwrap().dims(), x.dims());
    assert_eq!(generator().spec().input_shape, SHAPE);
    assert_eq!(y, vec![0, 1, 2, 3]);
}
