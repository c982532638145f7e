use flatlora::experiment::train_run;
use flatlora::landscape::{filter_normalized_direction, loss_surface, sharpness_metric, Direction, QuadraticProbe};
use flatlora::rng::RngStream;
use flatlora::tensor::Tensor;
use flatlora::trainers::Method;
use flatlora::validate::overfit_config;
use proptest::prelude::*;
use rayon::prelude::*;

#[test]
fn independent_directions_are_nearly_orthogonal() {
    let mut s = RngStream::new(1);
    let base = vec![Tensor::new(vec![50, 100], s.normals(5000)).unwrap(), Tensor::new(vec![100, 50], s.normals(5000)).unwrap()];
    let label = RngStream::new(2).derive_str("dirs");
    let a = filter_normalized_direction(&base, label.derive(0));
    let b = filter_normalized_direction(&base, label.derive(1));
    let flat = |d: &Direction| d.layers.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
    let (x, y) = (flat(&a), flat(&b));
    assert_eq!(x.len(), 10_000);
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let cos = dot / (x.iter().map(|v| v * v).sum::<f64>() * y.iter().map(|v| v * v).sum::<f64>()).sqrt();
    assert!(cos.abs() < 0.2, "{cos}");
}

#[test]
fn sharpness_falls_as_training_sigma_rises() {
    let seeds = [0, 1, 2, 3, 4];
    let mean_sharpness = |method, sigma| {
        let cfg = overfit_config(method, sigma, &seeds).unwrap();
        let v: Vec<f64> = seeds.par_iter().map(|&s| train_run(&cfg, s, None).unwrap().row.sharpness.unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let curve = [
        mean_sharpness(Method::FlatLora, Some(0.0)),
        mean_sharpness(Method::FlatLora, Some(0.05)),
        mean_sharpness(Method::FlatLora, Some(0.1)),
    ];
    assert!(curve[0] > curve[1] && curve[1] > curve[2], "{curve:?}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn quadratic_surface_is_symmetric(seed in 0u64..10_000, h in 0.1f64..10.0) {
        // L(w) = h |w|^2 / 2 about the origin.
        let mut s = RngStream::new(seed);
        let base = vec![Tensor::zeros(&[3, 4])];
        let probe = QuadraticProbe { center: base.clone(), base, curvature: h };
        let d = Direction::raw(vec![Tensor::new(vec![3, 4], s.normals(12)).unwrap()]);
        let g = loss_surface(&probe, &[d], 41, 1.0, "toy").unwrap();
        for i in 0..41 {
            prop_assert_eq!(g.value(i, 0).to_bits(), g.value(40 - i, 0).to_bits());
        }
    }

    #[test]
    fn sharpness_is_nonnegative_at_a_quadratic_minimum(seed in 0u64..10_000, radius in 0.0f64..2.0) {
        let mut s = RngStream::new(seed);
        let base = vec![Tensor::new(vec![4, 5], s.normals(20)).unwrap()];
        let probe = QuadraticProbe { center: base.clone(), base, curvature: 3.0 };
        let m = sharpness_metric(&probe, radius, 4, RngStream::new(seed).derive_str("sharp")).unwrap();
        prop_assert!(m >= 0.0);
    }
}
