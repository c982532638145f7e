#![allow(clippy::needless_range_loop)]

use flatlora::model::lora::AdapterInit;
use flatlora::model::{build_model, Batch, Inputs, ModelSpec, Targets};
use flatlora::rng::RngStream;
use flatlora::tensor::gradcheck::{check, DEFAULT_STEP};
use flatlora::tensor::{Graph, Tensor};

#[test]
fn matmul_sum_gradient_is_broadcast_column_sums() {
    let mut s = RngStream::new(1);
    let a = Tensor::new(vec![3, 4], s.normals(12)).unwrap();
    let b = Tensor::new(vec![4, 5], s.normals(20)).unwrap();
    let r = check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        },
        &[a, b.clone()],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
    // d/da_ij sum(ab) = sum_k b_jk.
    let row_sums: Vec<f64> = b.rows().map(|row| row.iter().sum()).collect();
    for i in 0..3 {
        for j in 0..4 {
            assert!((r.analytic[0][i * 4 + j] - row_sums[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn composite_model_losses_match_finite_differences() {
    let mut s = RngStream::new(2);
    for spec in
        [ModelSpec::mlp(vec![3, 6, 5, 2]), ModelSpec { activation: flatlora::model::Activation::Gelu, ..ModelSpec::mlp(vec![3, 4, 2]) }]
    {
        let mut model = build_model(&spec, 2).unwrap();
        for site in model.adapted_sites() {
            let b = model.linears()[site].adapter.as_ref().unwrap().b;
            let shape = model.param(b).tensor.shape().to_vec();
            let n = model.param(b).tensor.len();
            model.param_mut(b).tensor = Tensor::new(shape, s.normals(n)).unwrap().with_grad(true);
        }
        let x = Tensor::new(vec![7, 3], s.normals(21)).unwrap();
        let batch = Batch { inputs: Inputs::Features(x), targets: Targets::Classes(vec![0, 1, 1, 0, 1, 0, 0]) };
        model.zero_grad();
        model.accumulate_gradients(&batch).unwrap();
        let h = DEFAULT_STEP;
        for id in model.trainable_ids() {
            let analytic = model.param(id).tensor.grad.clone().unwrap();
            let mut numeric = Vec::new();
            for i in 0..analytic.len() {
                let mut plus = model.clone();
                plus.param_mut(id).tensor.data_mut()[i] += h;
                let mut minus = model.clone();
                minus.param_mut(id).tensor.data_mut()[i] -= h;
                numeric.push((plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h));
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / norm < 1e-4, "param {} rel err {}", model.param(id).name, diff / norm);
        }
    }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let mut s = RngStream::new(7);
    let spec = ModelSpec {
        transformer: flatlora::model::TransformerSpec { vocab: 5, seq_len: 4, dim: 8, heads: 2, ff_dim: 12, classes: 2 },
        train_head: true,
        ..ModelSpec::tiny_transformer()
    }
    .with_rank(2, 4.0);
    let mut model = build_model(&spec, 7).unwrap();
    for site in model.adapted_sites() {
        let b = model.linears()[site].adapter.as_ref().unwrap().b;
        let shape = model.param(b).tensor.shape().to_vec();
        let n = model.param(b).tensor.len();
        model.param_mut(b).tensor = Tensor::new(shape, s.normals(n)).unwrap().scale(0.3).with_grad(true);
    }
    let ids: Vec<usize> = (0..12).map(|_| s.below(5)).collect();
    let batch = Batch { inputs: Inputs::Tokens { ids, seq_len: 4 }, targets: Targets::Classes(vec![0, 1, 1]) };
    model.zero_grad();
    model.accumulate_gradients(&batch).unwrap();
    let h = DEFAULT_STEP;
    for id in model.trainable_ids() {
        let analytic = model.param(id).tensor.grad.clone().unwrap();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let mut plus = model.clone();
                plus.param_mut(id).tensor.data_mut()[i] += h;
                let mut minus = model.clone();
                minus.param_mut(id).tensor.data_mut()[i] -= h;
                (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / norm < 1e-4, "param {} rel err {}", model.param(id).name, diff / norm);
    }
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut s = RngStream::new(3);
    let logits = Tensor::new(vec![3, 5], s.normals(15)).unwrap();
    let labels = [4, 0, 2];
    let mut g = Graph::new();
    let v = g.leaf(logits.clone());
    let loss = g.softmax_cross_entropy(v, &labels).unwrap();
    let got = g.value(loss).data()[0];
    let want = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = logits.row(i);
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum::<f64>()
        / 3.0;
    assert!(((got - want) / want).abs() < 1e-10);
}

#[test]
fn normal_draws_have_unit_moments() {
    let z = RngStream::new(4).derive_str("moments").peek_normals(1_000_000);
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((var - 1.0).abs() < 0.01, "{var}");
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn distinct_stream_labels_are_uncorrelated() {
    let root = RngStream::new(5);
    let a = root.derive_str("left").peek_normals(100_000);
    let b = root.derive_str("right").peek_normals(100_000);
    assert!(correlation(&a, &b).abs() < 0.01);
    let c = root.derive(1).peek_normals(100_000);
    let d = root.derive(2).peek_normals(100_000);
    assert!(correlation(&c, &d).abs() < 0.01);
}

#[test]
fn adapter_a_entries_follow_uniform_bounds() {
    let fan_in = 50;
    let a = AdapterInit::KaimingUniform.sample(&mut RngStream::new(6), 2000, fan_in);
    let bound = (6.0 / fan_in as f64).sqrt();
    let d = a.data();
    let n = d.len() as f64;
    assert_eq!(d.len(), 100_000);
    let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(lo >= -bound && hi < bound);
    assert!((lo + bound).abs() < 0.02 * bound && (hi - bound).abs() < 0.02 * bound);
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02 * bound);
    assert!((var / (bound * bound / 3.0) - 1.0).abs() < 0.02);
}

#[test]
fn full_rank_adapter_is_allowed() {
    let spec = ModelSpec::mlp(vec![4, 4, 4]).with_rank(4, 4.0);
    let model = build_model(&spec, 0).unwrap();
    assert!(model.adapted_sites().iter().all(|&s| model.linears()[s].adapter.as_ref().unwrap().rank == 4));
}
