use nodet_tensor::checkpoint;
use nodet_tensor::nn::{BatchNorm, ConvBnAct};
use nodet_tensor::optim::apply_buffer_updates;
use nodet_tensor::{Graph, ParamStore, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(seed: u64) -> (ParamStore<f32>, ConvBnAct) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = ConvBnAct::new(&mut store, "stem", 2, 4, [3, 3, 3], &mut rng);
    (store, layer)
}

#[test]
fn checkpoint_roundtrip_preserves_every_tensor() {
    let (store, _) = build(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, "arch = test", &store).unwrap();
    let archive = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(archive.config, "arch = test");
    assert_eq!(archive.tensors.len(), store.len());
    for ((_, name, t, _), (n2, t2)) in store.iter().zip(&archive.tensors) {
        assert_eq!(name, n2);
        assert_eq!(t, t2);
    }
    let (mut other, _) = build(4);
    other.load_named(archive.tensors).unwrap();
    for ((_, _, a, _), (_, _, b, _)) in store.iter().zip(other.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_rejects_wrong_dtype() {
    let (store, _) = build(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, "", &store).unwrap();
    assert!(checkpoint::load::<f64>(&path).is_err());
}

#[test]
fn same_seed_gives_identical_forward() {
    let x = Tensor::from_fn(Shape::new(2, 2, 4, 4, 4), |i| ((i * 37) % 11) as f32 / 11.0);
    let run = || {
        let (store, layer) = build(9);
        let g = Graph::inference();
        let xv = g.constant(x.clone());
        layer.forward(&g, &store, &xv).unwrap().into_tensor()
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_norm_running_stats_track_batch() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 1);
    let x = Tensor::from_vec(Shape::new(4, 1, 1, 1, 1), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    for _ in 0..200 {
        let g = Graph::training(0);
        let xv = g.constant(x.clone());
        bn.forward(&g, &store, &xv).unwrap();
        let updates = g.take_buffer_updates();
        apply_buffer_updates(&mut store, updates);
    }
    // mean 3, unbiased variance 14/3
    let mean = store.get(store.find("bn.running_mean").unwrap()).data()[0];
    let var = store.get(store.find("bn.running_var").unwrap()).data()[0];
    assert!((mean - 3.0).abs() < 1e-6, "{mean}");
    assert!((var - 14.0 / 3.0).abs() < 1e-6, "{var}");

    let g = Graph::inference();
    let y = bn.forward(&g, &store, &g.constant(x)).unwrap().into_tensor();
    let expect = (6.0 - 3.0) / (14.0f64 / 3.0 + 1e-5).sqrt();
    assert!((y.data()[3] - expect).abs() < 1e-6);
}
