use freqdetect::loss::focal_loss_grad;
use freqdetect::model::{Detector, DetectorConfig};
use freqdetect::toy::{generate, ToyLayout};
use freqdetect::train::{
    evaluate, lr_at, prepare_image, train, EpochRecord, FocalLossConfig, History, Optimizer, OptimizerKind, Sample,
    TrainConfig,
};
use freqdetect::weights::ParamStore;
use freqdetect::{image_io::Split, Tape, Tensor};

/// z = a·x + b on four points, focal loss, one optimizer step per call.
fn toy_step(store: &mut ParamStore, opt: &mut Optimizer, cfg: &TrainConfig, x: &[f64], y: &[f64], lr: f64) {
    let mut t = Tape::new();
    let a = t.param(store.tensor(0).clone());
    let b = t.param(store.tensor(1).clone());
    let n = x.len();
    let xs = t.constant(Tensor::new([n], x.to_vec()).unwrap());
    let ab = t.broadcast_to(a, &[n]).unwrap();
    let bb = t.broadcast_to(b, &[n]).unwrap();
    let ax = t.mul(ab, xs).unwrap();
    let z = t.add(ax, bb).unwrap();
    let loss = t.focal_loss(z, y, 0.4, 2.0).unwrap();
    let g = t.backward(loss).unwrap();
    opt.step(store, &[g.get(a), g.get(b)], lr, cfg).unwrap();
}

#[test]
fn adam_matches_a_hand_stepped_update() {
    let cfg = TrainConfig::default();
    let (x, y) = ([0.5, -1.5, 2.0, 0.25], [1.0, 0.0, 1.0, 0.0]);
    let mut store = ParamStore::new();
    store.add_param("a", Tensor::new([1], vec![0.3]).unwrap()).unwrap();
    store.add_param("b", Tensor::new([1], vec![-0.2]).unwrap()).unwrap();
    let mut opt = Optimizer::new(&store, OptimizerKind::Adam);

    let mut p = [0.3, -0.2];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for (step, lr) in [(1, 0.01), (2, 0.005), (3, 0.02)] {
        toy_step(&mut store, &mut opt, &cfg, &x, &y, lr);

        let z: Vec<f64> = x.iter().map(|xi| p[0] * xi + p[1]).collect();
        let gz = focal_loss_grad(&z, &y, 0.4, 2.0).unwrap();
        let g = [gz.iter().zip(&x).map(|(g, xi)| g * xi).sum::<f64>(), gz.iter().sum::<f64>()];
        for k in 0..2 {
            p[k] *= 1.0 - lr * cfg.weight_decay;
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(step));
            let vh = v[k] / (1.0 - 0.999f64.powi(step));
            p[k] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        for k in 0..2 {
            let got = store.tensor(k).data()[0];
            assert!((got - p[k]).abs() < 1e-12, "step {step} param {k}: {got} vs {}", p[k]);
        }
    }
    assert_eq!(opt.steps(), 3);
}

#[test]
fn sgd_momentum_step() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut store = ParamStore::new();
    store.add_param("w", Tensor::new([2], vec![1.0, -1.0]).unwrap()).unwrap();
    store.add_buffer("frozen", Tensor::new([1], vec![5.0]).unwrap()).unwrap();
    let mut opt = Optimizer::new(&store, OptimizerKind::Sgd);
    let g = Tensor::new([2], vec![0.5, 2.0]).unwrap();
    let gb = Tensor::new([1], vec![1.0]).unwrap();
    opt.step(&mut store, &[Some(&g), Some(&gb)], 0.1, &cfg).unwrap();
    opt.step(&mut store, &[Some(&g), Some(&gb)], 0.1, &cfg).unwrap();
    // velocity g then 1.9 g
    let want = [1.0 - 0.1 * 2.9 * 0.5, -1.0 - 0.1 * 2.9 * 2.0];
    for (got, w) in store.tensor(0).data().iter().zip(want) {
        assert!((got - w).abs() < 1e-15);
    }
    assert_eq!(store.tensor(1).data(), &[5.0]);
    assert!(opt.step(&mut store, &[Some(&g)], 0.1, &cfg).is_err());
}

#[test]
fn schedule_shape() {
    let c = TrainConfig { lr: 0.3, warmup_iters: 50, ..Default::default() };
    let total = 400;
    assert_eq!(lr_at(0, total, &c), 0.0);
    assert_eq!(lr_at(25, total, &c), 0.15);
    assert_eq!(lr_at(50, total, &c), 0.3);
    let step = lr_at(49, total, &c) - lr_at(48, total, &c);
    assert!((lr_at(50, total, &c) - lr_at(49, total, &c) - step).abs() < 1e-12);
    assert!(lr_at(total - 1, total, &c) < 1e-4 * c.lr);
    let tail: Vec<f64> = (50..total).map(|i| lr_at(i, total, &c)).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]));
    let none = TrainConfig { warmup_iters: 0, ..c };
    assert_eq!(lr_at(0, total, &none), 0.3);
}

fn small() -> DetectorConfig {
    DetectorConfig { width: 8, n_fadc_blocks: 1, head_channels: vec![8, 16], d_k: 8, d_v: 8, heads: 1, ..Default::default() }
}

fn toy_samples(det: &Detector) -> (Vec<Sample>, Vec<Sample>) {
    let items = generate(&ToyLayout::standard(20, 10, 0, 5));
    let prep = |split| {
        items
            .iter()
            .filter(|i| i.entry.split == split)
            .map(|i| prepare_image(det, &i.image, &i.entry.path, i.entry.label, None).unwrap())
            .collect::<Vec<_>>()
    };
    (prep(Split::Train), prep(Split::Val))
}

fn run() -> (Detector, History, Vec<EpochRecord>) {
    let mut det = Detector::build(small()).unwrap();
    let (tr, val) = toy_samples(&det);
    assert_eq!((tr.len(), val.len()), (20, 10));
    let cfg = TrainConfig { lr: 2e-3, batch: 5, epochs: 5, warmup_iters: 2, ..Default::default() };
    let mut seen = Vec::new();
    let h = train(&mut det, &tr, &val, &cfg, &FocalLossConfig::default(), |r| seen.push(*r)).unwrap();
    (det, h, seen)
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let (det, h, seen) = run();
    assert_eq!(h.epochs, seen);
    assert_eq!(h.epochs.len(), 5);
    let first = h.epochs[0].loss;
    let last = h.epochs[4].loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(h.epochs.iter().all(|e| (0.0..=1.0).contains(&e.acc)));

    let (again, h2, _) = run();
    assert_eq!(again.store(), det.store());
    assert_eq!(h2, h);
    assert_eq!(again.threshold().to_bits(), det.threshold().to_bits());

    let mut buf = Vec::new();
    h.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("epoch,loss,acc\n0,"));
    assert_eq!(text.lines().count(), 6);

    let (_, val) = toy_samples(&det);
    let r = evaluate(&det, &val, 4).unwrap();
    assert_eq!((r.n_real, r.n_fake), (5, 5));
    assert!((0.0..=1.0).contains(&r.acc) && (0.0..=1.0).contains(&r.ap));
    assert_eq!(r, evaluate(&det, &val, 10).unwrap());
}

#[test]
fn training_rejects_single_class_splits() {
    let mut det = Detector::build(small()).unwrap();
    let (tr, val) = toy_samples(&det);
    let reals: Vec<Sample> = tr.iter().filter(|s| s.label == 0).cloned().collect();
    let cfg = TrainConfig { batch: 5, epochs: 1, warmup_iters: 0, ..Default::default() };
    assert!(train(&mut det, &reals, &val, &cfg, &FocalLossConfig::default(), |_| {}).is_err());
    assert!(train(&mut det, &tr, &[], &cfg, &FocalLossConfig::default(), |_| {}).is_err());
}
