use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segcore::arch::{ArchitectureSpec, Family, Model};
use segcore::data::{synthetic_samples, Sample};
use segcore::train::{evaluate, loss_csv, train, Optimizer, OptimizerKind, TrainConfig};
use segcore::{ops, SegError, Shape, Tape, Tensor};

fn samples(count: usize, seed: u64) -> Vec<Sample> {
    synthetic_samples(count, 16, seed).unwrap().into_iter().map(|s| s.sample).collect()
}

fn config(family: Family) -> TrainConfig {
    let mut c = TrainConfig::new(ArchitectureSpec::new(family).with_depth(2).with_base_filters(4).with_input_size(16));
    c.epochs = 1;
    c.batch_size = 2;
    c.log_interval = 0;
    c
}

#[test]
fn steps_per_epoch_follow_batch_size() {
    let data = samples(4, 0);
    let out = train(&config(Family::Unet), &data).unwrap();
    assert_eq!(out.history.len(), 2);
    let mut c = config(Family::Unet);
    c.epochs = 3;
    c.batch_size = 3;
    let out = train(&c, &data).unwrap();
    assert_eq!(out.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
    assert_eq!(out.history.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
}

#[test]
fn max_steps_stops_early() {
    let mut c = config(Family::Segnet);
    c.epochs = 10;
    c.max_steps = Some(3);
    assert_eq!(train(&c, &samples(4, 1)).unwrap().history.len(), 3);
}

#[test]
fn training_is_deterministic() {
    let data = samples(6, 2);
    let mut c = config(Family::Resunet);
    c.epochs = 2;
    let a = train(&c, &data).unwrap();
    let b = train(&c, &data).unwrap();
    assert_eq!(loss_csv(&a.history), loss_csv(&b.history));
    for ((n, p), (_, q)) in a.model.params().iter().zip(b.model.params()) {
        assert!(p.value.bit_eq(&q.value), "{n}");
    }
}

#[test]
fn loss_goes_down() {
    let mut c = config(Family::Unet);
    c.epochs = 40;
    c.batch_size = 4;
    c.lr = 1e-2;
    let out = train(&c, &samples(4, 3)).unwrap();
    let first = out.history[..5].iter().map(|r| r.loss).sum::<f64>();
    let last = out.history[out.history.len() - 5..].iter().map(|r| r.loss).sum::<f64>();
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn sgd_without_momentum_is_plain_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut opt = Optimizer::sgd(0.1, 0.0);
    let mut p = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
    for _ in 0..5 {
        let g = Tensor::randn(p.shape(), 1.0, &mut rng);
        opt.begin_step();
        let next = opt.update("w", &p, &g).unwrap();
        let manual: Vec<f64> = p.data().iter().zip(g.data()).map(|(a, b)| a - 0.1 * b).collect();
        assert_eq!(next.data(), manual.as_slice());
        p = next;
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
    let p = Tensor::zeros(Shape::new(1, 1, 1, 3));
    let g = Tensor::new(p.shape(), vec![-3.0, 0.5, 100.0]).unwrap();
    opt.begin_step();
    let next = opt.update("w", &p, &g).unwrap();
    for (v, e) in next.data().iter().zip([0.01, -0.01, -0.01]) {
        assert!((v - e).abs() < 1e-8, "{v}");
    }
}

#[test]
fn gradients_from_another_tape_are_missing() {
    let mut model = Model::build(&config(Family::Unet).spec, 0).unwrap();
    let binding = model.bind(&mut Tape::new(), true);
    let mut other = Tape::new();
    let x = other.watch(&Tensor::ones(Shape::new(1, 1, 1, 1)));
    let loss = ops::sum_all(&mut other, &x).unwrap();
    let grads = other.backward(&loss).unwrap();
    let mut opt = Optimizer::adam(1e-3);
    assert!(matches!(opt.step_model(&mut model, &binding, &grads), Err(SegError::MissingGradient(_))));
}

#[test]
fn batch_norm_models_need_two_samples_per_batch() {
    let mut c = config(Family::Resunet);
    c.batch_size = 1;
    assert!(matches!(train(&c, &samples(2, 5)), Err(SegError::InvalidArgument(_))));
    assert!(matches!(train(&config(Family::Unet), &[]), Err(SegError::InvalidArgument(_))));
}

#[test]
fn writes_checkpoint_and_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(Family::Unet);
    c.epochs = 2;
    c.checkpoint = Some(dir.path().join("m.ckpt"));
    c.loss_log = Some(dir.path().join("loss.csv"));
    let out = train(&c, &samples(4, 6)).unwrap();
    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,epoch,loss"));
    assert_eq!(log.lines().count(), 1 + out.history.len());
    let back = segcore::arch::load_checkpoint(&dir.path().join("m.ckpt")).unwrap();
    let x = samples(1, 7)[0].image.clone();
    assert!(back.predict(&x).unwrap().bit_eq(&out.model.predict(&x).unwrap()));
}

#[test]
fn evaluation_counts_every_pixel() {
    let data = samples(3, 8);
    let model = Model::build(&config(Family::Segnet).spec, 0).unwrap();
    assert_eq!(evaluate(&model, &data).unwrap().total(), 3 * 16 * 16);
}
