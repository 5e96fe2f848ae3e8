use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use hingenet::baselines::{BaselineConfig, LinearProbe};
use hingenet::data::{generate, time_stretch, Example, SyntheticConfig};
use hingenet::foundation::{build_stub, StubConfig, StubModel};
use hingenet::hingenet::{HingeConfig, HingeModel};
use hingenet::model::{AnyModel, BeatModel, MethodKind};
use hingenet::tensorcore::{Shape, Tensor};
use hingenet::train::{evaluate_examples, train, train_with, Augmenter, SplitData, TrainConfig, TrainOptions};
use hingenet::Exec;
use sha2::{Digest, Sha256};

fn stub(hidden: usize) -> Arc<StubModel> {
    Arc::new(
        build_stub(StubConfig {
            n_layers: 2,
            hidden,
            ..Default::default()
        })
        .unwrap(),
    )
}

fn corpus(n: usize, seed: u64) -> Vec<Example> {
    generate(
        &SyntheticConfig {
            n_items: n,
            duration_s: 4.0,
            seed,
            ..Default::default()
        },
        Exec::Sequential,
    )
    .unwrap()
}

fn split(items: &[Example]) -> SplitData<'_> {
    SplitData {
        train: items[..4].iter().collect(),
        val: items[4..5].iter().collect(),
        test: items[5..].iter().collect(),
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 4,
        batch_size: 4,
        seed,
        augmentation: true,
        ..Default::default()
    }
}

fn hinge_on(stub: Arc<StubModel>) -> HingeModel {
    HingeModel::for_stub(
        HingeConfig {
            projection_factor: 2,
            ..Default::default()
        },
        stub,
        0,
    )
    .unwrap()
}

#[test]
fn training_never_touches_the_stub() {
    let items = corpus(6, 1);
    let data = split(&items);
    let s = stub(32);
    let digest = s.digest();
    let before = s.params().snapshot();

    let mut hinge = hinge_on(s.clone());
    train(&mut hinge, &data, &quick(0), Exec::Sequential).unwrap();
    assert_eq!(s.digest(), digest);

    let mut probe = LinearProbe::new(s.clone(), 0);
    train(&mut probe, &data, &quick(0), Exec::Sequential).unwrap();

    for kind in [MethodKind::Adapter, MethodKind::Lora] {
        let mut m = AnyModel::build(kind, s.clone(), &HingeConfig::default(), &BaselineConfig::default(), 0).unwrap();
        train(&mut m, &data, &TrainConfig { max_epochs: 2, ..quick(0) }, Exec::Sequential).unwrap();
    }
    assert_eq!(s.digest(), digest);
    assert_eq!(s.params().snapshot(), before);
}

struct Counting {
    calls: AtomicUsize,
    ids: Mutex<Vec<String>>,
    factors: Mutex<Vec<f64>>,
}

impl Augmenter for Counting {
    fn stretch(&self, example: &Example, factor: f64) -> hingenet::Result<Example> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.ids.lock().unwrap().push(example.id.clone());
        self.factors.lock().unwrap().push(factor);
        time_stretch(example, factor)
    }
}

#[test]
fn augmentation_touches_training_items_only() {
    let items = corpus(6, 2);
    let data = split(&items);
    let counter = Counting {
        calls: AtomicUsize::new(0),
        ids: Mutex::new(Vec::new()),
        factors: Mutex::new(Vec::new()),
    };
    let cfg = TrainConfig {
        patience: 100,
        ..quick(0)
    };
    let mut m = LinearProbe::new(stub(16), 0);
    let rec = train_with(
        &mut m,
        &data,
        &cfg,
        &TrainOptions {
            exec: Exec::Sequential,
            augmenter: &counter,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(rec.epochs_run, 4);
    assert_eq!(counter.calls.load(Ordering::SeqCst), 4 * data.train.len());
    let train_ids: Vec<&str> = data.train.iter().map(|e| e.id.as_str()).collect();
    assert!(counter.ids.lock().unwrap().iter().all(|id| train_ids.contains(&id.as_str())));
    assert!(counter
        .factors
        .lock()
        .unwrap()
        .iter()
        .all(|f| (cfg.stretch_min..=cfg.stretch_max).contains(f)));

    counter.calls.store(0, Ordering::SeqCst);
    let off = TrainConfig {
        augmentation: false,
        ..cfg
    };
    train_with(
        &mut LinearProbe::new(stub(16), 0),
        &data,
        &off,
        &TrainOptions {
            augmenter: &counter,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(counter.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn training_is_deterministic_across_executors() {
    let items = corpus(6, 3);
    let data = split(&items);
    let s = stub(32);
    let run = |exec| {
        let mut m = hinge_on(s.clone());
        let mut rec = train(&mut m, &data, &quick(5), exec).unwrap();
        rec.wall_clock_s = 0.0;
        (rec, m.params().digest())
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::Parallel));
    let mut other = hinge_on(s.clone());
    train(&mut other, &data, &quick(6), Exec::Sequential).unwrap();
    assert_ne!(other.params().digest(), a.1);
}

#[test]
fn best_epoch_is_restored() {
    let items = corpus(6, 4);
    let data = split(&items);
    let mut m = hinge_on(stub(32));
    let cfg = TrainConfig {
        max_epochs: 8,
        augmentation: false,
        ..quick(1)
    };
    let rec = train(&mut m, &data, &cfg, Exec::Sequential).unwrap();
    let min = rec.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(rec.best_val_loss, min);
    assert_eq!(rec.val_loss[rec.best_epoch - 1], min);
    assert!(rec.val_loss.last().unwrap() < &rec.val_loss[0] || rec.best_epoch < rec.epochs_run);
    assert!(rec.train_loss[rec.train_loss.len() - 1] < rec.train_loss[0]);
    // restored parameters reproduce the best validation loss
    let again = train(
        &mut m.clone(),
        &data,
        &TrainConfig {
            max_epochs: 1,
            lr: 1e-300,
            ..cfg
        },
        Exec::Sequential,
    )
    .unwrap();
    assert!((again.val_loss[0] - min).abs() < 1e-9);
    assert!(rec.test.is_some());
}

fn every_beat_is_visible(ex: &Example) -> bool {
    let column = |f: usize| (0..ex.features.shape().c).map(|c| ex.features.get(0, c, f)).collect::<Vec<_>>();
    ex.annotation.beat_times.iter().all(|t| {
        let f = (t * ex.frame_rate).round() as usize;
        f == 0 || column(f) != column(f - 1)
    })
}

#[test]
fn two_clean_items_are_learned() {
    // items where every beat moves the features; a zero root step leaves a
    // beat with no cue at all
    let items: Vec<Example> = generate(
        &SyntheticConfig {
            n_items: 40,
            duration_s: 10.0,
            noise_sigma: 0.0,
            tempo_jitter: 0.0,
            seed: 12,
            ..Default::default()
        },
        Exec::Sequential,
    )
    .unwrap()
    .into_iter()
    .filter(every_beat_is_visible)
    .take(2)
    .collect();
    assert_eq!(items.len(), 2);
    let refs: Vec<&Example> = items.iter().collect();
    let data = SplitData {
        train: refs.clone(),
        val: refs.clone(),
        test: refs.clone(),
    };
    let s = Arc::new(
        build_stub(StubConfig {
            hidden: 120,
            ..Default::default()
        })
        .unwrap(),
    );
    let mut m = HingeModel::for_stub(HingeConfig::default(), s, 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        batch_size: 1,
        augmentation: false,
        seed: 0,
        ..Default::default()
    };
    let rec = train(&mut m, &data, &cfg, Exec::default()).unwrap();
    let (report, _) = evaluate_examples(&m, &refs, &Default::default(), Exec::default(), None).unwrap();
    println!("overfit: F {:.4} after {} epochs", report.f_measure, rec.epochs_run);
    assert!(report.f_measure >= 0.95, "F {}", report.f_measure);
}

#[test]
fn stub_output_on_silence_is_pinned() {
    let s = build_stub(StubConfig::default()).unwrap();
    let out = s.forward_all(&Tensor::zeros(Shape::new(1, 60, 16)), 50.0).unwrap();
    let mut h = Sha256::new();
    for layer in out.layers() {
        assert!(layer.data().iter().any(|&v| v != 0.0));
        for v in layer.data() {
            h.update(format!("{v:.8e};"));
        }
    }
    let digest = hex::encode(h.finalize());
    assert_eq!(digest, "1c3592e755691085546b436745d1cb502e7d62bcb792b0e76370328d45ce47e4");
}
