mod common;

use std::sync::Arc;

use common::{fd_check, fd_check_params, probe, random_tensor, randomise_trainable, rng};
use hingenet::baselines::{AdapterModel, BaselineConfig, LinearProbe, LoraModel};
use hingenet::foundation::{build_stub, LayerFeatureStack, NoHooks, StubConfig, StubModel};
use hingenet::hingenet::{HingeConfig, HingeModel};
use hingenet::model::{
    count_parameters, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, stub_parameter_counts,
    AnyModel, BeatModel, MethodKind, ModelInput,
};
use hingenet::tensorcore::{Axis, Graph, Shape, Tensor};
use hingenet::Error;

fn toy_stub(n_layers: usize, hidden: usize, input_channels: usize) -> Arc<StubModel> {
    Arc::new(
        build_stub(StubConfig {
            n_layers,
            hidden,
            input_channels,
            n_heads: 1,
            seed: 3,
        })
        .unwrap(),
    )
}

fn random_stack(n: usize, shape: Shape, seed: u64) -> LayerFeatureStack {
    let mut r = rng(seed);
    LayerFeatureStack::new((0..n).map(|_| random_tensor(shape, &mut r)).collect(), 50.0).unwrap()
}

fn scaled(t: Tensor, s: f64) -> Tensor {
    t.map(|v| v * s)
}

// ---------------------------------------------------------------------------
// gradients

#[test]
fn stub_input_gradient_through_every_block() {
    let stub = toy_stub(4, 8, 5);
    let x = random_tensor(Shape::new(1, 5, 8), &mut rng(1));
    let report = fd_check(&[x], |g, v| {
        let outs = stub.forward_graph(g, v[0], &NoHooks).unwrap();
        let mut loss = probe(g, outs[0], 100);
        for (k, &o) in outs.iter().enumerate().skip(1) {
            let p = probe(g, o, 100 + k as u64);
            loss = g.add(loss, p).unwrap();
        }
        loss
    });
    assert!(report.passed(), "{report:?}");
}

#[test]
fn core_layer_gradient_project_fuse_ham() {
    let mut hinge = HingeModel::new(HingeConfig { projection_factor: 2, ..Default::default() }, 2, 32, 5).unwrap();
    assert_eq!(hinge.dilations(1), vec![12, 7, 5, 4]);
    hinge.set_gate_logit(1, 0.7).unwrap();
    let mut r = rng(2);
    let features = random_tensor(Shape::new(1, 32, 6), &mut r);
    let prev = random_tensor(Shape::new(1, 16, 6), &mut r);
    let report = fd_check(&[features, prev], |g, v| {
        let p = hinge.project_graph(g, 1, v[0]).unwrap();
        let f = hinge.fuse_graph(g, 1, Some(v[1]), p).unwrap();
        let y = hinge.ham_graph(g, 1, f).unwrap();
        probe(g, y, 7)
    });
    assert!(report.passed(), "{report:?}");
}

#[test]
fn stub_plus_hinge_parameter_gradients() {
    let stub = toy_stub(2, 16, 5);
    let cfg = HingeConfig {
        projection_factor: 1,
        dilations: Some(vec![4, 3, 2, 1]),
        ..Default::default()
    };
    let mut hinge = HingeModel::for_stub(cfg, stub, 9).unwrap();
    hinge.set_gate_logit(1, -0.4).unwrap();
    let x = random_tensor(Shape::new(1, 5, 8), &mut rng(4));
    let input = ModelInput::Raw {
        features: &x,
        frame_rate: 50.0,
    };
    let report = fd_check_params(&mut hinge, &input);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn time_axis_hinge_parameter_gradients() {
    let cfg = HingeConfig {
        projection_factor: 2,
        conv_axis: Axis::Time,
        ..Default::default()
    };
    let mut hinge = HingeModel::new(cfg, 2, 8, 1).unwrap();
    hinge.set_gate_logit(1, 0.3).unwrap();
    let stack = random_stack(2, Shape::new(1, 8, 16), 6);
    let report = fd_check_params(&mut hinge, &ModelInput::Stack(&stack));
    assert!(report.passed(), "{report:?}");
}

#[test]
fn time_axis_rejects_clips_shorter_than_reach() {
    let cfg = HingeConfig {
        projection_factor: 2,
        conv_axis: Axis::Time,
        ..Default::default()
    };
    let hinge = HingeModel::new(cfg, 1, 8, 1).unwrap();
    let stack = random_stack(1, Shape::new(1, 8, 12), 6);
    assert!(matches!(hinge.hinge_forward(&stack), Err(Error::InvalidArgument(_))));
}

#[test]
fn adapter_parameter_gradients() {
    let stub = toy_stub(2, 8, 5);
    let cfg = BaselineConfig {
        bottleneck: 3,
        ..Default::default()
    };
    let mut m = AdapterModel::new(stub, cfg, 2).unwrap();
    randomise_trainable(m.params_mut(), 8, 0.5);
    let x = random_tensor(Shape::new(1, 5, 6), &mut rng(5));
    let report = fd_check_params(
        &mut m,
        &ModelInput::Raw {
            features: &x,
            frame_rate: 50.0,
        },
    );
    assert!(report.passed(), "{report:?}");
}

#[test]
fn lora_parameter_gradients() {
    let stub = toy_stub(2, 8, 5);
    let cfg = BaselineConfig {
        rank: 2,
        ..Default::default()
    };
    let mut m = LoraModel::new(stub, cfg, 2).unwrap();
    randomise_trainable(m.params_mut(), 9, 0.5);
    let x = random_tensor(Shape::new(1, 5, 6), &mut rng(5));
    let report = fd_check_params(
        &mut m,
        &ModelInput::Raw {
            features: &x,
            frame_rate: 50.0,
        },
    );
    assert!(report.passed(), "{report:?}");
}

// ---------------------------------------------------------------------------
// gates and separability

#[test]
fn gate_contract() {
    let mut hinge = HingeModel::new(HingeConfig::default(), 4, 120, 0).unwrap();
    assert_eq!(hinge.gate_value(0), None);
    for i in 1..4 {
        assert_eq!(hinge.gate_value(i), Some(0.5));
    }
    let mut r = rng(3);
    let proj = scaled(random_tensor(Shape::new(2, 20, 9), &mut r), 0.5);
    let prev = scaled(random_tensor(Shape::new(2, 20, 9), &mut r), 0.5);

    assert_eq!(hinge.fuse(0, None, &proj).unwrap(), proj);
    assert_eq!(hinge.fuse(0, Some(&prev), &proj).unwrap(), proj);

    let half = hinge.fuse(1, Some(&prev), &proj).unwrap();
    for i in 0..half.len() {
        let expect = 0.5 * prev.data()[i] + 0.5 * proj.data()[i];
        assert!((half.data()[i] - expect).abs() < 1e-15);
    }

    hinge.set_gate_logit(1, 20.0).unwrap();
    assert!(hinge.fuse(1, Some(&prev), &proj).unwrap().max_abs_diff(&prev) < 1e-8);
    hinge.set_gate_logit(1, -20.0).unwrap();
    assert!(hinge.fuse(1, Some(&prev), &proj).unwrap().max_abs_diff(&proj) < 1e-8);
}

#[test]
fn open_gates_ignore_later_layers() {
    let mut hinge = HingeModel::new(HingeConfig::default(), 4, 120, 0).unwrap();
    for i in 1..4 {
        hinge.set_gate_logit(i, 50.0).unwrap();
    }
    let stack = random_stack(4, Shape::new(1, 120, 30), 1);
    let base = hinge.hinge_forward(&stack).unwrap();
    let mut layers = stack.layers().to_vec();
    let mut r = rng(2);
    for l in layers.iter_mut().skip(1) {
        *l = random_tensor(l.shape(), &mut r);
    }
    let perturbed = LayerFeatureStack::new(layers, 50.0).unwrap();
    let out = hinge.hinge_forward(&perturbed).unwrap();
    assert!(out.beat.max_abs_diff(&base.beat) < 1e-8);
    assert!(out.downbeat.max_abs_diff(&base.downbeat) < 1e-8);

    // and the first layer still matters
    let mut layers = stack.layers().to_vec();
    layers[0] = random_tensor(layers[0].shape(), &mut r);
    let moved = hinge.hinge_forward(&LayerFeatureStack::new(layers, 50.0).unwrap()).unwrap();
    assert!(moved.beat.max_abs_diff(&base.beat) > 1e-6);
}

#[test]
fn hinge_reads_the_stack_without_mutating_it() {
    let hinge = HingeModel::new(HingeConfig::default(), 4, 120, 0).unwrap();
    let stack = random_stack(4, Shape::new(2, 120, 40), 5);
    let copy = stack.clone();
    let out = hinge.hinge_forward(&stack).unwrap();
    assert_eq!(stack, copy);
    assert_eq!(out.frames(), 40);
    assert_eq!(out.beat.shape(), Shape::new(2, 1, 40));
    assert!(out.beat.data().iter().chain(out.downbeat.data()).all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn zero_initialised_insertions_match_the_probe_bit_exactly() {
    let stub = toy_stub(3, 16, 7);
    let x = random_tensor(Shape::new(2, 7, 25), &mut rng(11));
    let input = ModelInput::Raw {
        features: &x,
        frame_rate: 50.0,
    };
    let probe = LinearProbe::new(stub.clone(), 4).predict(&input).unwrap();
    let adapter = AdapterModel::new(stub.clone(), BaselineConfig::default(), 4).unwrap().predict(&input).unwrap();
    let lora = LoraModel::new(stub.clone(), BaselineConfig::default(), 4).unwrap().predict(&input).unwrap();
    assert_eq!(adapter, probe);
    assert_eq!(lora, probe);

    let stack = stub.forward_all(&x, 50.0).unwrap();
    assert_eq!(LinearProbe::new(stub, 4).predict(&ModelInput::Stack(&stack)).unwrap(), probe);
}

#[test]
fn stub_is_deterministic_and_keeps_frames() {
    let stub = toy_stub(4, 16, 7);
    let again = toy_stub(4, 16, 7);
    assert_eq!(stub.digest(), again.digest());
    let x = random_tensor(Shape::new(1, 7, 200), &mut rng(1));
    let a = stub.forward_all(&x, 50.0).unwrap();
    assert_eq!(a.n_layers(), 4);
    assert!(a.layers().iter().all(|l| l.shape() == Shape::new(1, 16, 200)));
    assert_eq!(a, again.forward_all(&x, 50.0).unwrap());
}

// ---------------------------------------------------------------------------
// parameter accounting

fn stub_frozen(n: usize, h: usize, cin: usize) -> usize {
    let stem = h * cin * 3 + h;
    let block = 2 * 2 * h + 4 * (h * h + h) + (4 * h * h + 4 * h) + (h * 4 * h + h);
    stem + n * block
}

fn hinge_trainable(n: usize, h: usize, r: usize, m: usize, k: usize, ham: bool) -> usize {
    let w = h / r;
    let proj = h * w + w;
    let core = if ham { m * (k + 1) + (m * w * w + w) + (w * w + w) } else { w * w + w };
    n * (proj + core) + (n - 1) + (2 * w + 2)
}

#[test]
fn closed_form_counts_for_every_method() {
    let (n, h, cin) = (4, 64, 60);
    let stub = Arc::new(build_stub(StubConfig::default()).unwrap());
    let frozen = stub_frozen(n, h, cin);
    let bare = stub_parameter_counts(&stub);
    assert_eq!((bare.trainable, bare.frozen), (0, frozen));

    let cfg = HingeConfig {
        projection_factor: 4,
        ..Default::default()
    };
    let hinge = AnyModel::build(MethodKind::Hinge, stub.clone(), &cfg, &BaselineConfig::default(), 0).unwrap();
    let counts = count_parameters(&hinge);
    assert_eq!(counts.trainable, hinge_trainable(n, h, 4, 4, 3, true));
    assert_eq!(counts.trainable, 9509);
    assert_eq!(counts.frozen, frozen);
    println!(
        "hinge h=64 r=4 N=4: trainable {} of {} ({:.2}%)",
        counts.trainable,
        counts.trainable + counts.frozen,
        100.0 * counts.fraction
    );
    assert!(counts.fraction < 0.25);

    let no_ham = HingeModel::for_stub(
        HingeConfig {
            projection_factor: 4,
            ham_enabled: false,
            ..Default::default()
        },
        stub.clone(),
        0,
    )
    .unwrap();
    assert_eq!(count_parameters(&no_ham).trainable, hinge_trainable(n, h, 4, 4, 3, false));

    let base = BaselineConfig::default();
    let head = 2 * h + 2;
    let adapter = AnyModel::build(MethodKind::Adapter, stub.clone(), &cfg, &base, 0).unwrap();
    let bn = base.bottleneck;
    assert_eq!(count_parameters(&adapter).trainable, n * (2 * h * bn + bn + h) + head);
    let lora = AnyModel::build(MethodKind::Lora, stub.clone(), &cfg, &base, 0).unwrap();
    assert_eq!(count_parameters(&lora).trainable, n * 2 * (2 * h * base.rank) + head);
    let probe = AnyModel::build(MethodKind::LinearProbe, stub.clone(), &cfg, &base, 0).unwrap();
    assert_eq!(count_parameters(&probe).trainable, head);

    for m in [&hinge, &adapter, &lora, &probe] {
        assert_eq!(count_parameters(m).frozen, frozen);
    }
    let smallest = [&hinge, &adapter, &lora, &probe]
        .iter()
        .min_by_key(|m| count_parameters(**m).trainable)
        .unwrap()
        .kind();
    assert_eq!(smallest, MethodKind::LinearProbe);
}

// ---------------------------------------------------------------------------
// checkpoints

fn trained_like(kind: MethodKind) -> AnyModel {
    let stub = toy_stub(2, 12, 5);
    let cfg = HingeConfig {
        projection_factor: 1,
        dilations: Some(vec![3, 2, 1, 1]),
        ..Default::default()
    };
    let mut m = AnyModel::build(kind, stub, &cfg, &BaselineConfig::default(), 6).unwrap();
    randomise_trainable(m.params_mut(), 21, 0.3);
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let x = random_tensor(Shape::new(1, 5, 20), &mut rng(3));
    let input = ModelInput::Raw {
        features: &x,
        frame_rate: 50.0,
    };
    let dir = tempfile::tempdir().unwrap();
    for kind in MethodKind::ALL {
        let m = trained_like(kind);
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.kind(), kind);
        assert_eq!(back.params().digest(), m.params().digest());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.predict(&input).unwrap(), m.predict(&input).unwrap());

        let path = dir.path().join(format!("{}.hgnm", kind.name()));
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().params().digest(), m.params().digest());
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = encode_checkpoint(&trained_like(MethodKind::Hinge)).unwrap();
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x01;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Format { .. })));
    for cut in [0, 7, 39, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn graph_forward_matches_predict() {
    let m = trained_like(MethodKind::Hinge);
    let x = random_tensor(Shape::new(1, 5, 10), &mut rng(8));
    let input = ModelInput::Raw {
        features: &x,
        frame_rate: 50.0,
    };
    let mut g = Graph::new();
    let out = m.forward(&mut g, &input).unwrap();
    assert_eq!(g.value(out.beat), &m.predict(&input).unwrap().beat);
}
