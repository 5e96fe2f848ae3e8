use hingenet::data::{
    broaden, generate, generate_item, label_targets, load_dataset, parse_annotation, format_annotation, save_dataset,
    stretch_features, time_stretch, Dataset, LabelMode, SyntheticConfig, DOWNBEAT_BUMP,
};
use hingenet::postprocess::{viterbi_decode, DbnConfig};
use hingenet::tensorcore::{Shape, Tensor};
use hingenet::Exec;
use proptest::prelude::*;

fn small(n_items: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_items,
        duration_s: 8.0,
        seed,
        ..Default::default()
    }
}

fn clean(root_step_max: usize) -> SyntheticConfig {
    SyntheticConfig {
        noise_sigma: 0.0,
        tempo_jitter: 0.0,
        root_step_max,
        ..small(8, 5)
    }
}

fn beat_frames(ex: &hingenet::data::Example) -> Vec<usize> {
    ex.annotation.beat_times.iter().map(|t| (t * ex.frame_rate).round() as usize).collect()
}

#[test]
fn same_seed_same_corpus() {
    let a = generate(&small(6, 3), Exec::Sequential).unwrap();
    let b = generate(&small(6, 3), Exec::Parallel).unwrap();
    assert_eq!(a, b);
    let c = generate(&small(6, 4), Exec::Sequential).unwrap();
    assert_ne!(a, c);
    assert_eq!(generate_item(&small(6, 3), 4).unwrap(), a[4]);
}

#[test]
fn clean_features_change_only_at_beats() {
    for step in [0, 4] {
        let cfg = clean(step);
        for ex in generate(&cfg, Exec::Sequential).unwrap() {
            let beats = beat_frames(&ex);
            let t = ex.n_frames();
            let column = |f: usize| (0..cfg.feature_dim).map(|c| ex.features.get(0, c, f)).collect::<Vec<_>>();
            for f in 1..t {
                if column(f) != column(f - 1) {
                    assert!(
                        beats.contains(&f) || beats.contains(&(f - 1)),
                        "{} changes between frames {} and {f} away from a beat",
                        ex.id,
                        f - 1
                    );
                }
            }
            if step == 0 {
                // a fixed root: the only changes are the downbeat bumps
                let down: Vec<usize> = ex
                    .annotation
                    .downbeat_times()
                    .iter()
                    .map(|t| (t * ex.frame_rate).round() as usize)
                    .collect();
                let base = (0..t).find(|f| !down.contains(f)).unwrap();
                for f in 0..t {
                    if down.contains(&f) {
                        for (v, b) in column(f).iter().zip(column(base)) {
                            assert!((v - b - DOWNBEAT_BUMP).abs() < 1e-6);
                        }
                    } else {
                        assert_eq!(column(f), column(base));
                    }
                }
            }
        }
    }
}

#[test]
fn downbeat_count_follows_the_meter() {
    for ex in generate(&small(30, 1), Exec::Sequential).unwrap() {
        let meter = *ex.annotation.positions.iter().max().unwrap() as usize;
        assert!(meter == 3 || meter == 4);
        let beats = ex.annotation.len();
        let downs = ex.annotation.downbeat_times().len();
        let expect = beats / meter;
        assert!(downs + 1 >= expect && downs <= expect + 1, "{}: {downs} vs {expect}", ex.id);
    }
}

#[test]
fn tempo_range_is_respected() {
    let cfg = SyntheticConfig {
        tempo_jitter: 0.0,
        ..small(20, 9)
    };
    for ex in generate(&cfg, Exec::Sequential).unwrap() {
        let times = &ex.annotation.beat_times;
        let bpm = 60.0 * (times.len() - 1) as f64 / (times[times.len() - 1] - times[0]);
        assert!(bpm > cfg.tempo_bpm_min - 0.5 && bpm < cfg.tempo_bpm_max + 0.5, "{bpm}");
    }
}

// ---------------------------------------------------------------------------
// label broadening

#[test]
fn broadening_stencil_examples() {
    let fr = 50.0;
    let b = broaden(&[100.0 / fr], 200, fr);
    for (f, v) in [(98, 0.25), (99, 0.5), (100, 1.0), (101, 0.5), (102, 0.25), (97, 0.0), (103, 0.0)] {
        assert_eq!(b[f], v, "frame {f}");
    }

    let b = broaden(&[0.0], 10, fr);
    assert_eq!(&b[..4], &[1.0, 0.5, 0.25, 0.0]);

    let b = broaden(&[10.0 / fr, 13.0 / fr], 30, fr);
    assert_eq!(&b[8..16], &[0.25, 0.5, 1.0, 0.5, 0.5, 1.0, 0.5, 0.25]);

    let b = broaden(&[9.0 / fr], 10, fr);
    assert_eq!(&b[6..], &[0.0, 0.25, 0.5, 1.0]);
}

#[test]
fn loss_weight_mode_marks_broadened_frames_positive() {
    let b = broaden(&[0.1], 10, 50.0);
    let (targets, weights) = label_targets(&b, LabelMode::LossWeights);
    assert_eq!(&targets[..8], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    assert_eq!(&weights.unwrap()[..8], &[1.0, 1.0, 1.0, 0.25, 0.5, 1.0, 0.5, 0.25]);
    let (soft, none) = label_targets(&b, LabelMode::SoftTargets);
    assert_eq!(soft, b);
    assert!(none.is_none());
}

proptest! {
    #[test]
    fn broadened_values_come_from_the_stencil(frames in prop::collection::vec(0usize..120, 0..20), t in 1usize..130) {
        let times: Vec<f64> = frames.iter().map(|&f| f as f64 / 50.0).collect();
        let b = broaden(&times, t, 50.0);
        prop_assert_eq!(b.len(), t);
        for (f, &v) in b.iter().enumerate() {
            prop_assert!([0.0, 0.25, 0.5, 1.0].contains(&v));
            let nearest = frames.iter().map(|&g| g.abs_diff(f)).min().unwrap_or(usize::MAX);
            let expect = match nearest { 0 => 1.0, 1 => 0.5, 2 => 0.25, _ => 0.0 };
            prop_assert_eq!(v, expect);
        }
    }
}

// ---------------------------------------------------------------------------
// time stretching

#[test]
fn double_stretch_doubles_frames_and_times() {
    let ex = generate_item(&small(1, 2), 0).unwrap();
    let s = time_stretch(&ex, 2.0).unwrap();
    assert!(s.n_frames().abs_diff(2 * ex.n_frames()) <= 1);
    for (a, b) in ex.annotation.beat_times.iter().zip(&s.annotation.beat_times) {
        assert_eq!(2.0 * a, *b);
    }
    assert_eq!(s.annotation.positions, ex.annotation.positions);
    let back = stretch_features(&s.features, 0.5).unwrap();
    assert!(back.max_abs_diff(&ex.features) < 1e-9);
}

#[test]
fn stretch_bounds_are_enforced() {
    let x = Tensor::zeros(Shape::new(1, 2, 10));
    assert!(stretch_features(&x, 0.4).is_err());
    assert!(stretch_features(&x, 2.5).is_err());
    assert_eq!(stretch_features(&x, 1.0).unwrap(), x);
}

#[test]
fn stretched_clean_activation_keeps_the_scaled_tempo() {
    let cfg = SyntheticConfig {
        tempo_jitter: 0.0,
        noise_sigma: 0.0,
        duration_s: 20.0,
        ..small(6, 11)
    };
    let dbn = DbnConfig {
        tau_min: 8,
        tau_max: 90,
        ..Default::default()
    };
    for (k, ex) in generate(&cfg, Exec::Sequential).unwrap().iter().enumerate() {
        let times = &ex.annotation.beat_times;
        let bpm = 60.0 * (times.len() - 1) as f64 / (times[times.len() - 1] - times[0]);
        let act = broaden(times, ex.n_frames(), ex.frame_rate);
        let s = [0.8, 0.9, 1.1, 1.25, 0.85, 1.2][k];
        let stretched = stretch_features(&Tensor::new(Shape::new(1, 1, act.len()), act).unwrap(), s).unwrap();
        let beats = viterbi_decode(stretched.row(0, 0), &dbn).unwrap();
        let bt = beats.times();
        let decoded = 60.0 * (bt.len() - 1) as f64 / (bt[bt.len() - 1] - bt[0]);
        let expect = bpm / s;
        assert!((decoded - expect).abs() / expect < 0.02, "s {s}: {decoded} vs {expect}");
    }
}

// ---------------------------------------------------------------------------
// files

#[test]
fn annotation_text_round_trip() {
    for ex in generate(&small(5, 8), Exec::Sequential).unwrap() {
        let text = format_annotation(&ex.annotation);
        assert_eq!(parse_annotation(&text).unwrap(), ex.annotation);
    }
}

#[test]
fn dataset_directory_is_reproducible() {
    let cfg = small(6, 7);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(&cfg, Exec::Sequential).unwrap();
    save_dataset(&ds, a.path()).unwrap();
    save_dataset(&Dataset::generate(&cfg, Exec::Parallel).unwrap(), b.path()).unwrap();

    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * 6 + 1);
    for n in &names {
        assert_eq!(
            std::fs::read(a.path().join(n)).unwrap(),
            std::fs::read(b.path().join(n)).unwrap(),
            "{n:?}"
        );
    }
    assert_eq!(load_dataset(a.path()).unwrap(), ds);
}
