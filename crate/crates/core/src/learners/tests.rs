use super::*;
use crate::datasets::{gen_synthetic_task, GeneratorSpec};
use rand::{Rng, SeedableRng};

fn random_problem(shape: HeadShape, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..shape.num_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
    let x: Vec<f64> = (0..n * shape.input).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..shape.classes) as u8).collect();
    (w, x, y)
}

#[test]
fn gradient_matches_finite_differences() {
    let mapping = ClassMapping::new(4, 2, vec![0, 1, 1, 0]).unwrap();
    for (b, hidden) in [0usize, 5].into_iter().enumerate() {
        let shape = HeadShape { input: 3, hidden, classes: 4 };
        let (w, x, y) = random_problem(shape, 6, b as u64);
        for reduced in [None, Some(&mapping)] {
            let targets: Vec<Target<'_>> = y
                .iter()
                .map(|&c| Target { class: reduced.map_or(c, |m| m.table[usize::from(c)]), reduced })
                .collect();
            let (_, grad) = head::loss_and_gradient(&shape, &w, &x, &targets);
            for i in 0..w.len() {
                let h = 1e-5;
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let lp = head::loss_and_gradient(&shape, &wp, &x, &targets).0;
                let lm = head::loss_and_gradient(&shape, &wm, &x, &targets).0;
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
                assert!(rel < 1e-5 || (numeric - grad[i]).abs() < 1e-9, "param {i}: {numeric} vs {}", grad[i]);
            }
        }
    }
}

#[test]
fn full_batch_descent_is_monotone() {
    let shape = HeadShape { input: 4, hidden: 6, classes: 3 };
    let (mut w, x, y) = random_problem(shape, 40, 9);
    let targets: Vec<Target<'_>> = y.iter().map(|&class| Target { class, reduced: None }).collect();
    let mut prev = f64::INFINITY;
    for _ in 0..50 {
        let (loss, grad) = head::loss_and_gradient(&shape, &w, &x, &targets);
        assert!(loss <= prev + 1e-12, "{loss} > {prev}");
        prev = loss;
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= 0.05 * g;
        }
    }
}

#[test]
fn grouped_loss_equals_loss_on_reduced_scores() {
    let shape = HeadShape { input: 3, hidden: 4, classes: 5 };
    let mapping = ClassMapping::new(5, 3, vec![0, 1, 1, 2, 2]).unwrap();
    let (w, x, y) = random_problem(shape, 10, 3);
    let mut ws = head::Workspace::new(&shape);
    for (row, &c) in x.chunks_exact(3).zip(&y) {
        let coarse = mapping.table[usize::from(c)];
        let target = Target { class: coarse, reduced: Some(&mapping) };
        let mut g = vec![0.0; w.len()];
        let grouped = head::accumulate(&shape, &w, row, target, &mut ws, &mut g);
        let mut probs = vec![0.0; 5];
        head::forward(&shape, &w, row, &mut ws, &mut probs);
        let grid = ScoreGrid::new(1, 1, 5, probs).unwrap().reduce(&mapping).unwrap();
        let plain = -grid.pixel(0)[usize::from(coarse)].ln();
        assert!((grouped - plain).abs() < 1e-9);
    }
}

/// Left half bright (class 1), right half dark (class 0).
fn halves(id: &str, offset: f64) -> TrainItem {
    let (h, w) = (8, 8);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _y in 0..h {
        for x in 0..w {
            let bright = x < w / 2;
            data.push(if bright { 2.0 + offset } else { offset });
            labels.push(u8::from(bright));
        }
    }
    TrainItem {
        sample_id: id.into(),
        image: Image::new(h, w, 1, data).unwrap(),
        label: LabelMap::new(h, w, 2, labels).unwrap(),
        source: SourceTag::GroundTruth,
    }
}

#[test]
fn learns_a_linearly_separable_problem() {
    let items: Vec<TrainItem> = (0..4).map(|i| halves(&format!("s{i}"), 0.1 * i as f64)).collect();
    // Raw intensity separates the classes: every class-1 value exceeds every class-0 value.
    let lo1 = items.iter().flat_map(|i| i.image.data().iter().zip(i.label.data()).filter(|(_, &l)| l == 1).map(|(v, _)| *v)).fold(f64::INFINITY, f64::min);
    let hi0 = items.iter().flat_map(|i| i.image.data().iter().zip(i.label.data()).filter(|(_, &l)| l == 0).map(|(v, _)| *v)).fold(f64::NEG_INFINITY, f64::max);
    assert!(lo1 > hi0);
    let set = TrainSet { items, loss_class_mapping: None };
    let arch = ArchSpec { hidden: 0, ..ArchSpec::default() };
    let model = train(&arch, &set, Init::Fresh, &Hyper { epochs: 30, ..Hyper::default() }, 1).unwrap();
    let probe = halves("e", 0.15);
    let (pred, scores) = predict(&model, &probe.image).unwrap();
    let correct = pred.data().iter().zip(probe.label.data()).filter(|(a, b)| a == b).count();
    assert!(correct as f64 / 64.0 >= 0.99, "{correct}/64");
    for p in 0..64 {
        assert!((scores.pixel(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn small_set() -> TrainSet {
    let spec = GeneratorSpec { height: 12, width: 12, n_labeled: 3, n_reference: 2, n_test: 1, ..GeneratorSpec::default() };
    let b = gen_synthetic_task(&spec, 5).unwrap();
    let items = b
        .training()
        .labeled()
        .map(|(id, image, label)| TrainItem {
            sample_id: id.into(),
            image: image.clone(),
            label: label.clone(),
            source: SourceTag::GroundTruth,
        })
        .collect();
    TrainSet { items, loss_class_mapping: None }
}

#[test]
fn training_is_deterministic() {
    let set = small_set();
    let arch = ArchSpec::default();
    let hyper = Hyper { epochs: 3, ..Hyper::default() };
    let a = train(&arch, &set, Init::Fresh, &hyper, 42).unwrap();
    let b = train(&arch, &set, Init::Fresh, &hyper, 42).unwrap();
    let c = train(&arch, &set, Init::Fresh, &hyper, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.weights(), c.weights());
    assert_eq!(a.provenance.trained_on, set.sorted_ids());
}

#[test]
fn zero_epochs_from_a_teacher_keeps_its_weights() {
    let set = small_set();
    let arch = ArchSpec::default();
    let teacher = train(&arch, &set, Init::Fresh, &Hyper { epochs: 2, ..Hyper::default() }, 1).unwrap();
    let student = train(&arch, &set, Init::Continue(&teacher), &Hyper { epochs: 0, ..Hyper::default() }, 2).unwrap();
    assert_eq!(student.weights(), teacher.weights());
    assert_eq!(student.provenance.init, InitPolicy::ContinuedFrom { model_id: teacher.id.clone() });
}

#[test]
fn empty_set_and_bad_labels_are_rejected() {
    let arch = ArchSpec::default();
    let err = train(&arch, &TrainSet::default(), Init::Fresh, &Hyper::default(), 0).unwrap_err();
    assert!(matches!(err, Error::EmptyTrainSet));
    let mut set = small_set();
    set.items[0].label = LabelMap::filled(12, 12, 3, 2).unwrap();
    assert!(matches!(train(&arch, &set, Init::Fresh, &Hyper::default(), 0), Err(Error::DimMismatch(_))));
}

#[test]
fn divergence_is_reported() {
    let set = small_set();
    let hyper = Hyper { learning_rate: 1e200, epochs: 3, ..Hyper::default() };
    let err = train(&ArchSpec::default(), &set, Init::Fresh, &hyper, 0).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
}

#[test]
fn forced_bias_predicts_background_everywhere() {
    let arch = ArchSpec { hidden: 0, ..ArchSpec::default() };
    let shape = arch.head_shape();
    let mut w = vec![0.0; shape.num_params()];
    w[shape.classes * shape.input] = 50.0;
    let norm = InputNorm { mean: vec![0.0; shape.input], scale: vec![1.0; shape.input] };
    let prov = Provenance {
        seed: 0,
        init: InitPolicy::Fresh,
        trained_on: vec![],
        fingerprint: String::new(),
        epochs: 0,
        ground_truth_items: 0,
        pseudo_items: 0,
    };
    let m = Model::from_parts("forced", arch, norm, w, prov).unwrap();
    let (pred, _) = predict(&m, &halves("x", 0.0).image).unwrap();
    assert!(pred.data().iter().all(|&c| c == 0));
}

#[test]
fn fusion_takes_the_mode_and_breaks_ties_low() {
    let a = LabelMap::new(1, 3, 3, vec![0, 2, 1]).unwrap();
    let b = LabelMap::new(1, 3, 3, vec![2, 2, 2]).unwrap();
    let c = LabelMap::new(1, 3, 3, vec![2, 1, 0]).unwrap();
    assert_eq!(fuse_majority(&[a.clone(), b.clone(), c]).unwrap().data(), &[2, 2, 0]);
    assert_eq!(fuse_majority(&[a, b]).unwrap().data(), &[0, 2, 1]);
    assert!(fuse_majority(&[]).is_err());
}

#[test]
fn multiview_prediction_is_the_vote_of_the_views() {
    let set = small_set();
    let views = [ViewSpec::Identity, ViewSpec::Transpose, ViewSpec::FlipH];
    let hyper = Hyper { epochs: 2, ..Hyper::default() };
    let models = train_multiview(&ArchSpec::default(), &set, &views, &hyper, 3).unwrap();
    let image = &set.items[0].image;
    let fused = predict_multiview(&models, &views, image).unwrap();
    let per_view: Vec<LabelMap> = views
        .iter()
        .map(|v| v.invert_label(&predict(&models[v], &v.apply_image(image)).unwrap().0))
        .collect();
    for p in 0..fused.data().len() {
        let mut votes = [0usize; 2];
        for l in &per_view {
            votes[usize::from(l.data()[p])] += 1;
        }
        let expect = u8::from(votes[1] > votes[0]);
        assert_eq!(fused.data()[p], expect);
    }
    let missing = predict_multiview(&models, &[ViewSpec::Rot180], image).unwrap_err();
    assert!(matches!(missing, Error::MissingModel(_)));
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let set = small_set();
    let m = train(&ArchSpec::default(), &set, Init::Fresh, &Hyper { epochs: 1, ..Hyper::default() }, 8).unwrap();
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    assert_eq!(&buf[..8], MODEL_MAGIC);
    let back = read_model(&mut buf.as_slice()).unwrap();
    assert_eq!(back, m);
    let bits = |m: &Model| m.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));
    buf.truncate(buf.len() - 4);
    assert!(matches!(read_model(&mut buf.as_slice()), Err(Error::ShortRead { field: "weights" })));
}

#[test]
fn reduced_training_runs_on_coarse_pseudo_labels() {
    let mut set = small_set();
    let mapping = ClassMapping::new(3, 2, vec![0, 1, 1]).unwrap();
    for item in &mut set.items {
        item.source = SourceTag::Pseudo;
    }
    set.loss_class_mapping = Some(mapping.clone());
    let arch = ArchSpec { num_classes: 3, ..ArchSpec::default() };
    let m = train(&arch, &set, Init::Fresh, &Hyper { epochs: 2, ..Hyper::default() }, 1).unwrap();
    let coarse = predict_reduced(&m, &set.items[0].image, &mapping).unwrap();
    assert_eq!(coarse.num_classes(), 2);
}
