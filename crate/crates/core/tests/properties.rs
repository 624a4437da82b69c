//! Randomized invariants of the building blocks.

use proptest::prelude::*;

use uiclab::augment::{apply_augmentation, AugmentPolicy, ImageShape, View};
use uiclab::dataset::{
    load_idx, save_idx, synth_clusters, Dataset, LabelAssignment, Split, SynthSpec,
};
use uiclab::deepcluster::kmeans;
use uiclab::encoder::{Arch, EncoderConfig, EncoderState};
use uiclab::eval::{nmi, partition_stats, prototypical_eval};
use uiclab::optim::{sgd_step, ParamSet, SgdConfig};
use uiclab::tensor::{self, Tensor};
use uiclab::uic::{
    batch_gradients, fix_empty_classes, fused_contrastive_gradients, generate_pseudo_labels,
    render_views, run_uic, UicConfig,
};
use uiclab::{Parallelism, Rng};

fn labeling(max_k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..200, 1..=max_k, 1..=max_k).prop_flat_map(|(n, ka, kb)| {
        (
            proptest::collection::vec(0..ka, n),
            proptest::collection::vec(0..kb, n),
        )
    })
}

fn permute(labels: &[usize], seed: u64) -> Vec<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut perm: Vec<usize> = (0..k).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut Rng::new(seed));
    labels.iter().map(|&l| perm[l] + 3).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalized_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..40),
        shift in -100.0f64..100.0,
    ) {
        let p = tensor::softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = tensor::softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_non_negative(
        logits in proptest::collection::vec(-50.0f64..50.0, 2..40),
        t in 0usize..40,
    ) {
        let t = t % logits.len();
        prop_assert!(tensor::cross_entropy(&logits, t).unwrap().loss >= 0.0);
    }

    #[test]
    fn nmi_symmetric_permutation_invariant_bounded((a, b) in labeling(12), seed in any::<u64>()) {
        let v = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v.to_bits(), nmi(&b, &a).unwrap().to_bits());
        prop_assert_eq!(v.to_bits(), nmi(&permute(&a, seed), &b).unwrap().to_bits());
        prop_assert_eq!(v.to_bits(), nmi(&a, &permute(&b, seed ^ 1)).unwrap().to_bits());
    }

    #[test]
    fn entropy_is_one_iff_counts_equal(k in 2usize..12, per in 1usize..20, moves in 0usize..5) {
        let mut labels: Vec<usize> = (0..k * per).map(|i| i % k).collect();
        let moved = moves.min(per);
        for l in labels.iter_mut().take(moved * k).step_by(k) {
            *l = 1;
        }
        let stats = partition_stats(&LabelAssignment::new(labels, k, 0).unwrap()).unwrap();
        if moved == 0 {
            prop_assert!((stats.normalized_entropy - 1.0).abs() <= 1e-12);
        } else {
            prop_assert!(stats.normalized_entropy < 1.0 - 1e-12);
        }
    }

    #[test]
    fn repair_conserves_samples(
        labels in proptest::collection::vec(0usize..3, 8..60),
        k in 3usize..8,
        seed in any::<u64>(),
    ) {
        let before = LabelAssignment::new(labels.clone(), k, 0).unwrap();
        let (after, fixes) = fix_empty_classes(before.clone(), &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(after.len(), labels.len());
        prop_assert!(after.counts().iter().all(|&c| c > 0));
        prop_assert_eq!(fixes, before.counts().iter().filter(|&&c| c == 0).count());
        // only samples that moved changed label, and they moved into a class that was empty
        let was_empty: Vec<bool> = before.counts().iter().map(|&c| c == 0).collect();
        for (b, a) in labels.iter().zip(after.labels()) {
            prop_assert!(a == b || was_empty[*a]);
        }
    }

    #[test]
    fn augmentation_deterministic_and_in_range(seed in any::<u64>(), strong in any::<bool>(), c in prop::sample::select(vec![1usize, 3])) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..c * 10 * 9).map(|_| rng.uniform()).collect();
        let img = Tensor::from_vec(&[c, 10, 9], data).unwrap();
        let policy = AugmentPolicy { strong, ..AugmentPolicy::default() };
        let a = apply_augmentation(&img, &policy, &mut Rng::new(seed ^ 7)).unwrap();
        let b = apply_augmentation(&img, &policy, &mut Rng::new(seed ^ 7)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sobel_input_ignores_luminance_preserving_recolor(seed in any::<u64>(), angle in -3.0f64..3.0) {
        let cfg = EncoderConfig {
            sobel: true,
            ..EncoderConfig::new(ImageShape::new(3, 8, 8), Arch::ConvSmall, 4, 2)
        };
        let enc = EncoderState::init(cfg).unwrap();
        let mut rng = Rng::new(seed);
        let hw = 64;
        // colors kept well inside the gamut so the chroma rotation needs no clamping
        let rgb: Vec<f64> = (0..3 * hw).map(|_| 0.4 + 0.2 * rng.uniform()).collect();
        let (s, co) = angle.sin_cos();
        let mut recolored = rgb.clone();
        for p in 0..hw {
            let (r, g, b) = (rgb[p], rgb[hw + p], rgb[2 * hw + p]);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (co * i - s * q, s * i + co * q);
            // chroma-free reconstruction keeps y exactly up to rounding
            let (r2, g2, b2) = (y + 0.956 * i + 0.621 * q, y - 0.272 * i - 0.647 * q, y - 1.106 * i + 1.703 * q);
            let y2 = 0.299 * r2 + 0.587 * g2 + 0.114 * b2;
            recolored[p] = r2 + (y - y2);
            recolored[hw + p] = g2 + (y - y2);
            recolored[2 * hw + p] = b2 + (y - y2);
        }
        let mut a = vec![0.0; 2 * hw];
        let mut b = vec![0.0; 2 * hw];
        enc.preprocess_into(&rgb, &mut a);
        enc.preprocess_into(&recolored, &mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn kmeans_deterministic_per_rng_state(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..60).map(|_| rng.normal()).collect();
        let pts = Tensor::from_vec(&[20, 3], data).unwrap();
        let a = kmeans(&pts, k, 20, &mut Rng::new(seed)).unwrap();
        let b = kmeans(&pts, k, 20, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a.assignment, b.assignment);
        prop_assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
        for w in a.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn prototypes_invariant_under_rotation(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (n, d) = (60, 4);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data: Vec<f64> = (0..n * d).map(|i| rng.normal() + (labels[i / d] * (i % d)) as f64 * 0.7).collect();
        let feats = Tensor::from_vec(&[n, d], data).unwrap();
        let q = random_orthogonal(d, &mut rng);
        let mut rotated = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                rotated.row_mut(i)[j] = (0..d).map(|m| feats.row(i)[m] * q[m * d + j]).sum();
            }
        }
        let ep_rng = Rng::new(seed ^ 3);
        let a = prototypical_eval(&feats, &labels, 3, 2, 5, 20, &ep_rng).unwrap();
        let b = prototypical_eval(&rotated, &labels, 3, 2, 5, 20, &ep_rng).unwrap();
        prop_assert!((a.mean_accuracy - b.mean_accuracy).abs() < 1e-12);
    }
}

/// Gram-Schmidt on a gaussian matrix; row-major d×d.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    (0..d * d).map(|i| cols[i % d][i / d]).collect()
}

#[test]
fn flip_frequency_near_half() {
    let img = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let policy = AugmentPolicy {
        flip_prob: 0.5,
        ..AugmentPolicy::identity()
    };
    let mut rng = Rng::new(2024);
    let flips = (0..10_000)
        .filter(|_| apply_augmentation(&img, &policy, &mut rng).unwrap().data()[0] == 1.0)
        .count();
    let freq = flips as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&freq), "{freq}");
}

#[test]
fn sgd_with_zero_lr_is_identity() {
    let mut params = ParamSet::new();
    params
        .insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let before = params.clone();
    params
        .get_mut("w")
        .unwrap()
        .grad
        .data_mut()
        .copy_from_slice(&[4.0, 5.0, 6.0]);
    sgd_step(&mut params, &SgdConfig::default().with_lr(0.0)).unwrap();
    assert_eq!(
        params.get("w").unwrap().value,
        before.get("w").unwrap().value
    );
}

#[test]
fn idx_files_round_trip_pixel_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        per_class: 3,
        height: 7,
        width: 5,
        ..SynthSpec::default()
    };
    let ds = synth_clusters(&spec, 8).unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    save_idx(&ds, &img, Some(&lab)).unwrap();
    let back = load_idx(&img, Some(&lab)).unwrap();
    assert_eq!(back.truth(), ds.truth());
    let bytes = |d: &Dataset| {
        d.images()
            .data()
            .iter()
            .map(|&v| uiclab::dataset::quantize(v))
            .collect::<Vec<_>>()
    };
    assert_eq!(bytes(&back), bytes(&ds));
    // a second trip is exact in f64 as well
    save_idx(&back, &img, Some(&lab)).unwrap();
    assert_eq!(load_idx(&img, Some(&lab)).unwrap().images(), back.images());
}

fn tiny_setup(n_per_class: usize) -> (Dataset, EncoderState) {
    let spec = SynthSpec {
        classes: 3,
        per_class: n_per_class,
        height: 8,
        width: 8,
        test_fraction: 0.0,
        ..SynthSpec::default()
    };
    let ds = synth_clusters(&spec, 5).unwrap();
    let cfg = EncoderConfig {
        sobel: true,
        seed: 5,
        ..EncoderConfig::new(ds.image_shape(), Arch::ConvSmall, 8, 4)
    };
    (ds, EncoderState::init(cfg).unwrap())
}

#[test]
fn fused_step_matches_two_phase_gradients() {
    let (ds, enc) = tiny_setup(6);
    let par = Parallelism::sequential();
    let policy = AugmentPolicy::default();
    let label_rng = Rng::new(11);
    // two-phase: a labeling pass, then a supervised pass on fresh views
    let labels =
        generate_pseudo_labels(&ds, &enc, View::Augmented(&policy), &label_rng, 0, &par).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let t1 = render_views(&ds, &all, View::Augmented(&policy), |pos| {
        label_rng.derive(&[pos as u64])
    });
    let t2 = render_views(&ds, &all, View::Augmented(&policy), |pos| {
        Rng::new(99).derive(&[pos as u64])
    });
    let two_phase =
        batch_gradients(&enc, labels.labels(), &t2, 1.0 / ds.len() as f64, &par).unwrap();
    let fused = fused_contrastive_gradients(&enc, &t1, &t2, &par).unwrap();
    assert_eq!(two_phase.loss_sum.to_bits(), fused.loss_sum.to_bits());
    for (a, b) in two_phase.grads.iter().zip(&fused.grads) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_is_a_pure_function_of_inputs_and_thread_count_free() {
    let (ds, enc) = tiny_setup(10);
    let cfg = UicConfig {
        k: 4,
        epochs: 3,
        batch_size: 8,
        fft_epochs: 2,
        seed: 3,
        ..UicConfig::default()
    };
    let strip = |run: uiclab::TrainingRun| {
        let trace: Vec<_> = run
            .trace
            .into_iter()
            .map(|t| uiclab::EpochTrace {
                wall_seconds: 0.0,
                ..t
            })
            .collect();
        (trace, run.labels, run.encoder)
    };
    let a = strip(run_uic(&ds, enc.clone(), &cfg, &Parallelism::sequential()).unwrap());
    let b = strip(run_uic(&ds, enc.clone(), &cfg, &Parallelism::sequential()).unwrap());
    let c = strip(run_uic(&ds, enc, &cfg, &Parallelism::with_threads(3).unwrap()).unwrap());
    assert_eq!(a.0.len(), cfg.epochs + cfg.fft_epochs);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn synthetic_noise_free_classes() {
    let spec = SynthSpec {
        noise_sigma: 0.0,
        per_class: 4,
        test_fraction: 0.25,
        ..SynthSpec::default()
    };
    let ds = synth_clusters(&spec, 0).unwrap();
    let truth = ds.truth().unwrap();
    assert_eq!(ds.indices_of(Split::Test).len(), 10);
    for i in 0..ds.len() {
        for j in 0..ds.len() {
            let same = ds.image(i) == ds.image(j);
            assert_eq!(same, truth[i] == truth[j], "samples {i} and {j}");
        }
    }
}
