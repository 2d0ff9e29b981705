use proptest::prelude::*;
use ssvep_core::dataio::{read_archive, synth_dataset, write_archive, Montage, SubjectConfig, SynthConfig};
use ssvep_core::features::{riemann_distance, sym_eig, tangent_map, SpdMatrix};
use ssvep_core::harness::{kfold_labels, ConfusionMatrix};
use ssvep_core::linalg::Matrix;
use ssvep_core::nn::{cce_loss, one_hot, softmax, Tensor};

const N: usize = 7;

fn square(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| Matrix::from_vec(n, n, v).unwrap())
}

fn spd() -> impl Strategy<Value = SpdMatrix> {
    (square(N), 0.05f64..1.0).prop_map(|(a, shift)| {
        SpdMatrix::new(a.matmul(&a.transpose()).add(&Matrix::identity(N).scale(shift))).unwrap()
    })
}

/// Well-conditioned invertible matrix near the identity.
fn invertible() -> impl Strategy<Value = Matrix> {
    square(N).prop_map(|a| a.scale(0.15).add(&Matrix::identity(N)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn distance_is_symmetric_and_zero_on_diagonal(a in spd(), b in spd()) {
        let d = riemann_distance(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(close(d, riemann_distance(&b, &a).unwrap(), 1e-10));
        prop_assert!(riemann_distance(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn distance_triangle_inequality(a in spd(), b in spd(), c in spd()) {
        let ab = riemann_distance(&a, &b).unwrap();
        let bc = riemann_distance(&b, &c).unwrap();
        let ac = riemann_distance(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn distance_congruence_invariant(a in spd(), b in spd(), w in invertible()) {
        let d = riemann_distance(&a, &b).unwrap();
        let dw = riemann_distance(&a.congruence(&w).unwrap(), &b.congruence(&w).unwrap()).unwrap();
        prop_assert!(close(d, dw, 1e-8), "{d} vs {dw}");
    }

    #[test]
    fn distance_to_scaled_copy(a in spd(), s in 0.1f64..10.0) {
        let scaled = SpdMatrix::new(a.matrix().scale(s)).unwrap();
        let expected = (N as f64).sqrt() * s.ln().abs();
        prop_assert!(close(riemann_distance(&a, &scaled).unwrap(), expected, 1e-9));
    }

    #[test]
    fn tangent_norm_equals_distance(c in spd(), r in spd()) {
        let v = tangent_map(&c, &r).unwrap();
        prop_assert_eq!(v.coords.len(), N * (N + 1) / 2);
        let norm = v.coords.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(close(norm, riemann_distance(&c, &r).unwrap(), 1e-8));
    }

    #[test]
    fn eigendecomposition_invariants(a in square(N)) {
        let s = a.add(&a.transpose()).scale(0.5);
        let e = sym_eig(&s).unwrap();
        let v = &e.vectors;
        let vtv = v.transpose().matmul(v);
        prop_assert!(vtv.sub(&Matrix::identity(N)).frobenius() < 1e-9);
        let rebuilt = v.matmul(&Matrix::from_diag(&e.values)).matmul(&v.transpose());
        prop_assert!(rebuilt.sub(&s).frobenius() <= 1e-9 * s.frobenius().max(1.0));
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(close(e.values.iter().sum::<f64>(), s.trace(), 1e-10));
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let t = Tensor::new(vec![3, 4], logits.clone()).unwrap();
        let p = softmax(&t).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::new(vec![3, 4], logits.iter().map(|x| x + shift).collect()).unwrap();
        let q = softmax(&shifted).unwrap();
        for (x, y) in p.data().iter().zip(q.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let y = one_hot(&[0, 2, 3], 4).unwrap();
        prop_assert!(cce_loss(&p, &y).unwrap() >= 0.0);
    }

    #[test]
    fn folds_partition_and_stratify(
        labels in prop::collection::vec(0usize..4, 20..120),
        k in 2usize..10,
        seed in any::<u64>(),
    ) {
        prop_assume!((0..4).all(|c| labels.iter().filter(|&&l| l == c).count() >= k));
        let plan = kfold_labels(&labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in 0..k {
            for i in plan.test_indices(f) {
                seen[i] += 1;
            }
            let train = plan.train_indices(f);
            prop_assert_eq!(train.len() + plan.test_indices(f).len(), labels.len());
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        for c in 0..4 {
            let per_fold: Vec<usize> = (0..k)
                .map(|f| plan.test_indices(f).iter().filter(|&&i| labels[i] == c).count())
                .collect();
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(&kfold_labels(&labels, k, seed).unwrap().assignments, &plan.assignments);
    }

    #[test]
    fn confusion_accuracy_and_merge(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        split in 0usize..60,
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let all = ConfusionMatrix::from_predictions(4, &truth, &pred).unwrap();
        let hits = pairs.iter().filter(|(t, p)| t == p).count();
        prop_assert!((all.accuracy() - hits as f64 / pairs.len() as f64).abs() < 1e-15);
        let cut = split.min(pairs.len());
        let mut merged = ConfusionMatrix::from_predictions(4, &truth[..cut], &pred[..cut]).unwrap();
        merged.merge(&ConfusionMatrix::from_predictions(4, &truth[cut..], &pred[cut..]).unwrap());
        prop_assert_eq!(merged, all);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn archive_round_trip(
        per_class in 1usize..3,
        n_subjects in 1usize..3,
        seed in any::<u64>(),
        pink in 0.0f64..5.0,
        line in 0.0f64..3.0,
    ) {
        let cfg = SynthConfig {
            subjects: (0..n_subjects)
                .map(|i| SubjectConfig::new(&format!("S{:02}", i + 1), per_class))
                .collect(),
            pink_noise_amp: pink,
            line_noise_amp: line,
            seed,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg, &Montage::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_archive(&ds, dir.path()).unwrap();
        prop_assert_eq!(read_archive(dir.path()).unwrap(), ds);
    }
}
