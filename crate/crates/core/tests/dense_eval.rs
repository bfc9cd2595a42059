use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vjepa_core::dense_eval::metrics::{boundary, iou, patch_majority, upsample_nearest};
use vjepa_core::dense_eval::*;
use vjepa_core::model::PatchGrid;
use vjepa_core::tensor::Tensor;

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0))
}

/// Dense reference: every patch of every source frame, softmax over all.
fn brute_force(frames: &[Tensor<f64>], first: &[u8], labels: usize, context: usize, tau: f64) -> Vec<Vec<f64>> {
    let n = first.len();
    let d = frames[0].last_dim();
    let norm: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let mut v = f.data().to_vec();
            for r in v.chunks_mut(d) {
                let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter_mut().for_each(|x| *x /= s);
            }
            v
        })
        .collect();
    let mut fields = vec![{
        let mut f = vec![0.0; n * labels];
        for (i, &l) in first.iter().enumerate() {
            f[i * labels + l as usize] = 1.0;
        }
        f
    }];
    for t in 1..frames.len() {
        let mut src = vec![0usize];
        for s in 1..t {
            if s + context >= t {
                src.push(s);
            }
        }
        // stack sources into S [m, d] and their labels into L [m, labels]
        let s_rows: Vec<&[f64]> = src.iter().flat_map(|&s| norm[s].chunks(d)).collect();
        let l_rows: Vec<&[f64]> = src.iter().flat_map(|&s| fields[s].chunks(labels)).collect();
        let mut out = vec![0.0; n * labels];
        for q in 0..n {
            let qf = &norm[t][q * d..(q + 1) * d];
            let a: Vec<f64> = s_rows.iter().map(|r| qf.iter().zip(*r).map(|(x, y)| x * y).sum()).collect();
            let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = a.iter().map(|v| ((v - mx) / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            for (ei, lr) in e.iter().zip(&l_rows) {
                let w = ei / z;
                for l in 0..labels {
                    out[q * labels + l] += w * lr[l];
                }
            }
        }
        fields.push(out);
    }
    fields
}

#[test]
fn propagation_matches_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let frames_n = 2 + case % 3;
        let d = 4 + case % 5;
        let frames: Vec<_> = (0..frames_n).map(|_| random_features(&mut rng, 9, d)).collect();
        let mut first: Vec<u8> = (0..9).map(|_| rng.random_range(0..3)).collect();
        first[0] = 1;
        let context = 1 + case % 2;
        let tau = [0.05, 0.2, 0.7][case % 3];
        let got = propagate_labels(&frames, 3, 3, &first, 3, &PropagationParams::dense(context, tau)).unwrap();
        let want = brute_force(&frames, &first, 3, context, tau);
        assert_eq!(got.fields, want, "case {case}");
    }
}

#[test]
fn label_distributions_stay_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames: Vec<_> = (0..6).map(|_| random_features(&mut rng, 16, 8)).collect();
    let first: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
    let p = PropagationParams {
        context: 2,
        radius: 1.5,
        shape: Neighborhood::Circle,
        top_k: 3,
        temperature: 0.1,
    };
    let out = propagate_labels(&frames, 4, 4, &first, 3, &p).unwrap();
    for f in &out.fields {
        for row in f.chunks(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_frames_reproduce_the_first_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_features(&mut rng, 36, 64);
    let frames = vec![f; 5];
    let first: Vec<u8> = (0..36).map(|i| if i % 6 < 3 && i / 6 < 4 { 1 } else { 0 }).collect();
    let out = propagate_labels(&frames, 6, 6, &first, 2, &PropagationParams::reference()).unwrap();
    for t in 0..5 {
        assert_eq!(out.hard(t), first);
    }
    let px: Vec<u8> = (0..5).flat_map(|_| upsample_nearest(&first, 6, 6, 2)).collect();
    let jf = j_and_f(&px, &px, 12, 12, 5, 1, true).unwrap();
    assert_eq!(jf.j, 1.0);
    assert_eq!(jf.f, 1.0);
}

#[test]
fn propagation_rejects_unlabeled_first_frame() {
    let f = Tensor::from_fn(&[4, 2], |i| i as f64 + 1.0);
    let err = propagate_labels(&[f.clone(), f], 2, 2, &[0; 4], 2, &PropagationParams::reference());
    assert!(err.is_err());
    assert!(PropagationParams { temperature: 0.0, ..PropagationParams::reference() }.validate().is_err());
}

#[test]
fn sweep_has_the_full_grid() {
    let s = PropagationParams::sweep();
    assert_eq!(s.len(), 4 * 3 * 2 * 3 * 4);
    assert!(s.contains(&PropagationParams::reference()));
}

#[test]
fn hand_computed_iou() {
    // 8x8: prediction covers rows 0..4, ground truth covers columns 0..4
    let pred: Vec<bool> = (0..64).map(|i| i / 8 < 4).collect();
    let gt: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
    // intersection 16, union 48
    assert!((iou(&pred, &gt) - 1.0 / 3.0).abs() < 1e-15);
    let p: Vec<u8> = pred.iter().map(|&b| b as u8).collect();
    let g: Vec<u8> = gt.iter().map(|&b| b as u8).collect();
    // class 0 and class 1 each have IoU 16/48
    assert!((miou(&p, &g, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(miou(&p, &p, 2).unwrap(), 1.0);
    let disjoint: Vec<bool> = pred.iter().map(|&b| !b).collect();
    assert_eq!(iou(&pred, &disjoint), 0.0);
}

#[test]
fn boundary_of_a_square() {
    let m: Vec<bool> = (0..36).map(|i| (1..5).contains(&(i % 6)) && (1..5).contains(&(i / 6))).collect();
    let b = boundary(&m, 6, 6);
    assert_eq!(b.iter().filter(|&&x| x).count(), 12);
    assert_eq!(boundary_f(&m, &m, 6, 6, 1), 1.0);
    // shifted one pixel: still within tolerance
    let s: Vec<bool> = (0..36).map(|i| (2..6).contains(&(i % 6)) && (1..5).contains(&(i / 6))).collect();
    assert_eq!(boundary_f(&s, &m, 6, 6, 1), 1.0);
    assert!(boundary_f(&s, &m, 6, 6, 0) < 1.0);
}

#[test]
fn j_for_disjoint_masks_is_zero() {
    let gt: Vec<u8> = (0..32).map(|i| if i % 16 < 4 { 1 } else { 0 }).collect();
    let pred: Vec<u8> = (0..32).map(|i| if i % 16 >= 12 { 1 } else { 0 }).collect();
    let jf = j_and_f(&pred, &gt, 4, 4, 2, 1, false).unwrap();
    assert_eq!(jf.j, 0.0);
    assert!(j_and_f(&[0; 32], &[0; 32], 4, 4, 2, 1, false).is_err());
}

#[test]
fn rmse_and_patch_helpers() {
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    let labels = [0, 0, 1, 1, 0, 1, 1, 1, 2, 2, 0, 0, 2, 0, 0, 0];
    assert_eq!(patch_majority(&labels, 4, 4, 2), vec![0, 1, 2, 0]);
    assert_eq!(upsample_nearest(&[1u8, 2], 1, 2, 2), vec![1, 1, 2, 2, 1, 1, 2, 2]);
}

fn planted(rng: &mut ChaCha8Rng, n: usize, d: usize, scales: [f64; 3]) -> (Tensor<f64>, Vec<f64>) {
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
        for j in 0..d {
            data.push(mean[j] + (0..3).map(|k| c[k] * basis[k][j]).sum::<f64>());
        }
    }
    (Tensor::new(vec![n, d], data).unwrap(), mean)
}

#[test]
fn planted_subspace_is_reconstructed() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let (x, _) = planted(&mut rng, 60, 12, [3.0, 1.5, 0.5]);
        let pca = principal_components(&x, 3).unwrap();
        for r in 0..x.rows() {
            let back = pca.reconstruct(&pca.project(x.row(r)));
            for (a, b) in back.iter().zip(x.row(r)) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "{i},{j}: {dot}");
            }
        }
        assert!(pca.variances.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn variances_match_a_symmetric_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_features(&mut rng, 80, 6);
    let pca = principal_components(&x, 3).unwrap();
    let m = DMatrix::from_row_slice(80, 6, x.data());
    let mean = m.row_mean();
    let c = DMatrix::from_fn(80, 6, |i, j| m[(i, j)] - mean[j]);
    let cov = c.transpose() * &c / 80.0;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    for k in 0..3 {
        assert!((pca.variances[k] - eig[k]).abs() < 1e-6, "{k}: {} vs {}", pca.variances[k], eig[k]);
    }
}

#[test]
fn rank_deficient_features_are_padded() {
    // two distinct points: rank 1
    let x = Tensor::from_fn(&[4, 3], |i| if (i / 3) % 2 == 0 { 1.0 } else { -1.0 });
    let pca = principal_components(&x, 3).unwrap();
    assert!(pca.variances[0] > 0.0);
    assert_eq!(pca.components[1], vec![0.0; 3]);
    assert_eq!(pca.components[2], vec![0.0; 3]);
    assert!(principal_components(&Tensor::<f64>::zeros(&[2, 3]), 3).is_err());
}

#[test]
fn duplicate_tokens_share_a_colour_and_maps_have_every_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = random_features(&mut rng, 2 * 3 * 4, 5);
    let row0 = x.row(0).to_vec();
    x.data_mut()[7 * 5..8 * 5].copy_from_slice(&row0);
    let grid = PatchGrid::new(2, 3, 4);
    let map = pca_map(&x, &grid).unwrap();
    assert_eq!(map.normalized[0], map.normalized[7]);
    let imgs = map.render(PERMUTATIONS[3], 2);
    assert_eq!(imgs.len(), 2);
    assert_eq!(imgs[0].len(), 6 * 8 * 3);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_pca_images(dir.path(), &map, 1).unwrap().len(), 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pca_is_invariant_to_token_order(seed in 0u64..1000, shift in 1usize..29) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, _) = planted(&mut rng, 30, 7, [4.0, 2.0, 1.0]);
        let d = 7;
        let rolled: Vec<f64> = (0..30).flat_map(|r| x.row((r + shift) % 30).to_vec()).collect();
        let y = Tensor::new(vec![30, d], rolled).unwrap();
        let a = principal_components(&x, 3).unwrap();
        let b = principal_components(&y, 3).unwrap();
        for k in 0..3 {
            for j in 0..d {
                prop_assert!((a.components[k][j] - b.components[k][j]).abs() < 1e-6);
            }
        }
    }
}
