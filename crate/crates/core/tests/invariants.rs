mod common;

use common::*;
use deepten::cli::{encode_sample, Method};
use deepten::data::{DescriptorDataset, Sample};
use deepten::encoding::{
    encode_backward, encode_forward, normalize, Codebook, DescriptorSet, NormalizeMode, SmoothingFactors,
};
use deepten::gradcheck::{check_encoding, grid_instances, rel_error, Grid};
use deepten::matrix::Mat;
use deepten::network::{Checkpoint, NetworkParams};
use deepten::reference::{avg_pool, hard_assign, vlad};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..24, 1usize..9, 1usize..9, any::<u64>())
}

proptest! {
    #![proptest_config(proptest_config(256))]

    #[test]
    fn assignments_are_row_stochastic((n, k, d, seed) in dims(), scale in 0.1f64..5.0) {
        let (x, c, s) = instance(n, k, d, scale, seed);
        let (_, cache) = encode_forward(&x, &c, &s).unwrap();
        let a = cache.assignment.weights();
        for i in 0..n {
            let row = a.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn encoding_ignores_descriptor_order((n, k, d, seed) in dims(), perm_seed in any::<u64>()) {
        let (x, c, s) = instance(n, k, d, 1.0, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = deepten::rng::seeded(perm_seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let px = DescriptorSet::new(permute_rows(x.as_mat(), &perm)).unwrap();
        let (e, _) = encode_forward(&x, &c, &s).unwrap();
        let (pe, _) = encode_forward(&px, &c, &s).unwrap();
        prop_assert!(max_abs_diff(e.as_mat(), pe.as_mat()) <= 1e-12);
    }

    #[test]
    fn output_length_is_fixed(k in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        for n in [1, 2, 10, 1000] {
            let (x, c, s) = instance(n, k, d, 1.0, seed);
            let (e, _) = encode_forward(&x, &c, &s).unwrap();
            prop_assert_eq!(e.flat().len(), k * d);
        }
    }

    #[test]
    fn shift_matches_unshifted_softmax((n, k, d, seed) in dims()) {
        let (x, c, s) = instance(n, k, d, 2.0, seed);
        let (_, cache) = encode_forward(&x, &c, &s).unwrap();
        let naive = unshifted_assign(x.as_mat(), c.as_mat(), s.as_slice());
        prop_assume!(naive.is_finite());
        prop_assert!(max_abs_diff(cache.assignment.weights(), &naive) <= 1e-12);
    }

    #[test]
    fn large_descriptors_stay_finite((n, k, d, seed) in dims(), norm in 1.0f64..1e3) {
        let (x, c, s) = instance(n, k, d, 1.0, seed);
        let big = x.as_mat().map(|v| v * norm);
        let (e, cache) = encode_forward(&DescriptorSet::new(big).unwrap(), &c, &s).unwrap();
        prop_assert!(e.as_mat().is_finite());
        for i in 0..n {
            prop_assert!((cache.assignment.weights().row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_zero_codeword_is_sum_pooling(n in 1usize..40, d in 1usize..9, seed in any::<u64>(), s in -2.0f64..2.0) {
        let x = DescriptorSet::new(Mat::seeded_uniform(n, d, -3.0, 3.0, seed).unwrap()).unwrap();
        let c = Codebook::new(Mat::zeros(1, d)).unwrap();
        let sm = SmoothingFactors::uniform(1, s).unwrap();
        let (e, cache) = encode_forward(&x, &c, &sm).unwrap();
        prop_assert_eq!(e.as_mat(), &x.as_mat().colsum());

        let normed = normalize(&e, NormalizeMode::Global).values;
        let (avg, _) = deepten::encoding::l2norm_forward(avg_pool(&x).as_slice());
        for (a, b) in normed.iter().zip(&avg) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        let de = Mat::seeded_uniform(1, d, -1.0, 1.0, seed ^ 1).unwrap();
        let g = encode_backward(&cache, &de).unwrap();
        for i in 0..n {
            prop_assert_eq!(g.dx.row(i), de.row(0));
        }
    }

    #[test]
    fn far_codewords_get_little_from_a_matching_descriptor(
        (n, k, d, seed) in (1usize..10, 2usize..8, 1usize..6, any::<u64>()),
        s in prop::sample::select(vec![1.0, 10.0]),
        which in 0usize..8,
    ) {
        let (x, c, _) = instance(n, k, d, 1.0, seed);
        let kk = which % k;
        let mut xm = x.into_mat();
        xm.row_mut(0).copy_from_slice(c.as_mat().row(kk));
        let x = DescriptorSet::new(xm).unwrap();
        let sm = SmoothingFactors::uniform(k, s).unwrap();
        let (_, cache) = encode_forward(&x, &c, &sm).unwrap();
        let bound = 1.0 / (2.0 * std::f64::consts::E * s).sqrt();
        for j in (0..k).filter(|&j| j != kk) {
            let r = cache.residuals.get(0, j);
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let contribution = cache.assignment.weights()[(0, j)] * rn;
            prop_assert!(contribution <= rn * (-s * rn * rn).exp() * (1.0 + 1e-12));
            prop_assert!(contribution <= bound);
        }
    }

    #[test]
    fn large_smoothing_recovers_vlad(n in 1usize..30, k in 2usize..6, d in 1usize..5, seed in any::<u64>()) {
        let (x, c) = well_separated(n, k, d, 0.1, seed);
        let s = SmoothingFactors::uniform(k, 1e4).unwrap();
        let (e, cache) = encode_forward(&x, &c, &s).unwrap();
        let hard = hard_assign(&x, &c).unwrap();
        for i in 0..n {
            for kk in 0..k {
                let one_hot = if hard.idx[i] == kk { 1.0 } else { 0.0 };
                prop_assert!((cache.assignment.weights()[(i, kk)] - one_hot).abs() <= 1e-6);
            }
        }
        prop_assert!(max_abs_diff(e.as_mat(), &vlad(&x, &c).unwrap()) <= 1e-6);
        prop_assert!(max_abs_diff(&vlad(&x, &c).unwrap(), &brute_vlad(x.as_mat(), c.as_mat())) <= 1e-12);
    }

    #[test]
    fn rel_error_is_symmetric(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 6)) {
        let a = Mat::from_vec(2, 3, a).unwrap();
        let b = Mat::from_vec(2, 3, b).unwrap();
        prop_assert_eq!(rel_error(&a, &b).unwrap(), rel_error(&b, &a).unwrap());
    }

    #[test]
    fn encodings_of_a_checkpoint_ignore_order(n in 2usize..30, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let params = NetworkParams::init(5, 3, 4, 2, seed).unwrap();
        let x = DescriptorSet::new(Mat::seeded_uniform(n, 5, -2.0, 2.0, seed ^ 7).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut deepten::rng::seeded(perm_seed));
        let px = DescriptorSet::new(permute_rows(x.as_mat(), &perm)).unwrap();
        for method in [Method::Ten, Method::Vlad, Method::Bow] {
            let a = encode_sample(&params, NormalizeMode::Global, &x, method).unwrap();
            let b = encode_sample(&params, NormalizeMode::Global, &px, method).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn datasets_round_trip(
        sizes in prop::collection::vec(1usize..12, 1..8),
        d in 1usize..6,
        classes in 1usize..5,
        seed in any::<u64>(),
    ) {
        let samples = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| Sample {
                x: DescriptorSet::new(Mat::seeded_uniform(n, d, -1e3, 1e3, seed.wrapping_add(i as u64)).unwrap()).unwrap(),
                label: i % classes,
            })
            .collect();
        let ds = DescriptorDataset::new(samples, classes, d).unwrap();
        let bytes = ds.to_bytes();
        let back = DescriptorDataset::from_bytes(&bytes, "mem").unwrap();
        prop_assert_eq!(&back, &ds.quantized());
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoints_round_trip(d_in in 1usize..6, d_proj in 1usize..5, k in 1usize..5, classes in 1usize..4, seed in any::<u64>()) {
        let ck = Checkpoint::Single {
            params: NetworkParams::init(d_in, d_proj, k, classes, seed).unwrap(),
            normalize: NormalizeMode::Global,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn passing_instances_survive_other_steps() {
    for (n, k, d, seed) in grid_instances(Grid::Default) {
        if !check_encoding(n, k, d, seed, 1e-6, 1e-5).unwrap().passed {
            continue;
        }
        for h in [1e-5, 1e-7] {
            let c = check_encoding(n, k, d, seed, h, 1e-4).unwrap();
            assert!(c.passed, "h = {h}: {c}");
        }
    }
}
