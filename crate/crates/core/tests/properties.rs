use std::path::Path;

use lfhn_core::data::{decode_pnm, encode_pnm, quantize, split, LabeledSample, PoseRoster, SplitProtocol};
use lfhn_core::eval::{Prediction, RankTable};
use lfhn_core::layers::{
    concat_channels, conv1x1_forward, conv_forward, lrn_forward, softmax, softmax_xent,
    split_channels, ConvParams, LrnParams,
};
use lfhn_core::tensor::matmul;
use lfhn_core::train::{center_crop, mirror};
use lfhn_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..7, 1usize..7, prop::sample::select(vec![1usize, 3])).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f64..1.0, h * w * c)
            .prop_map(move |v| Tensor::new(&[h, w, c], v).unwrap())
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #[test]
    fn matmul_is_bilinear(
        (a, a2, b, s) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, k, n)| {
            (tensor(vec![m, k]), tensor(vec![m, k]), tensor(vec![k, n]), -3.0f64..3.0)
        })
    ) {
        let mut lhs_in = a.scale(s);
        lhs_in.add_assign(&a2).unwrap();
        let lhs = matmul(&lhs_in, &b).unwrap();
        let mut rhs = matmul(&a, &b).unwrap().scale(s);
        rhs.add_assign(&matmul(&a2, &b).unwrap()).unwrap();
        prop_assert!(close(lhs.data(), rhs.data(), 1e-12));
    }

    #[test]
    fn offset_and_unravel_are_inverse(shape in prop::collection::vec(1usize..5, 1..5), pick in any::<prop::sample::Index>()) {
        let t = Tensor::zeros(&shape);
        let flat = pick.index(t.len());
        prop_assert_eq!(t.offset(&t.unravel(flat)), flat);
    }

    #[test]
    fn concat_then_split_is_identity(
        (parts, extents) in (1usize..3, 1usize..4, 1usize..4, prop::collection::vec(1usize..4, 1..4))
            .prop_flat_map(|(n, h, w, cs)| {
                let parts: Vec<_> = cs.iter().map(|&c| tensor(vec![n, h, w, c])).collect();
                (parts, Just(cs))
            })
    ) {
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = concat_channels(&refs).unwrap();
        prop_assert_eq!(split_channels(&joined, &extents).unwrap(), parts);
    }

    #[test]
    fn softmax_rows_sum_to_one(
        (logits, labels) in (1usize..5, 2usize..8).prop_flat_map(|(n, k)| {
            (tensor(vec![n, k]).prop_map(|t| t.scale(20.0)), prop::collection::vec(0..k, n))
        })
    ) {
        let p = softmax(&logits).unwrap();
        let k = logits.shape()[1];
        for row in p.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let (loss, _) = softmax_xent(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn lrn_never_amplifies(
        x in (1usize..3, 1usize..10).prop_flat_map(|(hw, c)| tensor(vec![1, hw, hw, c]).prop_map(|t| t.scale(50.0))),
        k in 1.0f64..3.0, alpha in 0.0f64..2.0, beta in 0.1f64..1.0, size in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let y = lrn_forward(&x, &LrnParams::new(size, k, alpha, beta).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn pointwise_conv_equals_general_conv(
        (x, kernel, bias) in (1usize..3, 1usize..6, 1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(n, h, w, ci, co)| {
            (tensor(vec![n, h, w, ci]), tensor(vec![1, 1, ci, co]), tensor(vec![co]))
        })
    ) {
        let p = ConvParams::new(kernel, bias, 1, 0).unwrap();
        prop_assert_eq!(conv1x1_forward(&x, &p).unwrap(), conv_forward(&x, &p).unwrap());
    }

    #[test]
    fn random_split_partitions(n in 1usize..300, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let samples: Vec<LabeledSample> = (0..n)
            .map(|i| LabeledSample { image: Tensor::zeros(&[1, 1, 1]), identity: i, pose: 0, light: 0 })
            .collect();
        let s = split(samples, &SplitProtocol::Random { fraction, seed }).unwrap();
        let mut ids: Vec<usize> = s.train.iter().chain(&s.test).map(|x| x.identity).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn rank_table_is_order_independent(
        preds in prop::collection::vec((0usize..13, 0usize..8, 0usize..4, 0usize..4), 0..200),
        seed in any::<u64>(),
    ) {
        let preds: Vec<Prediction> = preds
            .into_iter()
            .map(|(pose, light, truth, predicted)| Prediction { pose, light, truth, predicted })
            .collect();
        let roster = PoseRoster::default();
        let t = RankTable::from_predictions(&roster, &preds).unwrap();
        let mut shuffled = preds.clone();
        let len = shuffled.len().max(1);
        shuffled.rotate_left(seed as usize % len);
        shuffled.reverse();
        prop_assert_eq!(RankTable::from_predictions(&roster, &shuffled).unwrap(), t.clone());
        for bin in &t.bins {
            if let Some(r) = bin.rate() {
                prop_assert!((0.0..=100.0).contains(&r));
            }
        }
    }

    #[test]
    fn mirror_twice_is_identity(img in image()) {
        prop_assert_eq!(mirror(&mirror(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn full_extent_crop_is_identity(img in image()) {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        prop_assert_eq!(center_crop(&img, (h, w)).unwrap(), img);
    }

    #[test]
    fn pnm_round_trips_quantized_images(img in image()) {
        let q = img.map(|v| quantize(v) as f64 / 255.0);
        let back = decode_pnm(&encode_pnm(&img).unwrap(), Path::new("x.pnm")).unwrap();
        prop_assert_eq!(back, q);
    }
}
