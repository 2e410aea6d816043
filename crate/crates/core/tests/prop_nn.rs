use proptest::prelude::*;
use tfcl::nn::{
    load_checkpoint, save_checkpoint, softmax, Conv1d, Conv2d, ConvLayer, Mlp, ModelCheckpoint, Module, Precision,
    SignalEncoder,
};
use tfcl::rng::RngStream;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let p = softmax(&x);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv1d_matches_nested_loops(
        (k, c_in, c_out, t) in (1usize..6, 1usize..4, 1usize..5, 6usize..20),
        seed in any::<u64>(),
    ) {
        let mut conv = Conv1d::new(k, c_in, c_out);
        conv.init(&RngStream::new(seed, 0));
        conv.bias.data.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let x: Vec<f64> = (0..t * c_in).map(|i| ((i as f64 + seed as f64 % 7.0) * 0.37).sin()).collect();
        let got = conv.forward(&x, &[t], Precision::Double);
        let to = t - k + 1;
        prop_assert_eq!(got.len(), to * c_out);
        for p in 0..to {
            for o in 0..c_out {
                let mut want = conv.bias.data[o];
                for dk in 0..k {
                    for c in 0..c_in {
                        want += conv.weight.data[(o * k + dk) * c_in + c] * x[(p + dk) * c_in + c];
                    }
                }
                prop_assert!((got[p * c_out + o] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_nested_loops(
        (k, c_in, c_out, h, w) in (1usize..4, 1usize..3, 1usize..4, 4usize..9, 4usize..9),
        seed in any::<u64>(),
    ) {
        let mut conv = Conv2d::new(k, c_in, c_out);
        conv.init(&RngStream::new(seed, 1));
        let x: Vec<f64> = (0..h * w * c_in).map(|i| (i as f64 * 0.61).cos()).collect();
        let got = conv.forward(&x, &[h, w], Precision::Double);
        let (ho, wo) = (h - k + 1, w - k + 1);
        prop_assert_eq!(got.len(), ho * wo * c_out);
        for y in 0..ho {
            for xx in 0..wo {
                for o in 0..c_out {
                    let mut want = conv.bias.data[o];
                    for dy in 0..k {
                        for dx in 0..k {
                            for c in 0..c_in {
                                want += conv.weight.data[((o * k + dy) * k + dx) * c_in + c]
                                    * x[((y + dy) * w + xx + dx) * c_in + c];
                            }
                        }
                    }
                    prop_assert!((got[(y * wo + xx) * c_out + o] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), x in values(128 * 3)) {
        let mut enc = SignalEncoder::standard();
        enc.init(&RngStream::new(seed, 2));
        let (a, _) = enc.forward(&x).unwrap();
        let (b, _) = enc.clone().forward(&x).unwrap();
        prop_assert_eq!(a.len(), 96);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), classes in 2usize..9) {
        let mut head = Mlp::har(classes);
        head.init(&RngStream::new(seed, 3));
        let mut ck = ModelCheckpoint::new(format!("har-head/{classes}"), seed);
        ck.push_module("head", &head);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        prop_assert_eq!(&back, &ck);

        let mut restored = Mlp::har(classes);
        back.restore_into("head", &mut restored).unwrap();
        let mut again = ModelCheckpoint::new(format!("har-head/{classes}"), seed);
        again.push_module("head", &restored);
        prop_assert_eq!(
            again.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ck.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(again.manifest.weights_sha256, ck.manifest.weights_sha256);
    }
}
