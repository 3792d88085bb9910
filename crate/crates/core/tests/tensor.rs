use dsmyolo::tensor::kernels::{channel_shuffle, concat_channels, conv2d, split_channels};
use dsmyolo::tensor::{read_golden_from, write_golden_to, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop convolution with zero padding.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, c_in, h, wd) = x.dims4("oracle").unwrap();
    let (c_out, cpg, kh, kw) = w.dims4("oracle").unwrap();
    let (oh, ow) = (
        (h + 2 * pad - kh) / stride + 1,
        (wd + 2 * pad - kw) / stride + 1,
    );
    let opg = c_out / groups;
    assert_eq!(cpg * groups, c_in);
    let mut out = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for o in 0..c_out {
            let g = o / opg;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for ci in 0..cpg {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (sy, sx) = (
                                    (y * stride + i) as isize - pad as isize,
                                    (xx * stride + j) as isize - pad as isize,
                                );
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += x.at4(b, g * cpg + ci, sy as usize, sx as usize)
                                        * w.at4(o, ci, i, j);
                                }
                            }
                        }
                    }
                    out[((b * c_out + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, c_out, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (c_in, c_out, k, stride, groups, h, w) in [
        (3, 4, 3, 1, 1, 6, 5),
        (4, 6, 3, 2, 2, 7, 7),
        (4, 4, 3, 1, 4, 5, 6),
        (2, 3, 1, 1, 1, 4, 4),
        (6, 6, 5, 2, 3, 9, 8),
    ] {
        let x = Tensor::<f64>::rand_uniform(&[2, c_in, h, w], -1.0, 1.0, &mut rng);
        let wt = Tensor::<f64>::rand_uniform(&[c_out, c_in / groups, k, k], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[c_out], -1.0, 1.0, &mut rng);
        let got = conv2d(&x, &wt, Some(&b), stride, k / 2, groups).unwrap();
        let want = conv_oracle(&x, &wt, Some(b.data()), stride, k / 2, groups);
        assert_eq!(got.shape(), want.shape());
        assert!(
            got.max_abs_diff(&want) < 1e-12,
            "c_in={c_in} groups={groups}"
        );
    }
}

#[test]
fn golden_roundtrip_both_dtypes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = Tensor::<f32>::rand_uniform(&[2, 3, 4], -5.0, 5.0, &mut rng);
    let mut buf = Vec::new();
    write_golden_to(&t, &mut buf);
    let (back, used): (Tensor<f32>, usize) = read_golden_from(&buf).unwrap();
    assert_eq!((back, used), (t.clone(), buf.len()));
    assert!(read_golden_from::<f64>(&buf).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_is_a_bijection(groups in 1usize..5, per in 1usize..5, seed in any::<u64>()) {
        let c = groups * per;
        let x = Tensor::<f64>::rand_uniform(&[2, c, 2, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = channel_shuffle(&x, groups).unwrap();
        // shuffling by the complementary factor undoes it
        prop_assert_eq!(channel_shuffle(&y, per).unwrap(), x.clone());
        let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn concat_inverts_split(sizes in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let c: usize = sizes.iter().sum();
        let x = Tensor::<f64>::rand_uniform(&[2, c, 3, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let parts = split_channels(&x, &sizes).unwrap();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        prop_assert_eq!(concat_channels(&refs).unwrap(), x);
    }
}
