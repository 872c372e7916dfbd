use fat_core::augment::{mixup, pseudo_label};
use fat_core::federation::{aggregate, aggregate_weighted, gaussian_rampup, phase_of, Phase};
use fat_core::loss::{self, dice_score, LabelMap};
use fat_core::model::{axpy, init_model, ArchDescriptor, ModelParams};
use fat_core::rng::StreamRng;
use fat_core::tape::{finite_diff_check, Tape, Var};
use fat_core::tensor::{self, Tensor};
use fat_core::trainer::ema_update;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};

const FD_EPS: f32 = 1e-2;
const FD_TOL: f64 = 1e-2;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn random(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so that ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_labels(b: usize, h: usize, w: usize, c: usize, rng: &mut StreamRng) -> LabelMap {
    LabelMap::new(b, h, w, c, (0..b * h * w).map(|_| rng.random_range(0..c as u8)).collect()).unwrap()
}

/// Reduces a tensor var to a scalar through fixed random weights so that
/// every output element carries a distinct gradient.
fn weighted_sum(t: &mut Tape, x: Var, weights: &Tensor) -> fat_core::Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(x, w)?;
    t.sum(p)
}

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kh, kw) = k.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f64; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co] as f64;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((bi * cin + ci) * h + iy as usize) * w + ix as usize] as f64
                                        * k.data()[((co * cin + ci) * kh + ky) * kw + kx] as f64;
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1..=2usize, 1..=3usize, 1..=3usize, 3..=6usize, 3..=6usize, prop::sample::select(vec![1usize, 3]), 1..=2usize, 0..=1usize, any::<u64>())
        .prop_map(|(n, cin, cout, h, w, k, stride, pad, seed)| ConvCase {
            n,
            cin,
            cout,
            h,
            w,
            k,
            stride,
            pad,
            seed,
        })
}

fn close_vec(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn conv_matches_four_loop_oracle(c in conv_case()) {
        let mut rng = StreamRng::seed_from_u64(c.seed);
        let x = random(&[c.n, c.cin, c.h, c.w], &mut rng);
        let k = random(&[c.cout, c.cin, c.k, c.k], &mut rng);
        let b = random(&[c.cout], &mut rng);
        let got = tensor::conv2d(&x, &k, &b, c.stride, c.pad).unwrap();
        let want = naive_conv(&x, &k, &b, c.stride, c.pad);
        prop_assert_eq!(got.numel(), want.len());
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() < 1e-5, "{} vs {}", g, w);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences(c in conv_case()) {
        let mut rng = StreamRng::seed_from_u64(c.seed);
        let x = random(&[c.n, c.cin, c.h, c.w], &mut rng);
        let k = random(&[c.cout, c.cin, c.k, c.k], &mut rng);
        let b = random(&[c.cout], &mut rng);
        let out_shape = tensor::conv2d(&x, &k, &b, c.stride, c.pad).unwrap().shape().to_vec();
        let weights = random(&out_shape, &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], c.stride, c.pad)?;
                weighted_sum(t, y, &weights)
            },
            &[x, k, b],
            FD_EPS,
            12,
            c.seed,
        )
        .unwrap();
        prop_assert!(err < FD_TOL, "relative error {}", err);
    }

    #[test]
    fn relu_gradients_match_finite_differences(seed in any::<u64>(), n in 1..=24usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let x = away_from_zero(&[n], &mut rng);
        let weights = random(&[n], &mut rng);
        let err = finite_diff_check(|t, v| { let y = t.relu(v[0]); weighted_sum(t, y, &weights) }, &[x], FD_EPS, 8, seed).unwrap();
        prop_assert!(err < FD_TOL, "relative error {}", err);
    }

    #[test]
    fn upsample_gradients_match_finite_differences(seed in any::<u64>(), c in 1..=3usize, h in 1..=4usize, w in 1..=4usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let x = random(&[1, c, h, w], &mut rng);
        let weights = random(&[1, c, 2 * h, 2 * w], &mut rng);
        let err = finite_diff_check(
            |t, v| { let y = t.upsample_nearest2x(v[0])?; weighted_sum(t, y, &weights) },
            &[x], FD_EPS, 8, seed,
        ).unwrap();
        prop_assert!(err < FD_TOL, "relative error {}", err);
    }

    #[test]
    fn softmax_gradients_match_finite_differences(seed in any::<u64>(), b in 1..=2usize, c in 2..=4usize, hw in 1..=4usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let x = random(&[b, c, hw, hw], &mut rng);
        let weights = random(&[b, c, hw, hw], &mut rng);
        let err = finite_diff_check(
            |t, v| { let y = t.softmax_channels(v[0])?; weighted_sum(t, y, &weights) },
            &[x], FD_EPS, 8, seed,
        ).unwrap();
        prop_assert!(err < FD_TOL, "relative error {}", err);
    }

    #[test]
    fn concat_add_mul_gradients_match_finite_differences(seed in any::<u64>(), ca in 1..=3usize, cb in 1..=3usize, hw in 1..=3usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let a = random(&[1, ca, hw, hw], &mut rng);
        let b = random(&[1, cb, hw, hw], &mut rng);
        let c = random(&[1, ca + cb, hw, hw], &mut rng);
        let weights = random(&[1, ca + cb, hw, hw], &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let cat = t.concat_channels(v[0], v[1])?;
                let s = t.add(cat, v[2])?;
                let m = t.mul(s, cat)?;
                weighted_sum(t, m, &weights)
            },
            &[a, b, c], FD_EPS, 10, seed,
        ).unwrap();
        prop_assert!(err < FD_TOL, "relative error {}", err);
    }

    #[test]
    fn dice_and_ce_gradients_match_finite_differences(
        seed in any::<u64>(), b in 1..=2usize, c in 2..=3usize, hw in 2..=4usize,
        masked in any::<bool>(), include_bg in any::<bool>(),
    ) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let logits = random(&[b, c, hw, hw], &mut rng);
        let y = random_labels(b, hw, hw, c, &mut rng);
        let mask: Vec<bool> = (0..b * hw * hw).map(|i| i == 0 || rng.random_bool(0.7)).collect();
        let mask = masked.then_some(mask);
        for which in 0..3 {
            let err = finite_diff_check(
                |t, v| {
                    let p = t.softmax_channels(v[0])?;
                    match which {
                        0 => loss::dice_loss_node(t, p, &y, mask.as_deref(), include_bg),
                        1 => loss::cross_entropy_node(t, p, &y, mask.as_deref()),
                        _ => loss::dice_ce_node(t, p, &y, mask.as_deref(), include_bg),
                    }
                },
                std::slice::from_ref(&logits), FD_EPS, 8, seed,
            ).unwrap();
            prop_assert!(err < FD_TOL, "loss {} relative error {}", which, err);
        }
    }

    #[test]
    fn softmax_is_normalized_and_mixup_keeps_it(seed in any::<u64>(), c in 2..=5usize, lambda in 0.0f64..=1.0) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let scale: f32 = rng.random_range(0.1..20.0);
        let mut a = random(&[2, c, 3, 3], &mut rng);
        a.data_mut().iter_mut().for_each(|v| *v *= scale);
        let pa = tensor::softmax_channels(&a).unwrap();
        let pb = tensor::softmax_channels(&random(&[2, c, 3, 3], &mut rng)).unwrap();
        let pm = mixup(&pa, &pb, lambda).unwrap();
        for p in [&pa, &pb, &pm] {
            for bi in 0..2 {
                for i in 0..9 {
                    let s: f64 = (0..c).map(|ch| p.data()[(bi * c + ch) * 9 + i] as f64).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6, "channel sum {}", s);
                }
            }
            prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn mixup_laws(seed in any::<u64>(), lambda in 0.0f64..=1.0, n in 1..=32usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let a = random(&[n], &mut rng);
        let b = random(&[n], &mut rng);
        prop_assert_eq!(&mixup(&a, &a, lambda).unwrap(), &a);
        // symmetric in swapping operands and coefficient
        let ab = mixup(&a, &b, lambda).unwrap();
        let ba = mixup(&b, &a, 1.0 - lambda).unwrap();
        prop_assert!(close_vec(ab.data(), ba.data(), 1e-6));
        // elementwise between the operands
        for ((m, x), y) in ab.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(*m >= x.min(*y) - 1e-6 && *m <= x.max(*y) + 1e-6);
        }
    }

    #[test]
    fn pseudo_label_is_mixup_self_invariant_and_lowest_index_on_ties(seed in any::<u64>(), c in 2..=4usize, lambda in 0.0f64..=1.0) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let p = tensor::softmax_channels(&random(&[1, c, 4, 4], &mut rng)).unwrap();
        prop_assert_eq!(pseudo_label(&mixup(&p, &p, lambda).unwrap()).unwrap(), pseudo_label(&p).unwrap());
        let uniform = Tensor::full(&[1, c, 2, 2], 1.0 / c as f32);
        prop_assert!(pseudo_label(&uniform).unwrap().data().iter().all(|&l| l == 0));
        let labels = pseudo_label(&p).unwrap();
        prop_assert!(labels.data().iter().all(|&l| (l as usize) < c));
    }

    #[test]
    fn dice_score_is_symmetric_and_bounded(seed in any::<u64>(), c in 2..=4usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let a = random_labels(2, 4, 4, c, &mut rng);
        let b = random_labels(2, 4, 4, c, &mut rng);
        for k in 0..c {
            let ab = dice_score(&a, &b, k).unwrap();
            prop_assert_eq!(ab, dice_score(&b, &a, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice_score(&a, &a, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn soft_losses_are_bounded(seed in any::<u64>(), c in 2..=4usize) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let p = tensor::softmax_channels(&random(&[2, c, 3, 3], &mut rng)).unwrap();
        let y = random_labels(2, 3, 3, c, &mut rng);
        let d = loss::soft_dice_loss(&p, &y).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(loss::cross_entropy(&p, &y).unwrap().value >= 0.0);
    }

    #[test]
    fn phase_windows_hold_exactly_a_supervised_rounds(a in 1..=8usize, start in 0..200usize) {
        let sup = (start..start + 2 * a).filter(|&t| phase_of(t, a) == Phase::Supervised).count();
        prop_assert_eq!(sup, a);
    }

    #[test]
    fn rampup_is_increasing_and_bounded(total in 2..=500usize) {
        let mut prev = 0.0;
        for t in 0..total {
            let eta = gaussian_rampup(t, total).unwrap();
            prop_assert!(eta > prev && eta <= 1.0);
            prev = eta;
        }
        prop_assert_eq!(prev, 1.0);
    }
}

fn tiny() -> ArchDescriptor {
    ArchDescriptor::new(1, 2, 2).unwrap()
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn aggregation_is_permutation_invariant(seeds in prop::collection::vec(any::<u64>(), 1..=5), counts in prop::collection::vec(1..=50usize, 5), rot in 0..5usize) {
        let models: Vec<ModelParams> = seeds.iter().map(|&s| init_model(tiny(), s).unwrap()).collect();
        let counts = &counts[..models.len()];
        let refs: Vec<&ModelParams> = models.iter().collect();
        let base = aggregate(&refs, counts).unwrap();
        let k = rot % models.len();
        let mut rrefs = refs.clone();
        rrefs.rotate_left(k);
        let mut rcounts = counts.to_vec();
        rcounts.rotate_left(k);
        rrefs.reverse();
        rcounts.reverse();
        let other = aggregate(&rrefs, &rcounts).unwrap();
        prop_assert!(close_vec(&base.flat_values(), &other.flat_values(), 1e-6));
    }

    #[test]
    fn equal_counts_give_the_plain_mean(seeds in prop::collection::vec(any::<u64>(), 1..=5), count in 1..=9usize) {
        let models: Vec<ModelParams> = seeds.iter().map(|&s| init_model(tiny(), s).unwrap()).collect();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let agg = aggregate(&refs, &vec![count; models.len()]).unwrap();
        let n = models.len() as f64;
        let flats: Vec<Vec<f32>> = models.iter().map(|m| m.flat_values()).collect();
        let mean: Vec<f32> = (0..flats[0].len()).map(|i| (flats.iter().map(|f| f[i] as f64).sum::<f64>() / n) as f32).collect();
        prop_assert!(close_vec(&agg.flat_values(), &mean, 1e-6));
        // identical models stay put
        let same = vec![&models[0]; models.len()];
        let counts: Vec<usize> = (1..=models.len()).collect();
        prop_assert!(close_vec(&aggregate(&same, &counts).unwrap().flat_values(), &flats[0], 1e-6));
    }

    #[test]
    fn weighted_aggregate_matches_elementwise_oracle(seeds in prop::collection::vec(any::<u64>(), 1..=4), w in prop::collection::vec(0.01f64..10.0, 4)) {
        let models: Vec<ModelParams> = seeds.iter().map(|&s| init_model(tiny(), s).unwrap()).collect();
        let w = &w[..models.len()];
        let total: f64 = w.iter().sum();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let norm: Vec<f64> = w.iter().map(|x| x / total).collect();
        let got = aggregate_weighted(&refs, &norm).unwrap().flat_values();
        let flats: Vec<Vec<f32>> = models.iter().map(|m| m.flat_values()).collect();
        for (i, g) in got.iter().enumerate() {
            let want: f64 = flats.iter().zip(w).map(|(f, wk)| f[i] as f64 * wk).sum::<f64>() / total;
            prop_assert!((*g as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn axpy_is_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let x = init_model(tiny(), s1).unwrap();
        let y = init_model(tiny(), s2).unwrap();
        let zero = ModelParams::zeros(tiny()).unwrap();
        // axpy(0, a, y) + b·y == axpy(0, a + b, y)
        let lhs = axpy(&axpy(&zero, a, &y).unwrap(), b, &y).unwrap();
        let rhs = axpy(&zero, a + b, &y).unwrap();
        prop_assert!(close_vec(&lhs.flat_values(), &rhs.flat_values(), 1e-5));
        prop_assert_eq!(axpy(&x, 0.0, &y).unwrap(), x.clone());
        let sum = axpy(&x, 1.0, &y).unwrap().flat_values();
        let want: Vec<f32> = x.flat_values().iter().zip(y.flat_values()).map(|(p, q)| p + q).collect();
        prop_assert!(close_vec(&sum, &want, 1e-6));
    }

    #[test]
    fn ema_stays_between_operands(s1 in any::<u64>(), s2 in any::<u64>(), tau in 0.001f64..0.999) {
        let theta = init_model(tiny(), s1).unwrap();
        let xi = init_model(tiny(), s2).unwrap();
        let out = ema_update(&theta, &xi, tau).unwrap();
        for ((o, t), x) in out.flat_values().iter().zip(theta.flat_values()).zip(xi.flat_values()) {
            prop_assert!(*o >= t.min(x) && *o <= t.max(x));
        }
    }
}
