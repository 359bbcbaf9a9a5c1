use proptest::prelude::*;

use pw_core::checkpoint::{decode_params, encode_params};
use pw_core::eval::{elo_update, sign_test_one_sided, sign_test_two_sided, EloState};
use pw_core::nft::{make_branches, nft_loss, Reduction};
use pw_core::oracle::{decompose, DiscreteWorld};
use pw_core::rewards::{group_normalize, psnr, ssim, FrameDims, SsimConfig, DEFAULT_PSNR_CAP};
use pw_core::rng::rng_from;
use pw_core::rollout::{select_informative, PrefixStrategy, SelectionPolicy};
use pw_core::{Clip, ClipShape, DenoiserLayout, DenoiserParams, TrainConfig};

fn clip_pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0..3.0f64, len), prop::collection::vec(-3.0..3.0f64, len))
}

fn frame(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn branches_are_symmetric_about_the_reference((a, b) in clip_pair(2 * 3 * 4 * 4), beta in 0.0..=1.0f64) {
        let shape = ClipShape::new(2, 3, 1, 4, 4);
        let xt = Clip::from_vec(shape, a).unwrap();
        let xo = Clip::from_vec(shape, b).unwrap();
        let br = make_branches(&xt, &xo, beta).unwrap();
        for i in 0..shape.len() {
            let (p, m, t, o) = (br.x_plus.data()[i], br.x_minus.data()[i], xt.data()[i], xo.data()[i]);
            prop_assert!((p + m - 2.0 * o).abs() <= 1e-12);
            prop_assert!((p - m - 2.0 * beta * (t - o)).abs() <= 1e-12);
        }
    }

    #[test]
    fn branch_loss_is_nonnegative_and_linear_in_r((a, b) in clip_pair(32), beta in 0.01..=1.0f64, r in 0.0..=1.0f64) {
        let shape = ClipShape::new(1, 2, 1, 4, 4);
        let xt = Clip::from_vec(shape, a).unwrap();
        let xo = Clip::from_vec(shape, b.clone()).unwrap();
        let x0 = Clip::from_vec(shape, b.iter().map(|v| v * 0.5).collect()).unwrap();
        let br = make_branches(&xt, &xo, beta).unwrap();
        let l0 = nft_loss(&br, &x0, 0.0, Reduction::Sum).unwrap();
        let l1 = nft_loss(&br, &x0, 1.0, Reduction::Sum).unwrap();
        let lr = nft_loss(&br, &x0, r, Reduction::Sum).unwrap();
        prop_assert!(lr >= 0.0);
        prop_assert!((lr - (r * l1 + (1.0 - r) * l0)).abs() <= 1e-9 * (1.0 + l0 + l1));
        let mean = nft_loss(&br, &x0, r, Reduction::Mean).unwrap();
        prop_assert!((mean * shape.len() as f64 - lr).abs() <= 1e-9 * (1.0 + lr));
    }

    #[test]
    fn group_weights_are_bounded_and_affine_invariant(
        raw in prop::collection::vec(-10.0..10.0f64, 2..12),
        scale in 0.1..20.0f64,
        shift in -50.0..50.0f64,
    ) {
        let g = group_normalize(&raw, 0.0).unwrap();
        prop_assert!(g.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        let moved: Vec<f64> = raw.iter().map(|r| scale * r + shift).collect();
        let h = group_normalize(&moved, 0.0).unwrap();
        for (a, b) in g.weights.iter().zip(&h.weights) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // Ordering of rewards is preserved by the weights.
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(g.weights[i] <= g.weights[j]);
                }
            }
        }
    }

    #[test]
    fn selection_keeps_extremes_without_repeats(
        raw in prop::collection::vec(-5.0..5.0f64, 2..10),
        top in 0usize..5,
        bottom in 0usize..5,
    ) {
        let policy = SelectionPolicy { keep_top: top, keep_bottom: bottom };
        let picked = select_informative(&raw, policy);
        if top + bottom > raw.len() {
            prop_assert!(picked.is_err());
            return Ok(());
        }
        let picked = picked.unwrap();
        prop_assert_eq!(picked.len(), top + bottom);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picked.len());
        let kept_top = &picked[..top];
        for &i in kept_top {
            let beaten = raw.iter().filter(|&&v| v > raw[i]).count();
            prop_assert!(beaten < top);
        }
    }

    #[test]
    fn psnr_and_ssim_basics(a in frame(3 * 8 * 8), b in frame(3 * 8 * 8)) {
        let dims = FrameDims { channels: 3, height: 8, width: 8 };
        let cfg = SsimConfig::default();
        prop_assert!((ssim(&a, &a, dims, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let s_ab = ssim(&a, &b, dims, &cfg).unwrap();
        let s_ba = ssim(&b, &a, dims, &cfg).unwrap();
        prop_assert!((s_ab - s_ba).abs() < 1e-12);
        prop_assert!(s_ab <= 1.0 + 1e-12);
        prop_assert_eq!(psnr(&a, &a, DEFAULT_PSNR_CAP).unwrap(), DEFAULT_PSNR_CAP);
        prop_assert!(psnr(&a, &b, DEFAULT_PSNR_CAP).unwrap() <= DEFAULT_PSNR_CAP);
    }

    #[test]
    fn elo_updates_conserve_total(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let ids = ["a", "b", "c", "d"];
        let mut state = EloState::new(&ids, 32.0).unwrap();
        for (w, l) in pairs {
            if w != l {
                elo_update(&mut state, ids[w], ids[l]).unwrap();
            }
        }
        prop_assert!((state.total() - 4.0 * 800.0).abs() < 1e-9);
    }

    #[test]
    fn sign_test_is_a_probability(wins in 0u64..40, losses in 0u64..40) {
        let two = sign_test_two_sided(wins, losses);
        let one = sign_test_one_sided(wins, losses);
        prop_assert!((0.0..=1.0).contains(&two));
        prop_assert!((0.0..=1.0).contains(&one));
        prop_assert!((sign_test_two_sided(losses, wins) - two).abs() < 1e-12);
    }

    #[test]
    fn posterior_mixture_identity_on_random_worlds(seed in any::<u64>(), n in 2usize..8, sigma in 0.2..3.0f64, x in -3.0..3.0f64) {
        let world = DiscreteWorld::random(&mut rng_from(seed), n).unwrap();
        let d = decompose(&world, x, sigma).unwrap();
        let mixed_mean = d.alpha * d.mu_plus + (1.0 - d.alpha) * d.mu_minus;
        prop_assert!((mixed_mean - d.mu_old).abs() < 1e-10);
        for i in 0..n {
            let mixed = d.alpha * d.post_plus[i] + (1.0 - d.alpha) * d.post_minus[i];
            prop_assert!((mixed - d.post_old[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn prefix_strategy_text_round_trips(lo in 0usize..6, span in 0usize..6, ramp in 1u64..5000) {
        for s in [
            PrefixStrategy::Fixed(lo),
            PrefixStrategy::Random { lo, hi: lo + span },
            PrefixStrategy::Curriculum { max: lo + span, ramp_steps: ramp },
        ] {
            let parsed: PrefixStrategy = s.to_string().parse().unwrap();
            prop_assert_eq!(parsed, s);
        }
    }

    #[test]
    fn checkpoints_round_trip_on_the_f32_grid(seed in any::<u64>(), hidden in 1usize..5) {
        let layout = DenoiserLayout { noisy_channels: 2, context_channels: 3, cond_dim: 2, hidden };
        let mut p = DenoiserParams::random(layout, 1.0, &mut rng_from(seed));
        p.round_to_f32();
        p.version = seed % 1000;
        let q = decode_params(&encode_params(&p).unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(q.arrays, p.arrays);
    }
}

#[test]
fn config_text_round_trips() {
    let mut c = TrainConfig::default();
    c.apply_overrides(&["beta=0.5".to_string(), "prefix=curriculum:4:100".to_string(), "view_weights=1,2,3".to_string()])
        .unwrap();
    let back = TrainConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back.to_text(), c.to_text());
}
