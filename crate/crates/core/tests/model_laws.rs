use bimamba::model::{
    assemble_multi_view, assemble_single_view, bimamba_block, checkpoint, encode_tokens, model_forward, patchify,
    unpatchify, BiMamba, Fusion, ModelConfig, ModelParams, Norm, ResidualMode,
};
use bimamba::ssm::{Discretization, ScanMode};
use bimamba::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::sample_uniform(shape, -1.0, 1.0, &mut rng).unwrap()
}

fn sized(patch: usize, side: usize, fusion: Fusion) -> ModelConfig {
    ModelConfig {
        patch,
        height: side,
        width: side,
        fusion,
        ..ModelConfig::toy()
    }
}

#[test]
fn sequence_lengths_and_cls_positions() {
    for patch in [8, 16] {
        for side in [64, 128, 512] {
            let j = (side / patch) * (side / patch);
            let single = sized(patch, side, Fusion::SingleFrontal);
            assert_eq!(single.patches_per_view(), j);
            assert_eq!(single.sequence_length(), j + 1);
            assert_eq!(single.cls_index(), j / 2);
            let multi = sized(patch, side, Fusion::InputPatchConcat);
            assert_eq!(multi.sequence_length(), 2 * j + 1);
            assert_eq!(multi.cls_index(), j);
        }
    }
    assert_eq!(sized(16, 512, Fusion::InputPatchConcat).sequence_length(), 2049);
    assert_eq!(ModelConfig::full().sequence_length(), 2049);
}

#[test]
fn assembled_layouts_place_cls_in_the_middle() {
    let cfg = sized(8, 32, Fusion::SingleFrontal);
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let emb = random(&[16, cfg.dim], 2);
    let seq = assemble_single_view(&emb, &params).unwrap();
    assert_eq!(seq.tokens.shape(), [17, cfg.dim]);
    assert_eq!(seq.cls_index, 8);
    for d in 0..cfg.dim {
        let expect = params.cls.data()[d] + params.pos.row(8)[d];
        assert_eq!(seq.tokens.row(8)[d], expect);
        assert_eq!(seq.tokens.row(0)[d], emb.row(0)[d] + params.pos.row(0)[d]);
        assert_eq!(seq.tokens.row(9)[d], emb.row(8)[d] + params.pos.row(9)[d]);
    }

    let cfg = sized(8, 32, Fusion::InputPatchConcat);
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let (u, v) = (random(&[16, cfg.dim], 3), random(&[16, cfg.dim], 4));
    let seq = assemble_multi_view(&u, &v, &params).unwrap();
    assert_eq!(seq.tokens.shape(), [33, cfg.dim]);
    assert_eq!(seq.cls_index, 16);
    for d in 0..cfg.dim {
        assert_eq!(seq.tokens.row(15)[d], u.row(15)[d] + params.pos.row(15)[d]);
        assert_eq!(seq.tokens.row(16)[d], params.cls.data()[d] + params.pos.row(16)[d]);
        assert_eq!(seq.tokens.row(17)[d], v.row(0)[d] + params.pos.row(17)[d]);
    }
}

#[test]
fn mismatched_views_are_rejected() {
    let cfg = sized(8, 32, Fusion::InputPatchConcat);
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    assert!(assemble_multi_view(&random(&[16, 8], 1), &random(&[15, 8], 2), &params).is_err());
}

#[test]
fn zeroed_output_projections_make_single_mode_the_identity() {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    params.zero_output_projections();
    let t = random(&[cfg.sequence_length(), cfg.dim], 6);
    assert_eq!(bimamba_block(&t, &params.blocks[0], &cfg).unwrap(), t);
    assert_eq!(encode_tokens(&t, &params, &cfg).unwrap(), t);
}

#[test]
fn zeroed_output_projections_make_literal_mode_double() {
    let cfg = ModelConfig {
        residual_mode: ResidualMode::LiteralPaper,
        ..ModelConfig::toy()
    };
    let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    params.zero_output_projections();
    let t = random(&[cfg.sequence_length(), cfg.dim], 7);
    let once = bimamba_block(&t, &params.blocks[0], &cfg).unwrap();
    for (a, b) in once.data().iter().zip(t.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    let factor = 2f64.powi(cfg.blocks as i32);
    let stacked = encode_tokens(&t, &params, &cfg).unwrap();
    for (a, b) in stacked.data().iter().zip(t.data()) {
        assert_eq!(*a, factor * b);
    }
}

#[test]
fn cls_sees_both_sides_only_when_bidirectional() {
    for bidirectional in [true, false] {
        let cfg = ModelConfig {
            bidirectional,
            ..ModelConfig::toy()
        };
        let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let l = cfg.sequence_length();
        let cls = cfg.cls_index();
        let t = random(&[l, cfg.dim], 9);
        let base = encode_tokens(&t, &params, &cfg).unwrap();
        let mut later = t.clone();
        for v in &mut later.data_mut()[(l - 1) * cfg.dim..] {
            *v += 0.5;
        }
        let moved = encode_tokens(&later, &params, &cfg).unwrap();
        let changed = base.row(cls).iter().zip(moved.row(cls)).any(|(a, b)| a != b);
        assert_eq!(changed, bidirectional, "bidirectional={bidirectional}");
    }
}

#[test]
fn single_view_modes_ignore_the_other_view() {
    let cfg = ModelConfig {
        fusion: Fusion::SingleFrontal,
        ..ModelConfig::toy()
    };
    let params = ModelParams::<f64>::init(&cfg, 10).unwrap();
    let f = random(&[16, 16], 11);
    let p1 = model_forward(&f, &random(&[16, 16], 12), &params, &cfg).unwrap();
    let p2 = model_forward(&f, &random(&[16, 16], 13), &params, &cfg).unwrap();
    assert_eq!(p1, p2);
    assert!(p1 > 0.0 && p1 < 1.0);
}

#[test]
fn checkpoint_reproduces_predictions_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    for fusion in [Fusion::InputPatchConcat, Fusion::ClsTokenConcat, Fusion::SingleLateral] {
        let cfg = ModelConfig {
            fusion,
            scan_mode: ScanMode::Parallel,
            discretization: Discretization::Exponential,
            ..ModelConfig::toy()
        };
        let model = BiMamba::<f32>::new(cfg.clone(), 14).unwrap();
        checkpoint::save(&model, &path).unwrap();
        let back = checkpoint::load_matching::<f32>(&path, &cfg).unwrap();
        let (f, l) = (random(&[16, 16], 15).cast(), random(&[16, 16], 16).cast());
        assert_eq!(model.logit(&f, &l).unwrap(), back.logit(&f, &l).unwrap());
    }
}

#[test]
fn config_text_rejects_unknown_keys() {
    let mut text = ModelConfig::desk().to_text();
    text.push_str("heads = 4\n");
    assert!(ModelConfig::from_text(&text).is_err());
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..4,
        prop::sample::select(vec![4usize, 8, 16]),
        1usize..4,
        1usize..6,
        prop::sample::select(vec![4usize, 8]),
        1usize..4,
        prop::sample::select(vec![
            Fusion::SingleFrontal,
            Fusion::SingleLateral,
            Fusion::InputPatchConcat,
            Fusion::ClsTokenConcat,
        ]),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(blocks, dim, mult, state, patch, grid, fusion, literal, exp, par, layer)| ModelConfig {
            blocks,
            dim,
            expand: dim * (mult + 1),
            state,
            patch,
            height: patch * grid,
            width: patch * (grid + 1),
            conv_width: 2,
            delta_rank: ModelConfig::default_delta_rank(dim),
            fusion,
            residual_mode: if literal { ResidualMode::LiteralPaper } else { ResidualMode::Single },
            discretization: if exp { Discretization::Exponential } else { Discretization::Multiplication },
            scan_mode: if par { ScanMode::Parallel } else { ScanMode::Sequential },
            norm: if layer { Norm::Layer } else { Norm::Rms },
            bidirectional: !literal || exp,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_text_round_trip(cfg in arb_config()) {
        prop_assert!(cfg.validate().is_ok());
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn patchify_round_trip(grid_h in 1usize..5, grid_w in 1usize..5, patch in 1usize..6, seed in any::<u64>()) {
        let img = random(&[grid_h * patch, grid_w * patch], seed);
        let p = patchify(&img, patch).unwrap();
        prop_assert_eq!(p.shape(), &[grid_h * grid_w, patch * patch]);
        prop_assert_eq!(unpatchify(&p, grid_h * patch, grid_w * patch, patch).unwrap(), img);
    }

    #[test]
    fn forward_gives_a_probability(cfg in arb_config(), seed in any::<u64>()) {
        let params = ModelParams::<f64>::init(&cfg, seed).unwrap();
        let f = random(&[cfg.height, cfg.width], seed ^ 1);
        let l = random(&[cfg.height, cfg.width], seed ^ 2);
        let p = model_forward(&f, &l, &params, &cfg).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert_eq!(params.pos.shape(), &[cfg.sequence_length(), cfg.dim]);
    }
}
