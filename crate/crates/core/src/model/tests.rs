use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::{finite_diff_check_coords, Stencil};
use crate::pseudo_query::{Margins, Source};
use crate::scene::sample_base_scene;

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn setup(cfg: ModelConfig) -> (GroundingModel, ModelParams) {
    let params = ModelParams::init(&cfg, 11).unwrap();
    (GroundingModel::new(cfg).unwrap(), params)
}

fn base_sample(seed: u64) -> (SceneSpec, QuerySample) {
    let (scene, q) = sample_base_scene(seed, Margins::default()).unwrap();
    let sample = QuerySample {
        scene_id: scene.scene_id.clone(),
        tokens: q.tokens.clone(),
        target_box: scene.objects[q.target].bbox,
        source: Source::Real,
        distractor_count: scene.distractor_count(),
        relation: q.relation,
    };
    (scene, sample)
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    let bad = ModelConfig {
        heads: 3,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        patch: 7,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        max_query_len: 3,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn shape_sweep() {
    let img = rasterize(&base_sample(1).0);
    let ids = vocab::encode(&toks(&["red", "square"]), 6).unwrap();
    for d in [32, 64] {
        for patch in [8, 16] {
            let cfg = ModelConfig {
                d_model: d,
                patch,
                ..ModelConfig::default()
            };
            let (model, params) = setup(cfg.clone());
            let mut t = Tape::new();
            let p = BoundParams::bind(&mut t, &params, false);
            let text = model.encode_text(&mut t, &p, &ids).unwrap();
            assert_eq!(t.shape(text), (6, d));
            let vis = model.encode_image(&mut t, &p, &img).unwrap();
            let hw = (64 / patch) * (64 / patch);
            assert_eq!(t.shape(vis), (hw, d));
            let input = GroundingInput {
                token_ids: &ids,
                image: &img,
                prior: PriorInput::Off,
            };
            let seq = model.decoder_sequence(&mut t, &p, &input).unwrap();
            assert_eq!(t.shape(seq), (1 + 6 + hw, d));
            assert_eq!(cfg.decoder_tokens(), 1 + 6 + hw);
            let out = model.build(&mut t, &p, &input).unwrap();
            assert_eq!(t.shape(out), (1, 4));
        }
    }
    assert_eq!(ModelConfig::default().visual_tokens(), 16);
}

#[test]
fn padded_positions_do_not_leak() {
    let (model, mut params) = setup(ModelConfig::small_for_tests());
    let img = rasterize(&base_sample(3).0);
    let ids = vocab::encode(&toks(&["red", "square"]), 6).unwrap();
    let input = GroundingInput {
        token_ids: &ids,
        image: &img,
        prior: PriorInput::Off,
    };
    let run = |params: &ModelParams| {
        let mut t = Tape::new();
        let p = BoundParams::bind(&mut t, params, false);
        let text = model.encode_text(&mut t, &p, &ids).unwrap();
        let text_rows = t.value(text).data()[..2 * 16].to_vec();
        let out = model.build(&mut t, &p, &input).unwrap();
        (text_rows, t.value(out).clone())
    };
    let before = run(&params);
    // permute the padded tail: swap the position rows of slots 2 and 5
    let pos = params.get_mut("text.pos").unwrap();
    for c in 0..16 {
        let (a, b) = (pos.get(2, c), pos.get(5, c));
        pos.set(2, c, b);
        pos.set(5, c, a);
    }
    let after = run(&params);
    assert_eq!(before, after);
}

#[test]
fn image_sensitivity_and_positional_encoding() {
    let (model, params) = setup(ModelConfig::small_for_tests());
    let encode = |img: &Image| {
        let mut t = Tape::new();
        let p = BoundParams::bind(&mut t, &params, false);
        let v = model.encode_image(&mut t, &p, img).unwrap();
        t.value(v).clone()
    };
    let flat = Image::filled(64, 64, [128, 128, 128]);
    let a = encode(&flat);
    let mut poked = flat.clone();
    poked.pixels[0] = 255;
    assert_ne!(a, encode(&poked));
    // identical patch contents differ only through position encodings
    for i in 0..a.rows() {
        for j in 0..i {
            assert_ne!(a.row(i), a.row(j));
        }
    }
}

#[test]
fn residual_only_decoder_returns_its_input_token() {
    let cfg = ModelConfig::small_for_tests();
    let (model, mut params) = setup(cfg.clone());
    for i in 0..cfg.dec_layers {
        for name in ["wo", "bo", "w2", "b2"] {
            let a = params.get_mut(&format!("dec.layer{i}.{name}")).unwrap();
            a.data_mut().fill(0.0);
        }
    }
    let img = rasterize(&base_sample(4).0);
    let ids = vocab::encode(&toks(&["top", "circle"]), 6).unwrap();
    let mut t = Tape::new();
    let p = BoundParams::bind(&mut t, &params, false);
    let token = model.target_token(&mut t, &p, PriorInput::Off).unwrap();
    let text = model.encode_text(&mut t, &p, &ids).unwrap();
    let vis = model.encode_image(&mut t, &p, &img).unwrap();
    let out = model.decode(&mut t, &p, token, text, vis, &ids).unwrap();
    assert_eq!(t.value(out), params.get("p_r").unwrap());
}

#[test]
fn zero_head_predicts_center() {
    let (model, mut params) = setup(ModelConfig::small_for_tests());
    for name in ["w1", "b1", "w2", "b2", "w3", "b3"] {
        params.get_mut(&format!("head.{name}")).unwrap().data_mut().fill(0.0);
    }
    let mut t = Tape::new();
    let p = BoundParams::bind(&mut t, &params, false);
    let tok = t.constant(Tensor2D::row_vector(vec![0.3; 16]));
    let out = model.predict_box(&mut t, &p, tok).unwrap();
    assert_eq!(t.value(out).data(), &[0.5; 4]);
}

#[test]
fn head_output_is_squashed() {
    let (model, params) = setup(ModelConfig::small_for_tests());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let scale = rng.gen_range(0.1..10.0);
        let mut t = Tape::new();
        let p = BoundParams::bind(&mut t, &params, false);
        let tok = t.constant(Tensor2D::randn(1, 16, scale, &mut rng));
        let out = model.predict_box(&mut t, &p, tok).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn rejects_bad_inputs() {
    let (model, params) = setup(ModelConfig::small_for_tests());
    let img = Image::filled(64, 64, [0, 0, 0]);
    let short = [1usize, 2];
    let input = GroundingInput {
        token_ids: &short,
        image: &img,
        prior: PriorInput::Off,
    };
    assert!(model.predict(&params, &input).is_err());
    let oov = [99usize, 0, 0, 0, 0, 0];
    let input = GroundingInput {
        token_ids: &oov,
        ..input
    };
    assert!(model.predict(&params, &input).is_err());
    let other = ModelParams::init(&ModelConfig::default(), 0).unwrap();
    let ids = [1usize, 0, 0, 0, 0, 0];
    let small = Image::filled(32, 32, [0, 0, 0]);
    assert!(model
        .predict(
            &other,
            &GroundingInput {
                token_ids: &ids,
                image: &img,
                prior: PriorInput::Off
            }
        )
        .is_err());
    assert!(model
        .predict(
            &params,
            &GroundingInput {
                token_ids: &ids,
                image: &small,
                prior: PriorInput::Off
            }
        )
        .is_err());
}

#[test]
fn zero_prior_matches_baseline() {
    let (model, params) = setup(ModelConfig::small_for_tests());
    let zero = Tensor2D::zeros(1, 16);
    for seed in 0..20 {
        let (scene, sample) = base_sample(seed);
        let (off, _) = forward(&model, &sample, &scene, &params, false).unwrap();
        let img = rasterize(&scene);
        let ids = encode_tokens(&sample, model.config()).unwrap();
        let zeroed = model
            .predict(
                &params,
                &GroundingInput {
                    token_ids: &ids,
                    image: &img,
                    prior: PriorInput::Vector(&zero),
                },
            )
            .unwrap();
        for (a, b) in off.as_array().iter().zip(zeroed.as_array()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let (on, _) = forward(&model, &sample, &scene, &params, true).unwrap();
        assert_ne!(on, off);
    }
}

#[test]
fn forward_is_deterministic_and_scores_target() {
    let (model, params) = setup(ModelConfig::small_for_tests());
    let (scene, mut sample) = base_sample(9);
    let a = forward(&model, &sample, &scene, &params, true).unwrap();
    let b = forward(&model, &sample, &scene, &params, true).unwrap();
    assert_eq!(a, b);
    assert!(a.1.total > 0.0);
    sample.target_box = a.0;
    let c = forward(&model, &sample, &scene, &params, true).unwrap();
    assert_eq!(c.1.total, 0.0);
}

fn gradient_error(cfg: ModelConfig, prior: bool, samples: u64, probes: usize) -> f64 {
    let (model, params) = setup(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for s in 0..samples {
        let (scene, sample) = base_sample(100 + s);
        let img = rasterize(&scene);
        let ids = encode_tokens(&sample, model.config()).unwrap();
        let prior_img = render_prior(&sample.tokens, model.config().canvas).unwrap();
        let input = GroundingInput {
            token_ids: &ids,
            image: &img,
            prior: if prior {
                PriorInput::Image(&prior_img.image)
            } else {
                PriorInput::Off
            },
        };
        let w = LossWeights::default();
        let (_, _, grads) = model.loss_and_grad(&params, &input, &sample.target_box, w).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let point = params.flatten();
        let coords: Vec<usize> = (0..probes).map(|_| rng.gen_range(0..point.len())).collect();
        let mut scratch = params.clone();
        let err = finite_diff_check_coords(
            |x| {
                scratch.unflatten(x);
                model.loss(&scratch, &input, &sample.target_box, w).unwrap().total
            },
            &analytic,
            &point,
            // a higher-order stencil lets the step stay large enough that
            // loss roundoff does not swamp tiny gradients
            1e-3,
            &coords,
            Stencil::FivePoint,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let err = gradient_error(ModelConfig::small_for_tests(), true, 3, 40);
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn frozen_prior_encoder_only_changes_gradients() {
    let cfg = ModelConfig {
        freeze_prior_encoder: true,
        ..ModelConfig::small_for_tests()
    };
    let (model, params) = setup(cfg.clone());
    let (live_model, _) = setup(ModelConfig::small_for_tests());
    let live_params = ModelParams::init(&ModelConfig::small_for_tests(), 11).unwrap();
    let (scene, sample) = base_sample(5);
    let img = rasterize(&scene);
    let ids = encode_tokens(&sample, &cfg).unwrap();
    let pimg = render_prior(&sample.tokens, cfg.canvas).unwrap();
    let input = GroundingInput {
        token_ids: &ids,
        image: &img,
        prior: PriorInput::Image(&pimg.image),
    };
    let w = LossWeights::default();
    let (a, _, ga) = model.loss_and_grad(&params, &input, &sample.target_box, w).unwrap();
    let (b, _, gb) = live_model
        .loss_and_grad(&live_params, &input, &sample.target_box, w)
        .unwrap();
    assert_eq!(a, b);
    let i = params.index_of("vis.patch_w").unwrap();
    assert_ne!(ga[i], gb[i]);
    let j = params.index_of("head.w3").unwrap();
    assert_eq!(ga[j], gb[j]);
}
