use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use groundlab_bench::fixture;
use groundlab_core::evaluator::evaluate;
use groundlab_core::geometry::{giou, grounding_loss_grad, iou, BBox, LossWeights};
use groundlab_core::model::{encode_tokens, GroundingInput, PriorInput};
use groundlab_core::pseudo_query::{generate_pseudo_pairs, Margins};
use groundlab_core::scene::{detect, rasterize, sample_multi_instance_scene, NoiseParams};
use groundlab_core::semantic_prior::render_prior;
use groundlab_core::trainer::train;
use groundlab_core::vocab::Shape;

fn geometry(c: &mut Criterion) {
    let a = BBox::new(0.4, 0.5, 0.3, 0.2).unwrap();
    let b = BBox::new(0.55, 0.45, 0.25, 0.3).unwrap();
    c.bench_function("iou", |bn| bn.iter(|| iou(black_box(&a), black_box(&b))));
    c.bench_function("giou", |bn| bn.iter(|| giou(black_box(&a), black_box(&b))));
    c.bench_function("grounding_loss_grad", |bn| {
        bn.iter(|| grounding_loss_grad(black_box(&a), black_box(&b), LossWeights::default()))
    });
}

fn scenes(c: &mut Criterion) {
    let scene = sample_multi_instance_scene(Shape::Circle, 8, 3).unwrap();
    c.bench_function("rasterize_8_objects", |bn| bn.iter(|| rasterize(black_box(&scene))));
    c.bench_function("detect_and_pseudo_query", |bn| {
        bn.iter(|| {
            let d = detect(&scene, NoiseParams::default(), 3).unwrap();
            generate_pseudo_pairs(&d, Shape::Circle, Margins::default(), 4)
        })
    });
}

fn model(c: &mut Criterion) {
    let f = fixture(8);
    let store = f.data.real.store();
    let sample = &f.data.real.samples[0];
    let img = rasterize(store.get(&sample.scene_id).unwrap());
    let ids = encode_tokens(sample, &f.config.model).unwrap();
    let prior = render_prior(&sample.tokens, f.config.model.canvas).unwrap().image;
    let w = LossWeights::default();
    for (name, p) in [("off", PriorInput::Off), ("prior", PriorInput::Image(&prior))] {
        let input = GroundingInput { token_ids: &ids, image: &img, prior: p };
        c.bench_function(&format!("predict_{name}"), |bn| {
            bn.iter(|| f.model.predict(&f.params, black_box(&input)).unwrap())
        });
        c.bench_function(&format!("loss_and_grad_{name}"), |bn| {
            bn.iter(|| {
                f.model
                    .loss_and_grad(&f.params, black_box(&input), &sample.target_box, w)
                    .unwrap()
            })
        });
    }
}

fn training(c: &mut Criterion) {
    let f = fixture(64);
    let mut cfg = f.config.train.clone();
    cfg.epochs = 1;
    cfg.lr_drop_epoch = 0;
    cfg.use_aug = true;
    cfg.use_prior = true;
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("epoch_64_samples", |bn| {
        bn.iter_batched(
            || cfg.clone(),
            |cfg| train(&cfg, &f.config.model, &f.data, None, 0, 1).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.bench_function("evaluate_64_samples", |bn| {
        bn.iter(|| evaluate(&f.model, &f.params, &f.test, true, "", 1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, geometry, scenes, model, training);
criterion_main!(benches);
