use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck_params;

fn tiny_config(passthrough: bool) -> RendererConfig {
    RendererConfig {
        dim: 8,
        ffn_hidden: 16,
        view_blocks: 1,
        ray_blocks: 1,
        heads: 2,
        experts: 4,
        top_k: 2,
        freqs_point: 2,
        freqs_depth: 2,
        passthrough_features: passthrough,
    }
}

fn tiny_model(passthrough: bool, seed: u64) -> (MoveModel, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MoveModel::init(&mut store, &tiny_config(passthrough), &mut rng);
    (model, store)
}

fn test_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    for p in img.pixels.iter_mut() {
        *p = [rand::Rng::gen(&mut rng), rand::Rng::gen(&mut rng), rand::Rng::gen(&mut rng)];
    }
    img
}

fn ring_pair(w: usize, h: usize) -> (Camera, Camera) {
    let up = Vector3::new(0.0, -1.0, 0.0);
    let a = Camera::look_at(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), up, w as f64, w, h);
    let b = Camera::look_at(Vector3::new(1.5, 0.3, -1.5), Vector3::zeros(), up, w as f64, w, h);
    (a, b)
}

#[test]
fn passthrough_constant_image_gives_constant_features() {
    let (model, store) = tiny_model(true, 0);
    let img = Image::constant(4, 4, [0.3, 0.6, 0.9]);
    let tape = Tape::new();
    let feats = model.extractor.extract(&tape, &store, &img).value();
    let first = &feats.data[..8];
    for row in feats.data.chunks(8) {
        for (a, b) in row.iter().zip(first.iter()) {
            assert_eq!(a, b, "feature map not spatially constant");
        }
    }
}

#[test]
fn conv_extractor_gradients_match_finite_differences() {
    let (model, mut store) = tiny_model(false, 1);
    let img = test_image(4, 4, 7);
    let err = gradcheck_params(
        &mut store,
        |tape, store| model.extractor.extract(tape, store, &img).square().mean_all(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "extractor gradcheck rel err {err}");
}

#[test]
fn aggregate_is_invariant_to_view_permutation() {
    let (model, store) = tiny_model(true, 2);
    let (cam_a, cam_b) = ring_pair(6, 6);
    let img_a = test_image(6, 6, 10);
    let img_b = test_image(6, 6, 11);
    let points = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.2, -0.1, 0.3),
        Vector3::new(-0.3, 0.2, -0.1),
    ];
    let dirs = vec![Vector3::new(0.0, 0.0, 1.0); points.len()];
    let run = |sources: &[(&Camera, &Image)]| {
        let tape = Tape::new();
        let src = model.extract_source_features(&tape, &store, sources);
        let agg = model.aggregate_points(&tape, &store, &points, &dirs, &src);
        agg.tokens.value()
    };
    let fwd = run(&[(&cam_a, &img_a), (&cam_b, &img_b)]);
    let rev = run(&[(&cam_b, &img_b), (&cam_a, &img_a)]);
    for (x, y) in fwd.data.iter().zip(rev.data.iter()) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn single_view_attention_weight_is_one() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let attn = AttentionParams::init(&mut store, "a", 8, &mut rng);
    let tape = Tape::new();
    let q = tape.leaf(&Tensor::randn(vec![3, 8], 1.0, &mut rng));
    let ctx = tape.leaf(&Tensor::randn(vec![3, 8], 1.0, &mut rng));
    let (_, weights) = attn.attend(&tape, &store, q, ctx, 1, 1, 2, None);
    for w in weights.value().data {
        assert!((w - 1.0).abs() < 1e-12);
    }
}

#[test]
fn behind_camera_view_matches_reduced_source_set() {
    let (model, store) = tiny_model(true, 4);
    let (front, _) = ring_pair(6, 6);
    // looks away from the origin, so every test point is behind it
    let away = Camera::look_at(
        Vector3::new(0.0, 0.0, 2.0),
        Vector3::new(0.0, 0.0, 4.0),
        Vector3::new(0.0, -1.0, 0.0),
        6.0,
        6,
        6,
    );
    let img_f = test_image(6, 6, 20);
    let img_a = test_image(6, 6, 21);
    let points = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.1, 0.2, -0.2)];
    let dirs = vec![Vector3::new(0.0, 0.0, 1.0); 2];
    let run = |sources: &[(&Camera, &Image)]| {
        let tape = Tape::new();
        let src = model.extract_source_features(&tape, &store, sources);
        let agg = model.aggregate_points(&tape, &store, &points, &dirs, &src);
        assert!(agg.valid.iter().all(|&v| v));
        agg.tokens.value()
    };
    let masked = run(&[(&front, &img_f), (&away, &img_a)]);
    let reduced = run(&[(&front, &img_f)]);
    for (x, y) in masked.data.iter().zip(reduced.data.iter()) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn unseen_points_get_the_null_token() {
    let (model, store) = tiny_model(true, 5);
    // both cameras look away from the origin
    let up = Vector3::new(0.0, -1.0, 0.0);
    let away_a = Camera::look_at(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.0, 0.0, 4.0), up, 6.0, 6, 6);
    let away_b = Camera::look_at(Vector3::new(2.0, 0.0, 0.0), Vector3::new(4.0, 0.0, 0.0), up, 6.0, 6, 6);
    let img = test_image(6, 6, 30);
    let points = vec![Vector3::new(0.0, 0.0, 0.0)];
    let dirs = vec![Vector3::new(0.0, 0.0, 1.0)];
    let tape = Tape::new();
    let src = model.extract_source_features(&tape, &store, &[(&away_a, &img), (&away_b, &img)]);
    let agg = model.aggregate_points(&tape, &store, &points, &dirs, &src);
    assert_eq!(agg.valid, vec![false]);
    let tokens = agg.tokens.value();
    let null = store.tensor(model.null_token);
    assert_eq!(tokens.data, null.data);
}

#[test]
fn depth_is_the_attention_weighted_sample_depth() {
    let (model, store) = tiny_model(true, 6);
    let (cam_a, cam_b) = ring_pair(6, 6);
    let img_a = test_image(6, 6, 40);
    let img_b = test_image(6, 6, 41);
    let target = Camera::look_at(
        Vector3::new(-1.0, 0.5, -1.8),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        6.0,
        6,
        6,
    );
    let rays: Vec<Ray> = (0..4).map(|i| target.pixel_ray(1.5 + i as f64, 2.5, 0, 0.5, 6.0)).collect();
    let tape = Tape::new();
    let src = model.extract_source_features(&tape, &store, &[(&cam_a, &img_a), (&cam_b, &img_b)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.render_rays(&tape, &store, &rays, 4, false, &mut rng, &src);
    let attn = out.attention.value();
    let depth = out.depth.value();
    for (r, s) in out.samples.iter().enumerate() {
        let w = &attn.data[r * 4..(r + 1) * 4];
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "attention row sums to {sum}");
        assert!(w.iter().all(|&x| x >= 0.0));
        let expected: f64 = w.iter().zip(s.depths.iter()).map(|(w, t)| w * t).sum();
        assert!((depth.data[r] - expected).abs() < 1e-12);
        assert!(depth.data[r] >= 0.5 && depth.data[r] <= 6.0, "depth out of bounds");
    }
    let rgb = out.rgb.value();
    assert!(rgb.data.iter().all(|&c| (0.0..=1.0).contains(&c)));
}

#[test]
fn single_sample_ray_reads_back_its_depth() {
    let (model, store) = tiny_model(true, 7);
    let (cam_a, cam_b) = ring_pair(6, 6);
    let img = test_image(6, 6, 50);
    let ray = cam_a.pixel_ray(3.0, 3.0, 0, 1.0, 3.0);
    let (_, depth, attn) =
        model.render_ray(&store, &ray, 1, &[(&cam_a, &img), (&cam_b, &img)]);
    assert_eq!(attn, vec![1.0]);
    // single stratum midpoint
    assert!((depth - 2.0).abs() < 1e-12);
}

#[test]
fn render_image_is_deterministic_and_bounded() {
    let (model, store) = tiny_model(true, 8);
    let (cam_a, cam_b) = ring_pair(4, 4);
    let img_a = test_image(4, 4, 60);
    let img_b = test_image(4, 4, 61);
    let target = Camera::look_at(
        Vector3::new(0.5, -0.4, -2.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        2.0,
        2,
        2,
    );
    // chunk of 3 exercises an uneven final chunk over the 4 rays
    let settings = RenderSettings { samples_per_ray: 4, t_near: 0.5, t_far: 6.0, chunk: 3 };
    let sources = [(&cam_a, &img_a), (&cam_b, &img_b)];
    let first = model.render_image(&store, &target, &sources, &settings);
    let second = model.render_image(&store, &target, &sources, &settings);
    assert_eq!(first.image.pixels.len(), 4);
    assert_eq!(first.image, second.image);
    assert_eq!(first.depth, second.depth);
    assert_eq!(first.expert_maps, second.expert_maps);
    assert!(first.image.pixels.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
    let palette = combination_count(4, 2, 1) as usize;
    for map in &first.expert_maps {
        assert!(map.iter().all(|&p| p < palette));
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (model, mut store) = tiny_model(true, 9);
    let (cam_a, cam_b) = ring_pair(4, 4);
    let img_a = test_image(4, 4, 70);
    let img_b = test_image(4, 4, 71);
    let target = Camera::look_at(
        Vector3::new(0.2, 0.1, -2.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        4.0,
        4,
        4,
    );
    let ray = target.pixel_ray(2.0, 2.0, 0, 0.5, 6.0);
    let goal = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.4]);
    let err = gradcheck_params(
        &mut store,
        |tape, store| {
            let src = model.extract_source_features(tape, store, &[(&cam_a, &img_a), (&cam_b, &img_b)]);
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let out = model.render_rays(tape, store, std::slice::from_ref(&ray), 4, false, &mut rng, &src);
            out.rgb.sub(tape.constant(&goal)).square().mean_all()
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "end-to-end gradcheck rel err {err}");
}

use crate::moe::combination_count;

#[test]
fn dominant_pattern_takes_the_mode_over_valid_samples() {
    let combos = expert_combinations(4, 2);
    let selected = vec![vec![0, 1], vec![2, 3], vec![2, 3], vec![0, 1]];
    // tie between patterns 0 and 5 -> smaller index wins
    assert_eq!(dominant_pattern(&selected, &[true; 4], &combos), 0);
    // masking the [0,1] votes leaves [2,3] as the mode
    assert_eq!(dominant_pattern(&selected, &[false, true, true, false], &combos), 5);
    // fully invalid ray falls back to 0
    assert_eq!(dominant_pattern(&selected, &[false; 4], &combos), 0);
}
