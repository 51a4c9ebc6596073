use mofo_core::boxdetect::MotionBox;
use mofo_core::clip::{ClipDims, ClipTensor, TubeDims};
use mofo_core::error::Error;
use mofo_core::evalsynth::{pretrain_suite, render_suite};
use mofo_core::masker::{sample_mask, tube_grid, MaskPlan, TubeGrid};
use mofo_core::tinynet::tape::Tape;
use mofo_core::tinynet::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> NetConfig {
    NetConfig::micro(2)
}

fn params64(seed: u64) -> TinyNetParams<f64> {
    init_params(&micro(), seed).unwrap().cast()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn scene(seed: u64) -> (ClipTensor, MotionBox) {
    let specs = pretrain_suite(1, seed).unwrap();
    let clip = &render_suite(&specs, seed).unwrap()[0];
    (ClipTensor::from_frames(&clip.frames).unwrap(), clip.union)
}

fn grid_for(b: &MotionBox) -> TubeGrid {
    let cfg = micro();
    tube_grid(cfg.clip_dims, cfg.tube_dims, b).unwrap()
}

#[test]
fn zero_clip_embeds_to_positions() {
    let cfg = micro();
    let p = params64(1);
    let clip = ClipTensor::zeros(cfg.clip_dims, 1);
    let e = patch_embed(&clip, &cfg, &p).unwrap();
    assert_eq!(e, *p.get("pos").unwrap());
}

#[test]
fn full_size_clip_has_392_tokens() {
    let cfg = NetConfig {
        clip_dims: ClipDims::new(16, 224, 224),
        channels: 3,
        tube_dims: TubeDims::new(8, 16, 16),
        ..NetConfig::micro(2)
    };
    let p = init_params(&cfg, 0).unwrap();
    let e = patch_embed(&ClipTensor::zeros(cfg.clip_dims, 3), &cfg, &p).unwrap();
    assert_eq!(e.shape(), (392, 32));
}

#[test]
fn identity_projection_reproduces_tube() {
    let cfg = NetConfig { clip_dims: ClipDims::new(1, 4, 8), tube_dims: TubeDims::new(1, 4, 8), ..micro() };
    let mut p: TinyNetParams<f64> = init_params(&cfg, 0).unwrap().cast();
    *p.get_mut("patch.w").unwrap() = Matrix::identity(32);
    *p.get_mut("pos").unwrap() = Matrix::zeros(1, 32);
    let values: Vec<f32> = (0..32).map(|i| i as f32 / 31.0).collect();
    let clip = ClipTensor::new(cfg.clip_dims, 1, values.clone()).unwrap();
    let e = patch_embed(&clip, &cfg, &p).unwrap();
    let expect: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    assert_eq!(e.data(), &expect[..]);
}

#[test]
fn patch_embed_rejects_wrong_shape() {
    let p = params64(0);
    let clip = ClipTensor::zeros(ClipDims::new(8, 32, 16), 1);
    assert!(matches!(patch_embed(&clip, &micro(), &p), Err(Error::InvalidInput(_))));
}

#[test]
fn single_token_attention_ignores_queries_and_keys() {
    let cfg = micro();
    let mut p = params64(2);
    let x = random_matrix(1, 32, 3);
    let before = encoder_forward(&x, &cfg, &p).unwrap();
    for name in ["enc.0.attn.q.w", "enc.0.attn.k.w", "enc.1.attn.q.w", "enc.1.attn.k.b"] {
        *p.get_mut(name).unwrap() = random_matrix(if name.ends_with(".b") { 1 } else { 32 }, 32, 9);
    }
    assert_eq!(encoder_forward(&x, &cfg, &p).unwrap(), before);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = micro();
    let p = params64(4);
    let x = random_matrix(7, 32, 5);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permuted = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
    let a = encoder_forward(&x, &cfg, &p).unwrap();
    let b = encoder_forward(&permuted, &cfg, &p).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..32 {
            assert!((b.get(r, c) - a.get(i, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_output_is_finite_across_seeds() {
    let cfg = micro();
    for seed in 0..100 {
        let p = init_params(&cfg, seed).unwrap();
        let x: Matrix<f32> = random_matrix(1 + (seed as usize % 12), 32, seed + 1000).map(|v| v * 3.0).cast();
        let z = encoder_forward(&x, &cfg, &p).unwrap();
        assert_eq!(z.rows(), x.rows());
        assert!(z.all_finite(), "seed {seed}");
    }
}

#[test]
fn encoder_rejects_empty_input() {
    let p = params64(0);
    assert!(encoder_forward(&Matrix::<f64>::zeros(0, 32), &micro(), &p).is_err());
}

#[test]
fn reconstruction_loss_hand_values() {
    let target = random_matrix(1, 256, 6);
    assert_eq!(reconstruction_loss(&target, &target).unwrap(), 0.0);
    let off = target.map(|v| v + 2.0);
    assert!((reconstruction_loss(&off, &target).unwrap() - 4.0).abs() < 1e-12);

    let r = random_matrix(5, 16, 7);
    let t = random_matrix(5, 16, 8);
    let order = [4usize, 2, 0, 1, 3];
    let pick = |m: &Matrix<f64>| Matrix::from_rows(&order.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>());
    let a = reconstruction_loss(&r, &t).unwrap();
    let b = reconstruction_loss(&pick(&r), &pick(&t)).unwrap();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn mae_loss_matches_its_outputs() {
    let cfg = micro();
    let (clip, b) = scene(1);
    let plan = sample_mask(&grid_for(&b), 0.9, 0.75, 3).unwrap();
    let out = mae_forward(&clip, &plan, &cfg, &params64(1)).unwrap();
    assert_eq!(out.masked.len(), plan.masked_tokens());
    assert_eq!(out.reconstruction.shape(), (plan.masked_tokens(), 64 * 4));
    let direct = reconstruction_loss(&out.reconstruction, &out.target).unwrap();
    assert!((out.loss - direct).abs() < 1e-12);
}

#[test]
fn targets_are_standardized_per_tube() {
    let (clip, _) = scene(2);
    for tube in clip.tubes(micro().tube_dims).unwrap() {
        let z = normalize_tube(&tube);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let raw_mean = tube.iter().map(|&v| v as f64).sum::<f64>() / n;
        let raw_var = tube.iter().map(|&v| (v as f64 - raw_mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        if raw_var > 1e-6 {
            assert!((var - 1.0).abs() < 1e-4 + 1e-6 / raw_var, "var {var} raw {raw_var}");
        }
    }
}

#[test]
fn degenerate_plans_are_rejected() {
    let cfg = micro();
    let (clip, b) = scene(3);
    let grid = grid_for(&b);
    let all = sample_mask(&grid, 1.0, 0.75, 0).unwrap();
    assert!(mae_forward(&clip, &all, &cfg, &params64(0)).is_err());
    let none = MaskPlan { spatial: vec![false; grid.spatial_cells()], ..all };
    assert!(mae_forward(&clip, &none, &cfg, &params64(0)).is_err());
}

#[test]
fn encoder_never_sees_masked_content() {
    let cfg = micro();
    let (clip, b) = scene(4);
    let plan = sample_mask(&grid_for(&b), 0.9, 0.75, 8).unwrap();
    let p = params64(5);
    let mut tampered = clip.clone();
    let mask = plan.token_mask();
    let (nt, nh, nw) = cfg.tube_dims.cells(cfg.clip_dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 0..nt {
        for h in 0..nh {
            for w in 0..nw {
                if mask[(t * nh + h) * nw + w] {
                    for o in clip.tube_offsets(cfg.tube_dims, (t, h, w)) {
                        tampered.values_mut()[o] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
    }
    assert_ne!(tampered, clip);
    assert_eq!(encode_visible(&clip, &plan, &cfg, &p).unwrap(), encode_visible(&tampered, &plan, &cfg, &p).unwrap());
    let a = mae_forward(&clip, &plan, &cfg, &p).unwrap();
    let b = mae_forward(&tampered, &plan, &cfg, &p).unwrap();
    assert_eq!(a.reconstruction, b.reconstruction);
    assert_ne!(a.target, b.target);
}

#[test]
fn cross_attention_hand_cases() {
    let q = random_matrix(1, 4, 1);
    let k = random_matrix(1, 4, 2);
    let v = random_matrix(1, 4, 3);
    assert_eq!(cross_attention(&q, &k, &v).unwrap(), v);

    let k2 = Matrix::from_rows(&[k.row(0).to_vec(), k.row(0).to_vec()]);
    let v2 = random_matrix(2, 4, 4);
    let out = cross_attention(&q, &k2, &v2).unwrap();
    for c in 0..4 {
        assert!((out.get(0, c) - 0.5 * (v2.get(0, c) + v2.get(1, c))).abs() < 1e-15);
    }

    let q = Matrix::from_vec(1, 1, vec![1.0f64]);
    let k = Matrix::from_vec(2, 1, vec![1.0, 0.0]);
    let v = Matrix::from_vec(2, 1, vec![2.0, 0.0]);
    let e = std::f64::consts::E;
    let expect = 2.0 * e / (e + 1.0);
    let got = cross_attention(&q, &k, &v).unwrap().get(0, 0);
    assert!((got - expect).abs() < 1e-12);
    assert!((got - 1.46212).abs() < 1e-4);

    assert!(cross_attention(&q, &Matrix::zeros(0, 1), &Matrix::zeros(0, 1)).is_err());
    assert!(cross_attention(&q, &k, &Matrix::zeros(3, 1)).is_err());
}

#[test]
fn single_identity_head_is_plain_cross_attention() {
    let cfg = NetConfig { mca_heads: 1, ..micro() };
    let mut p: TinyNetParams<f64> = init_params(&cfg, 0).unwrap().cast();
    for name in ["mca.0.wq.0", "mca.0.wk.0", "mca.0.wv.0", "mca.0.wo"] {
        *p.get_mut(name).unwrap() = Matrix::identity(32);
    }
    let inner = EmbeddingSet::new(random_matrix(3, 32, 1), Partition::Inner);
    let outer = EmbeddingSet::new(random_matrix(5, 32, 2), Partition::Outer);
    let fused = mca_forward(&inner, &outer, &cfg, &p).unwrap();
    let direct = cross_attention(&inner.tokens, &outer.tokens, &outer.tokens).unwrap();
    assert_eq!(fused.partition, Partition::Fused);
    assert!(fused.tokens.max_abs_diff(&direct) < 1e-14);
}

#[test]
fn mca_shape_and_outer_permutation() {
    let cfg = micro();
    let p = params64(3);
    for (seed, (ni, no)) in [(1, 4), (6, 2), (3, 9)].into_iter().enumerate() {
        let inner = EmbeddingSet::new(random_matrix(ni, 32, seed as u64), Partition::Inner);
        let outer = random_matrix(no, 32, 100 + seed as u64);
        let fused = mca_forward(&inner, &EmbeddingSet::new(outer.clone(), Partition::Outer), &cfg, &p).unwrap();
        assert_eq!(fused.tokens.shape(), (ni, 32));
        let rev: Vec<Vec<f64>> = (0..no).rev().map(|i| outer.row(i).to_vec()).collect();
        let swapped =
            mca_forward(&inner, &EmbeddingSet::new(Matrix::from_rows(&rev), Partition::Outer), &cfg, &p).unwrap();
        assert!(fused.tokens.max_abs_diff(&swapped.tokens) < 1e-12);
    }
}

#[test]
fn mca_falls_back_on_empty_partitions() {
    let cfg = micro();
    let p = params64(3);
    let some = random_matrix(4, 32, 1);
    let empty = Matrix::zeros(0, 32);
    let f = mca_forward(
        &EmbeddingSet::new(some.clone(), Partition::Inner),
        &EmbeddingSet::new(empty.clone(), Partition::Outer),
        &cfg,
        &p,
    )
    .unwrap();
    assert_eq!(f.tokens, some);
    let f = mca_forward(
        &EmbeddingSet::new(empty.clone(), Partition::Inner),
        &EmbeddingSet::new(some.clone(), Partition::Outer),
        &cfg,
        &p,
    )
    .unwrap();
    assert_eq!(f.tokens, some);
    assert!(mca_forward(
        &EmbeddingSet::new(empty.clone(), Partition::Inner),
        &EmbeddingSet::new(empty, Partition::Outer),
        &cfg,
        &p
    )
    .is_err());
}

#[test]
fn full_frame_box_trains_without_cross_attention() {
    let cfg = micro();
    let (clip, _) = scene(5);
    let grid = grid_for(&MotionBox::full_frame(32, 32));
    assert_eq!(grid.n_outer, 0);
    let (loss, probs, grads) = finetune_gradients(&clip, &grid, 1, &cfg, &params64(2)).unwrap();
    assert!(loss.is_finite());
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let p = params64(2);
    let mca = p.position("mca.0.wo").unwrap();
    assert!(grads[mca].data().iter().all(|&g| g == 0.0));
}

#[test]
fn split_matches_grid_counts() {
    let cfg = micro();
    let (clip, b) = scene(6);
    let grid = grid_for(&b);
    let p = params64(1);
    let z = encoder_forward(&patch_embed(&clip, &cfg, &p).unwrap(), &cfg, &p).unwrap();
    let (inner, outer) = split_embeddings(&z, &grid).unwrap();
    assert_eq!((inner.len(), outer.len()), (grid.n_inner, grid.n_outer));
    assert_eq!((inner.partition, outer.partition), (Partition::Inner, Partition::Outer));
}

#[test]
fn classifier_hand_cases() {
    let mut p = params64(0);
    *p.get_mut("fc.w").unwrap() = Matrix::zeros(32, 2);
    let fused = EmbeddingSet::new(random_matrix(3, 32, 1), Partition::Fused);
    let pred = classify(&fused, &p).unwrap();
    assert_eq!(pred.probs, vec![0.5, 0.5]);

    let cfg10 = NetConfig::micro(10);
    let p10: TinyNetParams<f64> = init_params(&cfg10, 1).unwrap().cast();
    for seed in 0..20 {
        let f = EmbeddingSet::new(random_matrix(1 + seed % 5, 32, seed as u64).map(|v| v * 5.0), Partition::Fused);
        let pred = classify(&f, &p10).unwrap();
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mut shifted = p10.clone();
        *shifted.get_mut("fc.b").unwrap() = p10.get("fc.b").unwrap().map(|b| b + 7.5);
        let moved = classify(&f, &shifted).unwrap();
        assert_eq!(moved.argmax(), pred.argmax());
        for (a, b) in moved.logits.iter().zip(&pred.logits) {
            assert!((a - b - 7.5).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_hand_cases() {
    let sure = Prediction { logits: vec![0.0; 3], probs: vec![0.0, 1.0, 0.0] };
    assert_eq!(cross_entropy(&sure, 1).unwrap(), 0.0);
    assert!((cross_entropy(&sure, 0).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
    let uniform = Prediction { logits: vec![0.0; 10], probs: vec![0.1; 10] };
    assert!((cross_entropy(&uniform, 4).unwrap() - 10f64.ln()).abs() < 1e-9);
    assert!(matches!(cross_entropy(&uniform, 10), Err(Error::InvalidInput(_))));
}

#[test]
fn cross_entropy_gradient_is_probs_minus_one_hot() {
    let logits = Matrix::from_vec(1, 5, vec![0.3, -1.2, 2.0, 0.7, -0.1]);
    let label = 3;
    let loss_of = |l: &Matrix<f64>| {
        let t: Tape<f64> = Tape::new();
        let p = t.softmax_rows(t.leaf(l.clone()));
        let out = t.neg_log_at(p, label, 1e-12);
        t.scalar(out)
    };
    let t: Tape<f64> = Tape::new();
    let x = t.leaf(logits.clone());
    let p = t.softmax_rows(x);
    let out = t.neg_log_at(p, label, 1e-12);
    let g = t.backward(out).get(x).cloned().unwrap();
    let probs = t.value(p).clone();
    let h = 1e-5;
    for c in 0..5 {
        let expect: f64 = probs.get(0, c) - if c == label { 1.0 } else { 0.0 };
        assert!((g.get(0, c) - expect).abs() <= 1e-12);
        let mut up = logits.clone();
        up.set(0, c, logits.get(0, c) + h);
        let mut down = logits.clone();
        down.set(0, c, logits.get(0, c) - h);
        let numeric = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
        assert!((numeric - expect).abs() / expect.abs().max(1e-6) < 1e-6, "class {c}");
    }
}

/// Every tube of the clip is the same non-constant pattern, so all masked
/// targets coincide and a bias-only head can reproduce them exactly.
fn periodic_clip() -> ClipTensor {
    let cfg = micro();
    let d = cfg.clip_dims;
    let mut v = Vec::new();
    for t in 0..d.t {
        for y in 0..d.h {
            for x in 0..d.w {
                v.push(((t % 4) * 64 + (y % 8) * 8 + x % 8) as f32 / 255.0);
            }
        }
    }
    ClipTensor::new(d, 1, v).unwrap()
}

#[test]
fn zero_loss_gives_zero_head_gradients() {
    let cfg = micro();
    let clip = periodic_clip();
    let plan = sample_mask(&grid_for(&MotionBox::new(0, 0, 16, 16).unwrap()), 0.5, 0.75, 2).unwrap();
    let mut p = params64(1);
    let target: Vec<f64> = normalize_tube(&clip.tubes(cfg.tube_dims).unwrap()[0]);
    *p.get_mut("head.w").unwrap() = Matrix::zeros(32, 256);
    *p.get_mut("head.b").unwrap() = Matrix::from_vec(1, 256, target);
    let (loss, grads) = pretrain_gradients(&clip, &plan, &cfg, &p).unwrap();
    assert!(loss < 1e-24, "loss {loss}");
    for name in ["head.w", "head.b"] {
        let g = &grads[p.position(name).unwrap()];
        assert!(g.data().iter().all(|v| v.abs() < 1e-12), "{name}");
    }
}

#[test]
fn gradients_are_deterministic() {
    let cfg = micro();
    let (clip, b) = scene(7);
    let grid = grid_for(&b);
    let plan = sample_mask(&grid, 0.9, 0.75, 1).unwrap();
    let p = params64(9);
    assert_eq!(
        pretrain_gradients(&clip, &plan, &cfg, &p).unwrap(),
        pretrain_gradients(&clip, &plan, &cfg, &p).unwrap()
    );
    assert_eq!(
        finetune_gradients(&clip, &grid, 0, &cfg, &p).unwrap(),
        finetune_gradients(&clip, &grid, 0, &cfg, &p).unwrap()
    );
}

#[test]
fn finite_difference_check_on_both_objectives() {
    let cfg = micro();
    let (clip, b) = scene(8);
    let grid = grid_for(&b);
    assert!(grid.n_inner > 0 && grid.n_outer > 0);
    let plan = sample_mask(&grid, 0.9, 0.75, 4).unwrap();
    let p = params64(10);
    let opts = GradcheckOptions { max_entries: 4, ..Default::default() };
    let mae = check_gradients(&p, &opts, |q| pretrain_gradients(&clip, &plan, &cfg, q)).unwrap();
    let ft =
        check_gradients(&p, &opts, |q| finetune_gradients(&clip, &grid, 1, &cfg, q).map(|(l, _, g)| (l, g))).unwrap();
    for c in mae.iter().chain(&ft) {
        assert!(c.worst() < 1e-4, "{} {:e} {:e}", c.name, c.max_rel_error, c.directional_rel_error);
    }
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let cfg = micro();
    let (clip, b) = scene(9);
    let plan = sample_mask(&grid_for(&b), 0.9, 0.75, 0).unwrap();
    let p = init_params(&cfg, 3).unwrap();
    let r = train_pretrain(&[clip], &[plan], &cfg, p.clone(), &TrainConfig::with_steps(0)).unwrap();
    assert_eq!(r.params, p);
    assert!(r.loss.is_empty());
}

#[test]
fn short_runs_reproduce_and_descend() {
    let cfg = micro();
    let (clip, b) = scene(10);
    let plan = sample_mask(&grid_for(&b), 0.9, 0.75, 0).unwrap();
    let p = init_params(&cfg, 3).unwrap();
    let run =
        || train_pretrain(&[clip.clone()], &[plan.clone()], &cfg, p.clone(), &TrainConfig::with_steps(30)).unwrap();
    let a = run();
    assert_eq!(a, run());
    assert!(a.loss[29] < a.loss[0]);
    let samples = vec![FinetuneSample { clip: clip.clone(), grid: grid_for(&b), label: 1 }];
    let f = train_finetune(&samples, &cfg, p, &TrainConfig::with_steps(5)).unwrap();
    assert_eq!((f.loss.len(), f.accuracy.len()), (5, 5));
}

#[test]
fn non_finite_loss_reports_the_step() {
    let cfg = micro();
    let (clip, b) = scene(11);
    let plan = sample_mask(&grid_for(&b), 0.9, 0.75, 0).unwrap();
    let mut p = init_params(&cfg, 3).unwrap();
    p.get_mut("head.b").unwrap().data_mut()[0] = f32::NAN;
    match train_pretrain(&[clip], &[plan], &cfg, p, &TrainConfig::with_steps(3)) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.mofo");
    let p = init_params(&micro(), 5).unwrap();
    write_checkpoint(&p, std::fs::File::create(&path).unwrap()).unwrap();
    let back = read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, p);
}
