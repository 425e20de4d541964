use super::*;
use crate::interlevel::tests::{randn, randomize};
use crate::tensor::{bilinear_resize, Tensor};
use proptest::prelude::*;

fn small_store<T: Scalar>(seed: u64) -> ParamStore<T> {
    ParamStore::new(seed)
}

#[test]
fn patch_merge_shapes() {
    let mut s = small_store::<f64>(1);
    let p7 = PatchMergeParams::new(&mut s, "m7", 3, 8, 7, 4).unwrap();
    let p3 = PatchMergeParams::new(&mut s, "m3", 8, 8, 3, 2).unwrap();
    let g = Graph::new(&s);
    let x = g.constant(randn(&[1, 32, 32, 3], 2));
    let y = patch_merge(&g, x, &p7).unwrap();
    assert_eq!(g.shape(y), vec![1, 8, 8, 8]);
    let z = patch_merge(&g, y, &p3).unwrap();
    assert_eq!(g.shape(z), vec![1, 4, 4, 8]);
    let small = g.constant(randn(&[1, 2, 2, 8], 3));
    assert_eq!(g.shape(patch_merge(&g, small, &p3).unwrap()), vec![1, 1, 1, 8]);
    // Even with padding a 0-row map cannot cover a 9×9 kernel.
    let mut s9 = small_store::<f64>(1);
    let p9 = PatchMergeParams::new(&mut s9, "m9", 8, 8, 9, 2).unwrap();
    let g9 = Graph::new(&s9);
    let x9 = g9.constant(Tensor::zeros(&[1, 0, 3, 8]));
    assert!(patch_merge(&g9, x9, &p9).is_err());
}

#[test]
fn patch_merge_one_by_one_constant_normalises_to_zero() {
    let mut s = small_store::<f64>(4);
    let p = PatchMergeParams::new(&mut s, "m", 2, 5, 1, 1).unwrap();
    // Constant channel vector in, constant per-pixel vector out of the conv.
    let w = Tensor::from_fn(&[1, 1, 2, 5], |_| 0.7);
    s.set(p.conv.w, w).unwrap();
    let g = Graph::new(&s);
    let x = g.constant(Tensor::full(&[1, 3, 3, 2], 1.5));
    let pre = p.conv.apply(&g, x).unwrap();
    assert!(g.value(pre).data().iter().all(|&v| (v - 2.1).abs() < 1e-12));
    let y = patch_merge(&g, x, &p).unwrap();
    assert!(g.value(y).max_abs() < 1e-12);
}

#[test]
fn sra_block_with_zeroed_outputs_is_identity() {
    let mut s = small_store::<f64>(5);
    let p = SraBlockParams::new(&mut s, "b", 8, 1, 1, 2).unwrap();
    randomize(&mut s, 5, 0.3);
    for id in [p.v.w, p.v.b, p.proj.w, p.proj.b, p.ffn.fc2.w, p.ffn.fc2.b] {
        let shape = s.get(id).shape().to_vec();
        s.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let g = Graph::new(&s);
    let xt = randn::<f64>(&[1, 4, 4, 8], 6);
    let x = g.constant(xt.clone());
    let y = sra_block(&g, x, &p).unwrap();
    assert_eq!(*g.value(y), xt);
}

#[test]
fn sra_block_shapes_and_reduced_attention() {
    for (r, hw, m) in [(1, 4, 16), (2, 4, 4), (4, 8, 4), (3, 4, 4), (2, 5, 9)] {
        let mut s = small_store::<f64>(7);
        let p = SraBlockParams::new(&mut s, "b", 8, 2, r, 2).unwrap();
        randomize(&mut s, 7, 0.3);
        let g = Graph::new(&s);
        let x = g.constant(randn(&[2, hw, hw, 8], 8));
        let (_, attn) = sra_attention(&g, x, &p).unwrap();
        assert_eq!(g.shape(attn), vec![2, 2, hw * hw, m], "R={r} on {hw}×{hw}");
        for row in g.value(attn).data().chunks(m) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let y = sra_block(&g, x, &p).unwrap();
        assert_eq!(g.shape(y), vec![2, hw, hw, 8]);
    }
}

#[test]
fn sra_block_rejects_bad_heads() {
    let mut s = small_store::<f64>(0);
    assert!(SraBlockParams::new(&mut s, "b", 10, 3, 1, 2).is_err());
}

#[test]
fn schedule_examples() {
    use BlockRole::*;
    assert_eq!(block_schedule(2, 1, true), vec![BottomUp, TopDownBottomUp]);
    assert_eq!(block_schedule(2, 1, false), vec![Plain, Plain]);
    let r = block_schedule(6, 3, true);
    let wrapped: Vec<usize> = (1..=6).filter(|&i| r[i - 1] != Plain).collect();
    assert_eq!(wrapped, vec![3, 6]);
    assert_eq!(r[2], BottomUp);
}

proptest! {
    #[test]
    fn schedule_wraps_multiples_of_stride(n in 1usize..20, s in 1usize..8) {
        let roles = block_schedule(n, s, true);
        let wrapped: Vec<usize> = (1..=n).filter(|&i| roles[i - 1] != BlockRole::Plain).collect();
        let expect: Vec<usize> = (1..=n).filter(|i| i % s == 0).collect();
        prop_assert_eq!(&wrapped, &expect);
        if let Some(&first) = wrapped.first() {
            prop_assert_eq!(roles[first - 1], BlockRole::BottomUp);
        }
        let td = roles.iter().filter(|&&r| r == BlockRole::TopDownBottomUp).count();
        prop_assert_eq!(td, wrapped.len().saturating_sub(1));
    }
}

#[test]
fn encoder_shapes_and_iterations() {
    let cfg = ModelConfig::tiny(3);
    let (model, store) = Model::init::<f32>(&cfg, 11).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(randn(&[1, 32, 32, 3], 12));
    let out = model.forward_encoder(&g, x).unwrap();
    let dims = [16, 32, 64, 128];
    let sides = [8, 4, 2, 1];
    for (k, f) in out.features.iter().enumerate() {
        assert_eq!(g.shape(f.var), vec![1, sides[k], sides[k], dims[k]]);
        assert_eq!(f.stage, k + 1);
    }
    // Stages 1-3 each get one top-down update from the stage above.
    let iters: Vec<usize> = out.features.iter().map(|f| f.iteration).collect();
    assert_eq!(iters, vec![3, 3, 3, 2]);
    for t in &out.trace[1..] {
        assert_eq!(t.wrapped_blocks, vec![1, 2]);
        assert_eq!(t.top_down_blocks, vec![2]);
        assert!(t.last_top_down.is_some() && t.interlevel_macs() > 0);
    }
    assert!(out.trace[0].wrapped_blocks.is_empty());

    let plain = ModelConfig::tiny(3).with_hila(false);
    let (model, store) = Model::init::<f32>(&plain, 11).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(randn(&[1, 32, 32, 3], 12));
    let out = model.forward_encoder(&g, x).unwrap();
    assert!(out.features.iter().all(|f| f.iteration == 2));
    assert!(out.trace.iter().all(|t| t.interlevel_macs() == 0));
}

#[test]
fn stride_two_wraps_fewer_blocks() {
    let mut cfg = ModelConfig::tiny(2);
    cfg.stages[1].blocks = 6;
    cfg.stages[1].s_stride = 3;
    let (model, store) = Model::init::<f32>(&cfg, 1).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(randn(&[1, 32, 32, 3], 2));
    let out = model.forward_encoder(&g, x).unwrap();
    assert_eq!(out.trace[1].wrapped_blocks, vec![3, 6]);
    assert_eq!(out.trace[1].top_down_blocks, vec![6]);
    // Stage 1: two own blocks, one top-down from stage 2, one from stage 3.
    assert_eq!(out.features[0].iteration, (2 + 1));
    assert_eq!(out.features[1].iteration, 6 + 1);
}

#[test]
fn encoder_rejects_bad_inputs() {
    let cfg = ModelConfig::tiny(2);
    let (model, store) = Model::init::<f32>(&cfg, 1).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(&[1, 48, 32, 3]));
    assert!(matches!(model.forward_encoder(&g, x), Err(crate::Error::Config(_))));
    let x = g.constant(Tensor::zeros(&[1, 32, 32, 4]));
    assert!(model.forward_encoder(&g, x).is_err());
}

#[test]
fn head_with_zero_classifier_gives_bias() {
    let cfg = ModelConfig::tiny(3);
    let (model, mut store) = Model::init::<f64>(&cfg, 3).unwrap();
    store.set(model.head.classifier.w, Tensor::zeros(&[64, 3])).unwrap();
    store.set(model.head.classifier.b, Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
    let g = Graph::inference(&store);
    let x = g.constant(randn(&[1, 32, 32, 3], 4));
    let (logits, _) = model.forward(&g, x).unwrap();
    let v = g.value(logits);
    assert_eq!(v.shape(), &[1, 8, 8, 3]);
    for row in v.data().chunks(3) {
        assert_eq!(row, &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn head_gradient_reaches_every_stage() {
    let cfg = ModelConfig::tiny(3);
    let (model, store) = Model::init::<f64>(&cfg, 9).unwrap();
    let g = Graph::new(&store);
    let x = g.constant(randn(&[1, 32, 32, 3], 10));
    let (logits, enc) = model.forward(&g, x).unwrap();
    let probe = g.constant(randn(&g.shape(logits), 11));
    let l = g.mul(logits, probe).unwrap();
    let l = g.sum(l);
    let keep: Vec<Var> = enc.features.iter().map(|f| f.var).collect();
    let grads = g.backward_keeping(l, &keep).unwrap();
    for f in &enc.features {
        let gr = grads.wrt(f.var).expect("stage feature gets a gradient");
        assert!(gr.max_abs() > 0.0, "stage {}", f.stage);
    }
}

fn direct_ce(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let c = logits.last_dim();
    let mut total = 0.0;
    let mut n = 0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y == IGNORE_INDEX {
            continue;
        }
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
        n += 1;
    }
    total / n as f64
}

#[test]
fn loss_cases() {
    let g = Graph::<f64>::detached();
    let uniform = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
    let l = segmentation_loss(&g, uniform, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 255], 4, 4).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);

    let sharp = Tensor::from_fn(&[1, 1, 2, 2], |i| if i % 3 == 0 { 40.0 } else { -40.0 });
    let l = segmentation_loss(&g, g.constant(sharp), &[0, 1], 1, 2).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let raw = randn::<f64>(&[2, 3, 3, 4], 5);
    let labels: Vec<u8> = (0..2 * 6 * 6).map(|i| if i % 7 == 0 { 255 } else { (i * 5 % 4) as u8 }).collect();
    let l = segmentation_loss(&g, g.constant(raw.clone()), &labels, 6, 6).unwrap();
    let up = bilinear_resize(&raw, 6, 6).unwrap();
    assert!((g.value(l).item() - direct_ce(&up, &labels)).abs() < 1e-12);
}

fn lin(i: usize, o: usize) -> usize {
    i * o + o
}

fn ffn(c: usize, e: usize) -> usize {
    2 * c + lin(c, e * c) + 9 * e * c + e * c + lin(e * c, c)
}

fn sra(c: usize, r: usize, e: usize) -> usize {
    let reduce = if r > 1 { r * r * c * c + c + 2 * c } else { 0 };
    2 * c + 4 * lin(c, c) + reduce + ffn(c, e)
}

fn attn(dq: usize, dkv: usize, dh: usize, dl: usize, slots: usize) -> usize {
    let d = dh.min(dl);
    lin(dq, d) + 2 * lin(dkv, d) + lin(d, dq) + slots + 2 * dh + 2 * dl
}

#[test]
fn hila_parameter_audit() {
    for blocks in [2, 4] {
        let mut cfg = ModelConfig::tiny(4);
        for s in &mut cfg.stages {
            s.blocks = blocks;
        }
        let (m_on, s_on) = Model::init::<f32>(&cfg, 0).unwrap();
        let (m_off, s_off) = Model::init::<f32>(&cfg.clone().with_hila(false), 0).unwrap();
        let mut expect = 0;
        for l in 1..4 {
            let (hi, lo) = (&cfg.stages[l], &cfg.stages[l - 1]);
            let slots = hi.p_patch * hi.p_patch;
            let own = attn(hi.d, lo.d, hi.d, lo.d, slots)
                + attn(lo.d, hi.d, hi.d, lo.d, slots)
                + ffn(hi.d, hi.expansion)
                + ffn(lo.d, lo.expansion)
                + sra(lo.d, lo.reduction, lo.expansion);
            assert_eq!(s_on.num_scalars_with_prefix(&format!("stage{}.hila.", l + 1)), own);
            expect += own;
        }
        assert_eq!(s_on.num_scalars() - s_off.num_scalars(), expect, "N={blocks}");
        assert_eq!(m_on.num_params(), s_on.num_scalars());
        assert_eq!(m_off.num_params(), s_off.num_scalars());
    }
}

#[test]
fn shared_names_share_initial_values() {
    let cfg = ModelConfig::tiny(4);
    let (_, on) = Model::init::<f32>(&cfg, 21).unwrap();
    let (_, off) = Model::init::<f32>(&cfg.clone().with_hila(false), 21).unwrap();
    for (_, name, t) in off.iter() {
        assert_eq!(on.get(on.id(name).unwrap()), t, "{name}");
    }
}

#[test]
fn bind_checks_layout() {
    let cfg = ModelConfig::tiny(4);
    let (model, store) = Model::init::<f32>(&cfg, 2).unwrap();
    let bound = Model::bind(&cfg, &store).unwrap();
    assert_eq!(bound.head.classifier.w, model.head.classifier.w);
    assert!(Model::bind(&cfg.clone().with_hila(false), &store).is_err());
    assert!(Model::bind(&ModelConfig::tiny(5), &store).is_err());
}

#[test]
fn predict_shapes() {
    let cfg = ModelConfig::tiny(4);
    let (model, store) = Model::init::<f32>(&cfg, 2).unwrap();
    let images = randn::<f32>(&[2, 32, 32, 3], 3);
    let p = model.predict(&store, &images, 32, 32).unwrap();
    assert_eq!(p.len(), 2 * 32 * 32);
    assert!(p.iter().all(|&c| c < 4));
}

#[test]
fn argmax_takes_first_max() {
    let t = Tensor::<f32>::from_f64(vec![2, 3], &[1.0, 3.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
    assert_eq!(argmax_lastdim(&t), vec![1, 0]);
}
