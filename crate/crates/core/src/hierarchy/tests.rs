use proptest::prelude::*;

use super::*;
use crate::autograd::Graph;
use crate::encoder::{Model, ModelConfig};
use crate::interlevel::tests::{randn, randomize};
use crate::rng::Rng;

/// Top-down record for one image with `f(window, slot)` on real slots and
/// zero on padding slots.
fn record(lo: (usize, usize), g: PatchGeometry, mut f: impl FnMut(usize, usize) -> f64) -> InterLevelWeights<f64> {
    let (ht, wt) = (g.windows(lo.0).unwrap(), g.windows(lo.1).unwrap());
    let mask = g.slot_mask(lo.0, lo.1).unwrap();
    let s = g.slots();
    let m = Tensor::from_fn(&[1, ht * wt, s], |i| if mask[i] { f(i / s, i % s) } else { 0.0 });
    InterLevelWeights { m, direction: Direction::TopDown, geometry: g, hi_hw: (ht, wt), lo_hw: lo }
}

fn random_record(lo: (usize, usize), seed: u64) -> InterLevelWeights<f64> {
    let mut r = Rng::new(seed);
    record(lo, PatchGeometry::default(), |_, _| r.uniform() + 0.01)
}

/// Row-normalised over real slots.
fn stochastic_record(lo: (usize, usize), seed: u64) -> InterLevelWeights<f64> {
    let mut rec = random_record(lo, seed);
    let s = rec.geometry.slots();
    for row in rec.m.data_mut().chunks_mut(s) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    rec
}

/// Dense `[hi, lo]` matrix of a record, built from explicit coordinates.
fn dense_record(rec: &InterLevelWeights<f64>) -> Vec<Vec<f64>> {
    let (ht, wt) = rec.hi_hw;
    let (h, w) = rec.lo_hw;
    let g = rec.geometry;
    let k = g.kernel as isize;
    let mut out = vec![vec![0.0; h * w]; ht * wt];
    for i in 0..ht {
        for j in 0..wt {
            for a in 0..k {
                for c in 0..k {
                    let (y, x) = (i as isize * 2 - g.padding as isize + a, j as isize * 2 - g.padding as isize + c);
                    if g.stride != 2 || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    out[i * wt + j][y as usize * w + x as usize] = rec.m.data()[(i * wt + j) * g.slots() + (a * k + c) as usize];
                }
            }
        }
    }
    out
}

fn matmul_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; b[0].len()];
            for (m, &v) in row.iter().enumerate() {
                for (o, bv) in out.iter_mut().zip(&b[m]) {
                    *o += v * bv;
                }
            }
            out
        })
        .collect()
}

#[test]
fn window_recurrence() {
    let g = PatchGeometry::default();
    let sides: Vec<usize> = (0..4).map(|n| receptive_window(4, 4 - n, g)).collect();
    assert_eq!(sides, [1, 4, 10, 22]);
    let g2 = PatchGeometry::new(2, 2, 0).unwrap();
    let sides: Vec<usize> = (1..4).map(|n| receptive_window(4, 4 - n, g2)).collect();
    assert_eq!(sides, [2, 4, 8]);
}

#[test]
fn identity_base_reproduces_the_record() {
    let rec = random_record((8, 12), 1);
    let mask = HierarchyMask::from_top_down(&rec, 3, 0).unwrap();
    assert_eq!((mask.source_stage, mask.target_stage, mask.num_levels()), (3, 2, 1));
    let dense = dense_record(&rec);
    for (i, row) in dense.iter().enumerate() {
        let z: f64 = row.iter().sum();
        let got = mask.dense();
        for (t, v) in row.iter().enumerate() {
            assert!((got.at(&[i, t]) - v / z).abs() < 1e-12);
        }
        // Raw weights come back through the stored mass.
        for (t, v) in mask.raw_row(i) {
            assert!((v - row[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_intermediate_leaves_upper_weights() {
    let rec = stochastic_record((8, 8), 2);
    let lower = HierarchyMask::identity(1, 8, 8);
    let mask = compose(&rec, 2, 0, &lower).unwrap();
    let dense = dense_record(&rec);
    for (i, row) in dense.iter().enumerate() {
        for (t, v) in mask.raw_row(i) {
            assert!((v - row[t]).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_two_level_toy() {
    // Non-overlapping 2×2 windows: a 1×1 top over 2×2 over 4×4. Each level
    // averages 4 cells, so every one of the 16 pixels gets 1/4 · 1/4.
    let g = PatchGeometry::new(2, 2, 0).unwrap();
    let lower = HierarchyMask::from_top_down(&record((4, 4), g, |_, _| 0.25), 2, 0).unwrap();
    let mask = compose(&record((2, 2), g, |_, _| 0.25), 3, 0, &lower).unwrap();
    assert_eq!(mask.rows[0].len(), 16);
    for (t, v) in mask.raw_row(0) {
        assert!((v - 1.0 / 16.0).abs() < 1e-15, "pixel {t}: {v}");
    }
    assert!((mask.row_sum(0) - 1.0).abs() < 1e-15);
}

#[test]
fn composition_equals_dense_product() {
    let r2 = random_record((16, 16), 3);
    let r3 = random_record((8, 8), 4);
    let r4 = random_record((4, 4), 5);
    let m2 = HierarchyMask::from_top_down(&r2, 2, 0).unwrap();
    let m3 = compose(&r3, 3, 0, &m2).unwrap();
    let m4 = compose(&r4, 4, 0, &m3).unwrap();
    let dense = matmul_rows(&matmul_rows(&dense_record(&r4), &dense_record(&r3)), &dense_record(&r2));
    let got = m4.dense();
    for (i, row) in dense.iter().enumerate() {
        let z: f64 = row.iter().sum();
        for (t, v) in row.iter().enumerate() {
            assert!((got.at(&[i, t]) - v / z).abs() < 1e-12);
        }
    }
}

#[test]
fn stochastic_rows_keep_their_mass() {
    let m2 = HierarchyMask::from_top_down(&stochastic_record((16, 16), 6), 2, 0).unwrap();
    let m3 = compose(&stochastic_record((8, 8), 7), 3, 0, &m2).unwrap();
    // Only interior windows lose nothing to padding.
    for i in 1..3 {
        for j in 1..3 {
            let raw: f64 = m3.raw_row(i * 4 + j).map(|e| e.1).sum();
            assert!((raw - 1.0).abs() < 1e-5, "row ({i},{j}) mass {raw}");
        }
    }
}

#[test]
fn stage_and_shape_checks() {
    let rec = random_record((8, 8), 8);
    assert!(compose(&rec, 3, 0, &HierarchyMask::identity(1, 8, 8)).is_err());
    assert!(compose(&rec, 2, 0, &HierarchyMask::identity(1, 8, 6)).is_err());
    assert!(compose(&rec, 2, 1, &HierarchyMask::identity(1, 8, 8)).is_err());
    let mut bu = rec.clone();
    bu.direction = Direction::BottomUp;
    assert!(compose(&bu, 2, 0, &HierarchyMask::identity(1, 8, 8)).is_err());
}

fn traced(cfg: &ModelConfig, seed: u64) -> Vec<StageTrace<f64>> {
    let (model, mut store) = Model::init::<f64>(cfg, seed).unwrap();
    randomize(&mut store, seed, 0.5);
    let g = Graph::inference(&store);
    let img = g.constant(randn(&[2, 64, 64, 3], seed));
    model.forward_encoder(&g, img).unwrap().trace
}

#[test]
fn model_masks_are_normalised_and_windowed() {
    let trace = traced(&ModelConfig::tiny(3), 9);
    let masks = hierarchy_masks(&trace, 4, 3, 1).unwrap();
    let sides: Vec<usize> = masks.iter().map(|m| m.window(0, 0).2).collect();
    assert_eq!(sides, [4, 10, 22]);
    for m in &masks {
        let (sh, sw) = m.source_hw;
        let (th, tw) = m.target_hw;
        for y in 0..sh {
            for x in 0..sw {
                let i = y * sw + x;
                assert!((m.row_sum(i) - 1.0).abs() < 1e-6);
                let (oy, ox, side) = m.window(y, x);
                for &(t, _) in &m.rows[i] {
                    let (ty, tx) = ((t / tw) as isize, (t % tw) as isize);
                    assert!(ty >= oy && ty < oy + side as isize && tx >= ox && tx < ox + side as isize);
                    assert!(t < th * tw);
                }
            }
        }
    }
}

#[test]
fn missing_stage_is_named() {
    let mut cfg = ModelConfig::tiny(3);
    for (i, s) in cfg.stages.iter_mut().enumerate() {
        s.hila = i == 2;
    }
    let trace = traced(&cfg, 10);
    assert_eq!(hierarchy_masks(&trace, 3, 1, 0).unwrap().len(), 1);
    let err = hierarchy_masks(&trace, 3, 2, 0).unwrap_err().to_string();
    assert!(err.contains("stage 2"), "{err}");
    assert!(hierarchy_masks(&trace, 4, 1, 0).unwrap_err().to_string().contains("stage 4"));
}

fn plain_image(h: usize, w: usize, v: f32) -> Tensor<f32> {
    Tensor::full(&[h, w, 3], v)
}

#[test]
fn render_single_pixel_and_uniform_rows() {
    let mut m = HierarchyMask::identity(1, 8, 8);
    let base = plain_image(8, 8, 0.2);
    let opts = RenderOptions { alpha: 1.0, draw_window: false };
    let out = render_mask(&m, (3, 5), &base, &opts).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let px = &out.data()[(y * 8 + x) * 3..(y * 8 + x) * 3 + 3];
            let want: &[f32] = if (y, x) == (3, 5) { &MASK_TINT } else { &[0.2; 3] };
            assert_eq!(px, want);
        }
    }
    // A 1×1 source over the top-left 4×4 window of an 8×8 grid.
    m.source_hw = (1, 1);
    m.rows = vec![(0..16).map(|i| ((i / 4) * 8 + i % 4, 1.0 / 16.0)).collect()];
    m.mass = vec![1.0];
    m.levels = vec![PatchGeometry::new(4, 2, 0).unwrap()];
    let opts = RenderOptions { alpha: 0.5, draw_window: false };
    let out = render_mask(&m, (0, 0), &base, &opts).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let inside = y < 4 && x < 4;
            let v = out.data()[(y * 8 + x) * 3];
            let want = if inside { 0.5 * 0.2 + 0.5 * MASK_TINT[0] } else { 0.2 };
            assert!((v - want).abs() < 1e-7);
        }
    }
    let boxed = render_mask(&m, (0, 0), &base, &RenderOptions { alpha: 0.5, draw_window: true }).unwrap();
    assert_eq!(&boxed.data()[0..3], &WINDOW_COLOR);
    assert_eq!(&boxed.data()[(3 * 8 + 2) * 3..(3 * 8 + 2) * 3 + 3], &WINDOW_COLOR);
    assert_eq!(&boxed.data()[27..30], &out.data()[27..30]);
    assert_eq!(&boxed.data()[(4 * 8 + 4) * 3..(4 * 8 + 4) * 3 + 3], &[0.2; 3]);
}

#[test]
fn render_edge_cases() {
    let trace = traced(&ModelConfig::tiny(3), 11);
    let masks = hierarchy_masks(&trace, 4, 2, 0).unwrap();
    let base = to_grayscale(&Tensor::from_fn(&[64, 64, 3], |i| (i % 7) as f32 / 7.0)).unwrap();
    let off = RenderOptions { alpha: 0.0, draw_window: false };
    assert_eq!(render_mask(&masks[1], (1, 1), &base, &off).unwrap(), base);
    assert!(render_mask(&masks[1], (2, 0), &base, &off).is_err());
    assert!(render_mask(&masks[1], (0, 0), &plain_image(4, 4, 0.0), &off).is_err());
    // Corner queries keep their window clipped but drawable.
    let out = render_mask(&masks[1], (0, 0), &base, &RenderOptions::default()).unwrap();
    assert!(out.all_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalised_rows_sum_to_one(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let lo = (2 * h, 2 * w);
        let m = HierarchyMask::from_top_down(&random_record(lo, seed), 3, 0).unwrap();
        for i in 0..m.rows.len() {
            prop_assert!((m.row_sum(i) - 1.0).abs() < 1e-6);
        }
    }
}
