use std::collections::BTreeMap;

use composer_core::assets::{AttentionWeights, ConceptBundle, LoraDelta, CROSS_KEY, CROSS_VALUE};
use composer_core::attention::{
    compose_hidden, masked_self_attention, rasterize_mask, region_cross_attention, LayoutBox,
    LayoutCondition, RegionSpec,
};
use composer_core::rng::{normal_tensor, stream};
use composer_core::Tensor;
use rand::Rng;

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    let (_, n) = t.dims2().unwrap();
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn tr(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn weights(seed: u64, d_model: usize, d_text: usize) -> AttentionWeights {
    let mut r = stream(seed, "attention-test");
    AttentionWeights {
        query: normal_tensor(&mut r, &[d_model, d_model], 0.7),
        key: normal_tensor(&mut r, &[d_model, d_text], 0.7),
        value: normal_tensor(&mut r, &[d_model, d_text], 0.7),
        out: normal_tensor(&mut r, &[d_model, d_model], 0.7),
    }
}

fn bundle(id: &str, seed: u64, tokens: usize, d_text: usize, d_model: usize) -> ConceptBundle {
    let mut r = stream(seed, "bundle-test");
    let mut deltas = BTreeMap::new();
    for name in [CROSS_KEY, CROSS_VALUE] {
        let down = normal_tensor(&mut r, &[1, d_text], 0.5);
        let up = normal_tensor(&mut r, &[d_model, 1], 0.5);
        deltas.insert(name.to_string(), LoraDelta::new(down, up, 0.8).unwrap());
    }
    ConceptBundle {
        id: id.into(),
        prompt_embed: normal_tensor(&mut r, &[tokens, d_text], 1.0),
        token_index: 1,
        deltas,
    }
}

/// Region cross-attention written out one step at a time with plain loops.
#[allow(clippy::too_many_arguments)]
fn scripted_cross_attention(
    x: &Mat,
    w: &AttentionWeights,
    global: &Tensor,
    concepts: &[(&ConceptBundle, Vec<bool>)],
    heads: usize,
) -> (Mat, Vec<Vec<f64>>) {
    let d_model = x[0].len();
    let dh = d_model / heads;
    let q = mm(x, &tr(&rows(&w.query)));
    let merged = |base: &Tensor, d: Option<&LoraDelta>| -> Mat {
        let mut b = rows(base);
        if let Some(d) = d {
            let ud = mm(&rows(&d.up), &rows(&d.down));
            for (i, row) in b.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += d.scale * ud[i][j];
                }
            }
        }
        b
    };
    let branch = |qn: &Mat,
                  prompt: &Tensor,
                  kd: Option<&LoraDelta>,
                  vd: Option<&LoraDelta>,
                  token: usize| {
        let k = mm(&rows(prompt), &tr(&merged(&w.key, kd)));
        let v = mm(&rows(prompt), &tr(&merged(&w.value, vd)));
        let mut cat = vec![vec![0.0; d_model]; qn.len()];
        let mut map = vec![0.0; qn.len()];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for (p, qrow) in qn.iter().enumerate() {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|krow| {
                        cols.clone().map(|c| qrow[c] * krow[c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let probs = softmax(&logits);
                map[p] += probs[token] / heads as f64;
                for c in cols.clone() {
                    cat[p][c] = probs.iter().zip(&v).map(|(a, vrow)| a * vrow[c]).sum();
                }
            }
        }
        (mm(&cat, &tr(&rows(&w.out))), map)
    };
    let (h0, _) = branch(&q, global, None, None, 0);
    let mut out = h0.clone();
    let mut maps = Vec::new();
    let mut covering = vec![Vec::new(); x.len()];
    for (b, mask) in concepts {
        let qn: Mat = q
            .iter()
            .zip(mask)
            .map(|(r, &m)| r.iter().map(|v| if m { *v } else { 0.0 }).collect())
            .collect();
        let (hn, map) = branch(
            &qn,
            &b.prompt_embed,
            b.delta(CROSS_KEY),
            b.delta(CROSS_VALUE),
            b.token_index,
        );
        for (p, &m) in mask.iter().enumerate() {
            if m {
                covering[p].push(hn[p].clone());
            }
        }
        maps.push(map);
    }
    for (p, hs) in covering.iter().enumerate() {
        if !hs.is_empty() {
            for c in 0..d_model {
                out[p][c] = hs.iter().map(|h| h[c]).sum::<f64>() / hs.len() as f64;
            }
        }
    }
    (out, maps)
}

fn two_region_layout(global: Tensor) -> LayoutCondition {
    LayoutCondition::new(
        vec![
            RegionSpec {
                layout_box: LayoutBox::new(0.0, 0.0, 0.5, 1.0).unwrap(),
                concept_id: "left".into(),
            },
            RegionSpec {
                layout_box: LayoutBox::new(0.5, 0.0, 1.0, 0.5).unwrap(),
                concept_id: "top_right".into(),
            },
        ],
        global,
    )
    .unwrap()
}

#[test]
fn cross_attention_matches_scripted_oracle() {
    let (d_model, d_text, tokens) = (4, 3, 3);
    let w = weights(1, d_model, d_text);
    let mut r = stream(2, "x");
    let x = normal_tensor(&mut r, &[16, d_model], 1.0);
    let global = normal_tensor(&mut r, &[tokens, d_text], 1.0);
    let left = bundle("left", 3, tokens, d_text, d_model);
    let top_right = bundle("top_right", 4, tokens, d_text, d_model);
    let layout = two_region_layout(global.clone());
    let bundles = BTreeMap::from([
        ("left".to_string(), left.clone()),
        ("top_right".to_string(), top_right.clone()),
    ]);

    let left_mask: Vec<bool> = (0..16).map(|p| p % 4 < 2).collect();
    let tr_mask: Vec<bool> = (0..16).map(|p| p % 4 >= 2 && p / 4 < 2).collect();
    for heads in [1, 2] {
        let (hidden, maps) =
            region_cross_attention(&x, 4, 4, &layout, &bundles, &w, heads).unwrap();
        let (want, want_maps) = scripted_cross_attention(
            &rows(&x),
            &w,
            &global,
            &[(&left, left_mask.clone()), (&top_right, tr_mask.clone())],
            heads,
        );
        for (got, want) in hidden.data().iter().zip(want.iter().flatten()) {
            assert!((got - want).abs() < 1e-12, "heads {heads}: {got} vs {want}");
        }
        for ((id, got), want) in maps.iter().zip(&want_maps) {
            assert_eq!(got.shape(), &[4, 4]);
            for (g, w) in got.data().iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{id}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn masked_out_queries_attend_uniformly() {
    let w = weights(5, 4, 3);
    let mut r = stream(6, "x");
    let x = normal_tensor(&mut r, &[16, 4], 1.0);
    let global = normal_tensor(&mut r, &[3, 3], 1.0);
    let layout = two_region_layout(global);
    let bundles = BTreeMap::from([
        ("left".to_string(), bundle("left", 7, 3, 3, 4)),
        ("top_right".to_string(), bundle("top_right", 8, 3, 3, 4)),
    ]);
    let (_, maps) = region_cross_attention(&x, 4, 4, &layout, &bundles, &w, 2).unwrap();
    let left = &maps[0].1;
    for p in 0..16 {
        if p % 4 >= 2 {
            assert_eq!(left.data()[p], 1.0 / 3.0);
        }
    }
    for (_, m) in &maps {
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn neutral_full_region_equals_global_attention() {
    let (d_model, d_text) = (8, 6);
    let w = weights(9, d_model, d_text);
    let mut r = stream(10, "x");
    let x = normal_tensor(&mut r, &[36, d_model], 1.0);
    let global = normal_tensor(&mut r, &[4, d_text], 1.0);
    let mut deltas = BTreeMap::new();
    for name in [CROSS_KEY, CROSS_VALUE] {
        let down = Tensor::zeros(&[2, d_text]);
        let up = Tensor::zeros(&[d_model, 2]);
        deltas.insert(name.to_string(), LoraDelta::new(down, up, 1.0).unwrap());
    }
    let neutral = ConceptBundle {
        id: "n".into(),
        prompt_embed: global.clone(),
        token_index: 1,
        deltas,
    };
    let layout = LayoutCondition::new(
        vec![RegionSpec {
            layout_box: LayoutBox::full(),
            concept_id: "n".into(),
        }],
        global.clone(),
    )
    .unwrap();
    let bundles = BTreeMap::from([("n".to_string(), neutral)]);
    let (with_region, _) = region_cross_attention(&x, 6, 6, &layout, &bundles, &w, 2).unwrap();
    let plain = LayoutCondition::empty(global);
    let (vanilla, maps) =
        region_cross_attention(&x, 6, 6, &plain, &BTreeMap::new(), &w, 2).unwrap();
    assert!(maps.is_empty());
    assert_eq!(with_region, vanilla);
}

fn scripted_self_attention(x: &Mat, w: &AttentionWeights, heads: usize) -> Mat {
    let d = x[0].len();
    let dh = d / heads;
    let q = mm(x, &tr(&rows(&w.query)));
    let k = mm(x, &tr(&rows(&w.key)));
    let v = mm(x, &tr(&rows(&w.value)));
    let mut cat = vec![vec![0.0; d]; x.len()];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for p in 0..x.len() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kr| cols.clone().map(|c| q[p][c] * kr[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let probs = softmax(&logits);
            for c in cols.clone() {
                cat[p][c] = probs.iter().zip(&v).map(|(a, vr)| a * vr[c]).sum();
            }
        }
    }
    mm(&cat, &tr(&rows(&w.out)))
}

#[test]
fn self_attention_without_regions_is_vanilla() {
    let w = weights(11, 4, 4);
    let mut r = stream(12, "x");
    let x = normal_tensor(&mut r, &[16, 4], 1.0);
    let (none, _) = masked_self_attention(&x, &[], &w, 2).unwrap();
    let one = rasterize_mask(&LayoutBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), 4, 4).unwrap();
    let (single, _) = masked_self_attention(&x, &[one], &w, 2).unwrap();
    assert_eq!(none, single);
    let want = scripted_self_attention(&rows(&x), &w, 2);
    for (g, w) in none.data().iter().zip(want.iter().flatten()) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn distinct_regions_never_attend_to_each_other() {
    let w = weights(13, 4, 4);
    let a = rasterize_mask(&LayoutBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), 4, 4).unwrap();
    let b = rasterize_mask(&LayoutBox::new(0.5, 0.5, 1.0, 1.0).unwrap(), 4, 4).unwrap();
    for seed in 0..100 {
        let mut r = stream(seed, "x");
        let x = normal_tensor(&mut r, &[16, 4], 1.5);
        let (_, map) = masked_self_attention(&x, &[a.clone(), b.clone()], &w, 2).unwrap();
        for q in 0..16 {
            let row = &map.data()[q * 16..(q + 1) * 16];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "seed {seed} row {q}: {sum}");
            for (k, &v) in row.iter().enumerate() {
                let cross = (a.data()[q] == 1.0 && b.data()[k] == 1.0)
                    || (b.data()[q] == 1.0 && a.data()[k] == 1.0);
                if cross {
                    assert_eq!(v, 0.0, "seed {seed}: ({q},{k})");
                }
            }
        }
    }
}

#[test]
fn random_boxes_match_pixel_loop_count() {
    let mut r = stream(14, "boxes");
    let mut checked = 0;
    while checked < 100 {
        let (a, b): (f64, f64) = (r.random(), r.random());
        let (c, d): (f64, f64) = (r.random(), r.random());
        let (x0, x1) = (a.min(b), a.max(b));
        let (y0, y1) = (c.min(d), c.max(d));
        let Ok(bx) = LayoutBox::new(x0, y0, x1, y1) else {
            continue;
        };
        let mut want = 0;
        for i in 0..16 {
            for j in 0..16 {
                let (cx, cy) = ((j as f64 + 0.5) / 16.0, (i as f64 + 0.5) / 16.0);
                if x0 <= cx && cx < x1 && y0 <= cy && cy < y1 {
                    want += 1;
                }
            }
        }
        match rasterize_mask(&bx, 16, 16) {
            Ok(m) => assert_eq!(m.sum() as usize, want),
            Err(_) => assert_eq!(want, 0),
        }
        checked += 1;
    }
}

#[test]
fn compose_rules() {
    let mut r = stream(15, "h");
    let h0 = normal_tensor(&mut r, &[4, 3], 1.0);
    let h1 = normal_tensor(&mut r, &[4, 3], 1.0);
    let h2 = normal_tensor(&mut r, &[4, 3], 1.0);
    assert_eq!(compose_hidden(&h0, &[]).unwrap(), h0);

    let m1 = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let m2 = Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let out = compose_hidden(&h0, &[(m1.clone(), h1.clone()), (m2, h2.clone())]).unwrap();
    let row = |t: &Tensor, p: usize| t.data()[p * 3..p * 3 + 3].to_vec();
    assert_eq!(row(&out, 0), row(&h1, 0));
    assert_eq!(row(&out, 1), row(&h2, 1));
    assert_eq!(row(&out, 2), row(&h2, 2));
    assert_eq!(row(&out, 3), row(&h0, 3));

    let both = Tensor::vector(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let out = compose_hidden(&h0, &[(m1, h1.clone()), (both, h2.clone())]).unwrap();
    for c in 0..3 {
        assert_eq!(out.data()[c], (h1.data()[c] + h2.data()[c]) / 2.0);
    }
    assert_eq!(row(&out, 1), row(&h2, 1));
}
