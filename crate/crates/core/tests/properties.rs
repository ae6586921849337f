use composer_core::assets::container::{decode, encode, Entry};
use composer_core::attention::{compose_hidden, rasterize_mask, LayoutBox, PixelBox};
use composer_core::guidance::{step_size, total_loss, AdaptiveStop, GuidanceConfig};
use composer_core::reinit::{best_crop, standardize, transplant, Crop};
use composer_core::tensor::{softmax_rows, topk_indices};
use composer_core::{finite_difference_gradient, max_relative_error, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn dyadic_map() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        let cells = prop::collection::vec(0u32..1024, h * w)
            .prop_map(|v| v.into_iter().map(|x| x as f64 / 1024.0).collect());
        (Just(h), Just(w), cells)
    })
}

fn brute_force_crop(map: &[f64], h: usize, w: usize, eh: usize, ew: usize) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for i in 0..=h - eh {
        for j in 0..=w - ew {
            let mut s = 0.0;
            for di in 0..eh {
                for dj in 0..ew {
                    s += map[(i + di) * w + j + dj];
                }
            }
            if s > best.2 {
                best = (i, j, s);
            }
        }
    }
    best
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in tensor(vec![5, 7]), shift in -300.0..300.0f64) {
        let shifted = Tensor::new(vec![5, 7], x.data().iter().map(|v| v * 50.0 + shift).collect()).unwrap();
        let s = softmax_rows(&shifted).unwrap();
        for row in s.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn topk_agrees_with_sorting(v in prop::collection::vec(0u8..6, 1..40), k_frac in 0.0..1.0f64) {
        let n = v.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let x = Tensor::vector(v.iter().map(|&b| b as f64).collect()).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(v[i]), i));
        prop_assert_eq!(topk_indices(&x, k).unwrap(), order[..k].to_vec());
    }

    #[test]
    fn tape_gradient_matches_differences(
        a in tensor(vec![3, 4]),
        b in tensor(vec![4, 5]),
        c in tensor(vec![3, 5]),
    ) {
        let build = |x: &Tensor| -> (Tape, composer_core::Var, composer_core::Var) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let bv = tape.leaf(b.clone());
            let cv = tape.leaf(c.clone());
            let h = tape.matmul(xv, bv).unwrap();
            let n = tape.layer_norm_rows(h, 1e-5).unwrap();
            let s = tape.softmax_rows(n).unwrap();
            let m = tape.mul(s, cv).unwrap();
            let out = tape.sum(m).unwrap();
            (tape, xv, out)
        };
        let (tape, xv, out) = build(&a);
        let analytic = tape.grad(out, xv).unwrap();
        let numeric = finite_difference_gradient(
            |x| {
                let (t, _, o) = build(x);
                t.value(o).data()[0]
            },
            &a,
            1e-6,
        );
        prop_assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn best_crop_equals_brute_force((h, w, cells) in dyadic_map(), fh in 0.0..1.0f64, fw in 0.0..1.0f64) {
        let eh = 1 + ((h - 1) as f64 * fh) as usize;
        let ew = 1 + ((w - 1) as f64 * fw) as usize;
        let map = Tensor::new(vec![h, w], cells.clone()).unwrap();
        let got = best_crop(&map, ew, eh).unwrap();
        let (row, col, score) = brute_force_crop(&cells, h, w, eh, ew);
        prop_assert_eq!((got.row, got.col, got.height, got.width), (row, col, eh, ew));
        prop_assert_eq!(got.score, score);
    }

    #[test]
    fn transplant_touches_only_the_box(
        z in tensor(vec![3, 6, 7]),
        (eh, ew) in (1usize..=6, 1usize..=7),
        src in (0.0..1.0f64, 0.0..1.0f64),
        dst in (0.0..1.0f64, 0.0..1.0f64),
    ) {
        let at = |f: f64, room: usize| (f * (room + 1) as f64) as usize;
        let crop = Crop { row: at(src.0, 6 - eh), col: at(src.1, 7 - ew), height: eh, width: ew, score: 0.0 };
        let to = PixelBox { row: at(dst.0, 6 - eh), col: at(dst.1, 7 - ew), height: eh, width: ew };
        let out = transplant(&z, &[crop], &[to]).unwrap();
        for ch in 0..3 {
            for i in 0..6 {
                for j in 0..7 {
                    let idx = ch * 42 + i * 7 + j;
                    let inside = (to.row..to.row + eh).contains(&i) && (to.col..to.col + ew).contains(&j);
                    let want = if inside {
                        z.data()[ch * 42 + (crop.row + i - to.row) * 7 + crop.col + j - to.col]
                    } else {
                        z.data()[idx]
                    };
                    prop_assert_eq!(out.data()[idx].to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn standardized_channels_have_unit_moments(z in tensor(vec![4, 8, 8]), gain in 1e-3..1e3f64, offset in -50.0..50.0f64) {
        let z = Tensor::new(vec![4, 8, 8], z.data().iter().map(|v| v * gain + offset).collect()).unwrap();
        let s = standardize(&z).unwrap();
        for ch in s.data().chunks(64) {
            let mean = ch.iter().sum::<f64>() / 64.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_popcount_matches_pixel_centres(
        xs in (0.0..1.0f64, 0.0..1.0f64),
        ys in (0.0..1.0f64, 0.0..1.0f64),
        h in 1usize..20,
        w in 1usize..20,
    ) {
        let (x0, x1) = (xs.0.min(xs.1), xs.0.max(xs.1));
        let (y0, y1) = (ys.0.min(ys.1), ys.0.max(ys.1));
        prop_assume!(x0 < x1 && y0 < y1);
        let b = LayoutBox::new(x0, y0, x1, y1).unwrap();
        let mut want = 0;
        for i in 0..h {
            for j in 0..w {
                let (cx, cy) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
                want += usize::from(x0 <= cx && cx < x1 && y0 <= cy && cy < y1);
            }
        }
        match rasterize_mask(&b, h, w) {
            Ok(m) => prop_assert_eq!(m.sum() as usize, want),
            Err(_) => prop_assert_eq!(want, 0),
        }
    }

    #[test]
    fn compose_keeps_background_and_averages_cover(
        h0 in tensor(vec![6, 3]),
        hs in prop::collection::vec(tensor(vec![6, 3]), 0..4),
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 4),
    ) {
        let regional: Vec<(Tensor, Tensor)> = hs
            .iter()
            .zip(&bits)
            .map(|(h, b)| (Tensor::vector(b.iter().map(|&x| f64::from(u8::from(x))).collect()).unwrap(), h.clone()))
            .collect();
        let out = compose_hidden(&h0, &regional).unwrap();
        for p in 0..6 {
            let cover: Vec<&Tensor> = hs.iter().zip(&bits).filter(|(_, b)| b[p]).map(|(h, _)| h).collect();
            for c in 0..3 {
                let got = out.data()[p * 3 + c];
                if cover.is_empty() {
                    prop_assert_eq!(got.to_bits(), h0.data()[p * 3 + c].to_bits());
                } else {
                    let want = cover.iter().map(|h| h.data()[p * 3 + c]).sum::<f64>() / cover.len() as f64;
                    prop_assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn total_is_the_weighted_sum(
        parts in (0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64),
        alpha in 0.01..5.0f64,
        beta in 0.01..5.0f64,
    ) {
        let cfg = GuidanceConfig { alpha, beta, ..GuidanceConfig::default() };
        let b = total_loss(parts.0, parts.1, parts.2, &cfg);
        prop_assert!((b.total - (parts.0 + alpha * parts.1 + beta * parts.2)).abs() < 1e-12);
        prop_assert!(b.total >= 0.0);
    }

    #[test]
    fn step_size_is_linear(steps in 1usize..200, frac in 0.0..1.0f64, phi0 in 0.1..100.0f64) {
        let t = (frac * steps as f64) as usize;
        let phi = step_size(t, steps, phi0);
        prop_assert!((phi - phi0 * t as f64 / steps as f64).abs() <= 1e-15 * phi0);
        prop_assert_eq!(step_size(steps, steps, phi0), phi0);
        prop_assert_eq!(step_size(0, steps, phi0), 0.0);
        prop_assert_eq!(step_size(steps, 2 * steps, phi0), phi0 / 2.0);
    }

    #[test]
    fn adaptive_stop_follows_the_running_minimum(
        losses in prop::collection::vec(0u8..8, 1..30),
        patience in 1usize..4,
    ) {
        let mut stop = AdaptiveStop::new(patience);
        let (mut best, mut stale) = (f64::INFINITY, 0);
        for &l in &losses {
            let l = l as f64;
            let d = stop.observe(l);
            let improved = l < best;
            if improved {
                best = l;
                stale = 0;
            } else {
                stale += 1;
            }
            prop_assert_eq!(d.accepted, improved);
            prop_assert_eq!(d.stop, stale >= patience);
            prop_assert_eq!(stop.best(), best);
        }
    }

    #[test]
    fn container_round_trips_single_precision(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..3), any::<u64>()),
            1..5,
        ),
    ) {
        let entries: Vec<Entry> = tensors
            .iter()
            .enumerate()
            .map(|(i, (dims, seed))| {
                let n: usize = dims.iter().product();
                let vals = (0..n)
                    .map(|k| f64::from(((seed.wrapping_mul(k as u64 + 1) >> 40) as f32 - 8e6) / 1e3))
                    .collect();
                Entry::new(format!("t{i}"), dims.clone(), vals)
            })
            .collect();
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &entries);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}
