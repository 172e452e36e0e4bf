//! Acceptance suite. Every criterion is one test printing a single
//! `[PASS]`/`[FAIL]` line; run with `--nocapture` to see them.
//!
//! Criteria run one at a time (a shared lock) so the wall-clock budgets are
//! measured without contention.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixdec::codebook::SegCodebook;
use pixdec::data::synth::{gen_synthetic, SynthConfig};
use pixdec::data::{
    convert_multi_referring, load_records, save_records, ImageAnnotations, InstanceAnnotation, RleMask, PLACEHOLDER,
};
use pixdec::decoder::{feature_modulate, DecoderConfig, PixelDecoder};
use pixdec::encoder::MultiScaleFeatures;
use pixdec::losses::{bce_per_pixel, dice_loss, target_refinement_loss, total_mask_loss, LossWeights};
use pixdec::matcheval::{aggregate, evaluate_answer, gated_iou, match_masks, AnswerCase, StubMode, StubScorer};
use pixdec::nn::{Bindings, ParamStore};
use pixdec::numeric::{finite_diff_check_many, Tape, Tensor, Var};
use pixdec::train::{run_training, AdamW, OptimConfig, RunConfig, TrainOutcome};

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(name: &str, body: impl FnOnce() -> String) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(detail) => println!("[PASS] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64()),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            println!("[FAIL] {name}: {msg}");
            panic!("{name} failed: {msg}");
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- matching

fn oracle_bce_dice(p: &[f64], y: &[f64]) -> f64 {
    let eps = 1e-7;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let q = p[i].clamp(eps, 1.0 - eps);
        bce += -(y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln());
        inter += p[i] * y[i];
        sp += p[i];
        sy += y[i];
    }
    bce / p.len() as f64 + 1.0 - (2.0 * inter + 1.0) / (sp + sy + 1.0)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[test]
fn c01_matching_optimality() {
    criterion("matching optimality (200 instances, P <= 7, exhaustive oracle)", || {
        let mut r = rng(11);
        let start = Instant::now();
        let mut largest = 0;
        for case in 0..200 {
            let k = r.random_range(0..=7usize);
            let g = if k == 0 {
                r.random_range(1..=7)
            } else {
                r.random_range(0..=7)
            };
            let n = 36;
            let preds: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| r.random::<f64>()).collect()).collect();
            let gts: Vec<Vec<f64>> = (0..g)
                .map(|_| (0..n).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect())
                .collect();
            let m = match_masks(&preds, &gts).unwrap();
            let p = k.max(g);
            largest = largest.max(p);
            assert_eq!(m.p, p);
            let empty = vec![0.0; n];
            for i in 0..p {
                for j in 0..p {
                    let want = match (i < k, j < g) {
                        (true, true) => oracle_bce_dice(&preds[i], &gts[j]),
                        (true, false) => oracle_bce_dice(&preds[i], &empty),
                        (false, true) => oracle_bce_dice(&empty, &gts[j]),
                        (false, false) => 0.0,
                    };
                    assert!((m.cost[i * p + j] - want).abs() < 1e-12, "case {case}: cost ({i},{j})");
                }
            }
            let best = permutations(p)
                .into_iter()
                .map(|perm| sorted_sum(perm.iter().enumerate().map(|(i, &j)| m.cost[i * p + j]).collect()))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(m.total_cost, best, "case {case}: K={k} G={g}");
            let mut seen = m.assignment.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..p).collect::<Vec<_>>());
        }
        let t = start.elapsed();
        assert!(t < Duration::from_secs(30), "took {t:?}");
        format!("all optimal, max P = {largest}, {:.2}s", t.as_secs_f64())
    });
}

// ---------------------------------------------------------- gradient checks

fn probs(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // kept away from the 0.5 binarization edge so the refinement map is
    // locally constant
    (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.05..0.45);
            if r.random_bool(0.5) {
                v
            } else {
                1.0 - v
            }
        })
        .collect()
}

fn binary(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect()
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect()
}

/// Largest relative error between parameter gradients of `f` and central
/// differences taken by perturbing the store in place.
fn param_check(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Tape<f64>, &Bindings, &[Var]) -> Var,
) -> f64 {
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let bind = store.bind_detached(&mut tape);
        let xs: Vec<Var> = inputs.iter().map(|x| tape.leaf_detached(x)).collect();
        let out = f(&mut tape, &bind, &xs);
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let xs: Vec<Var> = inputs.iter().map(|x| tape.leaf_detached(x)).collect();
    let out = f(&mut tape, &bind, &xs);
    tape.backward(out).unwrap();
    store.zero_grads();
    store.accumulate(&tape, &bind).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for id in ids {
        let grad = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (c, &a) in grad.iter().enumerate() {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[c] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[c] = orig;
            let num = (plus - minus) / (2.0 * h);
            worst = worst.max((a - num).abs() / num.abs().max(1.0));
        }
    }
    worst
}

fn tiny_decoder(store: &mut ParamStore<f64>, seed: u64) -> PixelDecoder {
    let cfg = DecoderConfig {
        levels: 2,
        d: 8,
        n_out: 2,
        mlp_width: 16,
        sizes: vec![(4, 4), (2, 2)],
    };
    PixelDecoder::new(store, &mut rng(seed), cfg).unwrap()
}

#[test]
fn c02_gradient_fidelity() {
    criterion(
        "gradient fidelity (losses, fusion, attention block < 1e-6; full decoder < 1e-4; 20 seeds)",
        || {
            let (mut w_loss, mut w_fuse, mut w_block, mut w_full) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for seed in 0..20u64 {
                let mut r = rng(1000 + seed);
                let n = 16;
                let h = 1e-6;

                // losses, w.r.t. predictions
                let p = Tensor::new(&[4, 4], probs(&mut r, n)).unwrap();
                let y = Tensor::new(&[4, 4], binary(&mut r, n)).unwrap();
                let c = Tensor::new(&[4, 4], normal_vec(&mut r, n, 1.0)).unwrap();
                let yv = y.clone();
                let e = finite_diff_check_many(
                    |t, v| {
                        let y = t.leaf_detached(&yv);
                        let b = bce_per_pixel(t, v[0], y)?;
                        let b = t.mul(b, v[1])?;
                        t.sum(b)
                    },
                    &[p.clone(), c.clone()],
                    h,
                )
                .unwrap();
                w_loss = w_loss.max(e);
                let e = finite_diff_check_many(
                    |t, v| {
                        let y = t.leaf_detached(&yv);
                        dice_loss(t, v[0], y)
                    },
                    std::slice::from_ref(&p),
                    h,
                )
                .unwrap();
                w_loss = w_loss.max(e);
                let k = 3;
                let ps: Vec<Tensor<f64>> = (0..k)
                    .map(|_| Tensor::new(&[4, 4], probs(&mut r, n)).unwrap())
                    .collect();
                let ys: Vec<Tensor<f64>> = (0..k)
                    .map(|_| Tensor::new(&[4, 4], binary(&mut r, n)).unwrap())
                    .collect();
                let e = finite_diff_check_many(
                    |t, v| {
                        let ys: Vec<Var> = ys.iter().map(|y| t.leaf_detached(y)).collect();
                        target_refinement_loss(t, v, &ys, 2.0)
                    },
                    &ps,
                    h,
                )
                .unwrap();
                w_loss = w_loss.max(e);
                let e = finite_diff_check_many(
                    |t, v| {
                        let ys: Vec<Var> = ys.iter().map(|y| t.leaf_detached(y)).collect();
                        total_mask_loss(t, v, &ys, &LossWeights::default())
                    },
                    &ps,
                    h,
                )
                .unwrap();
                w_loss = w_loss.max(e);

                // fuse_tokens, w.r.t. the group and the projection
                let mut store = ParamStore::<f64>::new();
                let cb = SegCodebook::new(&mut store, &mut rng(seed), 2, 3, 5).unwrap();
                let group = Tensor::new(&[3, 5], normal_vec(&mut r, 15, 1.0)).unwrap();
                let wts = Tensor::new(&[5], normal_vec(&mut r, 5, 1.0)).unwrap();
                let e = finite_diff_check_many(
                    |t, v| {
                        let bind = store.bind_detached(t);
                        let o = cb.fuse_tokens(t, &bind, v[0])?;
                        let o = t.mul(o, v[1])?;
                        t.sum(o)
                    },
                    &[group.clone(), wts.clone()],
                    h,
                )
                .unwrap();
                w_fuse = w_fuse.max(e);
                let e = param_check(&mut store, &[group, wts], &|t, bind, v| {
                    let o = cb.fuse_tokens(t, bind, v[0]).unwrap();
                    let o = t.mul(o, v[1]).unwrap();
                    t.sum(o).unwrap()
                });
                w_fuse = w_fuse.max(e);

                // attention_block, w.r.t. token, features and every block parameter
                let mut store = ParamStore::<f64>::new();
                let dec = tiny_decoder(&mut store, seed);
                let tok = Tensor::new(&[8], normal_vec(&mut r, 8, 1.0)).unwrap();
                let feat = Tensor::new(&[8, 4, 4], normal_vec(&mut r, 128, 1.0)).unwrap();
                let wm = Tensor::new(&[16, 16], normal_vec(&mut r, 256, 1.0)).unwrap();
                let wf = Tensor::new(&[8, 4, 4], normal_vec(&mut r, 128, 1.0)).unwrap();
                let block = |t: &mut Tape<f64>, bind: &Bindings, v: &[Var]| -> Var {
                    let (m, f) = dec.attention_block(t, bind, v[0], v[1], 0).unwrap();
                    let a = t.mul(m, v[2]).unwrap();
                    let b = t.mul(f, v[3]).unwrap();
                    let a = t.sum(a).unwrap();
                    let b = t.sum(b).unwrap();
                    t.add(a, b).unwrap()
                };
                let inputs = [tok, feat, wm, wf];
                let e = finite_diff_check_many(
                    |t, v| {
                        let bind = store.bind_detached(t);
                        Ok(block(t, &bind, v))
                    },
                    &inputs,
                    h,
                )
                .unwrap();
                w_block = w_block.max(e);
                w_block = w_block.max(param_check(&mut store, &inputs, &block));

                // full decoder into the total mask loss
                let mut store = ParamStore::<f64>::new();
                let dec = tiny_decoder(&mut store, 50 + seed);
                let k = 2;
                let h_all = Tensor::new(&[k, 2, 8], normal_vec(&mut r, k * 16, 1.0)).unwrap();
                let f0 = Tensor::new(&[8, 4, 4], normal_vec(&mut r, 128, 1.0)).unwrap();
                let f1 = Tensor::new(&[8, 2, 2], normal_vec(&mut r, 32, 1.0)).unwrap();
                let ys: Vec<Tensor<f64>> = (0..k)
                    .map(|_| Tensor::new(&[16, 16], binary(&mut r, 256)).unwrap())
                    .collect();
                let full = |t: &mut Tape<f64>, bind: &Bindings, v: &[Var]| -> Var {
                    let feats = MultiScaleFeatures {
                        levels: vec![v[1], v[2]],
                    };
                    let out = dec.decode(t, bind, v[0], &feats).unwrap();
                    let preds: Vec<Var> = out.iter().map(|m| t.sigmoid(m.fused).unwrap()).collect();
                    let ys: Vec<Var> = ys.iter().map(|y| t.leaf_detached(y)).collect();
                    total_mask_loss(t, &preds, &ys, &LossWeights::default()).unwrap()
                };
                let inputs = [h_all, f0, f1];
                let e = finite_diff_check_many(
                    |t, v| {
                        let bind = store.bind_detached(t);
                        Ok(full(t, &bind, v))
                    },
                    &inputs,
                    h,
                )
                .unwrap();
                w_full = w_full.max(e);
                w_full = w_full.max(param_check(&mut store, &inputs, &full));
            }
            assert!(w_loss < 1e-6, "loss gradients: {w_loss:e}");
            assert!(w_fuse < 1e-6, "fuse_tokens: {w_fuse:e}");
            assert!(w_block < 1e-6, "attention_block: {w_block:e}");
            assert!(w_full < 1e-4, "full decoder: {w_full:e}");
            format!("worst rel. err losses {w_loss:.1e}, fusion {w_fuse:.1e}, block {w_block:.1e}, full {w_full:.1e}")
        },
    );
}

// ------------------------------------------------------- refinement loss

#[test]
fn c03_refinement_literalness() {
    criterion(
        "refinement loss vs triple loop (50 cases, K <= 5, 8x8, alpha = 2)",
        || {
            let mut r = rng(3);
            let alpha = 2.0;
            let (mut worst, mut with_overlap): (f64, usize) = (0.0, 0);
            for _ in 0..50 {
                let k = r.random_range(1..=5usize);
                let preds: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..64).map(|_| r.random_range(0.001..0.999)).collect())
                    .collect();
                let gts: Vec<Vec<f64>> = (0..k).map(|_| binary(&mut r, 64)).collect();
                let mut total = 0.0;
                let mut any_overlap = false;
                for kk in 0..k {
                    for i in 0..8 {
                        for j in 0..8 {
                            let px = i * 8 + j;
                            let claimed = (0..k).filter(|&q| preds[q][px] > 0.5).count();
                            let a = if claimed >= 2 { alpha } else { 1.0 };
                            any_overlap |= claimed >= 2;
                            let p = preds[kk][px].clamp(1e-7, 1.0 - 1e-7);
                            let y = gts[kk][px];
                            total += a * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                        }
                    }
                }
                let want = total / (k * 64) as f64;
                with_overlap += usize::from(any_overlap);
                let mut tape = Tape::<f64>::new();
                let pv: Vec<Var> = preds
                    .iter()
                    .map(|p| tape.constant(&[8, 8], p.clone()).unwrap())
                    .collect();
                let yv: Vec<Var> = gts.iter().map(|y| tape.constant(&[8, 8], y.clone()).unwrap()).collect();
                let l = target_refinement_loss(&mut tape, &pv, &yv, alpha).unwrap();
                worst = worst.max((tape.value(l)[0] - want).abs());
            }
            assert!(worst <= 1e-12, "max abs diff {worst:e}");
            assert!(
                with_overlap > 10,
                "only {with_overlap} cases exercised the alpha branch"
            );
            format!("max abs diff {worst:.1e}, {with_overlap}/50 cases with alpha-weighted pixels")
        },
    );
}

// --------------------------------------------------------- metric fixtures

#[test]
fn c04_metric_fixtures() {
    criterion("metric fixtures (gating, IoU_img, gIoU/cIoU)", || {
        // gate: s = 0.4 zeroes the intersection, s = 0.6 keeps it
        let pred = [1u8, 1, 0, 0];
        let gt = [1u8, 0, 0, 0];
        let g = gated_iou(&pred, &gt, 0.4, false).unwrap();
        assert_eq!((g.intersection, g.union, g.iou), (0.0, 2.0, 0.0));
        let g = gated_iou(&pred, &gt, 0.6, false).unwrap();
        assert_eq!((g.intersection, g.union, g.iou), (1.0, 2.0, 0.5));
        let g = gated_iou(&pred, &gt, 0.5, false).unwrap();
        assert_eq!(g.iou, 0.0);
        let g = gated_iou(&pred, &gt, 0.6, true).unwrap();
        assert_eq!((g.intersection, g.iou), (0.6, 0.3));

        // P = 2: one exact prediction and one with no ground truth
        let scorer = StubScorer {
            mode: StubMode::Constant(10),
        };
        let a = AnswerCase {
            image: "a".into(),
            preds: vec![vec![1, 1, 0, 0], vec![0, 0, 0, 1]],
            pred_names: vec!["cat".into(), "dog".into()],
            template: format!("cat is {PLACEHOLDER}, dog is {PLACEHOLDER}"),
            gts: vec![vec![1, 1, 0, 0]],
            gt_descriptions: vec!["cat".into()],
        };
        let ra = evaluate_answer(&a, &scorer, false).unwrap();
        assert_eq!(ra.ious, vec![1.0, 0.0]);
        assert_eq!(ra.iou_img, 0.5);
        assert_eq!((ra.intersection, ra.union), (2.0, 3.0));

        // four targets, half right on each: IoU 1/2 per target
        let b = AnswerCase {
            image: "b".into(),
            preds: (0..4).map(|i| (0..8).map(|p| u8::from(p == 2 * i)).collect()).collect(),
            pred_names: (0..4).map(|i| format!("t{i}")).collect(),
            template: [PLACEHOLDER; 4].join(" "),
            gts: (0..4).map(|i| (0..8).map(|p| u8::from(p / 2 == i)).collect()).collect(),
            gt_descriptions: (0..4).map(|i| format!("t{i}")).collect(),
        };
        let rb = evaluate_answer(&b, &scorer, false).unwrap();
        assert_eq!(rb.iou_img, 0.5);
        assert_eq!((rb.intersection, rb.union), (4.0, 8.0));

        let rep = aggregate(vec![ra, rb], false);
        let few = rep.few.unwrap();
        let many = rep.many.unwrap();
        let all = rep.overall.unwrap();
        assert_eq!((few.images, few.giou, few.ciou), (1, 0.5, 2.0 / 3.0));
        assert_eq!((many.images, many.giou, many.ciou), (1, 0.5, 0.5));
        assert_eq!((all.giou, all.ciou), (0.5, 6.0 / 11.0));

        // a perfect answer scores 1 everywhere
        let perfect = AnswerCase {
            image: "c".into(),
            preds: vec![vec![1, 0, 1], vec![0, 1, 0]],
            pred_names: vec!["x".into(), "y".into()],
            template: format!("{PLACEHOLDER} {PLACEHOLDER}"),
            gts: vec![vec![0, 1, 0], vec![1, 0, 1]],
            gt_descriptions: vec!["y".into(), "x".into()],
        };
        let rep = aggregate(vec![evaluate_answer(&perfect, &scorer, false).unwrap()], false);
        let o = rep.overall.unwrap();
        assert_eq!((o.giou, o.ciou), (1.0, 1.0));
        "IoU_img 0.5 at P=2, s = 0.4 gated to 0, split gIoU/cIoU exact".to_owned()
    });
}

// ---------------------------------------------------------- modulation

#[test]
fn c05_modulation_bounds() {
    criterion("feature modulation multiplier in (1, 2), exactly 1.5 at m = 0", || {
        let mut r = rng(5);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..200 {
            let (h, w) = (r.random_range(1..6usize), r.random_range(1..6usize));
            let (mh, mw) = (r.random_range(1..9usize), r.random_range(1..9usize));
            let mut tape = Tape::<f64>::new();
            let f = tape.constant(&[2, h, w], vec![1.0; 2 * h * w]).unwrap();
            let m = tape
                .constant(&[mh, mw], (0..mh * mw).map(|_| r.random_range(-30.0..30.0)).collect())
                .unwrap();
            let out = feature_modulate(&mut tape, f, m).unwrap();
            for &v in tape.value(out) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        assert!(lo > 1.0 && hi < 2.0, "multiplier range [{lo}, {hi}]");
        let mut tape = Tape::<f64>::new();
        let fv: Vec<f64> = (0..3 * 4 * 5).map(|_| r.random_range(-3.0..3.0)).collect();
        let f = tape.constant(&[3, 4, 5], fv.clone()).unwrap();
        let m = tape.constant(&[8, 10], vec![0.0; 80]).unwrap();
        let out = feature_modulate(&mut tape, f, m).unwrap();
        for (o, x) in tape.value(out).iter().zip(&fv) {
            assert_eq!(*o, 1.5 * x);
        }
        format!(
            "observed min 1 + {:.1e}, max 2 - {:.1e}; m = 0 exact",
            lo - 1.0,
            2.0 - hi
        )
    });
}

// ------------------------------------------------------------- gamma

#[test]
fn c06_gamma_contract() {
    criterion(
        "fusion weights stay a distribution; L = 1 fusion is the identity",
        || {
            let mut r = rng(6);
            let mut worst: f64 = 0.0;
            for levels in [2usize, 3, 4] {
                let mut store = ParamStore::<f64>::new();
                let cfg = DecoderConfig {
                    levels,
                    d: 4,
                    n_out: 1,
                    mlp_width: 4,
                    sizes: (0..levels).map(|l| (8 >> l, 8 >> l)).collect(),
                };
                let dec = PixelDecoder::new(&mut store, &mut rng(levels as u64), cfg).unwrap();
                let mut opt = AdamW::<f64>::new(&OptimConfig::default());
                for _ in 0..200 {
                    store.zero_grads();
                    let gid = dec.gamma_logits();
                    let g: Vec<f64> = (0..levels).map(|_| r.random_range(-50.0..50.0)).collect();
                    store.get_mut(gid).accumulate_grad(&g).unwrap();
                    opt.step(&mut store, r.random_range(0.0..2.0)).unwrap();
                    let w = dec.fusion_weights(&store);
                    assert!(w.iter().all(|&v| v > 0.0), "{w:?}");
                    worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
                    // the tape-side weights agree with the store-side ones
                    let mut tape = Tape::new();
                    let bind = store.bind_detached(&mut tape);
                    let gl = tape.reshape(bind[gid], &[1, levels]).unwrap();
                    let gamma = tape.softmax(gl, 1).unwrap();
                    worst = worst.max((tape.value(gamma).iter().sum::<f64>() - 1.0).abs());
                }
            }
            assert!(worst <= 1e-6, "sum deviates by {worst:e}");

            let mut store = ParamStore::<f64>::new();
            let cfg = DecoderConfig {
                levels: 1,
                d: 4,
                n_out: 2,
                mlp_width: 4,
                sizes: vec![(3, 3)],
            };
            let dec = PixelDecoder::new(&mut store, &mut rng(9), cfg).unwrap();
            let gid = dec.gamma_logits();
            store.get_mut(gid).data_mut()[0] = 3.7;
            let mut tape = Tape::new();
            let bind = store.bind_detached(&mut tape);
            let h = tape.constant(&[2, 1, 4], normal_vec(&mut r, 8, 1.0)).unwrap();
            let f = tape.constant(&[4, 3, 3], normal_vec(&mut r, 36, 1.0)).unwrap();
            let out = dec
                .decode(&mut tape, &bind, h, &MultiScaleFeatures { levels: vec![f] })
                .unwrap();
            for m in &out {
                assert_eq!(tape.value(m.fused), tape.value(m.per_scale[0]));
            }
            format!("max |sum - 1| = {worst:.1e} over 600 updates; L = 1 bitwise identical")
        },
    );
}

// ----------------------------------------------------- toy training runs

const SEEDS: [u64; 3] = [1, 2, 3];

struct Run {
    iou: f64,
    overlap: f64,
    secs: f64,
}

fn toy_run(seed: u64, lambda_ref: f64) -> Run {
    let mut cfg = RunConfig::toy();
    cfg.seed = seed;
    cfg.loss.lambda_ref = lambda_ref;
    let start = Instant::now();
    let out: TrainOutcome<f64> = run_training(&cfg).unwrap();
    Run {
        iou: out.final_eval.mean_iou,
        overlap: out.final_eval.overlap_rate,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn refined_runs() -> &'static Vec<Run> {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| toy_run(s, 2.0)).collect())
}

#[test]
fn c07_toy_learning() {
    criterion(
        "end-to-end toy learning (held-out IoU >= 0.70, < 15 min per run, 3/3 seeds)",
        || {
            let cfg = RunConfig::toy();
            assert!(cfg.optim.steps <= 2000);
            assert_eq!((cfg.model.levels(), cfg.model.n_cb, cfg.model.image_size), (2, 3, 64));
            assert_eq!((cfg.data.train_scenes, cfg.data.val_scenes), (2000, 200));
            assert_eq!((cfg.data.synth.k_min, cfg.data.synth.k_max), (1, 4));
            let runs = refined_runs();
            let summary: Vec<String> = runs
                .iter()
                .zip(SEEDS)
                .map(|(r, s)| format!("seed {s}: IoU {:.3} in {:.0}s", r.iou, r.secs))
                .collect();
            for r in runs {
                assert!(r.iou >= 0.70 && r.secs < 900.0, "{}", summary.join(", "));
            }
            format!("{} steps; {}", cfg.optim.steps, summary.join(", "))
        },
    );
}

#[test]
fn c08_ablation_direction() {
    criterion(
        "refinement loss lowers held-out overlap-pixel rate (3-seed mean)",
        || {
            let with: Vec<f64> = refined_runs().iter().map(|r| r.overlap).collect();
            let without: Vec<f64> = SEEDS.iter().map(|&s| toy_run(s, 0.0).overlap).collect();
            let mw = with.iter().sum::<f64>() / 3.0;
            let mo = without.iter().sum::<f64>() / 3.0;
            assert!(mw < mo, "lambda_ref=2: {with:?}, lambda_ref=0: {without:?}");
            format!("overlap rate {mw:.4} with vs {mo:.4} without")
        },
    );
}

// ---------------------------------------------------------------- FLOPs

#[test]
fn c09_flops_estimator() {
    criterion(
        "FLOPs estimate within 1% of the instrumented counter (5 configs)",
        || {
            let configs = [
                (1, 8, 2, vec![(4, 4)], 1),
                (2, 8, 2, vec![(4, 4), (2, 2)], 2),
                (2, 16, 3, vec![(16, 16), (8, 8)], 3),
                (3, 12, 1, vec![(12, 12), (6, 6), (3, 3)], 2),
                (2, 24, 2, vec![(16, 16), (16, 16)], 4),
            ];
            let mut worst: f64 = 0.0;
            for (i, (levels, d, n_out, sizes, k)) in configs.into_iter().enumerate() {
                let cfg = DecoderConfig {
                    levels,
                    d,
                    n_out,
                    mlp_width: 2 * d,
                    sizes: sizes.clone(),
                };
                let mut store = ParamStore::<f64>::new();
                let dec = PixelDecoder::new(&mut store, &mut rng(i as u64), cfg.clone()).unwrap();
                let mut tape = Tape::new();
                let bind = store.bind(&mut tape);
                let mut r = rng(90 + i as u64);
                let h = tape
                    .constant(&[k, levels, d], normal_vec(&mut r, k * levels * d, 1.0))
                    .unwrap();
                let feats = MultiScaleFeatures {
                    levels: sizes
                        .iter()
                        .map(|&(a, b)| tape.constant(&[d, a, b], normal_vec(&mut r, d * a * b, 1.0)).unwrap())
                        .collect(),
                };
                tape.reset_muladd_count();
                dec.decode(&mut tape, &bind, h, &feats).unwrap();
                let counted = tape.muladd_count() as f64;
                let est = pixdec::decoder::flops_estimate(&cfg, k) as f64;
                let rel = (est - counted).abs() / counted;
                assert!(rel < 0.01, "config {i}: estimate {est} vs counted {counted}");
                worst = worst.max(rel);
            }
            format!("worst relative gap {:.2e}", worst)
        },
    );
}

// ----------------------------------------------------------- round trips

#[test]
fn c10_data_round_trips() {
    criterion(
        "data round trips (50 RLE masks, record bytes, convert order on 100 sets)",
        || {
            let mut r = rng(10);
            for _ in 0..50 {
                let (h, w) = (r.random_range(1..40usize), r.random_range(1..40usize));
                let density = r.random_range(0.0..1.0);
                let m: Vec<u8> = (0..h * w).map(|_| u8::from(r.random_bool(density))).collect();
                let rle = RleMask::encode(&m, h, w).unwrap();
                assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), h * w);
                assert_eq!(rle.decode().unwrap(), m);
            }

            let dir = tempfile::tempdir().unwrap();
            let scenes = gen_synthetic(&SynthConfig::default(), 12, 4).unwrap();
            let records: Vec<_> = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| s.to_record(&format!("img_{i:03}.png")).unwrap())
                .collect();
            let a = dir.path().join("a.jsonl");
            let b = dir.path().join("b.jsonl");
            save_records(&a, &records).unwrap();
            let loaded = load_records(&a).unwrap();
            assert_eq!(loaded, records);
            save_records(&b, &loaded).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

            for set in 0..100u64 {
                let anns: Vec<ImageAnnotations> = (0..r.random_range(1..6))
                    .map(|i| {
                        let n = r.random_range(0..7usize);
                        ImageAnnotations {
                            image: format!("im{i}"),
                            height: 4,
                            width: 4,
                            instances: (0..n)
                                .map(|j| {
                                    let m: Vec<u8> = (0..16).map(|_| u8::from(r.random_bool(0.5))).collect();
                                    InstanceAnnotation {
                                        description: format!("object {i}-{j}"),
                                        category: "thing".into(),
                                        mask: RleMask::encode(&m, 4, 4).unwrap(),
                                    }
                                })
                                .collect(),
                        }
                    })
                    .collect();
                let (kmin, kmax) = (r.random_range(1..3usize), r.random_range(3..5usize));
                let (recs, report) = convert_multi_referring(&anns, (kmin, kmax), set).unwrap();
                let nonempty = anns.iter().filter(|a| !a.instances.is_empty()).count();
                assert_eq!((recs.len(), report.converted), (nonempty, nonempty));
                assert_eq!(report.skipped.len(), anns.len() - nonempty);
                for rec in &recs {
                    let ann = anns.iter().find(|a| a.image == rec.image).unwrap();
                    let k = rec.targets.len();
                    assert!(k >= kmin.min(ann.instances.len()) && k <= kmax, "k = {k}");
                    let descs: Vec<&str> = rec.targets.iter().map(|t| t.description.as_str()).collect();
                    let mut uniq = descs.clone();
                    uniq.sort_unstable();
                    uniq.dedup();
                    assert_eq!(uniq.len(), k, "repeated instance");
                    // mention order in question and answer equals target order
                    let q_pos: Vec<usize> = descs.iter().map(|d| rec.question.find(d).unwrap()).collect();
                    let a_pos: Vec<usize> = descs
                        .iter()
                        .map(|d| rec.answer.find(&format!("{d} is {PLACEHOLDER}")).unwrap())
                        .collect();
                    assert!(q_pos.windows(2).all(|w| w[0] < w[1]));
                    assert!(a_pos.windows(2).all(|w| w[0] < w[1]));
                    assert_eq!(rec.answer.matches(PLACEHOLDER).count(), k);
                    for t in &rec.targets {
                        let src = ann.instances.iter().find(|i| i.description == t.description).unwrap();
                        assert_eq!(t.mask, src.mask);
                    }
                }
                let (again, _) = convert_multi_referring(&anns, (kmin, kmax), set).unwrap();
                assert_eq!(again, recs);
            }
            "50 RLE identities, byte-identical record files, 100 conversion sets ordered".to_owned()
        },
    );
}
