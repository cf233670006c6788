//! Acceptance suite. Every criterion runs against an independent oracle with
//! a wall-clock budget and prints one PASS/FAIL line.
//!
//! `cargo test -p restyle --test acceptance -- --nocapture`

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, Vector3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use restyle::attention::{masked_cross_attention, TokenTensor};
use restyle::diffusion::{
    analytic_denoiser, cfg_combine, edit_friendly_invert, forward_sample, make_schedule, reconstruct, standard_normal,
    GaussianComponent, GaussianMixtureModel, ScheduleKind,
};
use restyle::lift::{diffusion_fill_refiner, lift_sequence, pairwise_consistency_mse, LiftConfig};
use restyle::metrics::{depth_metrics, pose_auc, pose_errors, psnr, ssim};
use restyle::scene::{synth_scene, CameraPose, DepthMap, ImageBuffer, SynthConfig};
use restyle::segmatch::{
    build_attention_mask, downsample_map, match_classes, AttentionMask, SemanticMap, UnmatchedPolicy,
};
use restyle::warp::{
    flow_from_pointmaps, importance_from_depth, softmax_splat, softmax_splat_with_stats, FlowField, FlowParams,
    SelectionStrategy, SplatParams,
};
use restyle::{seeded_rng, SeededRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut SeededRng, tokens: usize, dim: usize) -> TokenTensor {
    let data = (0..tokens * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    TokenTensor::new(tokens, dim, data).unwrap()
}

/// Double-loop softmax attention over the allowed keys of each query.
fn attention_oracle(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let scale = 1.0 / (q.dim as f64).sqrt();
    let mut out = vec![0.0; q.tokens * v.dim];
    for i in 0..q.tokens {
        let mut logits = Vec::new();
        for j in 0..k.tokens {
            if allowed(i, j) {
                let mut dot = 0.0;
                for c in 0..q.dim {
                    dot += q.data[i * q.dim + c] * k.data[j * k.dim + c];
                }
                logits.push((j, dot * scale));
            }
        }
        let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l.1 - max).exp()).sum();
        for (j, l) in logits {
            let w = (l - max).exp() / total;
            for c in 0..v.dim {
                out[i * v.dim + c] += w * v.data[j * v.dim + c];
            }
        }
    }
    out
}

fn criterion_masked_attention() -> Outcome {
    let mut rng = seeded_rng(101);
    let mut worst: f64 = 0.0;
    let mut plain_cases = 0;
    for case in 0..500 {
        let lq = rng.random_range(1..=16);
        let lk = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let dv = rng.random_range(1..=8);
        let (q, k, v) = (
            random_tensor(&mut rng, lq, d),
            random_tensor(&mut rng, lk, d),
            random_tensor(&mut rng, lk, dv),
        );
        let all_true = case % 5 == 0;
        let mut mask = if all_true {
            AttentionMask::all_true(lq, lk)
        } else {
            AttentionMask::from_fn(lq, lk, |_, _| rng.random_bool(0.5))
        };
        for r in 0..lq {
            if !mask.row(r).iter().any(|b| *b) {
                let c = rng.random_range(0..lk);
                mask.bits[r * lk + c] = true;
            }
        }
        let got = masked_cross_attention(&q, &k, &v, &mask).map_err(|e| e.to_string())?;
        let expected = if all_true {
            plain_cases += 1;
            attention_oracle(&q, &k, &v, &|_, _| true)
        } else {
            attention_oracle(&q, &k, &v, &|i, j| mask.get(i, j))
        };
        for (a, b) in got.data.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "500 instances ({plain_cases} all-true), max deviation {worst:.1e}"
    ))
}

const CLASS_NAMES: [&str; 6] = ["wall", "floor", "sofa", "painting", "lamp", "rug"];

fn random_map(rng: &mut SeededRng, w: usize, h: usize, ids: &[u16]) -> SemanticMap {
    // Blocky layout so downsampling sees real regions.
    let bw = rng.random_range(1..=w.max(2) / 2);
    let bh = rng.random_range(1..=h.max(2) / 2);
    let gw = w.div_ceil(bw);
    let blocks: Vec<u16> = (0..gw * h.div_ceil(bh)).map(|_| *ids.choose(rng).unwrap()).collect();
    let labels = (0..w * h).map(|i| blocks[(i / w / bh) * gw + (i % w) / bw]).collect();
    let table = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u16, n.to_string()))
        .collect();
    SemanticMap::new(w, h, labels, table).unwrap()
}

fn criterion_mask_construction() -> Outcome {
    let mut rng = seeded_rng(202);
    let mut fallback_rows = 0usize;
    for case in 0..100 {
        let d = rng.random_range(1..=16);
        let dims = |rng: &mut SeededRng| (rng.random_range(d..=d + 24), rng.random_range(d..=d + 24));
        let (sw, sh) = dims(&mut rng);
        let (tw, th) = dims(&mut rng);
        let pick = |rng: &mut SeededRng| -> Vec<u16> {
            let mut ids: Vec<u16> = (0..CLASS_NAMES.len() as u16).collect();
            ids.shuffle(rng);
            ids.truncate(rng.random_range(1..=4));
            ids
        };
        let src_ids = pick(&mut rng);
        let style_ids = pick(&mut rng);
        let src = random_map(&mut rng, sw, sh, &src_ids);
        let style = random_map(&mut rng, tw, th, &style_ids);
        let overrides = if case % 3 == 0 {
            vec![(
                CLASS_NAMES[src_ids[0] as usize].to_string(),
                CLASS_NAMES[*style_ids.last().unwrap() as usize].to_string(),
            )]
        } else {
            Vec::new()
        };
        let matching =
            match_classes(&src, &style, &overrides, UnmatchedPolicy::GlobalAttend).map_err(|e| e.to_string())?;
        let (src_d, style_d) = (downsample_map(&src, d).unwrap(), downsample_map(&style, d).unwrap());
        let mask = build_attention_mask(&src_d, &style_d, &matching).map_err(|e| e.to_string())?;
        let cols = style_d.labels.len();
        for i in 0..src_d.labels.len() {
            let src_class = &src_d.label_table[&src_d.labels[i]];
            let target = matching.pairs.get(src_class);
            let present = target.is_some_and(|t| style_d.labels.iter().any(|l| &style_d.label_table[l] == t));
            if !present {
                fallback_rows += 1;
            }
            for j in 0..cols {
                let expected = if present {
                    &style_d.label_table[&style_d.labels[j]] == target.unwrap()
                } else {
                    true
                };
                ensure(mask.get(i, j) == expected, || {
                    format!("case {case}: bit ({i},{j}) is {} expected {expected}", mask.get(i, j))
                })?;
            }
        }
    }
    Ok(format!("100 pairs bit-exact, {fallback_rows} global-attend rows"))
}

fn criterion_inversion() -> Outcome {
    let mut rng = seeded_rng(303);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for (i, steps) in [1usize, 10, 50].into_iter().cycle().take(100).enumerate() {
        let dim = rng.random_range(1..=64);
        let kind = if i % 2 == 0 {
            ScheduleKind::default()
        } else {
            ScheduleKind::Cosine { s: 0.008 }
        };
        let schedule = make_schedule(steps, kind).map_err(|e| e.to_string())?;
        let components: Vec<GaussianComponent> = (0..rng.random_range(1..=3))
            .map(|_| GaussianComponent {
                weight: 1.0,
                mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                variance: rng.random_range(0.01..0.5),
            })
            .collect();
        let n = components.len() as f64;
        let components = components
            .into_iter()
            .map(|c| GaussianComponent { weight: 1.0 / n, ..c })
            .collect();
        let gmm = GaussianMixtureModel::new(components).map_err(|e| e.to_string())?;
        let (_, x0) = gmm.sample(&mut rng);
        let denoiser = analytic_denoiser(gmm, schedule);
        let record = edit_friendly_invert(&x0, &denoiser, &mut rng, None).map_err(|e| e.to_string())?;
        let x = reconstruct(&record, &denoiser, None).map_err(|e| e.to_string())?;
        for (a, b) in x.iter().zip(&x0) {
            worst = worst.max((a - b).abs());
        }
        trials += 1;
    }
    ensure(worst < 1e-5, || format!("max abs error {worst:e}"))?;
    Ok(format!("{trials} trials, max abs error {worst:.1e}"))
}

fn criterion_forward_law() -> Outcome {
    const SAMPLES: usize = 100_000;
    let schedule = make_schedule(1000, ScheduleKind::default()).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(404);
    let x0 = vec![5.0; SAMPLES];
    let mut worst: f64 = 0.0;
    for t in [1usize, 100, 250, 400, 500] {
        let noise = standard_normal(SAMPLES, &mut rng);
        let xt = forward_sample(&x0, t, &schedule, &noise).map_err(|e| e.to_string())?;
        let mean = xt.iter().sum::<f64>() / SAMPLES as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (SAMPLES - 1) as f64;
        let ab = schedule.alpha_bar(t);
        let (m_err, v_err) = ((mean / (ab.sqrt() * 5.0) - 1.0).abs(), (var / (1.0 - ab) - 1.0).abs());
        ensure(m_err < 0.02 && v_err < 0.02, || {
            format!("t={t}: mean err {m_err:.4}, var err {v_err:.4}")
        })?;
        worst = worst.max(m_err).max(v_err);
    }
    Ok(format!("5 schedule points, worst relative error {:.2}%", 100.0 * worst))
}

fn criterion_guidance() -> Outcome {
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9);
    let mut rng = seeded_rng(505);
    let vec3 = |rng: &mut SeededRng| -> Vec<f64> { (0..3).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let (u, s, d) = (vec3(&mut rng), vec3(&mut rng), vec3(&mut rng));
    let e = |x: Result<Vec<f64>, _>| x.map_err(|e: restyle::diffusion::DiffusionError| e.to_string());
    ensure(close(&e(cfg_combine(&u, &s, &d, 0.0, 0.3, 0.7))?, &u), || {
        "alpha=0 is not the unconditional term".into()
    })?;
    ensure(close(&e(cfg_combine(&u, &s, &d, 1.0, 1.0, 0.0))?, &s), || {
        "alpha=1, lambda_s=1 is not the semantic term".into()
    })?;
    let hand = e(cfg_combine(&[1.0], &[3.0], &[2.0], 2.0, 0.5, 0.5))?;
    ensure((hand[0] - 4.0).abs() <= 1e-9, || format!("hand case gave {}", hand[0]))?;
    for _ in 0..20 {
        let (u2, s2, d2) = (vec3(&mut rng), vec3(&mut rng), vec3(&mut rng));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let alpha = rng.random_range(0.0..5.0);
        let ls = rng.random_range(0.0..1.0);
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| a * p + b * q).collect() };
        let lhs = e(cfg_combine(
            &mix(&u, &u2),
            &mix(&s, &s2),
            &mix(&d, &d2),
            alpha,
            ls,
            1.0 - ls,
        ))?;
        let r1 = e(cfg_combine(&u, &s, &d, alpha, ls, 1.0 - ls))?;
        let r2 = e(cfg_combine(&u2, &s2, &d2, alpha, ls, 1.0 - ls))?;
        ensure(close(&lhs, &mix(&r1, &r2)), || "combination is not linear".into())?;
    }
    Ok("anchors and linearity hold to 1e-9".into())
}

fn criterion_splat() -> Outcome {
    let mut rng = seeded_rng(606);
    let params = SplatParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let c = if rng.random_bool(0.5) { 1 } else { 3 };
        let img = ImageBuffer::from_data(w, h, c, (0..w * h * c).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mut flow = FlowField::new(w, h);
        for i in 0..w * h {
            flow.flow[i] = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            flow.valid[i] = rng.random_bool(0.9);
        }
        let z: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..0.0)).collect();
        let (out, stats) = softmax_splat_with_stats(&img, &flow, &z, params).map_err(|e| e.to_string())?;
        // Oracle: per-pixel importance times bilinear tap mass landing inside.
        let zmax = (0..w * h)
            .filter(|&i| flow.valid[i])
            .map(|i| z[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut total, mut inside) = (0.0, 0.0);
        for i in (0..w * h).filter(|&i| flow.valid[i]) {
            let e = (params.beta * (z[i] - zmax)).exp();
            total += e;
            let x = (i % w) as f64 + flow.flow[i][0] as f64;
            let y = (i / w) as f64 + flow.flow[i][1] as f64;
            let (x0, y0) = (x.floor(), y.floor());
            for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                let (tx, ty) = (x0 + dx, y0 + dy);
                let k = (1.0 - (x - tx).abs()) * (1.0 - (y - ty).abs());
                if tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                    inside += e * k;
                }
            }
        }
        let splatted: f64 = out.weight.iter().sum();
        let scale = total.max(1e-12);
        let errs = [
            (splatted - inside).abs() / scale,
            (splatted + stats.out_of_bounds_mass - total).abs() / scale,
            (stats.source_mass - total).abs() / scale,
        ];
        for e in errs {
            worst = worst.max(e);
        }
    }
    ensure(worst <= 1e-4, || format!("relative mass error {worst:e}"))?;
    // Two sources collide on pixel 0; importance gap ln 3 / beta gives 3:1.
    let img = ImageBuffer::from_data(2, 1, 1, vec![1.0, 0.0]).unwrap();
    let mut flow = FlowField::uniform(2, 1, 0.0, 0.0);
    flow.flow[1] = [-1.0, 0.0];
    let z = [3f64.ln() / params.beta, 0.0];
    let out = softmax_splat(&img, &flow, &z, params).map_err(|e| e.to_string())?;
    ensure(out.image.data[0] == 0.75, || {
        format!("collision gave {}", out.image.data[0])
    })?;
    Ok(format!(
        "200 instances, worst relative mass error {worst:.1e}; collision = 0.75"
    ))
}

fn criterion_geometry() -> Outcome {
    let mut worst_flow: f64 = 0.0;
    let mut worst_mae: f64 = 0.0;
    let mut worst_rim_mae: f64 = 0.0;
    let mut pairs = 0;
    for seed in [1u64, 2] {
        let (scene, truth) = synth_scene(&SynthConfig::pan(64, 64, 5, seed), seed).map_err(|e| e.to_string())?;
        for i in 0..5 {
            let src = &scene.frames[i];
            let importance = importance_from_depth(&src.depth);
            for j in (0..5).filter(|&j| j != i) {
                let dst = &scene.frames[j];
                let flow = flow_from_pointmaps(&src.pointmap, &dst.pose, &dst.intrinsics, FlowParams::default());
                let gt = &truth.pair(i, j).flow;
                for p in (0..gt.flow.len()).filter(|&p| gt.valid[p]) {
                    ensure(flow.valid[p], || format!("{i}->{j}: pixel {p} lost"))?;
                    for c in 0..2 {
                        worst_flow = worst_flow.max((flow.flow[p][c] - gt.flow[p][c]).abs() as f64);
                    }
                }
                let warped =
                    softmax_splat(&src.image, &flow, &importance, SplatParams::default()).map_err(|e| e.to_string())?;
                let covis = &truth.pair(j, i).covisible;
                let interior = away_from_depth_edges(&dst.depth);
                let mae = |keep: &dyn Fn(usize) -> bool| {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for p in (0..covis.len()).filter(|&p| covis[p] && warped.mask[p] && keep(p)) {
                        for c in 0..3 {
                            sum += (warped.image.data[p * 3 + c] - dst.image.data[p * 3 + c]).abs() as f64;
                        }
                        n += 3;
                    }
                    sum / n.max(1) as f64
                };
                worst_mae = worst_mae.max(mae(&|p| interior[p]));
                worst_rim_mae = worst_rim_mae.max(mae(&|_| true));
                pairs += 1;
            }
        }
    }
    ensure(worst_flow < 1e-3, || format!("flow error {worst_flow:e} px"))?;
    ensure(worst_mae <= 2.0 / 255.0, || format!("warp MAE {worst_mae:.5} > 2/255"))?;
    Ok(format!(
        "{pairs} pairs, flow error {worst_flow:.1e} px, worst warp MAE {:.3}/255 ({:.3}/255 with occlusion rims)",
        worst_mae * 255.0,
        worst_rim_mae * 255.0
    ))
}

/// Pixels whose 8-neighbourhood has no relative depth jump above 5%.
/// The bilinear splat kernel spreads a foreground surface one pixel past
/// its silhouette, so rim pixels are left out of the resampling check.
fn away_from_depth_edges(depth: &DepthMap) -> Vec<bool> {
    let (w, h) = (depth.width as i64, depth.height as i64);
    (0..depth.data.len())
        .map(|p| {
            let (x, y) = (p as i64 % w, p as i64 / w);
            let d = depth.data[p];
            (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    !(0..w).contains(&nx)
                        || !(0..h).contains(&ny)
                        || (depth.data[(ny * w + nx) as usize] - d).abs() <= 0.05 * d
                })
            })
        })
        .collect()
}

fn criterion_lift_fidelity() -> Outcome {
    let (scene, truth) = synth_scene(&SynthConfig::pan(64, 64, 5, 3), 3).map_err(|e| e.to_string())?;
    let state = lift_sequence(
        &scene,
        &scene.frames[0].image,
        0,
        &diffusion_fill_refiner(),
        LiftConfig::default(),
        &mut seeded_rng(7),
    )
    .map_err(|e| e.to_string())?;
    let mut worst = f64::INFINITY;
    for j in 1..scene.len() {
        let p = psnr(
            &state.stylized[&j],
            &scene.frames[j].image,
            Some(&truth.pair(j, 0).covisible),
        )
        .map_err(|e| e.to_string())?;
        ensure(p >= 30.0, || format!("frame {j}: {p:.2} dB"))?;
        worst = worst.min(p);
    }
    Ok(format!("5 frames, worst co-visible PSNR {worst:.2} dB"))
}

fn criterion_selection_ablation() -> Outcome {
    let (mut last_total, mut ours_total) = (0.0, 0.0);
    let mut wins = 0;
    for run in 0..10u64 {
        let (scene, truth) = synth_scene(&SynthConfig::revisiting(64, 64, 6, run), run).map_err(|e| e.to_string())?;
        let mse = |strategy| -> Result<f64, String> {
            let config = LiftConfig {
                strategy,
                ..LiftConfig::default()
            };
            let state = lift_sequence(
                &scene,
                &scene.frames[0].image,
                0,
                &diffusion_fill_refiner(),
                config,
                &mut seeded_rng(run),
            )
            .map_err(|e| e.to_string())?;
            pairwise_consistency_mse(&state.stylized, &scene, &truth, SplatParams::default()).map_err(|e| e.to_string())
        };
        let (last, ours) = (
            mse(SelectionStrategy::LastOnly)?,
            mse(SelectionStrategy::LastPlusTwoRandom)?,
        );
        last_total += last;
        ours_total += ours;
        if ours <= last {
            wins += 1;
        }
    }
    let (last, ours) = (last_total / 10.0, ours_total / 10.0);
    ensure(ours <= last, || {
        format!("mean MSE ours {ours:.6} > last-only {last:.6}")
    })?;
    Ok(format!(
        "mean pairwise MSE {ours:.6} (last + 2 random) vs {last:.6} (last only), {wins}/10 runs"
    ))
}

/// SSIM with every 11x11 window summed directly.
fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s: f64 = g1.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wgt = g1[dy] * g1[dx] / (s * s);
                    let (x, y) = (a[(y0 + dy) * w + x0 + dx], b[(y0 + dy) * w + x0 + dx]);
                    ma += wgt * x;
                    mb += wgt * y;
                    saa += wgt * x * x;
                    sbb += wgt * y * y;
                    sab += wgt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Horn's quaternion solution for the similarity taking `from` onto `to`.
fn horn_similarity(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let cf = from.iter().sum::<Vector3<f64>>() / n;
    let ct = to.iter().sum::<Vector3<f64>>() / n;
    let mut m = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        m += (a - cf) * (b - ct).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let best = (0..4)
        .max_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]))
        .unwrap();
    let q = eig.eigenvectors.column(best);
    let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    let r = *quat.to_rotation_matrix().matrix();
    let num: f64 = from.iter().zip(to).map(|(a, b)| (b - ct).dot(&(r * (a - cf)))).sum();
    let den: f64 = from.iter().map(|a| (a - cf).norm_squared()).sum();
    let s = num / den;
    (s, r, ct - s * r * cf)
}

fn random_pose(rng: &mut SeededRng) -> CameraPose {
    let r = Rotation3::from_euler_angles(
        rng.random_range(-3.0..3.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.0..3.0),
    );
    let c = Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    CameraPose::from_center(*r.matrix(), c)
}

fn criterion_metrics() -> Outcome {
    let mut rng = seeded_rng(1010);
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());
    let err = |e: restyle::metrics::MetricsError| e.to_string();
    for _ in 0..100 {
        // Depth.
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let r: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.5..10.0)).collect();
        let p: Vec<f32> = r.iter().map(|v| v * rng.random_range(0.6..1.5)).collect();
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        if mask.iter().any(|m| *m) {
            let got = depth_metrics(
                &DepthMap::from_values(w, h, p.clone()),
                &DepthMap::from_values(w, h, r.clone()),
                Some(&mask),
            )
            .map_err(err)?;
            let (mut abs, mut sq, mut good, mut n) = (0.0, 0.0, 0.0, 0.0);
            for i in (0..w * h).filter(|&i| mask[i]) {
                let (pv, rv) = (p[i] as f64, r[i] as f64);
                abs += (pv - rv).abs() / rv;
                sq += (pv - rv).powi(2) / rv;
                if pv / rv < 1.25 && rv / pv < 1.25 {
                    good += 1.0;
                }
                n += 1.0;
            }
            track(got.abs_rel, 100.0 * abs / n);
            track(got.sq_rel, 100.0 * sq / n);
            track(got.delta1, 100.0 * good / n);
        }
        // Images.
        let (w, h) = (rng.random_range(11..=32), rng.random_range(11..=32));
        let a: Vec<f32> = (0..w * h * 3).map(|_| rng.random()).collect();
        let b: Vec<f32> = a
            .iter()
            .map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
            .collect();
        let (ia, ib) = (
            ImageBuffer::from_data(w, h, 3, a.clone()).unwrap(),
            ImageBuffer::from_data(w, h, 3, b.clone()).unwrap(),
        );
        let mse = a
            .iter()
            .zip(&b)
            .map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2))
            .sum::<f64>()
            / a.len() as f64;
        track(psnr(&ia, &ib, None).map_err(err)?, 10.0 * (1.0 / mse).log10());
        let gray = |v: &[f32]| -> Vec<f64> {
            v.chunks(3)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect()
        };
        track(ssim(&ia, &ib).map_err(err)?, ssim_oracle(&gray(&a), &gray(&b), w, h));
        // Poses: random similarity, plus centre noise and per-camera tilts.
        let n = rng.random_range(3..=12);
        let reference: Vec<CameraPose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let sim_r = Rotation3::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-3.0..3.0),
        );
        let sim_s = rng.random_range(0.2..5.0);
        let sim_t = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let noisy = rng.random_bool(0.5);
        let est: Vec<CameraPose> = reference
            .iter()
            .map(|p| {
                let tilt = Rotation3::from_euler_angles(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
                let jitter = if noisy {
                    Vector3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    )
                } else {
                    Vector3::zeros()
                };
                // Map reference world into the estimate's frame: x' = s R x + t.
                let c = sim_s * (sim_r * (p.center() + jitter)) + sim_t;
                let rot = tilt.matrix() * p.rotation * sim_r.matrix().transpose();
                CameraPose::from_center(rot, c)
            })
            .collect();
        let got = pose_errors(&est, &reference).map_err(err)?;
        let ce: Vec<Vector3<f64>> = est.iter().map(|p| p.center()).collect();
        let cr: Vec<Vector3<f64>> = reference.iter().map(|p| p.center()).collect();
        let (s, r, t) = horn_similarity(&ce, &cr);
        for i in 0..n {
            let aligned_rot = est[i].rotation * r.transpose();
            let cos = (((aligned_rot * reference[i].rotation.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            track(got.rotation_deg[i], cos.acos().to_degrees());
            track(got.translation_cm[i], 100.0 * (s * r * ce[i] + t - cr[i]).norm());
        }
        // AUC.
        let errors: Vec<f64> = (0..rng.random_range(1..=64))
            .map(|_| rng.random_range(0.0..20.0))
            .collect();
        let tau = rng.random_range(0.5..25.0);
        let closed = 100.0 * errors.iter().map(|e| (tau - e).max(0.0)).sum::<f64>() / (errors.len() as f64 * tau);
        track(pose_auc(&errors, tau).map_err(err)?, closed);
    }
    ensure(worst < 1e-6, || format!("max oracle deviation {worst:e}"))?;
    // Hand cases.
    let r = DepthMap::from_values(4, 1, vec![1.0, 2.0, 4.0, 8.0]);
    let p = DepthMap::from_values(4, 1, vec![1.3, 2.6, 5.2, 10.4]);
    let m = depth_metrics(&p, &r, None).map_err(err)?;
    ensure(m.delta1 == 0.0, || format!("delta1 at ratio 1.3 is {}", m.delta1))?;
    let auc = pose_auc(&[2.0, 8.0], 10.0).map_err(err)?;
    ensure((auc - 50.0).abs() < 1e-12, || format!("AUC hand case {auc}"))?;
    let zero = ImageBuffer::from_data(16, 16, 1, vec![0.0; 256]).unwrap();
    let one = ImageBuffer::from_data(16, 16, 1, vec![1.0; 256]).unwrap();
    let c1: f64 = 1e-4;
    let s = ssim(&zero, &one).map_err(err)?;
    ensure((s - c1 / (1.0 + c1)).abs() < 1e-12, || {
        format!("constant-image SSIM {s}")
    })?;
    Ok(format!(
        "100 instances per metric, max deviation {worst:.1e}; hand cases exact"
    ))
}

fn collect_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timings.json" {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_cli_determinism() -> Outcome {
    let run_pipeline = |root: &Path| -> Result<(), String> {
        let p = |s: &str| root.join(s).display().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec![
                "synth".into(),
                "--out".into(),
                p("scene"),
                "--frames".into(),
                "5".into(),
                "--seed".into(),
                "7".into(),
            ],
            vec![
                "synth".into(),
                "--out".into(),
                p("style"),
                "--frames".into(),
                "1".into(),
                "--seed".into(),
                "8".into(),
            ],
            vec![
                "stylize".into(),
                "--scene".into(),
                p("scene"),
                "--style".into(),
                p("style"),
                "--match".into(),
                "sofa=painting".into(),
                "--out".into(),
                p("stylized"),
                "--seed".into(),
                "3".into(),
            ],
            vec![
                "lift".into(),
                "--scene".into(),
                p("scene/manifest.json"),
                "--stylized".into(),
                p("stylized/stylized.rsim"),
                "--refiner".into(),
                "toy".into(),
                "--out".into(),
                p("lifted"),
                "--seed".into(),
                "3".into(),
            ],
            vec![
                "eval".into(),
                "--images".into(),
                p("lifted/frame_002.rsim"),
                p("scene/frame_002_image.rsim"),
                "--pred-depth".into(),
                p("scene/frame_001_depth.rsdp"),
                "--ref-depth".into(),
                p("scene/frame_002_depth.rsdp"),
                "--pred-poses".into(),
                p("scene/poses.json"),
                "--ref-poses".into(),
                p("scene/poses.json"),
                "--out".into(),
                p("eval.json"),
            ],
        ];
        for args in steps {
            let mut argv = vec!["restyle".to_string()];
            argv.extend(args.iter().cloned());
            let code = restyle::cli::run(&argv);
            ensure(code == 0, || format!("`{}` exited with {code}", args.join(" ")))?;
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (fa, fb) = (collect_files(a.path()), collect_files(b.path()));
    let names: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    for name in &names {
        ensure(fa.get(*name) == fb.get(*name), || {
            format!("{name} differs between runs")
        })?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", names.len()))
}

#[test]
fn acceptance_suite() {
    let criteria: [Criterion; 11] = [
        ("masked attention matches scalar oracle", 10, criterion_masked_attention),
        (
            "attention mask matches brute-force class comparison",
            5,
            criterion_mask_construction,
        ),
        ("edit-friendly inversion round trip", 30, criterion_inversion),
        ("forward process mean and variance", 20, criterion_forward_law),
        ("guidance combination anchors and linearity", 1, criterion_guidance),
        ("splat mass conservation and collision case", 20, criterion_splat),
        ("geometry round trip on synthetic scenes", 30, criterion_geometry),
        ("lift fidelity with harmonic fill", 60, criterion_lift_fidelity),
        ("frame selection ablation direction", 120, criterion_selection_ablation),
        ("metrics against scalar oracles", 30, criterion_metrics),
        ("end-to-end CLI determinism", 120, criterion_cli_determinism),
    ];
    let mut failures = Vec::new();
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|msg| {
            if elapsed <= Duration::from_secs(budget) {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {:.1}s, budget {budget}s", elapsed.as_secs_f64()))
            }
        });
        match &result {
            Ok(msg) => println!("PASS  {:>2}. {name}: {msg} [{:.2}s]", i + 1, elapsed.as_secs_f64()),
            Err(msg) => {
                println!("FAIL  {:>2}. {name}: {msg} [{:.2}s]", i + 1, elapsed.as_secs_f64());
                failures.push(i + 1);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
