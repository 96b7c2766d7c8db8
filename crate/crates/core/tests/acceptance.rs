//! Acceptance checks, one line per criterion.
//!
//! `cargo test -p vtssi --test acceptance` runs all of them; pass criterion
//! numbers (`-- 1 3`) to run a subset. The end-to-end criterion scores the
//! checkpoints under `tests/fixtures/e2e`; set `VTSSI_E2E_RETRAIN=1` to
//! retrain them first (hours on a CPU).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vtssi::air::{split_count, split_tensor};
use vtssi::checkpoint::Checkpoint;
use vtssi::data::sprites::{procedural, tight_bbox, Sprite};
use vtssi::data::{
    gen_sequence, render_sprite, sequence_objects, BounceMode, DataConfig, Dataset, ObjectMotion,
};
use vtssi::eval::{evaluate, match_objects, median, position_errors, EvalOptions, EvalReport};
use vtssi::geometry::{extract, regularization_kernel, st_extract, st_paste, BoxParams};
use vtssi::model::{
    expected_kl_terms, Forward, KlRecord, Latent, Noise, Precision, Prior, RunOptions, SceneLatents, Variant, Vtssi,
    VtssiConfig,
};
use vtssi::mot::{fuse_step, rollout, ConstantVelocity};
use vtssi::prob::{fuse_weighted, DiagGaussian, Normal, Sampler};
use vtssi::rect::RectMode;
use vtssi::schedule::{curriculum_len, LrSchedule};
use vtssi::toy;
use vtssi::train::{read_metrics, train, window_mean, Trainer};

/// Collects failed checks of one criterion.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn close(&mut self, got: f64, want: f64, tol: f64, what: &str) {
        self.check((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} (tol {tol})"));
    }

    fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    fn run(&mut self, what: &str, r: vtssi::Result<()>) {
        if let Err(e) = r {
            self.failures.push(format!("{what}: {e}"));
        }
    }
}

fn kl_diag(qm: &[f64], qs: &[f64], pm: &[f64], ps: &[f64]) -> f64 {
    (0..qm.len())
        .map(|i| (ps[i] / qs[i]).ln() + (qs[i] * qs[i] + (qm[i] - pm[i]).powi(2)) / (2.0 * ps[i] * ps[i]) - 0.5)
        .sum()
}

fn log_density(m: &[f64], s: &[f64], x: &[f64]) -> f64 {
    (0..m.len())
        .map(|i| {
            let z = (x[i] - m[i]) / s[i];
            -0.5 * z * z - s[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

fn rand_gauss(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    let loc = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let scale = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
    DiagGaussian::new(loc, scale).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    to_vec(t)[0]
}

// ---------------------------------------------------------------- 1

fn analytic_oracles(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut worst = 0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=5);
        let (q, p) = (rand_gauss(&mut rng, d), rand_gauss(&mut rng, d));
        let want = kl_diag(q.loc(), q.scale(), p.loc(), p.scale());
        worst = worst.max((q.kl_divergence(&p).unwrap() - want).abs());
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        worst = worst.max((q.log_prob(&x).unwrap() - log_density(q.loc(), q.scale(), &x)).abs());
        let qt = Normal::from_plain(&q, DType::F64, &Device::Cpu).unwrap();
        let pt = Normal::from_plain(&p, DType::F64, &Device::Cpu).unwrap();
        worst = worst.max((scalar(&qt.kl(&pt).unwrap()) - want).abs());
    }
    c.check(worst <= 1e-6, || format!("KL/log_prob closed form off by {worst}"));

    let q = DiagGaussian::new(vec![0.4, -1.0], vec![0.7, 1.3]).unwrap();
    let p = DiagGaussian::new(vec![-0.2, 0.5], vec![1.1, 0.9]).unwrap();
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let x = q.sample(&mut rng);
        acc += q.log_prob(&x).unwrap() - p.log_prob(&x).unwrap();
    }
    c.close(acc / n as f64, q.kl_divergence(&p).unwrap(), 1e-2, "Monte-Carlo KL");

    let parts = [rand_gauss(&mut rng, 3), rand_gauss(&mut rng, 3), rand_gauss(&mut rng, 3)];
    let w = [0.2, 0.5, 0.3];
    let fused = fuse_weighted(&parts, &w).unwrap();
    for i in 0..3 {
        let m: f64 = (0..3).map(|k| w[k] * parts[k].loc()[i]).sum();
        let v: f64 = (0..3).map(|k| (w[k] * parts[k].scale()[i]).powi(2)).sum();
        c.close(fused.loc()[i], m, 1e-6, "fused loc");
        c.close(fused.scale()[i], v.sqrt(), 1e-6, "fused scale");
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x: f64 = (0..3)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                w[k] * (parts[k].loc()[0] + parts[k].scale()[0] * z)
            })
            .sum();
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n as f64;
    c.close(mean, fused.loc()[0], 1e-2, "Monte-Carlo fused mean");
    c.close((s2 / n as f64 - mean * mean).sqrt(), fused.scale()[0], 1e-2, "Monte-Carlo fused std");

    for _ in 0..10_000 {
        let n_slots = rng.random_range(1..=8usize);
        let nt = rng.random_range(1e-6..n_slots as f64 - 1e-6);
        let s = split_count(nt, n_slots).unwrap();
        c.close(s.iter().sum(), nt, 1e-12, "split_count conservation");
        c.check(s.iter().all(|v| (0.0..=1.0).contains(v)), || format!("split_count range {s:?}"));
        c.check(s.windows(2).all(|p| p[0] >= p[1]), || format!("split_count order {s:?}"));
        let frac = nt - nt.floor();
        if (0.05..0.95).contains(&frac) {
            let h = 1e-6;
            let sum = |x: f64| split_count(x, n_slots).unwrap().iter().sum::<f64>();
            c.close((sum(nt + h) - sum(nt - h)) / (2.0 * h), 1.0, 1e-5, "split_count finite difference");
        }
    }
    let nt = Var::new(&[2.3f64, 0.7], &Device::Cpu).unwrap();
    let grads = split_tensor(nt.as_tensor(), 4).unwrap().sum_all().unwrap().backward().unwrap();
    let g = to_vec(grads.get(nt.as_tensor()).unwrap());
    c.check(g.iter().all(|v| (v - 1.0).abs() < 1e-12), || format!("split gradient {g:?}"));

    spatial_transformer(c, &mut rng);

    for (g, sigma) in [(5usize, 0.5), (25, 0.5), (12, 0.3)] {
        let m = regularization_kernel(g, sigma, 0.0).unwrap();
        let mut worst = 0f64;
        for r in 0..g {
            for col in 0..g {
                let (x, y) = (-1.0 + 2.0 * col as f64 / (g - 1) as f64, -1.0 + 2.0 * r as f64 / (g - 1) as f64);
                let raw = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                let peak = if g % 2 == 1 {
                    1.0
                } else {
                    let h = 1.0 / (g - 1) as f64;
                    (-(2.0 * h * h) / (2.0 * sigma * sigma)).exp()
                };
                worst = worst.max((m.at(r, col) - raw / peak).abs());
            }
        }
        c.check(worst <= 1e-9, || format!("kernel grid oracle (g={g}) off by {worst}"));
    }
    let ps = [0.0, 0.1, 0.5, 1.0, 5.0, 100.0];
    let masks: Vec<_> = ps.iter().map(|&p| regularization_kernel(25, 0.5, p).unwrap()).collect();
    for pair in masks.windows(2) {
        let ok = pair[0].values.iter().zip(&pair[1].values).all(|(a, b)| b >= a && *b <= 1.0);
        c.check(ok, || format!("flattening not monotone at p={}", pair[1].flatten_p));
    }
    let lo = |m: &vtssi::geometry::RegMask| m.values.iter().cloned().fold(f64::MAX, f64::min);
    c.check(lo(&masks[5]) >= 100.0 / 101.0, || "p=100 mask not near flat".into());

    for (step, want) in [(0, 6), (29_999, 6), (30_000, 7), (59_999, 7), (60_000, 8), (10_000_000, 20)] {
        let got = curriculum_len(step, Variant::Vtssi, 20);
        c.check(got == want, || format!("vtssi curriculum at {step}: {got} != {want}"));
    }
    for v in [Variant::Air, Variant::Find, Variant::RectFind, Variant::FindMot] {
        for (step, want) in [(0, 1), (19_999, 1), (20_000, 2), (40_000, 3), (10_000_000, 20)] {
            let got = curriculum_len(step, v, 20);
            c.check(got == want, || format!("{v} curriculum at {step}: {got} != {want}"));
        }
    }
    let lr = LrSchedule::default();
    c.check(lr.at(0) == 1e-4 && lr.at(200_000) == 1e-4, || "lr plateau".into());
    for (step, factor) in [(220_000u64, 0.9f64), (240_000, 0.81), (260_000, 0.729)] {
        let (got, want) = (lr.at(step), 1e-4 * factor);
        c.check((got - want).abs() <= 1e-15 * want, || format!("lr at {step}: {got} != {want}"));
    }
    c.check(lr.at(10_000_000) == 1e-5, || format!("lr floor: {}", lr.at(10_000_000)));
}

fn bilinear(frame: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (r, col) = (y0 + dy, x0 + dx);
            if r >= 0.0 && col >= 0.0 && (r as usize) < h && (col as usize) < w {
                v += wy * wx * frame[r as usize * w + col as usize];
            }
        }
    }
    v
}

fn spatial_transformer(c: &mut Checks, rng: &mut ChaCha8Rng) {
    let dev = Device::Cpu;
    let sq: Vec<f64> = (0..100).map(|_| rng.random()).collect();
    let f = Tensor::from_vec(sq, (10, 10), &dev).unwrap();
    let id = st_extract(&f, &BoxParams::full_frame(), 10).unwrap();
    let back = st_paste(&f, &BoxParams::full_frame(), 10, 10).unwrap();
    let diff = |a: &Tensor| scalar(&(a - &f).unwrap().abs().unwrap().max_all().unwrap());
    c.check(diff(&id) <= 1e-6 && diff(&back) <= 1e-6, || "transformer identity".into());

    let (h, w, g) = (16usize, 20usize, 8usize);
    let mut worst = 0f64;
    for _ in 0..100 {
        let px: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let size = [rng.random_range(0.1..1.2), rng.random_range(0.1..1.2)];
        let pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let frame = Tensor::from_slice(&px, (h, w), &dev).unwrap();
        let out = to_vec(&st_extract(&frame, &BoxParams::new(size, pos), g).unwrap());
        for i in 0..g {
            for j in 0..g {
                let v = |k: usize| -1.0 + 2.0 * k as f64 / (g - 1) as f64;
                let x = (pos[0] + size[0] * v(j) + 1.0) / 2.0 * (w - 1) as f64;
                let y = (pos[1] + size[1] * v(i) + 1.0) / 2.0 * (h - 1) as f64;
                worst = worst.max((out[i * g + j] - bilinear(&px, h, w, x, y)).abs());
            }
        }
    }
    c.check(worst <= 1e-6, || format!("bilinear oracle off by {worst}"));

    let mut worst_rel = 0f64;
    for _ in 0..20 {
        let px: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let frames = Tensor::from_slice(&px, (1, h, w), &dev).unwrap();
        let weights = Tensor::from_vec((0..g * g).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>(), (1, g, g), &dev)
            .unwrap();
        // The tent kernel has kinks at whole pixels; keep every sample coordinate clear of them.
        let near_kink = |p: &[f64; 4]| {
            (0..g).any(|k| {
                let v = -1.0 + 2.0 * k as f64 / (g - 1) as f64;
                let x = (p[2] + p[0] * v + 1.0) / 2.0 * (w - 1) as f64;
                let y = (p[3] + p[1] * v + 1.0) / 2.0 * (h - 1) as f64;
                [x, y].iter().any(|u| (u - u.round()).abs() < 5e-3)
            })
        };
        let p0 = loop {
            let p = [
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            if !near_kink(&p) {
                break p;
            }
        };
        let loss = |p: &[f64; 4]| -> f64 {
            let s = Tensor::from_slice(&p[..2], (1, 2), &dev).unwrap();
            let q = Tensor::from_slice(&p[2..], (1, 2), &dev).unwrap();
            scalar(&(extract(&frames, &s, &q, g).unwrap() * &weights).unwrap().sum_all().unwrap())
        };
        let s = Var::from_tensor(&Tensor::from_slice(&p0[..2], (1, 2), &dev).unwrap()).unwrap();
        let q = Var::from_tensor(&Tensor::from_slice(&p0[2..], (1, 2), &dev).unwrap()).unwrap();
        let l = (extract(&frames, s.as_tensor(), q.as_tensor(), g).unwrap() * &weights)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = l.backward().unwrap();
        let mut analytic = to_vec(grads.get(s.as_tensor()).unwrap());
        analytic.extend(to_vec(grads.get(q.as_tensor()).unwrap()));
        for k in 0..4 {
            let eps = 1e-4;
            let (mut a, mut b) = (p0, p0);
            a[k] += eps;
            b[k] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            worst_rel = worst_rel.max((analytic[k] - fd).abs() / fd.abs().max(1e-3));
        }
    }
    c.check(worst_rel <= 1e-4, || format!("transformer gradient relative error {worst_rel}"));
}

// ---------------------------------------------------------------- 2

fn layer(h: usize, w: usize, sprite: &Sprite, center: [f64; 2]) -> Vec<f32> {
    let mut canvas = vec![0f32; h * w];
    let [bx, by] = sprite.bbox_center();
    render_sprite(&mut canvas, h, w, sprite, center[0] - bx, center[1] - by);
    canvas
}

/// Independent reflecting stepper over the allowed range of a bbox center.
fn reference_track(start: [f64; 2], vel: [f64; 2], sprite: &Sprite, cfg: &DataConfig) -> Vec<[f64; 2]> {
    let (lo, hi) = sprite.half_extents();
    let margin = cfg.margin_px as f64;
    let extent = [cfg.frame_hw[1], cfg.frame_hw[0]];
    let mut range = [[0.0; 2]; 2];
    for d in 0..2 {
        let top = match cfg.bounce_mode {
            BounceMode::Appearance => hi[d],
            BounceMode::BboxCorner => lo[d],
        };
        range[d] = [-margin - lo[d], (extent[d] - 1) as f64 + margin - top];
    }
    let (mut p, mut v) = (start, vel);
    let mut out = vec![p];
    for _ in 1..cfg.seq_len {
        for d in 0..2 {
            let cand = p[d] + v[d];
            if cand < range[d][0] || cand > range[d][1] {
                v[d] = -v[d];
                p[d] = (p[d] + v[d]).clamp(range[d][0], range[d][1]);
            } else {
                p[d] = cand;
            }
        }
        out.push(p);
    }
    out
}

fn data_generator(c: &mut Checks) {
    let cfg = DataConfig::default();
    c.check(gen_sequence(&cfg, 5).ok() == gen_sequence(&cfg, 5).ok(), || "sequence not deterministic".into());
    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [dirs.0.path(), dirs.1.path()] {
        c.run("save dataset", Dataset::generate(&cfg, 20).and_then(|ds| ds.save(d)));
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(dirs.0.path()).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    c.check(!names.is_empty(), || "empty dataset directory".into());
    for a in names {
        let b = dirs.1.path().join(a.file_name().unwrap());
        c.check(std::fs::read(&a).ok() == std::fs::read(&b).ok(), || format!("{} differs between runs", a.display()));
    }

    let one = DataConfig {
        min_objects: 1,
        max_objects: 2,
        ..DataConfig::default()
    };
    let [h, w] = one.frame_hw;
    let mut max_center_err = 0f64;
    for seed in 0..1000u64 {
        let (frames, ann) = gen_sequence(&one, seed).unwrap();
        let objects = sequence_objects(&one, seed).unwrap();
        c.check(objects.len() == ann.count, || format!("seq {seed}: object count"));
        for (i, (sprite, motion)) in objects.iter().enumerate() {
            let mass: f32 = sprite.pixels.iter().sum();
            for t in 0..one.seq_len {
                let l = layer(h, w, sprite, ann.centers[t][i]);
                let m: f32 = l.iter().sum();
                c.check((m - mass).abs() <= 1e-3 * mass, || format!("seq {seed} obj {i} t {t}: clipped ({m} vs {mass})"));
                if let Some((r0, r1, c0, c1)) = tight_bbox(&l, h, w) {
                    let center = [(c0 + c1) as f64 / 2.0, (r0 + r1) as f64 / 2.0];
                    let [ax, ay] = ann.centers[t][i];
                    max_center_err = max_center_err.max(((center[0] - ax).powi(2) + (center[1] - ay).powi(2)).sqrt());
                }
            }
            if let ObjectMotion::Linear { start, velocity } = motion {
                let want = reference_track(*start, *velocity, sprite, &one);
                let got: Vec<[f64; 2]> = ann.centers.iter().map(|f| f[i]).collect();
                c.check(got == want, || format!("seq {seed} obj {i}: trajectory differs from reference"));
            }
        }
        if objects.len() == 2 {
            let (a, b) = (layer(h, w, &objects[0].0, ann.centers[0][0]), layer(h, w, &objects[1].0, ann.centers[0][1]));
            c.check(!a.iter().zip(&b).any(|(x, y)| *x > 0.0 && *y > 0.0), || format!("seq {seed}: first-frame overlap"));
        }
        for t in [0, one.seq_len - 1] {
            let mut canvas = vec![0f32; h * w];
            for (i, (sprite, _)) in objects.iter().enumerate() {
                let [bx, by] = sprite.bbox_center();
                render_sprite(&mut canvas, h, w, sprite, ann.centers[t][i][0] - bx, ann.centers[t][i][1] - by);
            }
            canvas.iter_mut().for_each(|v| *v = v.min(1.0));
            c.check(canvas == frames.frame(t), || format!("seq {seed} t {t}: frame differs from its objects"));
        }
    }
    c.check(max_center_err <= 0.75, || format!("annotated centers off by {max_center_err} px"));
    c.note(format!("max center error {max_center_err:.3} px"));

    let corner = DataConfig {
        bounce_mode: BounceMode::BboxCorner,
        margin_px: 3,
        ..DataConfig::default()
    };
    for seed in 0..200u64 {
        let (_, ann) = gen_sequence(&corner, seed).unwrap();
        for (i, (sprite, motion)) in sequence_objects(&corner, seed).unwrap().iter().enumerate() {
            if let ObjectMotion::Linear { start, velocity } = motion {
                let got: Vec<[f64; 2]> = ann.centers.iter().map(|f| f[i]).collect();
                c.check(got == reference_track(*start, *velocity, sprite, &corner), || {
                    format!("corner-bounce seq {seed} obj {i}: trajectory differs")
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let s = procedural(&mut rng, 5, 9);
        let (hh, ww) = (24, 24);
        let (ox, oy) = (rng.random_range(0..10usize), rng.random_range(0..10usize));
        let mut canvas = vec![0f32; hh * ww];
        render_sprite(&mut canvas, hh, ww, &s, ox as f64, oy as f64);
        let mut ok = true;
        for r in 0..hh {
            for col in 0..ww {
                let want = if r >= oy && col >= ox && r - oy < s.h && col - ox < s.w { s.at(r - oy, col - ox) } else { 0.0 };
                ok &= canvas[r * ww + col] == want;
            }
        }
        c.check(ok, || format!("integer shift ({ox}, {oy}) is not an exact copy"));
    }
}

// ---------------------------------------------------------------- 3

fn tiny_config(variant: Variant, t: usize, k: usize, m: usize, max_objects: usize) -> VtssiConfig {
    let mut cfg = VtssiConfig::compact(variant, [24, 24], t, k, m);
    cfg.precision = Precision::F64;
    cfg.air.max_objects = max_objects;
    cfg
}

fn tiny_frames(b: usize, t: usize, max_objects: usize) -> Tensor {
    let data = DataConfig {
        frame_hw: [24, 24],
        seq_len: t,
        sprite_px: [6, 10],
        min_objects: 1,
        max_objects,
        ..DataConfig::default()
    };
    let ds = Dataset::generate(&data, b).unwrap();
    ds.batch(&(0..b).collect::<Vec<_>>(), t, DType::F64).unwrap()
}

fn scene(model: &Vtssi, x: &Tensor, seed: u64) -> SceneLatents {
    match model.forward(x, &RunOptions::train(0), &mut Noise::seeded(seed)).unwrap() {
        Forward::Scene(s) => *s,
        Forward::Frames(_) => panic!("scene variant expected"),
    }
}

fn row_at(n: &Normal, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut loc = n.loc.clone();
    let mut scale = n.scale.clone();
    for &i in idx {
        loc = loc.get(i).unwrap();
        scale = scale.get(i).unwrap();
    }
    (to_vec(&loc), to_vec(&scale))
}

fn hand_elbo(model: &Vtssi, x: &Tensor, s: &SceneLatents) -> (f64, [f64; 5]) {
    let cfg = model.config();
    let xs = to_vec(x);
    let mean = to_vec(&s.mean);
    let sl = cfg.air.sigma_l;
    let recon: f64 = xs.iter().zip(&mean).map(|(a, m)| log_density(&[*m], &[sl], &[*a])).sum();

    let (qm, qs) = row_at(&s.cnt, &[0]);
    let cp = cfg.air.cnt_prior;
    let kl_cnt = kl_diag(&qm, &qs, &[cp.loc(0)], &[cp.scale]);
    let (qm, qs) = row_at(&s.size, &[0, 0]);
    let kl_size = kl_diag(&qm, &qs, &cfg.air.size_prior_loc, &[cfg.air.size_prior_scale; 2]);
    let (qm, qs) = row_at(&s.desc, &[0, 0]);
    let d = qm.len();
    let kl_desc = kl_diag(&qm, &qs, &vec![0.0; d], &vec![1.0; d]);

    let (qm, qs) = row_at(&s.positions, &[0, 0]);
    let mut kl_pos = kl_diag(&qm, &qs, &[0.0; 2], &[1.0; 2]);
    let (qm, qs) = row_at(&s.positions, &[0, 1]);
    let mut kl_mot = 0.0;
    match &s.mot {
        None => {
            let prev = to_vec(&s.position_samples.get(0).unwrap().get(0).unwrap());
            let ps = cfg.find.prior_scale;
            kl_pos += kl_diag(&qm, &qs, &prev, &[ps; 2]);
        }
        Some(mot) => {
            let (pm, ps) = row_at(mot.pred_positions.as_ref().unwrap(), &[0, 0]);
            kl_pos += kl_diag(&qm, &qs, &pm, &ps);
            let (qm, qs) = row_at(&mot.motions, &[0, 0]);
            let md = qm.len();
            kl_mot += kl_diag(&qm, &qs, &vec![0.0; md], &vec![1.0; md]);
            let (qm, qs) = row_at(&mot.motions, &[0, 1]);
            let (pm, ps) = row_at(mot.pred_motions.as_ref().unwrap(), &[0, 0]);
            kl_mot += kl_diag(&qm, &qs, &pm, &ps);
        }
    }
    let kls = [kl_cnt, kl_size, kl_desc, kl_pos, kl_mot];
    (recon - kls.iter().sum::<f64>(), kls)
}

fn cat1(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::cat(&[a, b], 1).unwrap()
}

/// Replaces every posterior of `s` by its prior.
fn posterior_is_prior(model: &Vtssi, s: &SceneLatents) -> SceneLatents {
    let cfg = model.config();
    let (dt, dev) = (DType::F64, Device::Cpu);
    let mut s = s.clone();
    let b = s.n_ceil.len();
    let n = cfg.air.max_objects;
    s.cnt = Normal::constant(&[cfg.air.cnt_prior.loc(0)], cfg.air.cnt_prior.scale, &[b], dt, &dev).unwrap();
    s.size = Normal::constant(&cfg.air.size_prior_loc, cfg.air.size_prior_scale, &[b, n], dt, &dev).unwrap();
    s.desc = Normal::standard(&[b, n, cfg.air.desc_dim], dt, &dev).unwrap();
    let a = s.objects.len();
    let first = Normal::standard(&[a, 1, 2], dt, &dev).unwrap();
    let rest = match &s.mot {
        None => Normal::with_fixed_scale(s.position_samples.narrow(1, 0, 1).unwrap(), cfg.find.prior_scale).unwrap(),
        Some(mot) => mot.pred_positions.clone().unwrap(),
    };
    s.positions = Normal::new(cat1(&first.loc, &rest.loc), cat1(&first.scale, &rest.scale)).unwrap();
    if let Some(mot) = s.mot.as_mut() {
        let md = cfg.mot.motion_dim;
        let first = Normal::standard(&[a, 1, md], dt, &dev).unwrap();
        let pred = mot.pred_motions.clone().unwrap();
        mot.motions = Normal::new(cat1(&first.loc, &pred.loc), cat1(&first.scale, &pred.scale)).unwrap();
    }
    s
}

fn elbo_bookkeeping(c: &mut Checks) {
    let x = tiny_frames(1, 2, 1);
    for variant in [Variant::Find, Variant::Vtssi] {
        let cfg = tiny_config(variant, 2, 1, 1, 1);
        let model = Vtssi::new(&cfg, 7).unwrap();
        let s = scene(&model, &x, 3);
        c.check(s.n_ceil == [1], || format!("{variant}: expected one object"));
        let e = model.compute_elbo(&x, &Forward::Scene(Box::new(s.clone())), 0).unwrap();
        let (want, kls) = hand_elbo(&model, &x, &s);
        c.close(scalar(&e.elbo), want, 1e-5, &format!("{variant}: 2-frame ELBO"));
        let got = [&e.kl_cnt, &e.kl_size, &e.kl_desc, &e.kl_position, &e.kl_motion].map(scalar);
        for (name, (g, w)) in ["cnt", "size", "desc", "position", "motion"].iter().zip(got.iter().zip(kls)) {
            c.close(*g, w, 1e-5, &format!("{variant}: KL {name}"));
        }

        let p = posterior_is_prior(&model, &s);
        let e = model.compute_elbo(&x, &Forward::Scene(Box::new(p)), 0).unwrap();
        let kls = [&e.kl_cnt, &e.kl_size, &e.kl_desc, &e.kl_position, &e.kl_motion].map(scalar);
        c.check(kls.iter().all(|k| k.abs() < 1e-12), || format!("{variant}: posterior = prior leaves KLs {kls:?}"));
        c.close(scalar(&e.elbo), scalar(&e.recon), 1e-12, &format!("{variant}: ELBO = recon"));
    }

    use Latent::*;
    use Prior::*;
    let r = |object, time, latent, prior| KlRecord {
        seq: 0,
        object,
        time,
        latent,
        prior,
    };
    let mut golden = vec![
        r(None, None, Latent::Count, Prior::Count),
        r(Some(0), None, Latent::Size, Prior::Size),
        r(Some(0), None, Description, StandardNormal),
        r(Some(0), Some(0), Position, StandardNormal),
        r(Some(0), Some(1), Position, PreviousPosition),
        r(Some(0), Some(2), Position, PredictedPosition),
        r(Some(0), Some(3), Position, PredictedPosition),
        r(Some(0), Some(1), Motion, StandardNormal),
        r(Some(0), Some(2), Motion, PredictedMotion),
        r(Some(0), Some(3), Motion, PredictedMotion),
    ];
    golden.sort();
    c.check(expected_kl_terms(Variant::Vtssi, 4, 2, &[1]) == golden, || "vtssi golden term list".into());
    let mut golden_find = vec![
        r(None, None, Latent::Count, Prior::Count),
        r(Some(0), None, Latent::Size, Prior::Size),
        r(Some(0), None, Description, StandardNormal),
        r(Some(0), Some(0), Position, StandardNormal),
        r(Some(0), Some(1), Position, PreviousPosition),
        r(Some(0), Some(2), Position, PreviousPosition),
    ];
    golden_find.sort();
    c.check(expected_kl_terms(Variant::RectFind, 3, 2, &[1]) == golden_find, || "rect_find golden term list".into());
    let mut golden_air = vec![
        r(None, Some(0), Latent::Count, Prior::Count),
        r(Some(0), Some(0), Latent::Size, Prior::Size),
        r(Some(0), Some(0), Position, StandardNormal),
        r(Some(0), Some(0), Description, StandardNormal),
        r(None, Some(1), Latent::Count, Prior::Count),
    ];
    golden_air.sort();
    c.check(expected_kl_terms(Variant::Air, 2, 1, &[1, 0]) == golden_air, || "air golden term list".into());

    let x = tiny_frames(3, 5, 2);
    for v in Variant::ALL {
        let cfg = tiny_config(v, 5, 3, 3, 2);
        let model = Vtssi::new(&cfg, 2).unwrap();
        let fwd = model.forward(&x, &RunOptions::train(0), &mut Noise::seeded(1)).unwrap();
        let e = model.compute_elbo(&x, &fwd, 0).unwrap();
        let n_ceil = match &fwd {
            Forward::Scene(s) => s.n_ceil.clone(),
            Forward::Frames(f) => vtssi::air::ceil_counts(
                &vtssi::air::n_tilde_tensor(&f.inference.samples.cnt, cfg.air.max_objects).unwrap(),
                cfg.air.max_objects,
            )
            .unwrap(),
        };
        c.check(e.records == expected_kl_terms(v, 5, cfg.m_for(5), &n_ceil), || format!("{v}: term audit"));
    }
}

// ---------------------------------------------------------------- 4

fn state_space(c: &mut Checks) {
    let dev = Device::Cpu;
    let p0 = Tensor::new(&[[0.25f64, -0.5], [-0.75, 0.125]], &dev).unwrap();
    let m0 = Tensor::new(&[[0.0625f64, -0.03125, 0.5, 0.25], [-0.125, 0.25, 0.0, 1.0]], &dev).unwrap();
    let (track, _) = rollout(&ConstantVelocity { scale: 0.1 }, &p0, &m0, 10, true, &mut Sampler::Mode).unwrap();
    let got = track.to_vec3::<f64>().unwrap();
    let (p, v) = (p0.to_vec2::<f64>().unwrap(), m0.to_vec2::<f64>().unwrap());
    for a in 0..2 {
        for k in 0..10 {
            for d in 0..2 {
                let want = p[a][d] + (k + 1) as f64 * v[a][d];
                c.check(got[a][k][d] == want, || format!("rollout obj {a} step {k}: {} != {want}", got[a][k][d]));
            }
        }
    }

    let x = tiny_frames(2, 5, 2);
    let cfg = tiny_config(Variant::Vtssi, 5, 3, 3, 2);
    let run = || {
        let model = Vtssi::new(&cfg, 4).unwrap();
        model.predict(&x, 9, RectMode::Soft, None).unwrap()
    };
    let (a, b) = (run(), run());
    let same = a.iter().zip(&b).all(|(p, q)| {
        p.tracks == q.tracks && p.frames == q.frames && p.n_tilde == q.n_tilde && p.counts == q.counts
    });
    c.check(same && a.len() == 2, || "mode prediction differs between runs".into());

    let mut model = Vtssi::new(&cfg, 4).unwrap();
    c.run("set transition", model.set_transition(Box::new(ConstantVelocity { scale: 0.1 })));
    let pred = model.predict(&x, 9, RectMode::Soft, None).unwrap();
    let mut worst = 0f64;
    for p in &pred {
        for tr in &p.tracks {
            let d: Vec<[f64; 2]> = (5..9).map(|t| [tr[t][0] - tr[t - 1][0], tr[t][1] - tr[t - 1][1]]).collect();
            for w in d.windows(2) {
                worst = worst.max((w[1][0] - w[0][0]).abs()).max((w[1][1] - w[0][1]).abs());
            }
        }
    }
    c.check(worst <= 1e-12, || format!("generated steps under a linear stub drift by {worst}"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (pr, inf) = (rand_gauss(&mut rng, 3), rand_gauss(&mut rng, 3));
        c.check(fuse_step(&pr, &inf, 1.0).unwrap() == pr, || "fuse_step(w=1) is not the prediction".into());
        c.check(fuse_step(&pr, &inf, 0.0).unwrap() == inf, || "fuse_step(w=0) is not the inference".into());
    }
}

// ---------------------------------------------------------------- 5

fn exhaustive(gt: &[Vec<[f64; 2]>], inf: &[Vec<[f64; 2]>], prefix: usize) -> (f64, Vec<(usize, usize)>) {
    let cost = |g: usize, i: usize| -> f64 {
        (0..prefix)
            .map(|t| ((gt[g][t][0] - inf[i][t][0]).powi(2) + (gt[g][t][1] - inf[i][t][1]).powi(2)).sqrt())
            .sum()
    };
    let k = gt.len().min(inf.len());
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    // Every injective pairing of size k, as sorted pair lists.
    fn rec(
        g: usize,
        gt_n: usize,
        inf_used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        k: usize,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if pairs.len() == k {
            out.push(pairs.clone());
            return;
        }
        if g == gt_n {
            return;
        }
        if gt_n - g > k - pairs.len() {
            rec(g + 1, gt_n, inf_used, pairs, k, out);
        }
        for i in 0..inf_used.len() {
            if !inf_used[i] {
                inf_used[i] = true;
                pairs.push((g, i));
                rec(g + 1, gt_n, inf_used, pairs, k, out);
                pairs.pop();
                inf_used[i] = false;
            }
        }
    }
    let mut all = Vec::new();
    rec(0, gt.len(), &mut vec![false; inf.len()], &mut Vec::new(), k, &mut all);
    for pairs in all {
        let c: f64 = pairs.iter().map(|&(g, i)| cost(g, i)).sum();
        let better = match &best {
            None => true,
            Some((b, bp)) => c < *b || (c == *b && pairs < *bp),
        };
        if better {
            best = Some((c, pairs));
        }
    }
    best.unwrap_or((0.0, Vec::new()))
}

fn matching(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tracks = |rng: &mut ChaCha8Rng, n: usize, t: usize, grid: bool| -> Vec<Vec<[f64; 2]>> {
        (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| {
                        if grid {
                            [rng.random_range(0..3) as f64, rng.random_range(0..3) as f64]
                        } else {
                            [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)]
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let mut mismatches = 0;
    for case in 0..10_000 {
        let t = rng.random_range(1..=4);
        let grid = case % 4 == 0;
        let (ng, ni) = (rng.random_range(0..=3), rng.random_range(0..=3));
        let gt = tracks(&mut rng, ng, t, grid);
        let inf = tracks(&mut rng, ni, t, grid);
        let prefix = rng.random_range(1..=t);
        let got = match_objects(&gt, &inf, prefix);
        let (_, want) = exhaustive(&gt, &inf, prefix);
        if got != want {
            mismatches += 1;
            if mismatches <= 3 {
                c.failures.push(format!("case {case}: {got:?} != {want:?}"));
            }
        }
    }
    c.check(mismatches == 0, || format!("{mismatches} matching mismatches"));

    let gt = vec![vec![[0.0, 0.0]; 5], vec![[10.0, 10.0]; 5]];
    let inf = vec![vec![[13.0, 14.0]; 5], vec![[3.0, 4.0]; 5]];
    let pairs = match_objects(&gt, &inf, 5);
    c.check(pairs == [(0, 1), (1, 0)], || format!("3-4-5 matching {pairs:?}"));
    let errs = position_errors(&gt, &inf, &pairs, 5);
    c.check(errs.iter().all(|e| *e == 5.0), || format!("3-4-5 errors {errs:?}"));
    c.check(median(&errs) == Some(5.0), || "3-4-5 median".into());
}

// ---------------------------------------------------------------- 6

const E2E_VARIANTS: [Variant; 3] = [Variant::Air, Variant::Find, Variant::Vtssi];

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

fn retrain(c: &mut Checks) {
    let data = match Dataset::generate(&toy::data_config(0), toy::TRAIN_SEQUENCES) {
        Ok(d) => d,
        Err(e) => return c.failures.push(format!("training data: {e}")),
    };
    std::fs::create_dir_all(fixture_dir()).unwrap();
    for v in E2E_VARIANTS {
        let run = tempfile::tempdir().unwrap();
        let cfg = toy::train_config(v, toy::e2e_steps(v), 0);
        match train(&data, &toy::model_config(v), &cfg, run.path(), None, |_| ()) {
            Ok(files) => {
                std::fs::copy(&files.last, fixture_dir().join(format!("{}.ckpt", v.name()))).unwrap();
                std::fs::copy(&files.metrics, fixture_dir().join(format!("{}.metrics.jsonl", v.name()))).unwrap();
            }
            Err(e) => c.failures.push(format!("training {v}: {e}")),
        }
    }
}

fn end_to_end(c: &mut Checks) {
    if std::env::var("VTSSI_E2E_RETRAIN").is_ok_and(|v| v == "1") {
        retrain(c);
    }
    let test = toy::test_data().unwrap();
    let mut reports: Vec<EvalReport> = Vec::new();
    for v in E2E_VARIANTS {
        let path = fixture_dir().join(format!("{}.ckpt", v.name()));
        let ck = match Checkpoint::load(&path) {
            Ok(ck) => ck,
            Err(e) => {
                c.failures.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let model = ck.restore().unwrap();
        match evaluate(&model, &test, ck.global_step, &toy::eval_options()) {
            Ok(r) => {
                c.note(format!(
                    "{v}@{}: count {:.3}, inference {:.2} px, prediction@6 {:.2} px",
                    r.checkpoint_step,
                    r.count_accuracy,
                    r.median_inference_error.unwrap_or(f64::NAN),
                    r.median_prediction_at(6).unwrap_or(f64::NAN)
                ));
                reports.push(r);
            }
            Err(e) => c.failures.push(format!("evaluating {v}: {e}")),
        }
    }
    if let Some(r) = reports.iter().find(|r| r.variant == Variant::Vtssi) {
        c.check(r.count_accuracy >= 0.9, || format!("(a) count accuracy {:.3} < 0.9", r.count_accuracy));
        let inf = r.median_inference_error.unwrap_or(f64::INFINITY);
        c.check(inf <= 3.0, || format!("(b) median inference error {inf:.2} px > 3"));
        let pred = r.median_prediction_at(6).unwrap_or(f64::INFINITY);
        c.check(pred <= 8.0, || format!("(c) median prediction error at 6 steps {pred:.2} px > 8"));
    } else {
        c.failures.push("no vtssi report".into());
    }
    match read_metrics(&fixture_dir().join("vtssi.metrics.jsonl")) {
        Ok(m) => {
            let early = window_mean(&m, 500, 1_001, |r| r.elbo);
            let late = window_mean(&m, 9_500, 10_001, |r| r.elbo);
            match (early, late) {
                (Some(a), Some(b)) => {
                    c.note(format!("ELBO moving average {a:.1} at 1k, {b:.1} at 10k"));
                    c.check(b > a, || format!("(d) ELBO average at 10k ({b:.1}) not above 1k ({a:.1})"));
                }
                _ => c.failures.push("(d) metrics log does not reach step 10k".into()),
            }
        }
        Err(e) => c.failures.push(format!("(d) metrics: {e}")),
    }
    if let Some(air) = reports.iter().find(|r| r.variant == Variant::Air) {
        let base = air.median_inference_error.unwrap_or(f64::INFINITY);
        for r in reports.iter().filter(|r| r.variant != Variant::Air) {
            let e = r.median_inference_error.unwrap_or(f64::INFINITY);
            c.check(e < base, || format!("{} inference error {e:.2} not below air {base:.2}", r.variant));
        }
    }
}

// ---------------------------------------------------------------- 7

fn ablation_wiring(c: &mut Checks) {
    let data = Dataset::generate(&toy::data_config(11), 64).unwrap();
    let test = Dataset::generate(&toy::data_config(12), 8).unwrap();
    for v in Variant::ALL {
        let mut cfg = toy::train_config(v, 200, 1);
        cfg.batch_size = 4;
        let model = Vtssi::new(&toy::model_config(v), 1).unwrap();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut finite = true;
        for _ in 0..200 {
            match trainer.step(&data) {
                Ok(r) => finite &= r.elbo.is_finite() && r.grad_norm.is_finite(),
                Err(e) => {
                    c.failures.push(format!("{v}: {e}"));
                    finite = false;
                    break;
                }
            }
        }
        c.check(finite, || format!("{v}: non-finite values during smoke training"));
        let opts = EvalOptions {
            batch_size: 8,
            ..toy::eval_options()
        };
        let model = trainer.into_model();
        match evaluate(&model, &test, 200, &opts) {
            Ok(r) => {
                c.run(&format!("{v}: report"), r.validate());
                let json = serde_json::to_string(&r).unwrap();
                let back: Result<EvalReport, _> = serde_json::from_str(&json);
                c.check(back.is_ok_and(|b| b == r), || format!("{v}: report does not round-trip"));
            }
            Err(e) => c.failures.push(format!("{v}: evaluation: {e}")),
        }
    }
}

type Criterion = (u32, &'static str, Duration, fn(&mut Checks));

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 7] = [
        (1, "analytic oracles", Duration::from_secs(120), analytic_oracles),
        (2, "data generator", Duration::from_secs(180), data_generator),
        (3, "ELBO bookkeeping", Duration::from_secs(60), elbo_bookkeeping),
        (4, "state-space machinery", Duration::from_secs(60), state_space),
        (5, "matching and metrics", Duration::from_secs(60), matching),
        (6, "reduced-scale end-to-end", Duration::MAX, end_to_end),
        (7, "ablation wiring", Duration::MAX, ablation_wiring),
    ];
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let mut c = Checks::default();
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut c)));
        let elapsed = t0.elapsed();
        if let Err(p) = outcome {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            c.failures.push(format!("panicked: {msg}"));
        }
        c.check(elapsed <= budget, || format!("took {elapsed:.1?}, budget {budget:.0?}"));
        let status = if c.failures.is_empty() { "PASS" } else { "FAIL" };
        println!("criterion {n} {name:<26} {status} ({:.1}s)", elapsed.as_secs_f64());
        for note in &c.notes {
            println!("    {note}");
        }
        for f in c.failures.iter().take(10) {
            println!("    - {f}");
        }
        if c.failures.len() > 10 {
            println!("    ... {} more", c.failures.len() - 10);
        }
        failed += (!c.failures.is_empty()) as usize;
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
