//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p opir-core --test acceptance` runs everything (about half an
//! hour on one core, dominated by criteria 7, 10 and 11). Pass criterion
//! numbers to run a subset: `cargo test -p opir-core --test acceptance -- 1 4 9`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use opir::ablate::{ablate, parse_variants, AblationReport, TABLE_VARIANTS};
use opir::bench::bench_case;
use opir::dataset::{generate, GenConfig, TaskSelection, MANIFEST_NAME};
use opir::degrade::{
    apply_haze, apply_rain, apply_rain_attenuation, apply_snow, oracle_inverse_masked, to_affine, DegradationKind,
    DegradationMaps, HazeParams, RainParams, SnowParams, Transmission, DEFAULT_GAIN_FLOOR,
};
use opir::fft::{fft2, ifft2};
use opir::kernel::{
    apply_multiscale_fast, apply_multiscale_naive, gather_samples, softmax_fusion, uncertainty_map, KernelField,
    ScaleSet,
};
use opir::losses::{charbonnier, edge_loss, freq_loss, total_loss, LossWeights};
use opir::metrics::{psnr, ssim};
use opir::model::{Model, ModelConfig, Variant};
use opir::param::Parameters;
use opir::procedural::{depth_map, texture};
use opir::trainer::{mean_present, train, TrainConfig};
use opir::{Image, Rng};

// Tolerances and budgets, one block per criterion.
const C1_CASES: usize = 100;
const C1_REL_TOL: f64 = 1e-5;
const C1_MAX_SECS: f64 = 30.0;
const C2_TOL: f64 = 1e-6;
const C3_IDENTITY_TOL: f64 = 1e-7;
const C3_SCALING_REL_TOL: f64 = 1e-7;
const C4_STEP: f64 = 1e-4;
const C4_REL_TOL: f64 = 1e-3;
const C4_MIN_PARAMS: usize = 100;
const C4_MAX_SECS: f64 = 300.0;
const C5_PAIRS: usize = 50;
const C5_FORWARD_TOL: f64 = 1e-6;
const C5_INVERSE_TOL: f64 = 1e-5;
const C6_DFT_TOL: f64 = 1e-5;
const C6_PARSEVAL_REL_TOL: f64 = 1e-4;
const C6_ROUND_TRIP_TOL: f64 = 1e-5;
const C7_MIN_GAIN_DB: f64 = 3.0;
const C7_MAX_SECS: f64 = 1800.0;
const C8_SIZE: usize = 256;
const C8_REPS: usize = 5;
const C8_MAX_FAST_RATIO: f64 = 2.0;
const C8_MIN_NAIVE_RATIO: f64 = 4.0;
const C8_MAX_SECS: f64 = 300.0;
const C9_PSNR_TOL: f64 = 1e-6;
const C9_SSIM_TOL: f64 = 1e-4;
const C10_SEEDS: [u64; 3] = [1, 2, 3];
const C10_MIN_WINS: usize = 2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Artifacts shared between the training criteria and the determinism check.
#[derive(Default)]
struct Shared {
    c7_run: Option<(TrainConfig, PathBuf)>,
    c10_run: Option<(TrainConfig, Vec<Variant>, PathBuf)>,
}

fn main() {
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let work = tempfile::tempdir().expect("temp dir");
    let mut shared = Shared::default();
    type Criterion = fn(&Path, &mut Shared) -> Verdict;
    let criteria: [(usize, &str, Criterion); 11] = [
        (1, "fast/naive operator equivalence", c1),
        (2, "identity at init", c2),
        (3, "uncertainty map", c3),
        (4, "gradient correctness", c4),
        (5, "degradation oracles", c5),
        (6, "fft correctness", c6),
        (7, "desk-scale training efficacy", c7),
        (8, "scale-magnitude independence", c8),
        (9, "metric fidelity", c9),
        (10, "ablation harness", c10),
        (11, "determinism", c11),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(|| f(work.path(), &mut shared)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                verdict(false, format!("panicked: {msg}"))
            });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

fn rand_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> Image<f64> {
    Image::from_fn(h, w, c, |_, _, _| rng.uniform())
}

fn c1(_: &Path, _: &mut Shared) -> Verdict {
    let t = Instant::now();
    let mut rng = Rng::new(101);
    let pool = [1usize, 2, 3, 4, 8];
    let mut worst = 0.0f64;
    for _ in 0..C1_CASES {
        let (h, w, c) = (3 + rng.below(62), 3 + rng.below(62), 1 + rng.below(3));
        let mut scales: Vec<usize> = pool.iter().copied().filter(|_| rng.coin(0.5)).collect();
        if scales.is_empty() {
            scales.push(pool[rng.below(pool.len())]);
        }
        let scales = ScaleSet::new(scales).unwrap();
        let img = Image::<f32>::from_fn(h, w, c, |_, _, _| rng.uniform() as f32);
        let k = KernelField::from_fn(h, w, |_, _, _| rng.range(-1.0, 1.0) as f32);
        let logits = Image::<f32>::from_fn(h, w, scales.len(), |_, _, _| (2.0 * rng.normal()) as f32);
        let alpha = softmax_fusion(&logits).unwrap();
        let fast = apply_multiscale_fast(&gather_samples(&img, &scales).unwrap(), &k, &alpha).unwrap();
        let naive = apply_multiscale_naive(&img, &k, &scales, &alpha).unwrap();
        let rel = fast.max_abs_diff(&naive) / naive.max_abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= C1_REL_TOL && secs < C1_MAX_SECS,
        format!("{C1_CASES} cases, max relative L-inf {worst:.2e} (tol {C1_REL_TOL:e}), {secs:.1}s (< {C1_MAX_SECS}s)"),
    )
}

fn c2(_: &Path, _: &mut Shared) -> Verdict {
    let mut rng = Rng::new(202);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for name in ["full", "one-stage", "no-um", "no-tam", "no-multiscale"] {
        let config = ModelConfig {
            scales: ScaleSet::parse("1,2,4").unwrap(),
            variant: Variant::parse(name).unwrap(),
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(config, 7 + runs as u64).unwrap();
        for (h, w) in [(8, 8), (10, 14), (33, 17), (64, 64)] {
            let x = rand_image(h, w, 3, &mut rng).cast::<f32>();
            for task in 0..3 {
                worst = worst.max(model.restore(&x, task).unwrap().max_abs_diff(&x));
                runs += 1;
            }
        }
    }
    verdict(worst <= C2_TOL, format!("{runs} restorations, max abs error {worst:.2e} (tol {C2_TOL:e})"))
}

fn c3(_: &Path, _: &mut Shared) -> Verdict {
    let id = uncertainty_map(&KernelField::<f64>::identity(9, 7));
    let id_err = id.scores().iter().map(|v| (v - 1.0 / 9.0).abs()).fold(0.0, f64::max);
    let id32 = uncertainty_map(&KernelField::<f32>::identity(5, 5));
    let id32_err = id32.scores().iter().map(|&v| (v as f64 - 1.0 / 9.0).abs()).fold(0.0, f64::max);

    let mut rng = Rng::new(303);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (1 + rng.below(20), 1 + rng.below(20));
        let k = KernelField::<f64>::from_fn(h, w, |_, _, _| rng.range(-2.0, 2.0));
        let c = rng.range(-5.0, 5.0);
        let base = uncertainty_map(&k);
        let scaled = uncertainty_map(&k.map(|v| c * v));
        for (a, b) in scaled.scores().iter().zip(base.scores()) {
            let want = c.abs() * b;
            worst = worst.max((a - want).abs() / want.abs().max(1e-300));
        }
        // Direct definition: mean absolute tap.
        for r in 0..h {
            for col in 0..w {
                let direct = k.taps(r, col).iter().map(|v| v.abs()).sum::<f64>() / 9.0;
                worst = worst.max((base.at(r, col) - direct).abs() / direct);
            }
        }
    }
    let pass = id_err <= C3_IDENTITY_TOL && id32_err <= C3_IDENTITY_TOL && worst <= C3_SCALING_REL_TOL;
    verdict(
        pass,
        format!(
            "identity |UM-1/9| f64 {id_err:.1e} f32 {id32_err:.1e} (tol {C3_IDENTITY_TOL:e}); \
             |UM(cK)-|c|UM(K)| rel {worst:.1e} (tol {C3_SCALING_REL_TOL:e})"
        ),
    )
}

/// Relative error with a small floor for near-zero gradients.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn c4(_: &Path, _: &mut Shared) -> Verdict {
    let t = Instant::now();
    let mut rng = Rng::new(404);
    let config = ModelConfig {
        image_channels: 1,
        base_width: 4,
        emb_dim: 2,
        tam_hidden: 4,
        num_tasks: 3,
        scales: ScaleSet::parse("1,2").unwrap(),
        variant: Variant::FULL,
    };
    let mut model = Model::<f64>::new(config, 44).unwrap();
    // Move the zero-initialized heads off zero so every path carries gradient.
    for (name, t) in model.tensors_mut() {
        if name.contains("head") || name.contains("tam.w2") || name.contains("tam.b2") {
            t.data.iter_mut().for_each(|v| *v = rng.range(-0.3, 0.3));
        }
    }
    let x = rand_image(8, 8, 1, &mut rng);
    let target = rand_image(8, 8, 1, &mut rng);
    let w = LossWeights::default();
    let task = 2;
    let loss_of = |m: &Model<f64>| {
        let pass = m.forward(&x, task).unwrap();
        total_loss(&[pass.j1(), pass.j2().unwrap()], &target, &w).unwrap().total
    };
    let pass = model.forward(&x, task).unwrap();
    let l = total_loss(&[pass.j1(), pass.j2().unwrap()], &target, &w).unwrap();
    let grads = model.backward(pass, &l.grads[0], Some(&l.grads[1])).unwrap();

    let names: Vec<String> = model.tensors().iter().map(|(n, _)| n.clone()).collect();
    let groups: [(&str, fn(&str) -> bool); 4] = [
        ("tam", |n| n.contains("tam.") || n.starts_with("embeddings")),
        ("kpn", |n| n.contains(".net.") && !n.contains("head")),
        ("kernel-head", |n| n.contains("kernel_head")),
        ("fusion", |n| n.contains("fusion_head")),
    ];
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (group, member) in groups {
        let idx: Vec<usize> = (0..names.len()).filter(|&i| member(&names[i])).collect();
        for _ in 0..30 {
            let ti = idx[rng.below(idx.len())];
            let i = rng.below(model.tensors()[ti].1.len());
            let mut mp = model.clone();
            mp.tensors_mut()[ti].1.data[i] += C4_STEP;
            let mut mm = model.clone();
            mm.tensors_mut()[ti].1.data[i] -= C4_STEP;
            let fd = (loss_of(&mp) - loss_of(&mm)) / (2.0 * C4_STEP);
            let an = grads.tensors()[ti].1.data[i];
            let e = rel_err(fd, an);
            worst = worst.max(e);
            if e > C4_REL_TOL {
                failures.push(format!("{group} {}[{i}] fd {fd:e} an {an:e}", names[ti]));
            }
            checked += 1;
        }
    }

    // Each loss term against its own input gradient.
    let y = rand_image(8, 8, 1, &mut rng);
    type LossFn = fn(&Image<f64>, &Image<f64>) -> (f64, Image<f64>);
    let terms: [(&str, LossFn); 3] = [
        ("charbonnier", |a, b| charbonnier(a, b, 1e-3).unwrap()),
        ("edge", |a, b| edge_loss(a, b, 1e-3).unwrap()),
        ("freq", |a, b| freq_loss(a, b).unwrap()),
    ];
    for (name, f) in terms {
        let (_, g) = f(&x, &y);
        for _ in 0..10 {
            let i = rng.below(x.len());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += C4_STEP;
            xm.data_mut()[i] -= C4_STEP;
            let fd = (f(&xp, &y).0 - f(&xm, &y).0) / (2.0 * C4_STEP);
            let e = rel_err(fd, g.data()[i]);
            worst = worst.max(e);
            if e > C4_REL_TOL {
                failures.push(format!("{name}[{i}] fd {fd:e} an {:e}", g.data()[i]));
            }
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        failures.is_empty() && checked >= C4_MIN_PARAMS && secs < C4_MAX_SECS,
        format!(
            "{checked} checks (120 parameters over tam/kpn/kernel-head/fusion, 30 loss inputs), max rel err {worst:.2e} \
             (tol {C4_REL_TOL:e}), {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join("; ")) }
        ),
    )
}

fn c5(_: &Path, _: &mut Shared) -> Verdict {
    let mut rng = Rng::new(505);
    let (mut fwd, mut inv) = (0.0f64, 0.0f64);
    let mut pairs = 0;
    for kind in DegradationKind::ALL {
        for i in 0..C5_PAIRS {
            let (h, w) = (8 + rng.below(41), 8 + rng.below(41));
            let clean = texture::<f64>(h, w, 3, &mut rng);
            let (degraded, maps) = match kind {
                DegradationKind::Rain => {
                    let p = RainParams { num_streaks: 5 + rng.below(60), seed: rng.next_u64(), ..RainParams::default() };
                    if i % 2 == 0 {
                        let (img, streaks) = apply_rain(&clean, &p).unwrap();
                        (img, DegradationMaps::Rain { streaks: streaks.channel(0).unwrap() })
                    } else {
                        let (img, gain) = apply_rain_attenuation(&clean, &p, rng.range(0.5, 1.0), 0.5).unwrap();
                        (img, DegradationMaps::RainGain { gain: gain.channel(0).unwrap() })
                    }
                }
                DegradationKind::Snow => {
                    let p = SnowParams { density: rng.range(0.02, 0.2), seed: rng.next_u64(), ..SnowParams::default() };
                    let (img, mask, particles) = apply_snow(&clean, &p).unwrap();
                    (img, DegradationMaps::Snow { mask: mask.channel(0).unwrap(), particles: particles.channel(0).unwrap() })
                }
                DegradationKind::Haze => {
                    let airlight = vec![rng.range(0.6, 1.0), rng.range(0.6, 1.0), rng.range(0.6, 1.0)];
                    let depth = depth_map::<f64>(h, w, rng.range(0.5, 3.0), &mut rng);
                    let p = HazeParams {
                        atmospheric_light: airlight.clone(),
                        transmission: Transmission::Depth { beta: rng.range(0.2, 2.0), depth },
                        t_min: 0.05,
                    };
                    let (img, t) = apply_haze(&clean, &p).unwrap();
                    (img, DegradationMaps::Haze { transmission: t, airlight })
                }
            };
            let a = to_affine(kind, &maps, 3).unwrap();
            fwd = fwd.max(a.apply(&clean).unwrap().max_abs_diff(&degraded));
            let (rec, valid) = oracle_inverse_masked(&a, &degraded, DEFAULT_GAIN_FLOOR).unwrap();
            for ((r, j), ok) in rec.data().iter().zip(clean.data()).zip(valid) {
                if ok {
                    inv = inv.max((r - j).abs());
                }
            }
            pairs += 1;
        }
    }
    verdict(
        fwd <= C5_FORWARD_TOL && inv <= C5_INVERSE_TOL,
        format!(
            "{pairs} pairs (f64): max |g*J+b-I| {fwd:.1e} (tol {C5_FORWARD_TOL:e}), \
             max recovery error {inv:.1e} where |g| >= {DEFAULT_GAIN_FLOOR:e} (tol {C5_INVERSE_TOL:e})"
        ),
    )
}

/// Direct O(N^2) DFT of one channel, in f64.
fn naive_dft(img: &Image<f32>, ch: usize) -> Vec<(f64, f64)> {
    let (h, w, _) = img.dims();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let phase = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    let x = img.at(r, c, ch) as f64;
                    re += x * phase.cos();
                    im += x * phase.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

fn c6(_: &Path, _: &mut Shared) -> Verdict {
    let mut rng = Rng::new(606);
    let (mut dft, mut parseval, mut trip) = (0.0f64, 0.0f64, 0.0f64);
    for (h, w, c) in [(8, 8, 1), (8, 8, 3), (8, 8, 2), (16, 8, 1)] {
        for _ in 0..5 {
            let x = Image::<f32>::from_fn(h, w, c, |_, _, _| rng.range(-1.0, 1.0) as f32);
            let s = fft2(&x).unwrap();
            for ch in 0..c {
                let want = naive_dft(&x, ch);
                let mut energy_x = 0.0;
                let mut energy_s = 0.0;
                for (i, (re, im)) in want.iter().enumerate() {
                    let k = s.index(ch, i / w, i % w);
                    dft = dft.max((s.re[k] as f64 - re).abs()).max((s.im[k] as f64 - im).abs());
                    energy_s += (s.re[k] as f64).powi(2) + (s.im[k] as f64).powi(2);
                }
                for r in 0..h {
                    for col in 0..w {
                        energy_x += (x.at(r, col, ch) as f64).powi(2);
                    }
                }
                let n = (h * w) as f64;
                parseval = parseval.max((energy_s / n - energy_x).abs() / energy_x);
            }
            trip = trip.max(ifft2(&s).unwrap().max_abs_diff(&x));
        }
    }
    verdict(
        dft <= C6_DFT_TOL && parseval <= C6_PARSEVAL_REL_TOL && trip <= C6_ROUND_TRIP_TOL,
        format!(
            "f32 transform: vs naive DFT {dft:.1e} (tol {C6_DFT_TOL:e}), Parseval rel {parseval:.1e} \
             (tol {C6_PARSEVAL_REL_TOL:e}), round trip {trip:.1e} (tol {C6_ROUND_TRIP_TOL:e})"
        ),
    )
}

fn c7_config(root: &Path, out: &str) -> TrainConfig {
    let text = format!(
        "total_steps = 2000\nbatch_size = 4\npatch_size = 64\nseed = 17\nlog_every = 100\nprobe_count = 20\n\
         checkpoint_every = 1000\nbase_width = 8\nemb_dim = 16\ntam_hidden = 16\nscales = 1,2,4\n\
         out_dir = {out}\ntask.rain = c7data/{MANIFEST_NAME}\n"
    );
    TrainConfig::parse(&text, root).unwrap()
}

fn c7_data(root: &Path) {
    let data = root.join("c7data");
    if !data.join(MANIFEST_NAME).exists() {
        let g = GenConfig {
            task: TaskSelection::One(DegradationKind::Rain),
            count: 200,
            height: 64,
            width: 64,
            seed: 70,
            gain_only: true,
            clean_dir: None,
        };
        generate(&g, &data).unwrap();
    }
}

fn c7(root: &Path, shared: &mut Shared) -> Verdict {
    let t = Instant::now();
    c7_data(root);
    let cfg = c7_config(root, "c7run");
    let out = train(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (before, after) = (mean_present(&out.input_probe).unwrap(), mean_present(&out.final_probe).unwrap());
    shared.c7_run = Some((cfg, out.final_checkpoint.parent().unwrap().to_path_buf()));
    let gain = after - before;
    verdict(
        gain >= C7_MIN_GAIN_DB && secs < C7_MAX_SECS,
        format!(
            "200 gain-only rain 64x64, 2000 steps x batch 4, 20 probe images: {before:.2} -> {after:.2} dB \
             ({gain:+.2} dB, need >= {C7_MIN_GAIN_DB}), {secs:.0}s"
        ),
    )
}

fn c8(_: &Path, _: &mut Shared) -> Verdict {
    let t = Instant::now();
    let small = ScaleSet::parse("1,2,4").unwrap();
    let large = ScaleSet::parse("1,2,16").unwrap();
    let a = bench_case(C8_SIZE, C8_SIZE, &small, C8_REPS, 8).unwrap();
    let b = bench_case(C8_SIZE, C8_SIZE, &large, C8_REPS, 8).unwrap();
    let fast_ratio = b.fast_ms / a.fast_ms;
    let naive_ratio = b.naive_ms / a.naive_ms;
    let secs = t.elapsed().as_secs_f64();
    let pass = (1.0 / C8_MAX_FAST_RATIO..=C8_MAX_FAST_RATIO).contains(&fast_ratio)
        && naive_ratio >= C8_MIN_NAIVE_RATIO
        && secs < C8_MAX_SECS;
    verdict(
        pass,
        format!(
            "256x256 median of {C8_REPS}: fast {:.1} -> {:.1} ms (x{fast_ratio:.2}, need within {C8_MAX_FAST_RATIO}x), \
             naive {:.0} -> {:.0} ms (x{naive_ratio:.1}, need >= {C8_MIN_NAIVE_RATIO}), max diff {:.1e}, {secs:.0}s",
            a.fast_ms,
            b.fast_ms,
            a.naive_ms,
            b.naive_ms,
            a.max_abs_diff.max(b.max_abs_diff)
        ),
    )
}

/// Reference PSNR straight from the definition.
fn oracle_psnr(x: &Image<f64>, y: &Image<f64>) -> f64 {
    let n = x.len() as f64;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    10.0 * (1.0 / mse).log10()
}

/// Reference SSIM: explicit 2-D Gaussian window, two-pass weighted moments at
/// every fully interior window, averaged over windows then channels.
fn oracle_ssim(x: &Image<f64>, y: &Image<f64>) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; N]; N];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w, ch) = x.dims();
    let mut total = 0.0;
    for c in 0..ch {
        let mut sum = 0.0;
        let mut count = 0;
        for r0 in 0..=h - N {
            for q0 in 0..=w - N {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let g = win[i][j] / z;
                        mx += g * x.at(r0 + i, q0 + j, c);
                        my += g * y.at(r0 + i, q0 + j, c);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let g = win[i][j] / z;
                        let (dx, dy) = (x.at(r0 + i, q0 + j, c) - mx, y.at(r0 + i, q0 + j, c) - my);
                        vx += g * dx * dx;
                        vy += g * dy * dy;
                        cov += g * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / ch as f64
}

/// Small LCG so the fixed pairs do not depend on the library's generator.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn fixed_pairs() -> Vec<(&'static str, Image<f64>, Image<f64>)> {
    let mut g = Lcg(2024);
    let ramp = Image::from_fn(16, 16, 3, |r, c, ch| 0.05 * ch as f64 + 0.03 * r as f64 + 0.02 * c as f64);
    let shifted = ramp.map(|v| v + 0.1);
    let waves = Image::from_fn(24, 24, 3, |r, c, ch| {
        0.5 + 0.3 * ((r as f64 * 0.7 + ch as f64).sin() * (c as f64 * 0.4).cos())
    });
    let noisy = {
        let mut n = waves.clone();
        n.data_mut().iter_mut().for_each(|v| *v += 0.05 * (g.next() - 0.5));
        n
    };
    let checker = Image::from_fn(16, 20, 1, |r, c, _| if (r / 2 + c / 2) % 2 == 0 { 0.9 } else { 0.1 });
    let blurred = Image::from_fn(16, 20, 1, |r, c, _| {
        let mut s = 0.0;
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            s += checker.at_clamped(r as isize + dr, c as isize + dc, 0);
        }
        s / 4.0
    });
    let tex = Image::from_fn(20, 20, 3, |r, c, ch| 0.5 + 0.4 * ((r * 3 + c * 5 + ch * 7) as f64 * 0.37).sin());
    let inverted = tex.map(|v| 1.0 - v);
    let a = Image::from_fn(12, 32, 3, |_, _, _| g.next());
    let b = Image::from_fn(12, 32, 3, |_, _, _| g.next());
    vec![
        ("ramp+0.1", ramp, shifted),
        ("waves/noise", waves, noisy),
        ("checker/blur", checker, blurred),
        ("texture/inverse", tex, inverted),
        ("random/random", a, b),
    ]
}

/// Oracle outputs for `fixed_pairs`, computed once and frozen.
const FROZEN: [(f64, f64); 5] = [
    (20.0000000000, 0.9763683000),
    (36.8244919572, 0.9940401988),
    (9.5663772198, 0.4028608224),
    (4.9486690129, -0.9887947754),
    (7.9300891711, 0.1142945650),
];

fn c9(_: &Path, _: &mut Shared) -> Verdict {
    let mut lines = Vec::new();
    let (mut dp, mut ds, mut frozen_p, mut frozen_s) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for ((name, x, y), (fp, fs)) in fixed_pairs().iter().zip(FROZEN) {
        let (p, s) = (psnr(x, y, 1.0).unwrap(), ssim(x, y).unwrap());
        let (op, os) = (oracle_psnr(x, y), oracle_ssim(x, y));
        dp = dp.max((p - op).abs());
        ds = ds.max((s - os).abs());
        frozen_p = frozen_p.max((op - fp).abs());
        frozen_s = frozen_s.max((os - fs).abs());
        lines.push(format!("{name} {op:.10} {os:.10}"));
    }
    let twenty = {
        let x = Image::<f64>::filled(16, 16, 3, 0.25);
        psnr(&x, &x.map(|v| v + 0.1), 1.0).unwrap()
    };
    let pass = dp <= C9_PSNR_TOL && ds <= C9_SSIM_TOL && frozen_p <= C9_PSNR_TOL && frozen_s <= C9_SSIM_TOL
        && (twenty - 20.0).abs() <= 1e-9;
    verdict(
        pass,
        format!(
            "5 fixed pairs vs reference: psnr diff {dp:.1e} dB (tol {C9_PSNR_TOL:e}), ssim diff {ds:.1e} (tol {C9_SSIM_TOL:e}); \
             reference vs frozen {frozen_p:.1e}/{frozen_s:.1e}; uniform 0.1 pair {twenty:.12} dB{}",
            if pass { String::new() } else { format!(" [{}]", lines.join("; ")) }
        ),
    )
}

fn c10_config(root: &Path, seed: u64, out: &str) -> TrainConfig {
    let m = format!("c10data/{MANIFEST_NAME}");
    let text = format!(
        "total_steps = 2000\nbatch_size = 4\npatch_size = 32\nseed = {seed}\nlog_every = 250\nprobe_count = 8\n\
         base_width = 8\nemb_dim = 16\ntam_hidden = 16\nscales = 1,2,4\nout_dir = {out}\n\
         task.rain = {m}\ntask.snow = {m}\ntask.haze = {m}\n"
    );
    TrainConfig::parse(&text, root).unwrap()
}

fn c10_data(root: &Path) {
    let data = root.join("c10data");
    if !data.join(MANIFEST_NAME).exists() {
        let g = GenConfig {
            task: TaskSelection::All,
            count: 150,
            height: 64,
            width: 64,
            seed: 100,
            gain_only: false,
            clean_dir: None,
        };
        generate(&g, &data).unwrap();
    }
}

fn c10(root: &Path, shared: &mut Shared) -> Verdict {
    c10_data(root);
    let contenders = parse_variants("one-stage,no-um,full").unwrap();
    let table = parse_variants(&TABLE_VARIANTS.join(",")).unwrap();
    let mut wins = 0;
    let mut notes = Vec::new();
    let mut shape_ok = true;
    for (i, &seed) in C10_SEEDS.iter().enumerate() {
        // The first seed fills the whole six-row table; the others the three rows compared.
        let variants = if i == 0 { &table } else { &contenders };
        let cfg = c10_config(root, seed, &format!("c10run_s{seed}"));
        let report: AblationReport = ablate(&cfg, variants).unwrap();
        let csv = report.to_csv();
        if i == 0 {
            shape_ok = csv.lines().count() == 7
                && csv.starts_with("variant,stages,uncertainty_map,task_aware,multi_scale,psnr,delta_psnr\n");
            println!("ablation table (seed {seed}):\n{csv}");
            report.write_csv(cfg.out_dir.join("ablation.csv")).unwrap();
        }
        let p = |v: &Variant| report.psnr_of(*v).unwrap();
        let full = p(&Variant::FULL);
        let best_other = contenders.iter().filter(|v| **v != Variant::FULL).map(p).fold(f64::NEG_INFINITY, f64::max);
        if full > best_other {
            wins += 1;
        }
        notes.push(format!(
            "seed {seed}: one-stage {:.3} no-um {:.3} full {:.3}",
            p(&contenders[0]),
            p(&contenders[1]),
            full
        ));
        if i == 1 {
            shared.c10_run = Some((cfg.clone(), contenders.clone(), cfg.out_dir.clone()));
        }
    }
    verdict(
        shape_ok && wins >= C10_MIN_WINS,
        format!("full best in {wins}/3 (need {C10_MIN_WINS}); {}", notes.join("; ")),
    )
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11(root: &Path, shared: &mut Shared) -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    c7_data(root);
    let first7 = match &shared.c7_run {
        Some((_, dir)) => dir.clone(),
        None => {
            let cfg = c7_config(root, "c7run");
            train(&cfg, None).unwrap();
            cfg.out_dir
        }
    };
    let again = c7_config(root, "c7run_repeat");
    train(&again, None).unwrap();
    let (a, b) = (snapshot(&first7), snapshot(&again.out_dir));
    let same7 = a == b && !a.is_empty();
    pass &= same7;
    notes.push(format!("training rerun: {} files {}", a.len(), if same7 { "identical" } else { "DIFFER" }));

    c10_data(root);
    let (cfg, variants, first10) = match &shared.c10_run {
        Some(run) => run.clone(),
        None => {
            let cfg = c10_config(root, C10_SEEDS[1], "c10run_first");
            let vs = parse_variants("one-stage,no-um,full").unwrap();
            ablate(&cfg, &vs).unwrap();
            let dir = cfg.out_dir.clone();
            (cfg, vs, dir)
        }
    };
    let mut again = cfg.clone();
    again.out_dir = root.join("c10run_repeat");
    ablate(&again, &variants).unwrap();
    let (a, b) = (snapshot(&first10), snapshot(&again.out_dir));
    let same10 = a == b && !a.is_empty();
    pass &= same10;
    notes.push(format!(
        "ablation rerun (seed {}, {} variants): {} files {}",
        cfg.seed,
        variants.len(),
        a.len(),
        if same10 { "identical" } else { "DIFFER" }
    ));
    verdict(pass, notes.join("; "))
}
