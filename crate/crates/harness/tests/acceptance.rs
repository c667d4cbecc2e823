//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr. The tests share one CPU-heavy lock so the timings are not skewed
//! by each other.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use icd_core::decoder::{Decoder, DecoderConfig};
use icd_core::instance::{compute_stats, draw_fakes, jitter_center, Instance};
use icd_core::losses::{distill_loss, regression_targets, DistillOptions};
use icd_core::pyramid::{flatten_pyramid, FeaturePyramid, FlatPyramid, Level};
use icd_core::tensor::GradCheckOptions;
use icd_core::Tensor;
use icd_harness::ablate::{run_ablation, write_results, Ablation};
use icd_harness::checks::{full_gradcheck, routing_check};
use icd_harness::heatmap::{parse_pnm, write_mask};
use icd_harness::scene::build_dataset;
use icd_harness::train::{
    condition_batch, new_student, new_teacher, prepare, prepare_from, pretrain_decoder, save_teacher, ConditionRngs,
    DecoderState, Prepared, TeacherCache,
};
use icd_harness::{checkpoint, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static HEAVY: Mutex<()> = Mutex::new(());
static TEACHER: OnceLock<(tempfile::TempDir, f64, Duration)> = OnceLock::new();

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, what: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {status}: {what} ({detail})");
}

/// Default-config teacher, trained once and saved. Call with the lock held.
fn teacher() -> (PathBuf, f64, Duration) {
    let (dir, ap, t) = TEACHER.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let started = Instant::now();
        let p = prepare(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_teacher(&dir.path().join("teacher.icdc"), &p.teacher.detector, &p.data).unwrap();
        (dir, p.teacher.toy_ap, started.elapsed())
    });
    (dir.path().join("teacher.icdc"), *ap, *t)
}

fn prepared() -> (Prepared, f64) {
    let (path, ap, _) = teacher();
    (prepare_from(&ExperimentConfig::default(), &path).unwrap(), ap)
}

fn random_flat(rng: &mut ChaCha8Rng, batch: usize, dim: usize, d_pe: usize) -> FlatPyramid {
    let levels = rng.gen_range(1..=3);
    let levels = (0..levels)
        .map(|k| {
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let scale = rng.gen_range(0.1..10.0);
            let data = (0..batch * dim * h * w).map(|_| rng.gen_range(-scale..scale)).collect();
            Level { stride: 8 << k, feat: Tensor::new(data, &[batch, dim, h, w]).unwrap() }
        })
        .collect();
    flatten_pyramid(&FeaturePyramid { levels }, d_pe, 10_000.0).unwrap()
}

struct RandomDecoder {
    decoder: Decoder,
    flat: FlatPyramid,
    enc: Tensor,
    counts: Vec<usize>,
}

fn random_decoder(rng: &mut ChaCha8Rng) -> RandomDecoder {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let dim = heads * rng.gen_range(2..=4);
    let d_pe = [4, 8][rng.gen_range(0..2)];
    let batch = rng.gen_range(1..=3);
    let mut counts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..=4)).collect();
    if counts.iter().all(|&c| c == 0) {
        counts[0] = 1;
    }
    let enc_width = rng.gen_range(3..=10);
    let cfg = DecoderConfig { dim, heads, pe_width: d_pe + 2, enc_width, depth: rng.gen_range(1..=3) };
    let decoder = Decoder::new(cfg, rng).unwrap();
    let flat = random_flat(rng, batch, dim, d_pe);
    let n: usize = counts.iter().sum();
    let enc = Tensor::new((0..n * enc_width).map(|_| rng.gen_range(-3.0..3.0)).collect(), &[n, enc_width]).unwrap();
    RandomDecoder { decoder, flat, enc, counts }
}

#[test]
fn c01_gradient_correctness() {
    let _g = heavy();
    let started = Instant::now();
    let reports = full_gradcheck(&GradCheckOptions::default(), None).unwrap();
    let elapsed = started.elapsed();
    let worst = reports.iter().map(|r| r.report.max_rel_err()).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.report.passed()).map(|r| r.name.as_str()).collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradcheck of every op and the composed objective",
        pass,
        &format!("{} checks, max rel err {worst:.2e}, failed {failed:?}, {elapsed:.1?}", reports.len()),
    );
    assert!(pass);
}

#[test]
fn c02_gradient_routing() {
    let _g = heavy();
    let started = Instant::now();
    let audit = routing_check(0, false).unwrap();
    let mutated = routing_check(0, true).unwrap();
    let elapsed = started.elapsed();
    let cells = audit.cells.len();
    let forbidden = audit.forbidden().count();
    let leaks = audit.leaks().len();
    let pass = audit.passed() && leaks == 0 && !mutated.passed() && elapsed < Duration::from_secs(30);
    report(
        2,
        "loss x group routing audit and mask-detach mutation",
        pass,
        &format!(
            "{cells} cells, {forbidden} forbidden, {leaks} leaks, mutation leaks {}, {elapsed:.1?}",
            mutated.leaks().len()
        ),
    );
    assert!(pass);
}

#[test]
fn c03_attention_masks_are_distributions() {
    let _g = heavy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut negative = 0usize;
    let mut rows = 0usize;
    for _ in 0..1000 {
        let r = random_decoder(&mut rng);
        let out = r.decoder.forward(&r.flat, &r.enc, &r.counts).unwrap();
        for k in &out.knowledge {
            for m in &k.masks {
                let l = m.shape()[1];
                for row in m.data().chunks(l) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    negative += row.iter().filter(|&&v| v < 0.0).count();
                    rows += 1;
                }
            }
        }
    }
    let pass = worst <= 1e-6 && negative == 0;
    report(
        3,
        "attention masks sum to one and are nonnegative",
        pass,
        &format!("1000 configs, {rows} mask rows, max |sum-1| {worst:.1e}, {negative} negative entries"),
    );
    assert!(pass);
}

fn layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn c04_loss_identities() {
    let _g = heavy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // Student values computed from the very features the teacher saw.
    let mut max_zero = 0.0f64;
    for _ in 0..100 {
        let r = random_decoder(&mut rng);
        let out = r.decoder.forward(&r.flat, &r.enc, &r.counts).unwrap();
        let k = out.last();
        let sv = r.decoder.student_values(&r.flat, true).unwrap();
        let mut flags: Vec<bool> = (0..k.instances()).map(|_| rng.gen_bool(0.5)).collect();
        flags[0] = true;
        let l = distill_loss(&k.masks, &k.counts, &k.values, &sv, &flags, DistillOptions::default()).unwrap();
        max_zero = max_zero.max(l.item().abs());
    }

    // Uniform masks against a direct loop.
    let mut max_uniform = 0.0f64;
    for _ in 0..100 {
        let heads = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=6);
        let cells = rng.gen_range(1..=12);
        let counts: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
        let n: usize = counts.iter().sum();
        let b = counts.len();
        let mut flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        flags[n - 1] = true;
        let mut rand_vals = || -> Vec<Vec<f64>> {
            (0..heads).map(|_| (0..b * cells * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
        };
        let (tv, sv) = (rand_vals(), rand_vals());
        let as_tensors =
            |v: &[Vec<f64>]| v.iter().map(|h| Tensor::new(h.clone(), &[b * cells, d]).unwrap()).collect::<Vec<_>>();
        let masks: Vec<Tensor> =
            (0..heads).map(|_| Tensor::new(vec![1.0 / cells as f64; n * cells], &[n, cells]).unwrap()).collect();
        let got = distill_loss(&masks, &counts, &as_tensors(&tv), &as_tensors(&sv), &flags, DistillOptions::default())
            .unwrap()
            .item();
        let n_real = flags.iter().filter(|&&f| f).count() as f64;
        let mut want = 0.0;
        for j in 0..heads {
            let mut first = 0;
            for (img, &nb) in counts.iter().enumerate() {
                let reals = flags[first..first + nb].iter().filter(|&&f| f).count() as f64;
                first += nb;
                let mut per_image = 0.0;
                for c in 0..cells {
                    let at = (img * cells + c) * d;
                    let (s, t) = (layer_norm(&sv[j][at..at + d]), layer_norm(&tv[j][at..at + d]));
                    per_image += s.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
                }
                want += reals * per_image / cells as f64;
            }
        }
        want /= heads as f64 * n_real;
        max_uniform = max_uniform.max((got - want).abs());
    }

    // Regression targets from jittered centres.
    let mut mismatches = 0;
    for _ in 0..1000 {
        let px = 64;
        let w = rng.gen_range(0.02..0.9);
        let h = rng.gen_range(0.02..0.9);
        let inst = Instance::from_center(0, rng.gen(), rng.gen(), w, h, px, true).unwrap();
        let c = jitter_center(&inst, 0.3, &mut rng);
        let t = regression_targets(&inst, c);
        let [l, top, r, bottom] = t.ltrb;
        let (bw, bh) = inst.size();
        if l + r != bw || top + bottom != bh || t.size != (bw, bh) {
            mismatches += 1;
        }
    }

    let pass = max_zero == 0.0 && max_uniform <= 1e-10 && mismatches == 0;
    report(
        4,
        "distillation and regression-target identities",
        pass,
        &format!("equal features max loss {max_zero:e}, uniform-mask max err {max_uniform:.1e}, l+r/t+b mismatches {mismatches}/1000"),
    );
    assert!(pass);
}

#[test]
fn c05_fake_sampling_and_jitter() {
    let _g = heavy();
    let cfg = ExperimentConfig::default();
    let data = build_dataset(&cfg).unwrap();

    // Ratio through the training-time conditioning path.
    let state = DecoderState::new(&cfg).unwrap();
    let cache = TeacherCache::build(&new_teacher(&cfg).unwrap(), &data.train[..64]).unwrap();
    let mut rngs = ConditionRngs::new(5);
    let mut bad_ratio = 0;
    for start in (0..64).step_by(8) {
        let idx: Vec<usize> = (start..start + 8).collect();
        let c = condition_batch(&cfg, &data, &cache, &idx, &state, &mut rngs).unwrap();
        let mut off = 0;
        for &n in &c.counts {
            let real = c.instances[off..off + n].iter().filter(|i| i.is_real).count();
            if n - real != 5 * real {
                bad_ratio += 1;
            }
            off += n;
        }
    }

    let stats = &data.stats;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = draw_fakes(stats, 10_000, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for c in 0..stats.classes() {
        let ws: Vec<f64> = draws.iter().filter(|d| d.category == c).map(|d| d.w_px).collect();
        let hs: Vec<f64> = draws.iter().filter(|d| d.category == c).map(|d| d.h_px).collect();
        let freq = ws.len() as f64 / draws.len() as f64;
        let want_freq = stats.class_freq[c] as f64 / stats.total() as f64;
        worst = worst.max((freq - want_freq).abs() / want_freq);
        for (k, v) in [ws, hs].iter().enumerate() {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            worst = worst.max((m - stats.size_mean[c][k]).abs() / stats.size_mean[c][k]);
            worst = worst.max((s - stats.size_std[c][k]).abs() / stats.size_std[c][k]);
        }
    }
    let refit = compute_stats(data.train.iter().flat_map(|s| s.instances.iter()), cfg.classes).unwrap();

    let mut jitter_violations = 0;
    for s in &data.train {
        for inst in &s.instances {
            for _ in 0..20 {
                let (x, y) = jitter_center(inst, 0.3, &mut rng);
                let (cx, cy) = inst.center();
                let (w, h) = inst.size();
                if (x - cx).abs() > 0.3 * w || (y - cy).abs() > 0.3 * h {
                    jitter_violations += 1;
                }
            }
        }
    }

    let pass = bad_ratio == 0 && worst < 0.05 && jitter_violations == 0 && refit == *stats;
    report(
        5,
        "fake:real ratio, fake size statistics, jitter bound",
        pass,
        &format!("ratio violations {bad_ratio}, worst relative stat error {:.2}% over 10^4 draws, jitter violations {jitter_violations}", 100.0 * worst),
    );
    assert!(pass);
}

#[test]
fn c06_distillation_helps() {
    let _g = heavy();
    let (prep, teacher_ap) = prepared();
    let teacher_time = teacher().2;
    let started = Instant::now();
    let cfg = ExperimentConfig::default();
    let res = run_ablation(Ablation::Inherit, &cfg, &prep, &SEEDS).unwrap();
    let elapsed = started.elapsed() + teacher_time;
    let base = res.mean_of("baseline").unwrap();
    let dist = res.mean_of("distill").unwrap();
    let inh = res.mean_of("distill_inherit").unwrap();
    let pass = teacher_ap >= 0.6 && dist > base && inh >= dist && elapsed < Duration::from_secs(15 * 60);
    report(
        6,
        "distilled student beats the baseline; inheriting does not hurt",
        pass,
        &format!(
            "teacher {teacher_ap:.4}, baseline {base:.4}, distilled {dist:.4}, distilled+inherit {inh:.4} over 5 seeds, {elapsed:.0?}"
        ),
    );
    assert!(pass);
}

#[test]
fn c07_attention_variants() {
    let _g = heavy();
    let (prep, _) = prepared();
    let started = Instant::now();
    let res = run_ablation(Ablation::Attention, &ExperimentConfig::default(), &prep, &SEEDS).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_results(out.path(), Ablation::Attention, &res).unwrap();
    let elapsed = started.elapsed();
    let csv = std::fs::read_to_string(out.path().join("ablate_attention.csv")).unwrap();
    let means = res.means();
    let icd = res.mean_of("icd").unwrap();
    let none = res.mean_of("none").unwrap();
    let pass = csv.lines().count() == 26 && means.len() == 5 && icd >= none && elapsed < Duration::from_secs(30 * 60);
    let listed: Vec<String> = means.iter().map(|(s, m)| format!("{s} {m:.4}")).collect();
    report(
        7,
        "instance-conditional attention at least matches uniform",
        pass,
        &format!("{}, {elapsed:.0?}", listed.join(", ")),
    );
    assert!(pass);
}

#[test]
fn c08_head_count_sweep() {
    let _g = heavy();
    let (prep, _) = prepared();
    let res = run_ablation(Ablation::Heads, &ExperimentConfig::default(), &prep, &[0]).unwrap();
    let csv = res.csv();
    let labels: Vec<&str> = res.rows.iter().map(|r| r.setting.as_str()).collect();
    let pass = labels == ["M1", "M4", "M8"]
        && res.rows.iter().all(|r| (0.0..=1.0).contains(&r.toy_ap))
        && csv.lines().count() == 4
        && csv.lines().skip(1).all(|l| l.split(',').count() == 4);
    let listed: Vec<String> = res.rows.iter().map(|r| format!("{} {:.4}", r.setting, r.toy_ap)).collect();
    report(8, "head-count sweep emits one row per setting", pass, &listed.join(", "));
    assert!(pass);
}

fn quick_config_file(dir: &Path) -> PathBuf {
    let path = dir.join("quick.cfg");
    std::fs::write(&path, ExperimentConfig::quick().to_file_string()).unwrap();
    path
}

fn cli_distill(cfg: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_icd"))
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "distill"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn c09_determinism() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config_file(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cli_distill(&cfg, &a);
    cli_distill(&cfg, &b);
    let mut differing = Vec::new();
    for f in ["metrics.csv", "teacher.icdc", "distill-s0.icdc"] {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            differing.push(f);
        }
    }
    let rows = std::fs::read_to_string(a.join("metrics.csv")).unwrap().lines().count();
    let pass = differing.is_empty() && rows > 2;
    report(
        9,
        "identical config and seed give identical artifacts",
        pass,
        &format!("{rows} metrics lines, differing files {differing:?}"),
    );
    assert!(pass);
}

#[test]
fn c10_checkpoint_and_heatmap_round_trips() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::quick();
    let cfg_path = quick_config_file(dir.path());
    let out = dir.path().join("run");
    cli_distill(&cfg_path, &out);

    // Checkpoint: load, restore into a fresh student, save again.
    let saved = std::fs::read(out.join("distill-s0.icdc")).unwrap();
    let loaded = checkpoint::load(&out.join("distill-s0.icdc")).unwrap();
    let student = new_student(&ExperimentConfig { seed: 99, ..cfg.clone() }).unwrap();
    checkpoint::restore_group(&student.group, &loaded).unwrap();
    let again = dir.path().join("again.icdc");
    checkpoint::save(&again, &checkpoint::group_tensors(&student.group)).unwrap();
    let bits_equal = loaded.iter().zip(checkpoint::group_tensors(&student.group)).all(|((n1, t1), (n2, t2))| {
        n1 == &n2 && t1.data().iter().zip(t2.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let ckpt_ok = bits_equal && std::fs::read(&again).unwrap() == saved;

    // Heatmaps of a briefly trained decoder on teacher features.
    let prep = prepare_from(&cfg, &out.join("teacher.icdc")).unwrap();
    let mut state = DecoderState::new(&cfg).unwrap();
    pretrain_decoder(&cfg, &prep.data, &prep.cache, &mut state, 30, 0).unwrap();
    let idx: Vec<usize> = (0..cfg.batch).collect();
    let c = condition_batch(&cfg, &prep.data, &prep.cache, &idx, &state, &mut ConditionRngs::new(0)).unwrap();
    let k = c.out.last();
    let maps = dir.path().join("attention");
    let (mut checked, mut mismatched) = (0, 0);
    for i in 0..k.instances() {
        for j in 0..k.heads() {
            let mask = k.mask(i, j);
            let files = write_mask(&maps, &format!("i{i}_h{j}"), &mask, &c.flat.shapes).unwrap();
            let pixels: Vec<u8> = files
                .iter()
                .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
                .flat_map(|p| parse_pnm(&std::fs::read(p).unwrap()).unwrap().pixels)
                .collect();
            let first_max = |v: &[f64]| {
                let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                v.iter().position(|&x| x == m).unwrap()
            };
            let as_f: Vec<f64> = pixels.iter().map(|&p| p as f64).collect();
            checked += 1;
            if first_max(&as_f) != first_max(&mask) {
                mismatched += 1;
            }
        }
    }
    let pass = ckpt_ok && checked > 0 && mismatched == 0;
    report(
        10,
        "checkpoint and heatmap round trips",
        pass,
        &format!("{} tensors bit-exact {ckpt_ok}, heatmap argmax mismatches {mismatched}/{checked}", loaded.len()),
    );
    assert!(pass);
}
