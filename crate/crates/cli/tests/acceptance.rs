//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! (run with `--nocapture` to see them) and then asserts the criterion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use warpadv_core::adversary::{search_batch, ParamBounds};
use warpadv_core::data::{generate_dataset, DegradeSpec, Sample, Split};
use warpadv_core::diff::Primitive;
use warpadv_core::eval::{ablation_run, cosine, rank_k, tar_at_far, ComparisonTable, Embeddings, EvalError, ScoreSet};
use warpadv_core::geometry::{
    fit_affine, global_inverse, warp_image, Affine, CenteredPoint, ControlPointSet, TransformParams, WarpKind,
};
use warpadv_core::gradsuite::{run_suite, SuiteConfig, WARP_PARAMS};
use warpadv_core::image::Image;
use warpadv_core::losses::{angular_loss, contrastive_loss, total_loss, LossConfig};
use warpadv_core::model::{ModelConfig, ModelState};
use warpadv_core::seeds;
use warpadv_core::train::{split_batch, train_samples, Fractions, Mode, TrainConfig, TrainOptions};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_differentiability_suite() {
    let _g = serial();
    let start = Instant::now();
    let results = run_suite(&SuiteConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let failing: Vec<&str> = results.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let mut expected: Vec<String> = Primitive::ALL.iter().map(|p| p.name().to_string()).collect();
    expected.extend(WARP_PARAMS.iter().map(|p| format!("warp.{p}")));
    let covered = expected
        .iter()
        .all(|n| results.iter().any(|c| &c.name == n && c.samples == 50));
    let worst = results.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = failing.is_empty() && covered && elapsed < Duration::from_secs(120);
    report(
        1,
        pass,
        &format!(
            "{} checks x 50 samples, worst rel err {worst:.2e}, failing {failing:?}, {:.1}s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn random_image(rng: &mut impl Rng) -> Image {
    let (h, w, c) = (rng.gen_range(2..20), rng.gen_range(2..20), rng.gen_range(1..4));
    Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
}

fn random_point(rng: &mut impl Rng) -> CenteredPoint {
    CenteredPoint::new(rng.gen_range(-16.0..16.0), rng.gen_range(-16.0..16.0))
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

/// Solve the 6x6 system for the affine coefficients by Gaussian elimination
/// with partial pivoting.
fn affine_oracle(src: &[CenteredPoint; 3], dst: &[CenteredPoint; 3]) -> [f64; 6] {
    let mut m = [[0.0f64; 7]; 6];
    for k in 0..3 {
        m[2 * k] = [src[k].u, src[k].v, 1.0, 0.0, 0.0, 0.0, dst[k].u];
        m[2 * k + 1] = [0.0, 0.0, 0.0, src[k].u, src[k].v, 1.0, dst[k].v];
    }
    for col in 0..6 {
        let piv = (col..6)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in 0..6 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..7 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    std::array::from_fn(|k| m[k][6] / m[k][k])
}

#[test]
fn criterion_2_warp_fidelity() {
    let _g = serial();
    let mut rng = seeds::rng(2, &[]);
    let (mut identity_worst, mut local_worst, mut rot_worst, mut residual_worst, mut oracle_worst) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut degenerate = 0;
    for _ in 0..1000 {
        let img = random_image(&mut rng);
        let out = warp_image(&img, &TransformParams::identity(WarpKind::Global)).unwrap();
        identity_worst = identity_worst.max(max_abs_diff(&img, &out));

        let local = TransformParams {
            alpha: 0.0,
            sigma: rng.gen_range(1.0..40.0),
            affine: ControlPointSet::identity(img.height(), img.width()).fitted,
            ..TransformParams::identity(WarpKind::Local)
        };
        let out = warp_image(&img, &local).unwrap();
        local_worst = local_worst.max(max_abs_diff(&img, &out));

        let quarter = TransformParams {
            phi: PI / 2.0,
            ..TransformParams::identity(WarpKind::Global)
        };
        let r = rng.gen_range(0.1..20.0);
        let (u, v) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let unit = global_inverse(&quarter, CenteredPoint::new(r, 0.0)).unwrap();
        let any = global_inverse(&quarter, CenteredPoint::new(u, v)).unwrap();
        rot_worst = rot_worst
            .max(unit.u.abs())
            .max((unit.v + r).abs())
            .max((any.u - v).abs())
            .max((any.v + u).abs());

        let src = [random_point(&mut rng), random_point(&mut rng), random_point(&mut rng)];
        let dst = [random_point(&mut rng), random_point(&mut rng), random_point(&mut rng)];
        match fit_affine(&src, &dst, 1e-3) {
            Ok(a) => {
                for k in 0..3 {
                    let p = a.apply(src[k]);
                    residual_worst = residual_worst.max((p.u - dst[k].u).abs()).max((p.v - dst[k].v).abs());
                }
                let Affine([ru, rv]) = a;
                let o = affine_oracle(&src, &dst);
                for (x, y) in ru.iter().chain(&rv).zip(&o) {
                    oracle_worst = oracle_worst.max((x - y).abs() / y.abs().max(1.0));
                }
            }
            Err(_) => degenerate += 1,
        }
    }
    let unit = global_inverse(
        &TransformParams {
            phi: PI / 2.0,
            ..TransformParams::identity(WarpKind::Global)
        },
        CenteredPoint::new(1.0, 0.0),
    )
    .unwrap();
    let unit_ok = unit.u.abs() < 1e-12 && (unit.v + 1.0).abs() < 1e-12;
    let pass = identity_worst <= 1e-6
        && local_worst <= 1e-6
        && unit_ok
        && rot_worst < 1e-9
        && residual_worst < 1e-6
        && oracle_worst < 1e-6
        && degenerate < 10;
    report(
        2,
        pass,
        &format!(
            "1000 instances: identity {identity_worst:.1e}, alpha=0 local {local_worst:.1e}, rotation {rot_worst:.1e}, \
             affine residual {residual_worst:.1e}, vs elimination {oracle_worst:.1e}, degenerate draws {degenerate}"
        ),
    );
    assert!(pass);
}

fn dataset(dir: &Path, seed: u64) -> (Vec<Sample>, Vec<Sample>, u64) {
    let m = generate_dataset(dir, seed, 50, 40, 32).unwrap();
    (
        m.load_split(Split::Train).unwrap(),
        m.load_split(Split::Test).unwrap(),
        m.seed,
    )
}

#[test]
fn criterion_3_adversarial_ascent() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (train, _, _) = dataset(dir.path(), 0);
    let model = ModelState::<f32>::init(ModelConfig::default(), 0).unwrap();
    let cfg = TrainConfig::default();
    let bounds = ParamBounds::default();
    let (mut increased, mut gains, mut out_of_bounds) = (0, Vec::new(), 0);
    let (mut local_increased, mut local_gains) = (0, Vec::new());
    for b in 0..100u64 {
        let idx = sample_indices(&mut seeds::rng(b, &[seeds::TAG_SHUFFLE]), train.len(), 20).into_vec();
        let split = split_batch(20, &Fractions::default(), &mut seeds::rng(b, &[seeds::TAG_SPLIT])).unwrap();
        let mut batch = Vec::new();
        let mut local = Vec::new();
        for (tag, kind, members) in [(0, WarpKind::Global, &split.global), (1, WarpKind::Local, &split.local)] {
            for &k in members {
                let s = &train[idx[k]];
                let mut rng = seeds::rng(b, &[seeds::TAG_ADVERSARY, tag, k as u64]);
                let t = search_batch(
                    &model,
                    &cfg.loss,
                    &[&s.image],
                    &[s.class()],
                    kind,
                    &cfg.adversary,
                    &bounds,
                    &mut rng,
                )
                .unwrap();
                out_of_bounds += t.params.iter().filter(|p| !bounds.contains(p)).count();
                batch.push(t.gain());
                if kind == WarpKind::Local {
                    local.push(t.gain());
                }
            }
        }
        let g = batch.iter().sum::<f64>() / batch.len() as f64;
        increased += (g > 0.0) as usize;
        gains.push(g);
        let lg = local.iter().sum::<f64>() / local.len() as f64;
        local_increased += (lg > 0.0) as usize;
        local_gains.push(lg);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let local_mean = local_gains.iter().sum::<f64>() / local_gains.len() as f64;
    let elapsed = start.elapsed();
    let pass = increased >= 60 && mean > 0.0 && out_of_bounds == 0 && elapsed < Duration::from_secs(300);
    report(
        3,
        pass,
        &format!(
            "loss increased on {increased}/100 batches, mean gain {mean:.4e}, ψ out of bounds {out_of_bounds}, {:.1}s \
             (local views alone: {local_increased}/100, mean {local_mean:.3e})",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Loosest threshold `t` (accept iff score ≥ t) among all observed scores
/// and +∞ whose impostor acceptance stays within `far`.
fn tar_oracle(s: &ScoreSet, far: f64) -> f64 {
    let mut candidates: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    candidates.push(f64::INFINITY);
    let n = s.impostor.len() as f64;
    let mut best = 0.0;
    for &t in &candidates {
        let fa = s.impostor.iter().filter(|&&x| x >= t).count() as f64;
        if fa / n <= far {
            let tar = s.genuine.iter().filter(|&&x| x >= t).count() as f64 / s.genuine.len() as f64;
            if tar > best {
                best = tar;
            }
        }
    }
    best
}

/// Full sort of the gallery per probe, then position of the first match.
fn rank_oracle(probe: &Embeddings, gallery: &Embeddings, k: usize, same_set: bool) -> f64 {
    let mut hits = 0;
    for i in 0..probe.len() {
        let mut order: Vec<(f64, usize)> = (0..gallery.len())
            .filter(|&j| !(same_set && i == j))
            .map(|j| (cosine(&probe.vectors[i], &gallery.vectors[j]), j))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if order.iter().take(k).any(|&(_, j)| gallery.labels[j] == probe.labels[i]) {
            hits += 1;
        }
    }
    hits as f64 / probe.len() as f64
}

fn random_embeddings(rng: &mut impl Rng, n: usize, d: usize, ids: usize) -> Embeddings {
    Embeddings {
        vectors: (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2..=2) as f32).collect())
            .collect(),
        labels: (0..n).map(|_| rng.gen_range(1..=ids)).collect(),
    }
}

#[test]
fn criterion_4_metric_oracles() {
    let _g = serial();
    let mut rng = seeds::rng(4, &[]);
    let mut tar_mismatch = Vec::new();
    for case in 0..200 {
        let total = rng.gen_range(2..=1000);
        let g = rng.gen_range(1..total);
        let levels = rng.gen_range(2..60) as f64;
        let mut draw = |m: usize, shift: f64| -> Vec<f64> {
            (0..m)
                .map(|_| ((rng.gen_range(-1.0..1.0) + shift) * levels).round() / levels)
                .collect()
        };
        let s = ScoreSet {
            genuine: draw(g, 0.3),
            impostor: draw(total - g, 0.0),
        };
        let far = [1e-3, 1e-2, 0.1, 0.25, 1.0, rng.gen_range(1e-4..1.0)][case % 6];
        let got = tar_at_far(&s, far).unwrap().tar;
        let want = tar_oracle(&s, far);
        if got != want {
            tar_mismatch.push((case, got, want));
        }
    }
    let mut rank_mismatch = Vec::new();
    for case in 0..100 {
        let d = rng.gen_range(1..5);
        let ids = rng.gen_range(2..8);
        let same_set = case % 2 == 0;
        let n = rng.gen_range(2..40);
        let probe = random_embeddings(&mut rng, n, d, ids);
        let m = rng.gen_range(1..40);
        let gallery = if same_set {
            probe.clone()
        } else {
            random_embeddings(&mut rng, m, d, ids)
        };
        let k = rng.gen_range(1..=gallery.len());
        let got = rank_k(&probe, &gallery, k, same_set).unwrap();
        let want = rank_oracle(&probe, &gallery, k, same_set);
        if got != want {
            rank_mismatch.push((case, got, want));
        }
    }
    let pass = tar_mismatch.is_empty() && rank_mismatch.is_empty();
    report(
        4,
        pass,
        &format!(
            "tar_at_far mismatches {}/200, rank_k mismatches {}/100",
            tar_mismatch.len(),
            rank_mismatch.len()
        ),
    );
    assert!(pass, "tar {tar_mismatch:?} rank {rank_mismatch:?}");
}

const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

struct Sweep {
    table: ComparisonTable,
    elapsed: Duration,
}

/// Every mode for every seed on the default dataset, scored on the test
/// split at full resolution, 16x16 and 8x8.
fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let (train, test, data_seed) = dataset(dir.path(), 0);
        let modes: Vec<String> = Mode::ALL.iter().map(|m| m.label().to_string()).collect();
        let levels = [
            DegradeSpec::none(),
            DegradeSpec::resolution(16),
            DegradeSpec::resolution(8),
        ];
        let model = ModelConfig::default();
        let table = ablation_run(&test, &modes, &SWEEP_SEEDS, &levels, data_seed, |mode, seed| {
            let cfg = TrainConfig {
                mode: mode.parse().map_err(EvalError::Train)?,
                seed,
                eval_each_epoch: false,
                ..TrainConfig::default()
            };
            train_samples(&train, &[], data_seed, &model, &cfg, &TrainOptions::default())
                .map(|o| o.state)
                .map_err(|e| EvalError::Train(e.to_string()))
        })
        .unwrap();
        print!("{}", table.summary_csv());
        Sweep {
            table,
            elapsed: start.elapsed(),
        }
    })
}

fn rank1(t: &ComparisonTable, mode: Mode, degrade: &str) -> f64 {
    100.0 * t.mean(mode.label(), degrade, "rank1").expect("mode and level present")
}

#[test]
fn criterion_5_contrastive_and_warp_terms_help_at_8x8() {
    let _g = serial();
    let s = sweep();
    let clean = rank1(&s.table, Mode::CleanOnly, "8");
    let trans = rank1(&s.table, Mode::CleanTrans, "8");
    let full = rank1(&s.table, Mode::Darface, "8");
    let pass =
        trans >= clean + 2.0 && full >= trans - 0.5 && full - clean > 0.0 && s.elapsed < Duration::from_secs(45 * 60);
    report(
        5,
        pass,
        &format!(
            "8x8 rank-1 over seeds {SWEEP_SEEDS:?}: clean-only {clean:.2}, clean+trans {trans:.2}, darface {full:.2} \
             (sweep {:.0}s)",
            s.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_degradation_order_and_16px_gap() {
    let _g = serial();
    let s = sweep();
    let none = rank1(&s.table, Mode::Darface, "none");
    let r16 = rank1(&s.table, Mode::Darface, "16");
    let r8 = rank1(&s.table, Mode::Darface, "8");
    let clean16 = rank1(&s.table, Mode::CleanOnly, "16");
    let pass = none >= r16 && r16 >= r8 && r16 >= clean16 + 2.0;
    report(
        6,
        pass,
        &format!("darface rank-1 none {none:.2} / 16x16 {r16:.2} / 8x8 {r8:.2}; clean-only 16x16 {clean16:.2}"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_loss_contracts() {
    let _g = serial();
    let mut failures = Vec::new();
    let e1 = vec![1.0, 0.0, 0.0];
    let anchors = [
        (vec![e1.clone()], vec![vec![2.5, 0.0, 0.0]], 0.0),
        (vec![e1.clone()], vec![vec![0.0, -3.0, 0.0]], 1.0),
        (vec![e1.clone()], vec![vec![-0.5, 0.0, 0.0]], 2.0),
    ];
    for (a, b, want) in &anchors {
        let got = contrastive_loss(a, b).unwrap();
        if (got - want).abs() > 1e-7 {
            failures.push(format!("anchor {want}: {got}"));
        }
    }
    let mut rng = seeds::rng(7, &[]);
    for _ in 0..1000 {
        let n = rng.gen_range(1..6);
        let d = rng.gen_range(1..8);
        let mut vecs = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let (a, b) = (vecs(), vecs());
        let l = contrastive_loss(&a, &b).unwrap();
        if !(0.0..=2.0).contains(&l) {
            failures.push(format!("contrastive out of range: {l}"));
        }
        let (c, t, k, lam) = (
            rng.gen_range(0.0..10.0),
            rng.gen_range(0.0..10.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
        );
        if total_loss(c, t, k, lam).unwrap() != c + t + lam * k {
            failures.push(format!("total_loss({c}, {t}, {k}, {lam})"));
        }
        let LossConfig {
            margin: m, scale: s, ..
        } = LossConfig::default();
        let (ct, co) = (
            rng.gen_range((PI - m).cos() + 1e-3..0.999),
            rng.gen_range(-0.999..0.999),
        );
        let target = s * (ct.acos() + m).cos();
        let want = -(target - (target.exp() + (s * co).exp()).ln());
        let got = angular_loss(&[ct, co], 0, m, s).unwrap();
        if (got - want).abs() > 1e-6 {
            failures.push(format!("angular [{ct}, {co}]: {got} vs {want}"));
        }
    }
    let pass = failures.is_empty();
    report(
        7,
        pass,
        &format!(
            "contrastive anchors and range, total_loss, two-class angular: {} failures",
            failures.len()
        ),
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(5)]);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_warpadv"))
}

fn run(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?}: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_8_reproducible_training() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(bin()
        .args([
            "gen-data",
            "--identities",
            "6",
            "--samples-per-id",
            "10",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&data));
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run(bin()
            .args([
                "--threads",
                "1",
                "train",
                "--epochs",
                "2",
                "--batch-size",
                "8",
                "--seed",
                "1",
                "--data",
            ])
            .arg(&data)
            .arg("--out")
            .arg(&out));
        let mut files = tree(&out.join("checkpoints"));
        for f in ["steps.csv", "epochs.json"] {
            files.insert(PathBuf::from(f), fs::read(out.join(f)).unwrap());
        }
        runs.push(files);
    }
    let differing: Vec<&PathBuf> = runs[0]
        .keys()
        .chain(runs[1].keys())
        .filter(|k| runs[0].get(*k) != runs[1].get(*k))
        .collect();
    let pass = differing.is_empty() && runs[0].len() > 2;
    report(
        8,
        pass,
        &format!(
            "{} files compared across two --threads 1 runs, differing {differing:?}",
            runs[0].len()
        ),
    );
    assert!(pass);
}
