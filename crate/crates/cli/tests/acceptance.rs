//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
//! when a hard criterion fails. Artifacts are kept under the target
//! directory (`acceptance/`) for inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use mocnn_core::autodiff::{checkpoint, numerical_gradient, relative_error};
use mocnn_core::datastore::{Corpus, PreparedSample};
use mocnn_core::geometry::{forward_kinematics, project, JointSpec, KinematicChain, Mat3, PinholeCamera, RigidTransform, Vec3};
use mocnn_core::loss::*;
use mocnn_core::model::{ArchitectureSpec, ARCH_TENSOR};
use mocnn_core::synth::{render_sample, scene_for_index, SceneConfig, FOREGROUND_MAX, FOREGROUND_MIN};
use mocnn_core::train::{batch_gradients, batch_loss, train_full, train_transfer_from, TrainConfig};
use mocnn_core::{MultiObjectiveNet, RobotModel, SplitTag, Tensor};
use nalgebra::{Matrix4, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

struct Verdict {
    pass: bool,
    soft: bool,
    detail: String,
}

impl Verdict {
    fn hard(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, soft: false, detail: detail.into() }
    }
}

fn failed(e: impl std::fmt::Display) -> Verdict {
    Verdict::hard(false, format!("error: {e}"))
}

// ---------------------------------------------------------------- helpers

fn mocnn(args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mocnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("mocnn {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn args(parts: &[&dyn AsRef<std::ffi::OsStr>]) -> Vec<String> {
    parts.iter().map(|p| p.as_ref().to_string_lossy().into_owned()).collect()
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse::<f64>().map_err(|e| format!("{}: {e}", path.display()))).collect())
        .collect()
}

fn report(dir: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn tiny_corpus(n_train: usize, n_test: usize, n_joints: usize, n_types: usize, seed: u64) -> Corpus {
    let side = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_train + n_test)
        .map(|i| {
            let (r0, c0, h, w) = (rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(2..6), rng.gen_range(2..6));
            let mut mask = vec![0u8; side * side];
            let mut image_sums = vec![0u16; 3 * side * side];
            for r in 0..side {
                for c in 0..side {
                    let fg = (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c);
                    mask[r * side + c] = u8::from(fg);
                    for ch in 0..3 {
                        image_sums[(ch * side + r) * side + c] = if fg { rng.gen_range(700..=1020) } else { rng.gen_range(0..=500) };
                    }
                }
            }
            PreparedSample {
                id: format!("t{i}"),
                image_sums,
                height: side,
                width: side,
                mask,
                joints: (0..3 * n_joints).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                base: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(1.0..2.0)],
                label: rng.gen_range(0..n_types),
                split: if i < n_train { SplitTag::Train } else { SplitTag::Test },
            }
        })
        .collect();
    Corpus { samples, n_joints, n_types }
}

// ---------------------------------------------------------------- pipeline

struct Pipeline {
    ur_full: PathBuf,
    kuka_full: PathBuf,
    transfer: PathBuf,
    sweep: PathBuf,
    minutes: f64,
}

fn run_pipeline(root: &Path) -> Result<Pipeline, String> {
    let start = Instant::now();
    let data = root.join("data");
    let ur: Vec<PathBuf> = [(RobotModel::Ur3Like, 267), (RobotModel::Ur5Like, 267), (RobotModel::Ur10Like, 266)]
        .iter()
        .enumerate()
        .map(|(k, (m, n))| {
            let dir = data.join(m.name());
            mocnn(&args(&[&"gen", &"--robot", &m.name(), &"--n", &n.to_string(), &"--seed", &(SEED + k as u64).to_string(), &"--out", &dir]))?;
            Ok(dir)
        })
        .collect::<Result<_, String>>()?;
    let kuka = data.join("kukalike");
    mocnn(&args(&[&"gen", &"--robot", &"kukalike", &"--n", &"780", &"--seed", &(SEED + 10).to_string(), &"--out", &kuka]))?;

    let seed = SEED.to_string();
    let ur_full = root.join("ur_full");
    let mut a = args(&[&"train", &"--data"]);
    a.extend(ur.iter().map(|d| d.to_string_lossy().into_owned()));
    a.extend(args(&[&"--out", &ur_full, &"--epochs", &"6", &"--batch-size", &"4", &"--seed", &seed]));
    mocnn(&a)?;
    let pretrained = ur_full.join("ckpt-best.bin");

    let short = |extra: &[&dyn AsRef<std::ffi::OsStr>]| {
        let mut v = args(extra);
        v.extend(args(&[&"--epochs", &"8", &"--batch-size", &"4", &"--seed", &seed]));
        v
    };
    let transfer = root.join("transfer");
    mocnn(&short(&[&"transfer", &"--from", &pretrained, &"--data", &kuka, &"--samples", &"312", &"--out", &transfer]))?;
    let kuka_full = root.join("kuka_full");
    mocnn(&short(&[&"train", &"--data", &kuka, &"--samples", &"312", &"--out", &kuka_full]))?;
    let sweep = root.join("sweep");
    mocnn(&short(&[&"sweep", &"--from", &pretrained, &"--data", &kuka, &"--out", &sweep]))?;
    Ok(Pipeline {
        ur_full,
        kuka_full,
        transfer,
        sweep,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    })
}

// ---------------------------------------------------------------- criteria

fn loss_oracles(pipeline: Option<&Pipeline>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..120);
        let g: Vec<u8> = loop {
            let m: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.2))).collect();
            if m.contains(&0) && m.contains(&1) {
                break m;
            }
        };
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-7..1.0 - 1e-7)).collect();
        let fg = g.iter().filter(|&&v| v == 1).count() as f64;
        let (wf, wb) = (n as f64 / fg, n as f64 / (n as f64 - fg));
        let w = fg_bg_weights(&g).unwrap();
        worst = worst.max((w.fg - wf).abs()).max((w.bg - wb).abs());
        let mut m = 0.0;
        for i in 0..n {
            let gi = g[i] as f64;
            m += -wf * gi * p[i].ln() - wb * (1.0 - gi) * (1.0 - p[i]).ln();
        }
        worst = worst.max((mask_loss(&p, &g).unwrap() - m / n as f64).abs());

        let b = rng.gen_range(1..5);
        let d = 3 * rng.gen_range(6..=7);
        let e: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let oracle = |d: usize| {
            let mut s = 0.0;
            for r in 0..b {
                let mut row = 0.0;
                for j in 0..d / 3 {
                    let sq: f64 = (0..3).map(|k| (e[r * d + 3 * j + k] - t[r * d + 3 * j + k]).powi(2)).sum();
                    row += sq.sqrt();
                }
                s += row / (d / 3) as f64;
            }
            s / b as f64
        };
        let jl = joint_loss(&Tensor::new(vec![b, d], e.clone()).unwrap(), &Tensor::new(vec![b, d], t.clone()).unwrap()).unwrap();
        worst = worst.max((jl - oracle(d)).abs());
        let be: Vec<f64> = e[..3 * b].to_vec();
        let bt: Vec<f64> = t[..3 * b].to_vec();
        let bl = base_loss(&Tensor::new(vec![b, 3], be.clone()).unwrap(), &Tensor::new(vec![b, 3], bt.clone()).unwrap()).unwrap();
        let bo: f64 = (0..b)
            .map(|r| (0..3).map(|k| (be[3 * r + k] - bt[3 * r + k]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / b as f64;
        worst = worst.max((bl - bo).abs());

        let c = rng.gen_range(1..5);
        let mut probs = Vec::new();
        for _ in 0..b {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let to = -labels.iter().enumerate().map(|(r, &l)| probs[r * c + l].max(1e-7).ln()).sum::<f64>() / b as f64;
        worst = worst.max((type_loss(&Tensor::new(vec![b, c], probs).unwrap(), &labels).unwrap() - to).abs());

        let comps = LossComponents { mask: rng.gen(), jcoords: rng.gen(), bcoords: rng.gen(), type_: rng.gen() };
        let co = comps.mask + 1.5 * comps.jcoords + 1.5 * comps.bcoords + 0.3 * comps.type_;
        worst = worst.max((combined_loss(comps, &LossWeights::default()).final_ - co).abs());
    }
    if worst > 1e-9 {
        return Verdict::hard(false, format!("oracle deviation {worst:e}"));
    }
    let Some(p) = pipeline else {
        return Verdict::hard(false, "oracles ok; no training logs (pipeline failed)");
    };
    let mut steps = 0;
    let mut log_worst = 0.0f64;
    for dir in [&p.ur_full, &p.kuka_full, &p.transfer] {
        match csv_rows(&dir.join("train_log.csv")) {
            Ok(rows) => {
                for r in rows {
                    let want = 1.0 * r[3] + 1.5 * r[4] + 1.5 * r[5] + 0.3 * r[6];
                    log_worst = log_worst.max((r[7] - want).abs());
                    steps += 1;
                }
            }
            Err(e) => return failed(e),
        }
    }
    Verdict::hard(
        log_worst <= 1e-9,
        format!("max oracle deviation {worst:.1e} over 100 instances each; weighted-sum identity on {steps} logged steps, max deviation {log_worst:.1e}"),
    )
}

fn gradient_check() -> Verdict {
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let corpus = tiny_corpus(3, 1, 6 + seed as usize % 2, 3, 500 + seed);
        let mut net = MultiObjectiveNet::with_spec(ArchitectureSpec::tiny(), corpus.n_joints, 3, seed).unwrap();
        if net.parameter_count() > 1000 {
            return Verdict::hard(false, format!("reduced network has {} parameters", net.parameter_count()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in net.layers().iter().map(|l| l.name).collect::<Vec<_>>() {
            let b = &mut net.layer_mut(name).unwrap().bias.value;
            b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let idx = corpus.indices(SplitTag::Train);
        if let Err(e) = batch_gradients(&mut net, &corpus, &idx, &weights) {
            return failed(e);
        }
        let mut values = Vec::new();
        let mut analytic = Vec::new();
        for (_, p) in net.named_parameters() {
            values.extend_from_slice(p.value.data());
            analytic.extend_from_slice(p.grad.data());
        }
        let mut probe = net.clone();
        let numeric = numerical_gradient(&values, 1e-6, |v| {
            let mut at = 0;
            for p in probe.parameters_mut() {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&v[at..at + n]);
                at += n;
            }
            batch_loss(&probe, &corpus, &idx, &weights).unwrap().final_
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Verdict::hard(worst < 1e-4, format!("20 seeds, 16x16 input, max relative error {worst:.2e}"))
}

fn frozen_identical(before: &[u8], after: &[u8]) -> Result<usize, String> {
    let old = checkpoint::decode(before).map_err(|e| e.to_string())?;
    let new = checkpoint::decode(after).map_err(|e| e.to_string())?;
    let mut frozen = 0;
    for t in new.iter().filter(|t| !t.trainable && t.name != ARCH_TENSOR) {
        let o = old.iter().find(|o| o.name == t.name).ok_or(format!("{} missing", t.name))?;
        let same = o.value.shape() == t.value.shape()
            && o.value.data().iter().zip(t.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("{} changed", t.name));
        }
        frozen += 1;
    }
    Ok(frozen)
}

fn freeze_contract(pipeline: Option<&Pipeline>) -> Verdict {
    let source = tiny_corpus(8, 4, 6, 3, 31);
    let target = tiny_corpus(8, 4, 7, 1, 32);
    let cfg = |epochs| TrainConfig { epochs, batch_size: 4, seed: SEED, early_stop_patience: epochs, ..TrainConfig::full() };
    let net = MultiObjectiveNet::with_spec(ArchitectureSpec::tiny(), 6, 3, SEED).unwrap();
    let pre = match train_full(net, &source, &cfg(2)) {
        Ok(o) => o.final_net.to_bytes(),
        Err(e) => return failed(e),
    };
    let mut notes = Vec::new();
    for epochs in [1, 5, 30] {
        let loaded = MultiObjectiveNet::from_bytes(&pre).unwrap();
        let out = match train_transfer_from(loaded, &target, &cfg(epochs)) {
            Ok(o) => o,
            Err(e) => return failed(e),
        };
        match frozen_identical(&pre, &out.final_net.to_bytes()) {
            Ok(n) if n > 0 => notes.push(format!("{epochs} ep: {n} frozen tensors identical")),
            Ok(_) => return Verdict::hard(false, "no frozen tensors"),
            Err(e) => return Verdict::hard(false, format!("after {epochs} epochs: {e}")),
        }
    }
    if let Some(p) = pipeline {
        let read = |f: PathBuf| fs::read(&f).map_err(|e| format!("{}: {e}", f.display()));
        match read(p.ur_full.join("ckpt-best.bin")).and_then(|a| Ok((a, read(p.transfer.join("ckpt-final.bin"))?))) {
            Ok((a, b)) => match frozen_identical(&a, &b) {
                Ok(n) => notes.push(format!("UR->Kuka run: {n} frozen tensors identical")),
                Err(e) => return Verdict::hard(false, format!("UR->Kuka run: {e}")),
            },
            Err(e) => return failed(e),
        }
    }
    Verdict::hard(true, notes.join("; "))
}

fn homogeneous(t: &RigidTransform) -> Matrix4<f64> {
    let r = &t.rotation.0;
    let p = t.translation;
    Matrix4::new(r[0][0], r[0][1], r[0][2], p.x, r[1][0], r[1][1], r[1][2], p.y, r[2][0], r[2][1], r[2][2], p.z, 0.0, 0.0, 0.0, 1.0)
}

fn geometry_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let v3 = |rng: &mut ChaCha8Rng, s: f64| Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
    let mut worst = 0.0f64;
    for n in [6, 7] {
        for _ in 0..1000 {
            let joints: Vec<JointSpec> = (0..n)
                .map(|_| {
                    let axis = v3(&mut rng, 1.0).normalized();
                    let offset = RigidTransform::new(Mat3::from_rotation_vector(v3(&mut rng, 2.0)), v3(&mut rng, 0.5));
                    JointSpec::new(axis, offset, 0.05)
                })
                .collect();
            let chain = KinematicChain::new(joints).unwrap();
            let angles: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.14..3.14)).collect();
            let got = forward_kinematics(&chain, &angles).unwrap();
            let mut frame: Matrix4<f64> = Matrix4::identity();
            for (k, (j, &a)) in chain.joints().iter().zip(&angles).enumerate() {
                let axis = Unit::new_normalize(Vector3::new(j.axis.x, j.axis.y, j.axis.z));
                frame = frame * Rotation3::from_axis_angle(&axis, a).to_homogeneous() * homogeneous(&j.offset);
                let p = got[k + 1];
                worst = worst.max((p.x - frame[(0, 3)]).abs()).max((p.y - frame[(1, 3)]).abs()).max((p.z - frame[(2, 3)]).abs());
            }
        }
    }
    let cam = PinholeCamera::new(365.0, 365.0, 256.0, 212.0, 512, 424).unwrap();
    let mut exact = project(&cam, Vec3::new(0.0, 0.0, 2.5)).unwrap() == (256.0, 212.0);
    exact &= project(&cam, Vec3::new(1.0, -0.5, 2.0)).unwrap() == (438.5, 120.75);
    for _ in 0..1000 {
        let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..4.0));
        let k = rng.gen_range(0.2..5.0);
        let (a, b) = (project(&cam, p).unwrap(), project(&cam, p * k).unwrap());
        worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
    }
    Verdict::hard(
        worst <= 1e-9 && exact,
        format!("FK vs homogeneous-matrix oracle on 1000 configurations each for 6 and 7 joints, projection identities; max deviation {worst:.1e}"),
    )
}

fn ground_truth_consistency() -> Verdict {
    let mut notes = Vec::new();
    for model in RobotModel::ALL {
        let robot = model.robot();
        let base = SceneConfig::for_robot(model, SEED);
        let radii: Vec<f64> = robot.chain.joints().iter().map(|j| j.radius).collect();
        let (mut lo, mut hi) = (1.0f64, 0.0f64);
        for i in 0..500 {
            let s = match render_sample(&robot, &scene_for_index(&base, i)) {
                Ok(s) => s,
                Err(e) => return failed(e),
            };
            let f = s.foreground_fraction();
            lo = lo.min(f);
            hi = hi.max(f);
            if !(FOREGROUND_MIN..=FOREGROUND_MAX).contains(&f) {
                return Verdict::hard(false, format!("{model} #{i}: foreground {f:.4}"));
            }
            for (k, p) in s.joints_3d.iter().enumerate() {
                let (u, v) = project(&s.camera, *p).unwrap();
                if u < 0.0 || v < 0.0 || u >= s.width as f64 || v >= s.height as f64 {
                    continue;
                }
                let r = [k.checked_sub(1), Some(k)].into_iter().flatten().filter_map(|l| radii.get(l)).fold(0.0f64, |a, &b| a.max(b));
                let limit = 2.0 * s.camera.fx * r / p.z;
                let reach = limit.ceil() as i64 + 1;
                let near = (-reach..=reach).any(|dr| {
                    (-reach..=reach).any(|dc| {
                        let (row, col) = (v.floor() as i64 + dr, u.floor() as i64 + dc);
                        row >= 0
                            && col >= 0
                            && (row as usize) < s.height
                            && (col as usize) < s.width
                            && s.mask[row as usize * s.width + col as usize] != 0
                            && ((col as f64 + 0.5 - u).powi(2) + (row as f64 + 0.5 - v).powi(2)).sqrt() <= limit
                    })
                });
                if !near {
                    return Verdict::hard(false, format!("{model} #{i}: joint {k} is off the mask"));
                }
            }
        }
        notes.push(format!("{model} [{lo:.3}, {hi:.3}]"));
    }
    Verdict::hard(true, format!("500 samples per family, foreground {}", notes.join(", ")))
}

fn pipeline_criterion(p: &Pipeline) -> Result<Verdict, String> {
    let tl = report(&p.transfer)?;
    let full = report(&p.kuka_full)?;
    let acc = tl["mask_accuracy"].as_f64().ok_or("mask_accuracy")?;
    let tl_err = tl["joint_error_median_cm"].as_f64().ok_or("joint error")?;
    let full_err = full["joint_error_median_cm"].as_f64().ok_or("joint error")?;
    let full_epochs = csv_rows(&p.kuka_full.join("epochs.csv"))?;
    let tl_epochs = csv_rows(&p.transfer.join("epochs.csv"))?;
    let last = full_epochs.last().ok_or("empty log")?;
    let (full_final, full_steps) = (last[8], last[1]);
    let target = 1.1 * full_final;
    let reached = tl_epochs.iter().find(|r| r[8] <= target).map(|r| r[1]);
    let steps_ok = reached.is_some_and(|s| s < 0.25 * full_steps);
    let pass = acc >= 0.90 && tl_err <= 2.0 * full_err && steps_ok && p.minutes < 30.0;
    Ok(Verdict::hard(
        pass,
        format!(
            "transfer mask accuracy {acc:.4} (>= 0.90); joint median {tl_err:.2} cm vs full-on-Kuka {full_err:.2} cm (<= 2x); \
             within 10% of full final val loss {full_final:.4} after {} of {full_steps} steps (< 25%); pipeline {:.1} min",
            reached.map_or("never".to_string(), |s| format!("{s}")),
            p.minutes
        ),
    ))
}

fn sweep_criterion(p: &Pipeline) -> Result<Verdict, String> {
    let rows = csv_rows(&p.sweep.join("sweep.csv"))?;
    let ns: Vec<usize> = rows.iter().map(|r| r[0] as usize).collect();
    if ns != [48, 96, 192, 312, 624] {
        return Ok(Verdict::hard(false, format!("unexpected counts {ns:?}")));
    }
    let loss: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let wall: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let non_increasing = (1..4).all(|i| loss[i] <= loss[i - 1] * 1.05);
    let plateau = (loss[3] - loss[4]) / loss[3] < 0.15;
    let wall_up = wall.windows(2).all(|w| w[1] > w[0]);
    let mut s = String::new();
    for (n, (l, w)) in ns.iter().zip(loss.iter().zip(&wall)) {
        let _ = write!(s, "{n}:{l:.4}/{w:.0}s ");
    }
    Ok(Verdict::hard(
        non_increasing && plateau && wall_up,
        format!("{}(non-increasing to 312: {non_increasing}, 312->624 gain {:.1}% < 15%: {plateau}, wall time increasing: {wall_up})", s, 100.0 * (loss[3] - loss[4]) / loss[3]),
    ))
}

fn determinism(root: &Path) -> Result<Verdict, String> {
    let run = |tag: &str| -> Result<PathBuf, String> {
        let d = root.join(tag);
        let (ur, kuka) = (d.join("ur"), d.join("kuka"));
        mocnn(&args(&[&"gen", &"--robot", &"ur10like", &"--n", &"8", &"--seed", &"3", &"--out", &ur]))?;
        mocnn(&args(&[&"gen", &"--robot", &"kukalike", &"--n", &"12", &"--seed", &"4", &"--out", &kuka]))?;
        mocnn(&args(&[&"train", &"--data", &ur, &"--out", &d.join("full"), &"--epochs", &"2", &"--batch-size", &"3"]))?;
        let ckpt = d.join("full").join("ckpt-best.bin");
        mocnn(&args(&[&"transfer", &"--from", &ckpt, &"--data", &kuka, &"--samples", &"6", &"--out", &d.join("tl"), &"--epochs", &"2", &"--batch-size", &"3"]))?;
        mocnn(&args(&[&"eval", &"--ckpt", &d.join("tl").join("ckpt-final.bin"), &"--data", &kuka, &"--out", &d.join("ev")]))?;
        mocnn(&args(&[&"sweep", &"--from", &ckpt, &"--data", &kuka, &"--counts", &"3,6", &"--out", &d.join("sw"), &"--epochs", &"1", &"--batch-size", &"3"]))?;
        Ok(d)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut files = 0;
    for f in [
        "ur/manifest.jsonl",
        "ur/dataset.json",
        "kuka/manifest.jsonl",
        "full/ckpt-best.bin",
        "full/ckpt-final.bin",
        "full/train_log.csv",
        "full/epochs.csv",
        "full/per_joint.csv",
        "tl/ckpt-best.bin",
        "tl/ckpt-final.bin",
        "tl/train_log.csv",
        "tl/epochs.csv",
        "ev/per_joint.csv",
    ] {
        let (x, y) = (fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?, fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?);
        if x != y {
            return Ok(Verdict::hard(false, format!("{f} differs")));
        }
        files += 1;
    }
    let strip = |d: &Path| -> Result<Vec<String>, String> {
        Ok(fs::read_to_string(d.join("sw/sweep.csv"))
            .map_err(|e| e.to_string())?
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(2);
                f.join(",")
            })
            .collect())
    };
    if strip(&a)? != strip(&b)? {
        return Ok(Verdict::hard(false, "sweep.csv differs outside wall_seconds"));
    }
    Ok(Verdict::hard(true, format!("{files} checkpoints/manifests/CSVs bit-identical across reruns; sweep.csv identical apart from wall_seconds")))
}

fn profile_criterion(p: &Pipeline) -> Result<Verdict, String> {
    let rows = csv_rows(&p.transfer.join("per_joint.csv"))?;
    let ordered = rows.iter().enumerate().all(|(i, r)| r[0] as usize == i);
    let (first, last) = (rows.first().ok_or("empty profile")?[1], rows.last().ok_or("empty profile")?[1]);
    let medians: Vec<String> = rows.iter().map(|r| format!("{:.1}", r[1])).collect();
    Ok(Verdict {
        pass: ordered && last >= first,
        soft: true,
        detail: format!("medians base->end-effector [{}] cm; end-effector {last:.2} >= base {first:.2}", medians.join(", ")),
    })
}

fn main() -> ExitCode {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).expect("acceptance directory");

    let pipeline = run_pipeline(&root.join("pipeline"));
    let p = pipeline.as_ref().ok();
    let from = |r: Result<Verdict, String>| r.unwrap_or_else(failed);
    let verdicts = [
        (1, "loss formula oracles", loss_oracles(p)),
        (2, "gradient correctness", gradient_check()),
        (3, "freeze contract", freeze_contract(p)),
        (4, "geometry oracles", geometry_oracles()),
        (5, "ground-truth consistency", ground_truth_consistency()),
        (6, "UR -> Kuka pipeline", pipeline.as_ref().map_err(Clone::clone).and_then(pipeline_criterion).unwrap_or_else(failed)),
        (7, "sample-count sweep", from(pipeline.as_ref().map_err(Clone::clone).and_then(sweep_criterion))),
        (8, "determinism", from(determinism(&root.join("determinism")))),
        (9, "per-joint profile", from(pipeline.as_ref().map_err(Clone::clone).and_then(profile_criterion))),
    ];

    let mut hard_failures = 0;
    println!();
    for (id, name, v) in &verdicts {
        let tag = match (v.pass, v.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        println!("criterion {id} [{tag}] {name}: {}", v.detail);
        hard_failures += usize::from(!v.pass && !v.soft);
    }
    println!("artifacts: {}", root.display());
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
