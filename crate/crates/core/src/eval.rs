//! Test-split metrics, forward timing, the training-sample sweep and the
//! CSV/SVG report files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::write_atomic;
use crate::autodiff::Tensor;
use crate::datastore::{Corpus, SplitTag};
use crate::error::{Error, Result};
use crate::model::MultiObjectiveNet;
use crate::train::{train_transfer_from, TrainConfig};

pub const REPORT_FILE: &str = "report.json";
pub const PER_JOINT_CSV: &str = "per_joint.csv";
pub const PER_JOINT_SVG: &str = "per_joint.svg";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";
pub const DEFAULT_SWEEP_COUNTS: [usize; 5] = [48, 96, 192, 312, 624];
pub const TIMING_MIN_RUNS: usize = 50;
pub const TIMING_WARMUP: usize = 5;

/// Fraction of pixels where `pred >= threshold` agrees with the ground truth.
pub fn mask_accuracy(pred: &[f64], gt: &[u8], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} pixels", pred.len(), gt.len())));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| (**p >= threshold) == (**g != 0)).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Median; the midpoint of the central pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v.get(rank.max(1) - 1).copied()
}

/// Per-point Euclidean errors in centimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateErrors {
    /// `per_point[j][i]`: error of point `j` in sample `i`.
    pub per_point: Vec<Vec<f64>>,
    pub per_point_median: Vec<f64>,
    /// Median over every point of every sample.
    pub median: f64,
}

/// `est` and `gt` are `[B, 3 N]`; returns errors for each of the `N` points.
pub fn coordinate_errors(est: &Tensor, gt: &Tensor) -> Result<CoordinateErrors> {
    let (b, d) = match (est.shape(), gt.shape()) {
        ([b, d], [gb, gd]) if b == gb && d == gd && d % 3 == 0 && *b > 0 && *d > 0 => (*b, *d),
        (e, g) => return Err(Error::ShapeMismatch(format!("estimate {e:?} vs ground truth {g:?}"))),
    };
    let n = d / 3;
    let mut per_point = vec![Vec::with_capacity(b); n];
    for i in 0..b {
        let (e, g) = (est.outer(i), gt.outer(i));
        for (j, errs) in per_point.iter_mut().enumerate() {
            let sq: f64 = (0..3).map(|k| (e[3 * j + k] - g[3 * j + k]).powi(2)).sum();
            errs.push(100.0 * sq.sqrt());
        }
    }
    let all: Vec<f64> = per_point.iter().flatten().copied().collect();
    Ok(CoordinateErrors {
        per_point_median: per_point.iter().map(|v| median(v).expect("b > 0")).collect(),
        median: median(&all).expect("b > 0"),
        per_point,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_accuracy: f64,
    pub joint_error_median_cm: f64,
    pub base_error_median_cm: f64,
    /// Median per joint, ordered base side to end effector.
    pub per_joint_error_cm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_accuracy: Option<f64>,
    pub forward_ms_mean: f64,
    pub test_samples: usize,
}

/// One row of the per-joint profile; index 0 is the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub joint_index: usize,
    pub median_cm: f64,
    pub p90_cm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub profile: Vec<ProfileRow>,
}

/// Runs `net` over the test split. `with_type` adds the robot-type accuracy.
pub fn evaluate(net: &MultiObjectiveNet, corpus: &Corpus, with_type: bool) -> Result<Evaluation> {
    let idx = corpus.indices(SplitTag::Test);
    if idx.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    if net.n_joints() != corpus.n_joints {
        return Err(Error::ShapeMismatch(format!(
            "network predicts {} joints, dataset has {}",
            net.n_joints(),
            corpus.n_joints
        )));
    }
    let b = idx.len();
    let mut hits = 0.0;
    let mut type_hits = 0usize;
    let (mut je, mut jg, mut be, mut bg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut images = Vec::with_capacity(b);
    for &i in &idx {
        let s = &corpus.samples[i];
        let image = s.image();
        let out = net.forward_sample(&image)?;
        images.push(image);
        hits += mask_accuracy(&out.mask, &s.mask, 0.5)?;
        let argmax = (0..out.types.len()).fold(0, |best, k| if out.types[k] > out.types[best] { k } else { best });
        type_hits += (argmax == s.label) as usize;
        je.extend_from_slice(&out.joints);
        jg.extend_from_slice(&s.joints);
        be.extend_from_slice(&out.base);
        bg.extend_from_slice(&s.base);
    }
    let d = 3 * corpus.n_joints;
    let joints = coordinate_errors(&Tensor::new(vec![b, d], je)?, &Tensor::new(vec![b, d], jg)?)?;
    let base = coordinate_errors(&Tensor::new(vec![b, 3], be)?, &Tensor::new(vec![b, 3], bg)?)?;

    let mut profile = vec![row(0, &base.per_point[0])];
    profile.extend(joints.per_point.iter().enumerate().map(|(j, e)| row(j + 1, e)));

    Ok(Evaluation {
        report: EvalReport {
            mask_accuracy: hits / b as f64,
            joint_error_median_cm: joints.median,
            base_error_median_cm: base.median,
            per_joint_error_cm: joints.per_point_median,
            type_accuracy: with_type.then(|| type_hits as f64 / b as f64),
            forward_ms_mean: timing(net, &images)?,
            test_samples: b,
        },
        profile,
    })
}

fn row(joint_index: usize, errors: &[f64]) -> ProfileRow {
    ProfileRow {
        joint_index,
        median_cm: median(errors).unwrap_or(0.0),
        p90_cm: percentile(errors, 0.9).unwrap_or(0.0),
    }
}

/// Mean wall time of one single-image forward pass, in milliseconds. The
/// images are cycled until [`TIMING_MIN_RUNS`] timed passes have run, after
/// [`TIMING_WARMUP`] untimed ones.
pub fn timing(net: &MultiObjectiveNet, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptySplit("timing".into()));
    }
    let runs = images.len().max(TIMING_MIN_RUNS);
    for image in images.iter().cycle().take(TIMING_WARMUP) {
        net.forward_sample(image)?;
    }
    let start = Instant::now();
    for image in images.iter().cycle().take(runs) {
        net.forward_sample(image)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / runs as f64)
}

/// Mean per-sample milliseconds of batched forward passes of `batch` images.
pub fn timing_batched(net: &MultiObjectiveNet, images: &[Tensor], batch: usize) -> Result<f64> {
    if images.is_empty() || batch == 0 {
        return Err(Error::EmptySplit("timing".into()));
    }
    let batches: Vec<Tensor> = images
        .chunks(batch)
        .map(Tensor::stack)
        .collect::<Result<_>>()?;
    net.forward(&batches[0])?;
    let mut done = 0;
    let start = Instant::now();
    while done < images.len().max(TIMING_MIN_RUNS) {
        for b in &batches {
            net.forward(b)?;
            done += b.shape()[0];
        }
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / done as f64)
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("joint_index,median_cm,p90_cm\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.joint_index, r.median_cm, r.p90_cm);
    }
    s
}

/// Writes `report.json`, `per_joint.csv` and `per_joint.svg` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&eval.report)?;
    json.push('\n');
    write_atomic(&dir.join(REPORT_FILE), json.as_bytes())?;
    write_atomic(&dir.join(PER_JOINT_CSV), profile_csv(&eval.profile).as_bytes())?;
    let bars: Vec<(String, f64)> = eval
        .profile
        .iter()
        .map(|r| {
            let label = if r.joint_index == 0 { "base".to_string() } else { format!("J{}", r.joint_index) };
            (label, r.median_cm)
        })
        .collect();
    let svg = bar_chart("Median error per joint", "error [cm]", &bars);
    write_atomic(&dir.join(PER_JOINT_SVG), svg.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    /// Validation loss of the retained (best) checkpoint.
    pub final_val_loss: f64,
    pub wall_seconds: f64,
    pub steps: usize,
}

/// One transfer run per count on nested, seeded subsets of the train split.
pub fn sample_count_sweep(
    pretrained: &MultiObjectiveNet,
    corpus: &Corpus,
    counts: &[usize],
    config: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let available = corpus.count(SplitTag::Train);
    let needed = counts.iter().copied().max().unwrap_or(0);
    if needed > available {
        return Err(Error::InsufficientSamples { needed, available });
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let start = Instant::now();
        let subset = corpus.train_subset(n, config.seed)?;
        let outcome = train_transfer_from(pretrained.clone(), &subset, config)?;
        let best = outcome.log.best_val().expect("at least one epoch");
        rows.push(SweepRow {
            n,
            final_val_loss: best.final_,
            wall_seconds: start.elapsed().as_secs_f64(),
            steps: outcome.log.total_steps(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n,final_val_loss,wall_seconds,steps\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.3},{}", r.n, r.final_val_loss, r.wall_seconds, r.steps);
    }
    s
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    write_atomic(&dir.join(SWEEP_CSV), sweep_csv(rows).as_bytes())?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.final_val_loss)).collect();
    let svg = line_chart("Validation loss vs. training samples", "training samples", "validation loss", &pts);
    write_atomic(&dir.join(SWEEP_SVG), svg.as_bytes())
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn svg_frame(title: &str, y_label: &str, body: &str, y_max: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (0.01..1000.0).contains(&v.abs()) {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0_f64, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

/// Bar chart of labelled values.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let y_max = nice_max(bars.iter().map(|b| b.1));
    let (x0, y0) = (MARGIN, H - MARGIN);
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let slot = plot_w / bars.len().max(1) as f64;
    let mut body = String::new();
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = plot_h * v.max(0.0) / y_max;
        let x = x0 + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            body,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4878a8"/>"##,
            y0 - h,
            slot * 0.7
        );
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            y0 + 18.0,
            escape(label)
        );
    }
    svg_frame(title, y_label, &body, y_max)
}

/// Line chart with markers; x ticks at the data points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let y_max = nice_max(points.iter().map(|p| p.1));
    let x_max = points.iter().map(|p| p.0).fold(0.0_f64, f64::max).max(1.0);
    let (x0, y0) = (MARGIN, H - MARGIN);
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let px = |x: f64| x0 + plot_w * x / x_max;
    let py = |y: f64| y0 - plot_h * y / y_max;
    let mut body = String::new();
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
    let _ = writeln!(body, r##"<polyline points="{}" fill="none" stroke="#c0504d" stroke-width="2"/>"##, path.join(" "));
    for &(x, y) in points {
        let _ = writeln!(body, r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#c0504d"/>"##, px(x), py(y));
        let _ = writeln!(body, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), y0 + 18.0);
    }
    let _ = writeln!(body, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    svg_frame(title, y_label, &body, y_max)
}
