//! SSIM and perceptual-distance evaluation, the Copy-Last-Frame baseline,
//! motion-binned and multi-step reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vidpred_tensor::{Graph, Tensor};

use crate::backbone::Backbone;
use crate::data::ClipSource;
use crate::error::{io_err, Error, Result};
use crate::frames::{Frame, FrameSequence};
use crate::generator::Generator;
use crate::losses::feature_distance;
use crate::nn::RunRng;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub const COPY_LAST_FRAME: &str = "Copy-Last-Frame";

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|j| k[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two `(C, H, W)` frames with dynamic range 1:
/// 11×11 Gaussian window (σ = 1.5), valid region, per channel then averaged.
pub fn ssim(x: &Frame, y: &Frame) -> Result<f64> {
    x.expect_same_shape(y)?;
    let &[c, h, w] = x.shape() else {
        return Err(Error::Input(format!("ssim expects (C, H, W) frames, got {:?}", x.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("frame {h}x{w} is smaller than the SSIM window")));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = x.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let aa = filter_valid(&prod(&a, &a), h, w, &k);
        let bb = filter_valid(&prod(&b, &b), h, w, &k);
        let ab = filter_valid(&prod(&a, &b), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Perceptual distance between two `(3, H, W)` frames: per-site unit
/// normalised features, squared differences weighted by the backbone's lin
/// coefficients, spatially averaged and summed over blocks.
pub fn perceptual_distance(x: &Frame, y: &Frame, backbone: &Backbone<f64>) -> Result<f64> {
    x.expect_same_shape(y)?;
    let &[3, h, w] = x.shape() else {
        return Err(Error::Input(format!("perceptual distance expects (3, H, W) frames, got {:?}", x.shape())));
    };
    let mut g = Graph::<f64>::new();
    let a = g.constant(x.cast::<f64>().reshape(&[1, 3, 1, h, w])?);
    let b = g.constant(y.cast::<f64>().reshape(&[1, 3, 1, h, w])?);
    let fa = backbone.features(&mut g, a)?;
    let fb = backbone.features(&mut g, b)?;
    let lin = backbone.lin();
    let mut total = 0.0;
    for (k, (&p, &q)) in fa.iter().zip(&fb).enumerate() {
        let d = feature_distance(&mut g, p, q, lin.map(|l| l[k].as_slice()))?;
        total += g.value(d).item();
    }
    Ok(total)
}

/// The last input frame repeated `n_steps` times.
pub fn copy_last_frame(clip: &FrameSequence, n_steps: usize) -> Result<FrameSequence> {
    if n_steps == 0 {
        return Err(Error::Input("copy_last_frame needs n_steps >= 1".into()));
    }
    let last = clip.frame(clip.len() - 1);
    FrameSequence::from_frames(&vec![last; n_steps], clip.source_id.clone(), clip.start_index + clip.len())
}

/// One metric tuple for one sample, method and horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub method: String,
    /// 1-based prediction horizon.
    pub step: usize,
    pub ssim: f64,
    pub pdist: f64,
    /// Copy-Last-Frame next-frame perceptual distance of the sample.
    pub motion: f64,
}

/// Anything that continues an 8-frame clip.
pub trait Predictor {
    fn name(&self) -> String;
    fn rollout(&mut self, clip: &FrameSequence, n_steps: usize) -> Result<FrameSequence>;
}

pub struct CopyLastFrame;

impl Predictor for CopyLastFrame {
    fn name(&self) -> String {
        COPY_LAST_FRAME.into()
    }

    fn rollout(&mut self, clip: &FrameSequence, n_steps: usize) -> Result<FrameSequence> {
        copy_last_frame(clip, n_steps)
    }
}

/// Generator rollouts with a dedicated rng stream.
pub struct GeneratorPredictor<'a> {
    pub name: String,
    pub generator: &'a Generator<f32>,
    pub rng: RunRng,
    pub noise: bool,
}

impl Predictor for GeneratorPredictor<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn rollout(&mut self, clip: &FrameSequence, n_steps: usize) -> Result<FrameSequence> {
        self.generator.rollout(clip, n_steps, &mut self.rng, self.noise)
    }
}

/// Evaluation output: per-sample records plus how many clips were too short.
#[derive(Clone, Debug, Default)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub skipped: usize,
}

/// Rolls every method out `n_steps` frames on every clip with at least that
/// many targets and scores each step against ground truth.
pub fn multi_step_eval(
    methods: &mut [&mut dyn Predictor],
    data: &dyn ClipSource,
    n_steps: usize,
    metric: &Backbone<f64>,
) -> Result<EvalRun> {
    if n_steps == 0 {
        return Err(Error::Input("n_steps must be >= 1".into()));
    }
    let mut run = EvalRun::default();
    for i in 0..data.len() {
        let clip = data.clip(i)?;
        if clip.target.len() < n_steps {
            run.skipped += 1;
            continue;
        }
        let sample_id = format!("{}@{}", clip.input.source_id, clip.input.start_index);
        let last = clip.input.frame(clip.input.len() - 1);
        let truth = clip.target.frames();
        let motion = perceptual_distance(&last, &truth[0], metric)?;
        for m in methods.iter_mut() {
            let preds = m.rollout(&clip.input, n_steps)?;
            for (k, p) in preds.frames().iter().enumerate() {
                run.records.push(EvalRecord {
                    sample_id: sample_id.clone(),
                    method: m.name(),
                    step: k + 1,
                    ssim: ssim(p, &truth[k])?,
                    pdist: perceptual_distance(p, &truth[k], metric)?,
                    motion,
                });
            }
        }
    }
    Ok(run)
}

/// Mean SSIM and perceptual distance of one method at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub step: usize,
    pub n: usize,
    pub ssim: f64,
    pub pdist: f64,
}

fn methods_in_order(records: &[EvalRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

/// Arithmetic means per (method, step), methods in first-seen order.
pub fn step_means(records: &[EvalRecord]) -> Vec<MethodScore> {
    let mut out = Vec::new();
    for m in methods_in_order(records) {
        let max_step = records.iter().filter(|r| r.method == m).map(|r| r.step).max().unwrap_or(0);
        for step in 1..=max_step {
            let sel: Vec<&EvalRecord> = records.iter().filter(|r| r.method == m && r.step == step).collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            out.push(MethodScore {
                method: m.clone(),
                step,
                n: sel.len(),
                ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                pdist: sel.iter().map(|r| r.pdist).sum::<f64>() / n,
            });
        }
    }
    out
}

/// Table-1 rows: next-frame (step 1) means per method.
pub fn table1_rows(records: &[EvalRecord]) -> Vec<(String, f64, f64)> {
    step_means(records)
        .into_iter()
        .filter(|s| s.step == 1)
        .map(|s| (s.method, s.ssim, s.pdist))
        .collect()
}

/// Renders `method,ssim,lpips_x100` with SSIM to 3 and LPIPS×100 to 2 decimals.
pub fn render_table1(rows: &[(String, f64, f64)]) -> String {
    let mut s = String::from("method,ssim,lpips_x100\n");
    for (m, ssim, pd) in rows {
        let _ = writeln!(s, "{m},{ssim:.3},{:.2}", pd * 100.0);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub method: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Fewer than `min_count` samples.
    pub sparse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    pub metric: String,
    pub bin_width: f64,
    pub bins: Vec<BinStats>,
    /// Upper edge of the last populated bin.
    pub truncated_at: f64,
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Ssim,
    Pdist,
}

impl Metric {
    fn of(self, r: &EvalRecord) -> f64 {
        match self {
            Metric::Ssim => r.ssim,
            Metric::Pdist => r.pdist,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Pdist => "pdist",
        }
    }
}

/// Groups step-1 records by motion score into bins of `bin_width` and
/// summarises `metric` per method and bin. Every bin up to the last
/// populated one is listed; empty bins have `count = 0`.
pub fn motion_binned_report(records: &[EvalRecord], metric: Metric, bin_width: f64, min_count: usize) -> Result<BinnedReport> {
    let recs: Vec<&EvalRecord> = records.iter().filter(|r| r.step == 1).collect();
    if recs.is_empty() {
        return Err(Error::Input("no records to bin".into()));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Input("bin width must be > 0".into()));
    }
    let bin_of = |m: f64| (m / bin_width).floor().max(0.0) as usize;
    let n_bins = recs.iter().map(|r| bin_of(r.motion)).max().unwrap() + 1;
    let mut bins = Vec::new();
    for m in methods_in_order(records) {
        for b in 0..n_bins {
            let mut vals: Vec<f64> = recs
                .iter()
                .filter(|r| r.method == m && bin_of(r.motion) == b)
                .map(|r| metric.of(r))
                .collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            let count = vals.len();
            bins.push(BinStats {
                method: m.clone(),
                lo: b as f64 * bin_width,
                hi: (b + 1) as f64 * bin_width,
                count,
                mean: if count > 0 { vals.iter().sum::<f64>() / count as f64 } else { f64::NAN },
                median: quantile(&vals, 0.5),
                q1: quantile(&vals, 0.25),
                q3: quantile(&vals, 0.75),
                sparse: count < min_count,
            });
        }
    }
    Ok(BinnedReport {
        metric: metric.name().into(),
        bin_width,
        bins,
        truncated_at: n_bins as f64 * bin_width,
    })
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

pub fn render_metrics_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("sample_id,method,step,ssim,pdist,motion\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{:.6}", r.sample_id, r.method, r.step, r.ssim, r.pdist, r.motion);
    }
    s
}

pub fn render_bins_csv(report: &BinnedReport) -> String {
    let mut s = String::from("method,bin_lo,bin_hi,count,mean,median,q1,q3,flag\n");
    let methods: Vec<String> = {
        let mut v: Vec<String> = Vec::new();
        for b in &report.bins {
            if !v.contains(&b.method) {
                v.push(b.method.clone());
            }
        }
        v
    };
    for m in methods {
        for b in report.bins.iter().filter(|b| b.method == m) {
            let flag = if b.count == 0 {
                "empty"
            } else if b.sparse {
                "sparse"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{},{},{},{},{},{}",
                b.method,
                b.lo,
                b.hi,
                b.count,
                fmt_opt(b.mean),
                fmt_opt(b.median),
                fmt_opt(b.q1),
                fmt_opt(b.q3),
                flag
            );
        }
        let _ = writeln!(s, "{m},{:.2},,0,,,,,truncated", report.truncated_at);
    }
    s
}

pub fn render_steps_csv(scores: &[MethodScore]) -> String {
    let mut s = String::from("method,step,n,ssim,pdist\n");
    for sc in scores {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6}", sc.method, sc.step, sc.n, sc.ssim, sc.pdist);
    }
    s
}

/// Histogram of `pdist` at `step` per method over `n_bins` equal bins
/// spanning the observed range.
pub fn render_histogram_csv(records: &[EvalRecord], step: usize, n_bins: usize) -> String {
    let sel: Vec<&EvalRecord> = records.iter().filter(|r| r.step == step).collect();
    let mut s = String::from("method,bin_lo,bin_hi,count\n");
    if sel.is_empty() || n_bins == 0 {
        return s;
    }
    let lo = sel.iter().map(|r| r.pdist).fold(f64::INFINITY, f64::min);
    let hi = sel.iter().map(|r| r.pdist).fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_bins as f64).max(1e-12);
    for m in methods_in_order(records) {
        let mut counts = vec![0usize; n_bins];
        for r in sel.iter().filter(|r| r.method == m) {
            counts[(((r.pdist - lo) / width) as usize).min(n_bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let _ = writeln!(s, "{m},{:.6},{:.6},{c}", lo + b as f64 * width, lo + (b + 1) as f64 * width);
        }
    }
    s
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn draw_line(img: &mut image::RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, image::Rgb(c));
            }
        }
    }
}

/// Simple line chart of one series per method (no text; colours follow
/// method order in the accompanying CSV).
pub fn plot_series(series: &[(String, Vec<(f64, f64)>)]) -> image::RgbImage {
    let (w, h, m) = (480u32, 320u32, 24.0);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|p| p.1.is_finite()).collect();
    if pts.is_empty() {
        return img;
    }
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ymin, ymax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let sx = (w as f64 - 2.0 * m) / (xmax - xmin).max(1e-12);
    let sy = (h as f64 - 2.0 * m) / (ymax - ymin).max(1e-12);
    let map = |(x, y): (f64, f64)| (m + (x - xmin) * sx, h as f64 - m - (y - ymin) * sy);
    let axis = [0, 0, 0];
    draw_line(&mut img, (m, h as f64 - m), (w as f64 - m, h as f64 - m), axis);
    draw_line(&mut img, (m, m), (m, h as f64 - m), axis);
    for (i, (_, p)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let p: Vec<(f64, f64)> = p.iter().copied().filter(|q| q.1.is_finite()).collect();
        for win in p.windows(2) {
            draw_line(&mut img, map(win[0]), map(win[1]), c);
        }
        if p.len() == 1 {
            draw_line(&mut img, map(p[0]), map(p[0]), c);
        }
    }
    img
}

/// Writes `metrics.csv`, `table1.csv`, `fig4_bins.csv`, `fig5_steps.csv`,
/// `fig5_hist.csv`, `summary.json` and plot PNGs into `out_dir`.
pub fn emit_reports(records: &[EvalRecord], out_dir: &Path, bin_width: f64, min_count: usize, hist_step: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    };
    let steps = step_means(records);
    let table = table1_rows(records);
    let bins = motion_binned_report(records, Metric::Pdist, bin_width, min_count)?;
    let max_step = records.iter().map(|r| r.step).max().unwrap_or(1);
    let hstep = hist_step.min(max_step);
    write("metrics.csv", &render_metrics_csv(records))?;
    write("table1.csv", &render_table1(&table))?;
    write("fig4_bins.csv", &render_bins_csv(&bins))?;
    write("fig5_steps.csv", &render_steps_csv(&steps))?;
    write("fig5_hist.csv", &render_histogram_csv(records, hstep, 20))?;
    let summary = serde_json::json!({
        "table1": table.iter().map(|(m, s, p)| serde_json::json!({"method": m, "ssim": s, "pdist": p})).collect::<Vec<_>>(),
        "steps": steps,
        "bins": bins,
        "histogram_step": hstep,
    });
    write("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    let mut by_method: BTreeMap<usize, (String, Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
    for (i, m) in methods_in_order(records).into_iter().enumerate() {
        by_method.insert(i, (m, Vec::new(), Vec::new()));
    }
    for s in &steps {
        if let Some(e) = by_method.values_mut().find(|e| e.0 == s.method) {
            e.1.push((s.step as f64, s.pdist));
            e.2.push((s.step as f64, s.ssim));
        }
    }
    let pd: Vec<(String, Vec<(f64, f64)>)> = by_method.values().map(|e| (e.0.clone(), e.1.clone())).collect();
    let ss: Vec<(String, Vec<(f64, f64)>)> = by_method.values().map(|e| (e.0.clone(), e.2.clone())).collect();
    let save = |name: &str, img: image::RgbImage| -> Result<()> {
        let p = out_dir.join(name);
        img.save(&p).map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display())))
    };
    save("fig5_pdist.png", plot_series(&pd))?;
    save("fig5_ssim.png", plot_series(&ss))?;
    let fig4: Vec<(String, Vec<(f64, f64)>)> = methods_in_order(records)
        .into_iter()
        .map(|m| {
            let p = bins
                .bins
                .iter()
                .filter(|b| b.method == m && b.count > 0)
                .map(|b| ((b.lo + b.hi) / 2.0, b.mean))
                .collect();
            (m, p)
        })
        .collect();
    save("fig4_bins.png", plot_series(&fig4))?;
    Ok(())
}

/// Frame-level helper for callers holding plain tensors.
pub fn frames_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data() == b.data()
}
