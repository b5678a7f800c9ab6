//! Frame-directory ingestion, preprocessing, clip sampling and augmentation.
//!
//! Datasets are laid out as `<root>/<sequence_id>/<frame>.<png|jpg>`; the
//! lexicographic order of file names defines time.

pub mod synth;

use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::Tensor;

use crate::error::{io_err, Error, Result};
use crate::frames::{ClipSample, Frame, FrameSequence, INPUT_FRAMES};
use crate::nn::RunRng;

/// Frames per sampled training window: the 8 inputs are its frames 1..=8 and
/// the target is frame 9.
pub const TRAIN_WINDOW: usize = 10;

/// Target resolution (H, W).
pub const DEFAULT_TARGET_HW: (usize, usize) = (128, 160);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Non-overlapping windows at offsets 0, window, 2·window, …
    Train,
    /// Sliding windows at `stride`.
    Eval { stride: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub kind: DatasetKind,
    /// Frames per window (input context plus targets).
    pub window: usize,
    /// Keep every `temporal_factor`-th source frame.
    pub temporal_factor: usize,
    pub target_hw: (usize, usize),
}

impl IngestOptions {
    pub fn train() -> Self {
        IngestOptions {
            kind: DatasetKind::Train,
            window: TRAIN_WINDOW,
            temporal_factor: 1,
            target_hw: DEFAULT_TARGET_HW,
        }
    }

    /// Windows of `INPUT_FRAMES + n_targets` frames, one per `stride`.
    pub fn eval(n_targets: usize, stride: usize) -> Self {
        IngestOptions {
            kind: DatasetKind::Eval { stride },
            window: INPUT_FRAMES + n_targets,
            temporal_factor: 1,
            target_hw: DEFAULT_TARGET_HW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub source_id: String,
    pub start_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSequence {
    pub id: String,
    /// Frame files after temporal downsampling, in time order.
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub options: IngestOptions,
    pub sources: Vec<SourceSequence>,
    pub entries: Vec<IndexEntry>,
    /// Raw (H, W) of the first frame.
    pub frame_shape: (usize, usize),
    pub total_frames: usize,
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(path)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Keeps frames at indices `0, factor, 2·factor, …`.
pub fn temporal_downsample<X: Clone>(frames: &[X], factor: usize) -> Result<Vec<X>> {
    if factor < 1 {
        return Err(Error::Input("temporal downsample factor must be >= 1".into()));
    }
    Ok(frames.iter().step_by(factor).cloned().collect())
}

pub fn temporal_downsample_sequence(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    let frames = temporal_downsample(&seq.frames(), factor)?;
    FrameSequence::from_frames(&frames, seq.source_id.clone(), seq.start_index)
}

/// Window start offsets inside a sequence of `len` frames.
pub fn window_starts(len: usize, window: usize, kind: DatasetKind) -> Vec<usize> {
    if window == 0 || len < window {
        return Vec::new();
    }
    let step = match kind {
        DatasetKind::Train => window,
        DatasetKind::Eval { stride } => stride.max(1),
    };
    (0..=len - window).step_by(step).collect()
}

/// Scans a frame-directory dataset and enumerates sample windows. Every frame
/// header is read, so unreadable files fail here rather than mid-training.
pub fn ingest(root: &Path, options: &IngestOptions) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Input(format!("dataset root {} is not a directory", root.display())));
    }
    let mut sources = Vec::new();
    let mut entries = Vec::new();
    let mut frame_shape = None;
    let mut total_frames = 0;
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let id = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_dir(&dir)?.into_iter().filter(|p| is_frame_file(p)).collect();
        if files.is_empty() {
            continue;
        }
        let files = temporal_downsample(&files, options.temporal_factor)?;
        for f in &files {
            let (w, h) = image::image_dimensions(f).map_err(|e| Error::Decode {
                path: f.clone(),
                reason: e.to_string(),
            })?;
            frame_shape.get_or_insert((h as usize, w as usize));
        }
        let starts = window_starts(files.len(), options.window, options.kind);
        if starts.is_empty() {
            warn!(
                "skipping sequence {id}: {} frames is shorter than the {}-frame window",
                files.len(),
                options.window
            );
            continue;
        }
        total_frames += files.len();
        entries.extend(starts.into_iter().map(|s| IndexEntry {
            source_id: id.clone(),
            start_index: s,
        }));
        sources.push(SourceSequence { id, files });
    }
    if sources.is_empty() {
        return Err(Error::NoSequences(root.to_path_buf()));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        options: options.clone(),
        sources,
        entries,
        frame_shape: frame_shape.unwrap_or((0, 0)),
        total_frames,
    })
}

impl DatasetIndex {
    pub fn source(&self, id: &str) -> Option<&SourceSequence> {
        self.sources.iter().find(|s| s.id == id)
    }

    /// Writes the entry list as JSON `[{source_id, start_index}, …]`.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read_cache(path: &Path) -> Result<Vec<IndexEntry>> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn decode_frame(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Largest centered region with aspect ratio 4:5 (h:w), as `(top, left, h, w)`.
pub fn center_crop_4x5(h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (ch, cw) = if h * 5 > w * 4 { (w * 4 / 5, w) } else { (h, h * 5 / 4) };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Area-averaging weights from `src` samples onto `dst` samples: each output
/// sample integrates the source interval it covers.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < src {
                let lo = a.max(i as f64);
                let hi = b.min((i + 1) as f64);
                if hi > lo {
                    taps.push((i, (hi - lo) / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Center-crops to 4:5, area-resamples to `target_hw` and scales to `[0, 1]`.
pub fn preprocess(raw: &RgbImage, target_hw: (usize, usize)) -> Result<Frame> {
    let (h, w) = (raw.height() as usize, raw.width() as usize);
    let (top, left, ch, cw) = center_crop_4x5(h, w);
    let (th, tw) = target_hw;
    if ch < th || cw < tw || th == 0 || tw == 0 {
        return Err(Error::Input(format!(
            "frame {h}x{w} yields a {ch}x{cw} crop, smaller than the {th}x{tw} target"
        )));
    }
    let wy = area_weights(ch, th);
    let wx = area_weights(cw, tw);
    let mut tmp = vec![0.0f64; 3 * ch * tw];
    for y in 0..ch {
        for (ox, taps) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(ix, wt) in taps {
                let p = raw.get_pixel((left + ix) as u32, (top + y) as u32);
                for c in 0..3 {
                    acc[c] += wt * p[c] as f64;
                }
            }
            for c in 0..3 {
                tmp[(c * ch + y) * tw + ox] = acc[c];
            }
        }
    }
    let mut out = vec![0.0f32; 3 * th * tw];
    for c in 0..3 {
        for (oy, taps) in wy.iter().enumerate() {
            for ox in 0..tw {
                let v: f64 = taps.iter().map(|&(iy, wt)| wt * tmp[(c * ch + iy) * tw + ox]).sum();
                out[(c * th + oy) * tw + ox] = ((v / 255.0).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, th, tw], out)?)
}

pub fn frame_to_image(f: &Frame) -> RgbImage {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let d = f.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |c: usize| (d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Splits a window into its last `n_targets` frames and the
/// `INPUT_FRAMES` frames right before them.
pub fn split_window(window: &FrameSequence, n_targets: usize) -> Result<ClipSample> {
    let need = INPUT_FRAMES + n_targets;
    if n_targets == 0 || window.len() < need {
        return Err(Error::Input(format!(
            "window of {} frames cannot provide {INPUT_FRAMES} inputs and {n_targets} targets",
            window.len()
        )));
    }
    let tstart = window.len() - n_targets;
    ClipSample::new(window.slice(tstart - INPUT_FRAMES, INPUT_FRAMES)?, window.slice(tstart, n_targets)?)
}

/// Targets per clip implied by the index options: 1 for training windows,
/// `window - INPUT_FRAMES` for evaluation windows.
pub fn targets_per_clip(options: &IngestOptions) -> usize {
    match options.kind {
        DatasetKind::Train => 1,
        DatasetKind::Eval { .. } => options.window.saturating_sub(INPUT_FRAMES).max(1),
    }
}

/// Decodes and preprocesses the frames of one index entry.
pub fn load_clip(index: &DatasetIndex, entry: &IndexEntry) -> Result<ClipSample> {
    let src = index
        .source(&entry.source_id)
        .ok_or_else(|| Error::Input(format!("unknown source `{}`", entry.source_id)))?;
    let window = index.options.window;
    if entry.start_index + window > src.files.len() {
        return Err(Error::Input(format!(
            "entry {}@{} exceeds the sequence length {}",
            entry.source_id,
            entry.start_index,
            src.files.len()
        )));
    }
    let frames: Vec<Frame> = src.files[entry.start_index..entry.start_index + window]
        .iter()
        .map(|p| preprocess(&decode_frame(p)?, index.options.target_hw))
        .collect::<Result<_>>()?;
    let seq = FrameSequence::from_frames(&frames, entry.source_id.clone(), entry.start_index)?;
    split_window(&seq, targets_per_clip(&index.options))
}

/// Mirrors input and target together with probability 0.5.
pub fn augment_flip(clip: &ClipSample, rng: &mut RunRng) -> (ClipSample, bool) {
    if rng.random_bool(0.5) {
        (clip.flipped(), true)
    } else {
        (clip.clone(), false)
    }
}

/// Indexed access to clips, backed by files or memory.
pub trait ClipSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn clip(&self, i: usize) -> Result<ClipSample>;

    /// Source identifier of clip `i` (used to look up motion labels).
    fn source_id(&self, i: usize) -> String;
}

/// Directory-backed dataset.
pub struct FrameDataset {
    pub index: DatasetIndex,
}

impl ClipSource for FrameDataset {
    fn len(&self) -> usize {
        self.index.entries.len()
    }

    fn clip(&self, i: usize) -> Result<ClipSample> {
        load_clip(&self.index, &self.index.entries[i])
    }

    fn source_id(&self, i: usize) -> String {
        self.index.entries[i].source_id.clone()
    }
}

/// In-memory clips, e.g. windows cut from synthetic sequences.
#[derive(Clone, Debug, Default)]
pub struct MemoryClips {
    pub clips: Vec<ClipSample>,
}

impl MemoryClips {
    /// Cuts `window`-frame windows out of whole sequences.
    pub fn from_sequences(seqs: &[FrameSequence], window: usize, kind: DatasetKind, n_targets: usize) -> Result<Self> {
        let mut clips = Vec::new();
        for s in seqs {
            for start in window_starts(s.len(), window, kind) {
                clips.push(split_window(&s.slice(start, window)?, n_targets)?);
            }
        }
        Ok(MemoryClips { clips })
    }
}

impl ClipSource for MemoryClips {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn clip(&self, i: usize) -> Result<ClipSample> {
        Ok(self.clips[i].clone())
    }

    fn source_id(&self, i: usize) -> String {
        self.clips[i].input.source_id.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn train_windows_do_not_overlap() {
        assert_eq!(window_starts(25, 10, DatasetKind::Train), vec![0, 10]);
        assert_eq!(window_starts(9, 10, DatasetKind::Train), Vec::<usize>::new());
        assert_eq!(window_starts(12, 10, DatasetKind::Eval { stride: 1 }), vec![0, 1, 2]);
    }

    #[test]
    fn downsample_keeps_every_factor_th_frame() {
        let v: Vec<usize> = (0..30).collect();
        assert_eq!(temporal_downsample(&v, 3).unwrap(), (0..30).step_by(3).collect::<Vec<_>>());
        assert_eq!(temporal_downsample(&v, 1).unwrap(), v);
        assert_eq!(temporal_downsample(&v[..10], 3).unwrap(), vec![0, 3, 6, 9]);
        assert!(temporal_downsample(&v, 0).is_err());
    }

    #[test]
    fn crop_geometry() {
        assert_eq!(center_crop_4x5(480, 640), (0, 20, 480, 600));
        assert_eq!(center_crop_4x5(375, 1242), (0, 387, 375, 468));
        assert_eq!(center_crop_4x5(200, 100), (60, 0, 80, 100));
    }

    #[test]
    fn preprocess_shapes_and_constant_gray() {
        let img = RgbImage::from_pixel(1242, 375, image::Rgb([128, 128, 128]));
        let f = preprocess(&img, (128, 160)).unwrap();
        assert_eq!(f.shape(), &[3, 128, 160]);
        assert!(f.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
        let img = RgbImage::from_pixel(640, 480, image::Rgb([0, 255, 0]));
        let f = preprocess(&img, (128, 160)).unwrap();
        assert_eq!(f.shape(), &[3, 128, 160]);
        assert!(preprocess(&RgbImage::new(100, 100), (128, 160)).is_err());
    }

    #[test]
    fn area_resample_is_exact_block_average_at_integer_scale() {
        let img = RgbImage::from_fn(10, 8, |x, y| image::Rgb([(x * 20) as u8, (y * 30) as u8, 7]));
        let f = preprocess(&img, (4, 5)).unwrap();
        // 8x10 crop, 2x2 blocks
        for oy in 0..4 {
            for ox in 0..5 {
                let r = ((2 * ox) * 20 + (2 * ox + 1) * 20) as f32 / 2.0 / 255.0;
                let g = ((2 * oy) * 30 + (2 * oy + 1) * 30) as f32 / 2.0 / 255.0;
                assert!((f.data()[oy * 5 + ox] - r).abs() < 1e-6);
                assert!((f.data()[20 + oy * 5 + ox] - g).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn split_uses_last_eight_before_target() {
        let frames: Vec<Frame> = (0..10).map(|k| Tensor::full(&[3, 16, 16], k as f32 / 10.0)).collect();
        let seq = FrameSequence::from_frames(&frames, "s", 0).unwrap();
        let c = split_window(&seq, 1).unwrap();
        assert_eq!(c.input.frame(0), frames[1]);
        assert_eq!(c.input.frame(7), frames[8]);
        assert_eq!(c.target.frame(0), frames[9]);
    }

    #[test]
    fn flip_fraction_is_near_half() {
        let f = Tensor::full(&[3, 16, 16], 0.5);
        let seq = FrameSequence::from_frames(&vec![f; 9], "s", 0).unwrap();
        let clip = split_window(&seq, 1).unwrap();
        let mut rng = RunRng::seed_from_u64(42);
        let n = 10_000;
        let flips = (0..n).filter(|_| augment_flip(&clip, &mut rng).1).count();
        let frac = flips as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }
}
