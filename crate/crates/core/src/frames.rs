//! Frame clips, the currency between every other module.

use vidpred_tensor::Tensor;

use crate::error::{Error, Result};

/// Number of conditioning frames the generator consumes.
pub const INPUT_FRAMES: usize = 8;

/// Spatial dimensions must survive four 2× downscales.
pub const SPATIAL_MULTIPLE: usize = 16;

/// A single RGB frame, shape `(3, H, W)`, values in `[0, 1]`.
pub type Frame = Tensor<f32>;

/// A clip of RGB frames stored channel-major as `(3, n, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor<f32>,
    pub source_id: String,
    pub start_index: usize,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>, source_id: impl Into<String>, start_index: usize) -> Result<Self> {
        let &[c, n, h, w] = frames.shape() else {
            return Err(Error::Input(format!(
                "frame sequence must be (3, n, H, W), got {:?}",
                frames.shape()
            )));
        };
        if c != 3 || n == 0 {
            return Err(Error::Input(format!(
                "frame sequence must be (3, n>=1, H, W), got {:?}",
                frames.shape()
            )));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Input(format!(
                "frame size {h}x{w} is not a multiple of {SPATIAL_MULTIPLE}"
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("frame value {v} outside [0, 1]")));
        }
        Ok(FrameSequence {
            frames,
            source_id: source_id.into(),
            start_index,
        })
    }

    /// Stacks `(3, H, W)` frames in time order.
    pub fn from_frames(frames: &[Frame], source_id: impl Into<String>, start_index: usize) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("empty frame list".into()))?;
        let &[3, h, w] = first.shape() else {
            return Err(Error::Input(format!("frame must be (3, H, W), got {:?}", first.shape())));
        };
        let n = frames.len();
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * n * plane];
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != [3, h, w] {
                return Err(Error::Input(format!(
                    "frame {t} has shape {:?}, expected [3, {h}, {w}]",
                    f.shape()
                )));
            }
            for c in 0..3 {
                let dst = (c * n + t) * plane;
                data[dst..dst + plane].copy_from_slice(&f.data()[c * plane..(c + 1) * plane]);
            }
        }
        Self::new(Tensor::from_vec(&[3, n, h, w], data)?, source_id, start_index)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> Frame {
        let (n, h, w) = (self.len(), self.height(), self.width());
        assert!(t < n, "frame {t} out of range for clip of {n}");
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * plane);
        for c in 0..3 {
            let src = (c * n + t) * plane;
            data.extend_from_slice(&self.frames.data()[src..src + plane]);
        }
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<FrameSequence> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Input(format!(
                "slice {start}..{} out of range for clip of {}",
                start + len,
                self.len()
            )));
        }
        let frames: Vec<Frame> = (start..start + len).map(|t| self.frame(t)).collect();
        FrameSequence::from_frames(&frames, self.source_id.clone(), self.start_index + start)
    }

    pub fn last(&self, n: usize) -> Result<FrameSequence> {
        self.slice(self.len().saturating_sub(n), n.min(self.len()))
    }

    /// Appends frames in time order.
    pub fn extended(&self, more: &[Frame]) -> Result<FrameSequence> {
        let mut frames = self.frames();
        frames.extend_from_slice(more);
        FrameSequence::from_frames(&frames, self.source_id.clone(), self.start_index)
    }

    /// Horizontal mirror of every frame: column `j` moves to `W-1-j`.
    pub fn flipped(&self) -> FrameSequence {
        let w = self.width();
        let d = self.frames.data();
        let flipped = Tensor::from_fn(self.frames.shape(), |i| {
            let col = i % w;
            d[i - col + (w - 1 - col)]
        });
        FrameSequence {
            frames: flipped,
            source_id: self.source_id.clone(),
            start_index: self.start_index,
        }
    }
}

/// Lays clips out as a `(B, 3, T, H, W)` batch.
pub fn batch_clips(clips: &[&FrameSequence]) -> Result<Tensor<f32>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let shape = first.tensor().shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.tensor().numel());
    for c in clips {
        if c.tensor().shape() != shape.as_slice() {
            return Err(Error::Input(format!(
                "batch clip shape {:?} differs from {:?}",
                c.tensor().shape(),
                shape
            )));
        }
        data.extend_from_slice(c.tensor().data());
    }
    Ok(Tensor::from_vec(
        &[clips.len(), shape[0], shape[1], shape[2], shape[3]],
        data,
    )?)
}

/// Lays single frames out as a `(B, 3, 1, H, W)` batch.
pub fn batch_frames(frames: &[&Frame]) -> Result<Tensor<f32>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let &[3, h, w] = first.shape() else {
        return Err(Error::Input(format!("frame must be (3, H, W), got {:?}", first.shape())));
    };
    let mut data = Vec::with_capacity(frames.len() * first.numel());
    for f in frames {
        if f.shape() != [3, h, w] {
            return Err(Error::Input("batch frames differ in shape".into()));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_vec(&[frames.len(), 3, 1, h, w], data)?)
}

/// Splits a `(B, 3, 1, H, W)` or `(B, 3, H, W)` tensor into frames.
pub fn unbatch_frames(t: &Tensor<f32>) -> Vec<Frame> {
    let b = t.shape()[0];
    let (h, w) = (t.shape()[t.ndim() - 2], t.shape()[t.ndim() - 1]);
    let n = 3 * h * w;
    (0..b)
        .map(|i| Tensor::from_vec(&[3, h, w], t.data()[i * n..(i + 1) * n].to_vec()).unwrap())
        .collect()
}

/// Conditioning clip plus the frames that follow it in source time.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub input: FrameSequence,
    pub target: FrameSequence,
}

impl ClipSample {
    pub fn new(input: FrameSequence, target: FrameSequence) -> Result<Self> {
        if input.len() != INPUT_FRAMES {
            return Err(Error::Input(format!(
                "clip input must have {INPUT_FRAMES} frames, got {}",
                input.len()
            )));
        }
        if (input.height(), input.width()) != (target.height(), target.width()) {
            return Err(Error::Input("clip input and target differ in size".into()));
        }
        Ok(ClipSample { input, target })
    }

    pub fn flipped(&self) -> ClipSample {
        ClipSample {
            input: self.input.flipped(),
            target: self.target.flipped(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> FrameSequence {
        let t = Tensor::from_fn(&[3, n, 16, 16], |i| (i % 256) as f32 / 255.0);
        FrameSequence::new(t, "s", 0).unwrap()
    }

    #[test]
    fn rejects_out_of_range_values_and_bad_sizes() {
        assert!(FrameSequence::new(Tensor::full(&[3, 1, 16, 16], 1.5), "s", 0).is_err());
        assert!(FrameSequence::new(Tensor::zeros(&[3, 1, 16, 20]), "s", 0).is_err());
        assert!(FrameSequence::new(Tensor::zeros(&[3, 0, 16, 16]), "s", 0).is_err());
    }

    #[test]
    fn frames_round_trip_through_stacking() {
        let s = seq(4);
        let again = FrameSequence::from_frames(&s.frames(), "s", 0).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn flip_maps_column_j_to_mirror() {
        let s = seq(2);
        let f = s.flipped();
        let (a, b) = (s.frame(1), f.frame(1));
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(a.data()[(c * 16 + y) * 16 + x], b.data()[(c * 16 + y) * 16 + 15 - x]);
                }
            }
        }
        assert_eq!(f.flipped(), s);
    }

    #[test]
    fn slice_tracks_start_index() {
        let s = seq(10);
        let sl = s.slice(1, 8).unwrap();
        assert_eq!(sl.start_index, 1);
        assert_eq!(sl.frame(0), s.frame(1));
        assert!(s.slice(5, 6).is_err());
    }
}
