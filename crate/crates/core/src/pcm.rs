//! Part confidence maps: storage, sampling, centroids, the binary `.pcm`
//! format and the providers that serve frames to the tracker.
//!
//! A heatmap grid point `(x, y)` corresponds to image pixel `(x, y) / scale`.
//! Each channel stores a dense window; everything outside it is zero.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector2;
use thiserror::Error;

use crate::calib::{rotate_pixel, Camera};
use crate::skeleton::{Keypoint, NUM_KEYPOINTS};

pub const MAGIC: &[u8; 4] = b"PCMF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 36;
const FLAG_UNDISTORTED: u16 = 1;

/// Default value floor for centroid extraction.
pub const DEFAULT_CENTROID_FLOOR: f64 = 0.3;

#[derive(Debug, Error)]
pub enum PcmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("expected {NUM_KEYPOINTS} channels, found {0}")]
    ChannelCount(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("value {value} outside [0, 1]")]
    ValueOutOfRange { value: f32 },
    #[error("invalid frame geometry: {0}")]
    Geometry(&'static str),
    #[error("camera {camera}, frame {frame}: no heatmap")]
    FrameMissing { camera: u32, frame: u32 },
    #[error("camera {camera}, frame {frame}: rotation {rotation} deg unavailable")]
    RotationUnavailable { camera: u32, frame: u32, rotation: i32 },
    #[error("stored frame does not match the requested key: {0}")]
    KeyMismatch(String),
}

#[derive(Debug, Clone)]
struct Channel {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    data: Vec<f32>,
}

impl Channel {
    fn empty() -> Channel {
        Channel { x0: 0, y0: 0, w: 0, h: 0, data: Vec::new() }
    }

    #[inline]
    fn get(&self, x: u32, y: u32) -> f32 {
        let (dx, dy) = (x.wrapping_sub(self.x0), y.wrapping_sub(self.y0));
        if dx < self.w && dy < self.h {
            self.data[(dy * self.w + dx) as usize]
        } else {
            0.0
        }
    }

    /// Shrinks the window to the bounding box of the non-zero values.
    fn tighten(self) -> Channel {
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (u32::MAX, u32::MAX, 0, 0);
        for dy in 0..self.h {
            for dx in 0..self.w {
                if self.data[(dy * self.w + dx) as usize] != 0.0 {
                    xmin = xmin.min(dx);
                    xmax = xmax.max(dx);
                    ymin = ymin.min(dy);
                    ymax = ymax.max(dy);
                }
            }
        }
        if xmin == u32::MAX {
            return Channel::empty();
        }
        let (w, h) = (xmax - xmin + 1, ymax - ymin + 1);
        let mut data = Vec::with_capacity((w * h) as usize);
        for dy in ymin..=ymax {
            let row = (dy * self.w) as usize;
            data.extend_from_slice(&self.data[row + xmin as usize..=row + xmax as usize]);
        }
        Channel { x0: self.x0 + xmin, y0: self.y0 + ymin, w, h, data }
    }
}

/// Identity and geometry of one heatmap frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMeta {
    pub camera_id: u32,
    pub frame_index: u32,
    /// CCW rotation of the image the maps were computed on.
    pub rotation_deg: f32,
    pub width: u32,
    pub height: u32,
    /// heatmap_px = image_px · scale
    pub scale: f32,
    pub undistorted: bool,
}

/// One camera's 18 confidence channels for one frame at one image rotation.
#[derive(Debug, Clone)]
pub struct HeatmapFrame {
    pub meta: FrameMeta,
    channels: Vec<Channel>,
}

fn check_value(v: f32) -> Result<(), PcmError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(PcmError::ValueOutOfRange { value: v })
    }
}

impl HeatmapFrame {
    /// An all-zero frame.
    pub fn zeros(meta: FrameMeta) -> Result<HeatmapFrame, PcmError> {
        if meta.width == 0 || meta.height == 0 {
            return Err(PcmError::Geometry("width and height must be positive"));
        }
        if !(meta.scale.is_finite() && meta.scale > 0.0) {
            return Err(PcmError::Geometry("scale must be positive"));
        }
        if !meta.rotation_deg.is_finite() {
            return Err(PcmError::Geometry("rotation must be finite"));
        }
        Ok(HeatmapFrame { meta, channels: vec![Channel::empty(); NUM_KEYPOINTS] })
    }

    /// Builds a frame from channel-major, row-major dense values.
    pub fn from_dense(meta: FrameMeta, values: &[f32]) -> Result<HeatmapFrame, PcmError> {
        let mut frame = HeatmapFrame::zeros(meta)?;
        let plane = (meta.width * meta.height) as usize;
        if values.len() != plane * NUM_KEYPOINTS {
            return Err(PcmError::Truncated { expected: plane * NUM_KEYPOINTS * 4, found: values.len() * 4 });
        }
        for (c, chunk) in values.chunks_exact(plane).enumerate() {
            chunk.iter().try_for_each(|&v| check_value(v))?;
            frame.channels[c] =
                Channel { x0: 0, y0: 0, w: meta.width, h: meta.height, data: chunk.to_vec() }.tighten();
        }
        Ok(frame)
    }

    /// Replaces a channel with the window `(x0, y0, w, h)` of row-major values;
    /// the window must lie inside the grid.
    pub fn set_window(
        &mut self,
        label: Keypoint,
        (x0, y0): (u32, u32),
        (w, h): (u32, u32),
        data: Vec<f32>,
    ) -> Result<(), PcmError> {
        if x0 + w > self.meta.width || y0 + h > self.meta.height {
            return Err(PcmError::Geometry("window exceeds the grid"));
        }
        if data.len() != (w * h) as usize {
            return Err(PcmError::Geometry("window data size mismatch"));
        }
        data.iter().try_for_each(|&v| check_value(v))?;
        self.channels[label.index()] = Channel { x0, y0, w, h, data };
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.meta.width
    }

    pub fn height(&self) -> u32 {
        self.meta.height
    }

    /// Grid value at heatmap cell `(x, y)`.
    pub fn value(&self, label: Keypoint, x: u32, y: u32) -> f32 {
        self.channels[label.index()].get(x, y)
    }

    pub fn channel_max(&self, label: Keypoint) -> f32 {
        self.channels[label.index()].data.iter().copied().fold(0.0, f32::max)
    }

    /// Dense channel-major values, as stored on disk.
    pub fn to_dense(&self) -> Vec<f32> {
        let (w, h) = (self.meta.width, self.meta.height);
        let mut out = vec![0.0f32; (w * h) as usize * NUM_KEYPOINTS];
        for (c, ch) in self.channels.iter().enumerate() {
            let base = c * (w * h) as usize;
            for dy in 0..ch.h {
                let dst = base + ((ch.y0 + dy) * w + ch.x0) as usize;
                let src = (dy * ch.w) as usize;
                out[dst..dst + ch.w as usize].copy_from_slice(&ch.data[src..src + ch.w as usize]);
            }
        }
        out
    }

    /// Bilinear confidence at an image pixel; zero outside the grid.
    pub fn sample(&self, label: Keypoint, pixel: &Vector2<f64>) -> f64 {
        let s = self.meta.scale as f64;
        let hx = pixel.x * s;
        let hy = pixel.y * s;
        let (w, h) = (self.meta.width, self.meta.height);
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        if !(hx >= 0.0 && hy >= 0.0 && hx <= max_x && hy <= max_y) {
            return 0.0;
        }
        let ch = &self.channels[label.index()];
        let x0 = (hx.floor() as u32).min(w.saturating_sub(2));
        let y0 = (hy.floor() as u32).min(h.saturating_sub(2));
        let fx = hx - x0 as f64;
        let fy = hy - y0 as f64;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let v00 = ch.get(x0, y0) as f64;
        let v10 = ch.get(x1, y0) as f64;
        let v01 = ch.get(x0, y1) as f64;
        let v11 = ch.get(x1, y1) as f64;
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        (top + (bottom - top) * fy).clamp(0.0, 1.0)
    }

    /// Value-weighted mean image position of the cells with value ≥ `floor`.
    pub fn centroid(&self, label: Keypoint, floor: f64) -> Option<Vector2<f64>> {
        let ch = &self.channels[label.index()];
        let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
        for dy in 0..ch.h {
            for dx in 0..ch.w {
                let v = ch.data[(dy * ch.w + dx) as usize] as f64;
                if v >= floor && v > 0.0 {
                    sw += v;
                    sx += v * (ch.x0 + dx) as f64;
                    sy += v * (ch.y0 + dy) as f64;
                }
            }
        }
        if sw <= 0.0 {
            return None;
        }
        let s = self.meta.scale as f64;
        Some(Vector2::new(sx / sw / s, sy / sw / s))
    }
}

impl PartialEq for HeatmapFrame {
    fn eq(&self, other: &HeatmapFrame) -> bool {
        self.meta == other.meta && self.to_dense() == other.to_dense()
    }
}

pub fn encode_pcm(frame: &HeatmapFrame) -> Vec<u8> {
    let m = &frame.meta;
    let dense = frame.to_dense();
    let mut out = Vec::with_capacity(HEADER_LEN + dense.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(if m.undistorted { FLAG_UNDISTORTED } else { 0 }).to_le_bytes());
    out.extend_from_slice(&m.camera_id.to_le_bytes());
    out.extend_from_slice(&m.frame_index.to_le_bytes());
    out.extend_from_slice(&m.rotation_deg.to_le_bytes());
    out.extend_from_slice(&m.width.to_le_bytes());
    out.extend_from_slice(&m.height.to_le_bytes());
    out.extend_from_slice(&(NUM_KEYPOINTS as u32).to_le_bytes());
    out.extend_from_slice(&m.scale.to_le_bytes());
    for v in dense {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pcm(bytes: &[u8]) -> Result<HeatmapFrame, PcmError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(PcmError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(PcmError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(PcmError::BadMagic(magic));
    }
    let version = u16_at(4);
    if version != VERSION {
        return Err(PcmError::UnsupportedVersion(version));
    }
    let meta = FrameMeta {
        undistorted: u16_at(6) & FLAG_UNDISTORTED != 0,
        camera_id: u32_at(8),
        frame_index: u32_at(12),
        rotation_deg: f32_at(16),
        width: u32_at(20),
        height: u32_at(24),
        scale: f32_at(32),
    };
    let channels = u32_at(28);
    if channels as usize != NUM_KEYPOINTS {
        return Err(PcmError::ChannelCount(channels));
    }
    let count = meta.width as usize * meta.height as usize * NUM_KEYPOINTS;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(PcmError::Truncated { expected, found: bytes.len() });
    }
    let values: Vec<f32> = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    HeatmapFrame::from_dense(meta, &values)
}

pub fn read_pcm(path: &Path) -> Result<HeatmapFrame, PcmError> {
    let bytes = fs::read(path).map_err(|source| PcmError::Io { path: path.display().to_string(), source })?;
    decode_pcm(&bytes)
}

pub fn write_pcm(frame: &HeatmapFrame, path: &Path) -> Result<(), PcmError> {
    crate::io::write_atomic(path, &encode_pcm(frame))
        .map_err(|source| PcmError::Io { path: path.display().to_string(), source })
}

/// Rounds an angle to whole degrees in (−180, 180].
pub fn quantize_rotation(deg: f64) -> i32 {
    let mut r = deg.round() as i64 % 360;
    if r <= -180 {
        r += 360;
    } else if r > 180 {
        r -= 360;
    }
    r as i32
}

/// Source of heatmap frames keyed by camera, frame and quantized rotation.
///
/// A rotation that is not available is reported as
/// [`PcmError::RotationUnavailable`]; implementations never substitute
/// another angle.
pub trait PcmProvider: Send + Sync {
    fn frame(&self, camera_id: u32, frame_index: u32, rotation_deg: i32) -> Result<Arc<HeatmapFrame>, PcmError>;

    /// Frame indices the provider declares available at rotation 0.
    fn frame_range(&self) -> Range<u32>;
}

fn check_key(frame: &HeatmapFrame, camera: u32, index: u32, rotation: i32) -> Result<(), PcmError> {
    let m = &frame.meta;
    if m.camera_id != camera || m.frame_index != index || quantize_rotation(m.rotation_deg as f64) != rotation {
        return Err(PcmError::KeyMismatch(format!(
            "requested cam {camera} frame {index} rot {rotation}, got cam {} frame {} rot {}",
            m.camera_id, m.frame_index, m.rotation_deg
        )));
    }
    Ok(())
}

/// In-memory provider.
#[derive(Default)]
pub struct MemoryPcmStore {
    frames: HashMap<(u32, u32, i32), Arc<HeatmapFrame>>,
}

impl MemoryPcmStore {
    pub fn new() -> MemoryPcmStore {
        MemoryPcmStore::default()
    }

    pub fn insert(&mut self, frame: HeatmapFrame) {
        let m = frame.meta;
        self.frames
            .insert((m.camera_id, m.frame_index, quantize_rotation(m.rotation_deg as f64)), Arc::new(frame));
    }
}

impl PcmProvider for MemoryPcmStore {
    fn frame(&self, camera_id: u32, frame_index: u32, rotation_deg: i32) -> Result<Arc<HeatmapFrame>, PcmError> {
        match self.frames.get(&(camera_id, frame_index, rotation_deg)) {
            Some(f) => Ok(f.clone()),
            None if rotation_deg != 0 && self.frames.contains_key(&(camera_id, frame_index, 0)) => {
                Err(PcmError::RotationUnavailable { camera: camera_id, frame: frame_index, rotation: rotation_deg })
            }
            None => Err(PcmError::FrameMissing { camera: camera_id, frame: frame_index }),
        }
    }

    fn frame_range(&self) -> Range<u32> {
        let idx = self.frames.keys().filter(|k| k.2 == 0).map(|k| k.1);
        let (lo, hi) = idx.fold((u32::MAX, 0), |(lo, hi), i| (lo.min(i), hi.max(i + 1)));
        if lo == u32::MAX {
            0..0
        } else {
            lo..hi
        }
    }
}

/// File-backed provider over the `cam{ID}/rot{angle}/frame{N}.pcm` layout.
pub struct DirPcmStore {
    root: PathBuf,
}

impl DirPcmStore {
    pub fn new(root: impl Into<PathBuf>) -> DirPcmStore {
        DirPcmStore { root: root.into() }
    }

    pub fn path_for(root: &Path, camera_id: u32, frame_index: u32, rotation_deg: i32) -> PathBuf {
        root.join(format!("cam{camera_id}"))
            .join(format!("rot{rotation_deg}"))
            .join(format!("frame{frame_index}.pcm"))
    }

    /// Writes a frame into the layout rooted at `root`.
    pub fn store(root: &Path, frame: &HeatmapFrame) -> Result<PathBuf, PcmError> {
        let m = &frame.meta;
        let path = Self::path_for(root, m.camera_id, m.frame_index, quantize_rotation(m.rotation_deg as f64));
        write_pcm(frame, &path)?;
        Ok(path)
    }

    fn frame_indices(dir: &Path) -> BTreeSet<u32> {
        let Ok(entries) = fs::read_dir(dir) else { return BTreeSet::new() };
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("frame")?.strip_suffix(".pcm")?.parse().ok()
            })
            .collect()
    }

    fn camera_dirs(&self) -> Vec<PathBuf> {
        let Ok(entries) = fs::read_dir(&self.root) else { return Vec::new() };
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("cam"))
            .map(|e| e.path())
            .collect();
        dirs.sort();
        dirs
    }
}

impl PcmProvider for DirPcmStore {
    fn frame(&self, camera_id: u32, frame_index: u32, rotation_deg: i32) -> Result<Arc<HeatmapFrame>, PcmError> {
        let path = Self::path_for(&self.root, camera_id, frame_index, rotation_deg);
        if !path.exists() {
            let plain = Self::path_for(&self.root, camera_id, frame_index, 0);
            return Err(if rotation_deg != 0 && plain.exists() {
                PcmError::RotationUnavailable { camera: camera_id, frame: frame_index, rotation: rotation_deg }
            } else {
                PcmError::FrameMissing { camera: camera_id, frame: frame_index }
            });
        }
        let frame = read_pcm(&path)?;
        check_key(&frame, camera_id, frame_index, rotation_deg)?;
        Ok(Arc::new(frame))
    }

    /// Span between the first and last frame present for every camera.
    fn frame_range(&self) -> Range<u32> {
        let mut lo = 0;
        let mut hi = u32::MAX;
        let dirs = self.camera_dirs();
        if dirs.is_empty() {
            return 0..0;
        }
        for d in dirs {
            let idx = Self::frame_indices(&d.join("rot0"));
            match (idx.first(), idx.last()) {
                (Some(&a), Some(&b)) => {
                    lo = lo.max(a);
                    hi = hi.min(b + 1);
                }
                _ => return 0..0,
            }
        }
        lo..hi.max(lo)
    }
}

/// PCM value for `label` at `pixel_original` (original image coordinates),
/// read from the heatmap computed on the image rotated by `rotation_deg`.
pub fn sample_rotated(
    provider: &dyn PcmProvider,
    camera: &Camera,
    frame_index: u32,
    rotation_deg: i32,
    label: Keypoint,
    pixel_original: &Vector2<f64>,
) -> Result<f64, PcmError> {
    let frame = provider.frame(camera.id, frame_index, rotation_deg)?;
    Ok(sample_in_frame(&frame, camera, label, pixel_original))
}

/// Samples a frame at an original-image pixel, mapping through the frame's
/// declared rotation.
pub fn sample_in_frame(frame: &HeatmapFrame, camera: &Camera, label: Keypoint, pixel_original: &Vector2<f64>) -> f64 {
    let rot = frame.meta.rotation_deg as f64;
    if rot == 0.0 {
        frame.sample(label, pixel_original)
    } else {
        frame.sample(label, &rotate_pixel(pixel_original, rot, &camera.image_center()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(w: u32, h: u32, scale: f32) -> FrameMeta {
        FrameMeta { camera_id: 2, frame_index: 7, rotation_deg: 0.0, width: w, height: h, scale, undistorted: true }
    }

    fn gaussian_frame(m: FrameMeta, label: Keypoint, center_img: Vector2<f64>, sigma_img: f64) -> HeatmapFrame {
        let mut f = HeatmapFrame::zeros(m).unwrap();
        let s = m.scale as f64;
        let data: Vec<f32> = (0..m.height)
            .flat_map(|y| (0..m.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let d = Vector2::new(x as f64 / s, y as f64 / s) - center_img;
                (-d.norm_squared() / (2.0 * sigma_img * sigma_img)).exp() as f32
            })
            .collect();
        f.set_window(label, (0, 0), (m.width, m.height), data).unwrap();
        f
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> HeatmapFrame {
        let m = FrameMeta {
            camera_id: rng.random_range(0..10),
            frame_index: rng.random_range(0..1000),
            rotation_deg: rng.random_range(-180..=180) as f32,
            width: rng.random_range(1..20),
            height: rng.random_range(1..20),
            scale: rng.random_range(0.1..1.0),
            undistorted: rng.random(),
        };
        let values: Vec<f32> =
            (0..m.width * m.height * 18).map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random::<f32>() }).collect();
        HeatmapFrame::from_dense(m, &values).unwrap()
    }

    #[test]
    fn constant_channel_samples_constant() {
        let m = meta(16, 12, 0.5);
        let f = HeatmapFrame::from_dense(m, &vec![0.7f32; 16 * 12 * 18]).unwrap();
        for p in [(3.3, 4.1), (0.0, 0.0), (29.9, 21.7), (15.0, 11.0)] {
            assert!((f.sample(Keypoint::RKnee, &Vector2::new(p.0, p.1)) - 0.7f32 as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn gaussian_peak_and_half_cell() {
        let m = meta(40, 30, 1.0);
        let f = gaussian_frame(m, Keypoint::Neck, Vector2::new(20.0, 15.0), 3.0);
        assert_eq!(f.sample(Keypoint::Neck, &Vector2::new(20.0, 15.0)), 1.0);
        let expected = (f.value(Keypoint::Neck, 20, 15) as f64 + f.value(Keypoint::Neck, 21, 15) as f64) / 2.0;
        assert!((f.sample(Keypoint::Neck, &Vector2::new(20.5, 15.0)) - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_is_zero() {
        let f = HeatmapFrame::from_dense(meta(8, 8, 1.0), &vec![1.0f32; 8 * 8 * 18]).unwrap();
        assert_eq!(f.sample(Keypoint::Nose, &Vector2::new(-5.0, 10.0)), 0.0);
        assert_eq!(f.sample(Keypoint::Nose, &Vector2::new(3.0, 7.5)), 0.0);
        assert_eq!(f.sample(Keypoint::Nose, &Vector2::new(f64::NAN, 1.0)), 0.0);
    }

    fn brute_centroid(f: &HeatmapFrame, label: Keypoint, floor: f64) -> Option<Vector2<f64>> {
        let (mut w, mut x, mut y) = (0.0, 0.0, 0.0);
        for j in 0..f.height() {
            for i in 0..f.width() {
                let v = f.value(label, i, j) as f64;
                if v >= floor && v > 0.0 {
                    w += v;
                    x += v * i as f64;
                    y += v * j as f64;
                }
            }
        }
        (w > 0.0).then(|| Vector2::new(x / w, y / w) / f.meta.scale as f64)
    }

    #[test]
    fn centroid_of_symmetric_gaussian() {
        let m = meta(64, 48, 0.5);
        let c = Vector2::new(61.0, 47.0);
        let f = gaussian_frame(m, Keypoint::LEar, c, 8.0);
        let got = f.centroid(Keypoint::LEar, 0.1).unwrap();
        assert!((got - c).norm() < 0.5);
        let oracle = brute_centroid(&f, Keypoint::LEar, 0.1).unwrap();
        assert!((got - oracle).norm() < 1e-9);
    }

    #[test]
    fn centroid_empty_and_two_peaks() {
        let mut f = HeatmapFrame::zeros(meta(10, 10, 1.0)).unwrap();
        assert!(f.centroid(Keypoint::Nose, 0.3).is_none());
        let mut data = vec![0.0f32; 100];
        data[2 * 10 + 1] = 0.8;
        data[6 * 10 + 7] = 0.8;
        f.set_window(Keypoint::Nose, (0, 0), (10, 10), data).unwrap();
        assert_eq!(f.centroid(Keypoint::Nose, 0.5).unwrap(), Vector2::new(4.0, 4.0));
    }

    #[test]
    fn out_of_range_values_rejected() {
        let mut values = vec![0.0f32; 4 * 18];
        values[5] = 1.5;
        assert!(matches!(HeatmapFrame::from_dense(meta(2, 2, 1.0), &values), Err(PcmError::ValueOutOfRange { .. })));
        values[5] = f32::NAN;
        assert!(matches!(HeatmapFrame::from_dense(meta(2, 2, 1.0), &values), Err(PcmError::ValueOutOfRange { .. })));
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let f = random_frame(&mut rng);
            let back = decode_pcm(&encode_pcm(&f)).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn file_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_frame(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = DirPcmStore::store(dir.path(), &f).unwrap();
        assert!(path.ends_with(format!(
            "cam{}/rot{}/frame{}.pcm",
            f.meta.camera_id, f.meta.rotation_deg as i32, f.meta.frame_index
        )));
        assert_eq!(read_pcm(&path).unwrap(), f);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let f = HeatmapFrame::from_dense(meta(3, 2, 1.0), &vec![0.25f32; 6 * 18]).unwrap();
        let mut bytes = encode_pcm(&f);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_pcm(&bad), Err(PcmError::BadMagic(m)) if &m == b"XXXX"));
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_pcm(short), Err(PcmError::Truncated { .. })));
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(matches!(decode_pcm(&bytes), Err(PcmError::ValueOutOfRange { .. })));
    }

    #[test]
    fn memory_store_reports_missing_rotation() {
        let mut store = MemoryPcmStore::new();
        store.insert(HeatmapFrame::zeros(meta(4, 4, 1.0)).unwrap());
        assert!(store.frame(2, 7, 0).is_ok());
        assert!(matches!(store.frame(2, 7, 37), Err(PcmError::RotationUnavailable { rotation: 37, .. })));
        assert!(matches!(store.frame(2, 8, 0), Err(PcmError::FrameMissing { .. })));
        assert_eq!(store.frame_range(), 7..8);
    }

    #[test]
    fn dir_store_serves_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        for i in 3..6 {
            let mut m = meta(4, 4, 1.0);
            m.frame_index = i;
            DirPcmStore::store(dir.path(), &HeatmapFrame::zeros(m).unwrap()).unwrap();
        }
        let store = DirPcmStore::new(dir.path());
        assert_eq!(store.frame_range(), 3..6);
        assert_eq!(store.frame(2, 4, 0).unwrap().meta.frame_index, 4);
        assert!(matches!(store.frame(2, 4, 90), Err(PcmError::RotationUnavailable { .. })));
        assert!(matches!(store.frame(2, 9, 0), Err(PcmError::FrameMissing { .. })));
    }

    #[test]
    fn quantize_rotation_wraps() {
        assert_eq!(quantize_rotation(0.4), 0);
        assert_eq!(quantize_rotation(-180.0), 180);
        assert_eq!(quantize_rotation(179.6), 180);
        assert_eq!(quantize_rotation(270.2), -90);
        assert_eq!(quantize_rotation(-36.6), -37);
    }

    #[test]
    fn rotated_sampling_at_zero_is_plain_sampling() {
        let cam = crate::calib::Camera::look_at(
            2,
            (64, 48),
            50.0,
            nalgebra::Vector3::new(0.0, -3000.0, 900.0),
            nalgebra::Vector3::new(0.0, 0.0, 900.0),
        );
        let mut store = MemoryPcmStore::new();
        let f = gaussian_frame(meta(64, 48, 1.0), Keypoint::LKnee, Vector2::new(30.0, 20.0), 4.0);
        store.insert(f.clone());
        let p = Vector2::new(28.3, 21.9);
        assert_eq!(sample_rotated(&store, &cam, 7, 0, Keypoint::LKnee, &p).unwrap(), f.sample(Keypoint::LKnee, &p));
        assert!(matches!(
            sample_rotated(&store, &cam, 7, 37, Keypoint::LKnee, &p),
            Err(PcmError::RotationUnavailable { .. })
        ));
    }

    #[test]
    fn rotated_render_peak_found_at_original_pixel() {
        let cam = crate::calib::Camera::look_at(
            2,
            (64, 48),
            50.0,
            nalgebra::Vector3::new(0.0, -3000.0, 900.0),
            nalgebra::Vector3::new(0.0, 0.0, 900.0),
        );
        let truth = Vector2::new(20.0, 10.0);
        let rotated_truth = rotate_pixel(&truth, 180.0, &cam.image_center());
        let mut m = meta(64, 48, 1.0);
        m.rotation_deg = 180.0;
        let mut store = MemoryPcmStore::new();
        store.insert(gaussian_frame(m, Keypoint::RAnkle, rotated_truth, 4.0));
        let v = sample_rotated(&store, &cam, 7, 180, Keypoint::RAnkle, &truth).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bilinear_is_continuous_and_bounded(seed in 0u64..1000, fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_frame(&mut rng);
            let s = f.meta.scale as f64;
            let max_x = (f.width() - 1) as f64 / s;
            let max_y = (f.height() - 1) as f64 / s;
            let p = Vector2::new(fx * max_x * 0.999, fy * max_y * 0.999);
            let q = p + Vector2::new(1e-6, 1e-6) * (1.0 / s).min(1.0);
            for k in Keypoint::ALL {
                let a = f.sample(k, &p);
                prop_assert!((0.0..=1.0).contains(&a));
                if q.x <= max_x && q.y <= max_y {
                    prop_assert!((a - f.sample(k, &q)).abs() <= 1e-5);
                }
            }
        }

        #[test]
        fn centroid_translation_equivariant(cx in 20.0..40.0f64, cy in 15.0..30.0f64, dx in -8.0..8.0f64, dy in -8.0..8.0f64) {
            let m = meta(64, 48, 1.0);
            let a = gaussian_frame(m, Keypoint::Nose, Vector2::new(cx, cy), 4.0).centroid(Keypoint::Nose, 0.3).unwrap();
            let b = gaussian_frame(m, Keypoint::Nose, Vector2::new(cx + dx, cy + dy), 4.0).centroid(Keypoint::Nose, 0.3).unwrap();
            prop_assert!(((b - a) - Vector2::new(dx, dy)).norm() < 0.5);
        }
    }
}
