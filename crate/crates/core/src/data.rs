//! Synthetic toy videos, 8-bit normalization, windowing and dataset
//! directories.
//!
//! Videos are `[T, C, H, W]` tensors with values in `[-1, 1]`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensor_file::{read_tensor, write_tensor};

/// `x8 / 127.5 - 1`.
pub fn dequantize(x8: u8) -> f32 {
    x8 as f32 / 127.5 - 1.0
}

/// `round((x + 1) · 127.5)` clamped to `0..=255`. NaN maps to 0.
pub fn quantize(x: f32) -> u8 {
    let v = ((x as f64 + 1.0) * 127.5).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

pub fn quantize_tensor(x: &Tensor<f32>) -> Vec<u8> {
    x.data().iter().map(|&v| quantize(v)).collect()
}

/// Integer-center disc bouncing elastically off the frame walls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallParams {
    pub radius: f64,
    pub antialias: bool,
}

impl BallParams {
    /// Radius one fifth of the shorter side, at least 1.
    pub fn for_frame(h: usize, w: usize) -> Self {
        Self {
            radius: (h.min(w) as f64 / 5.0).floor().max(1.0),
            antialias: false,
        }
    }
}

fn reflect(pos: &mut i64, vel: &mut i64, lo: i64, hi: i64) {
    *pos += *vel;
    if *pos < lo {
        *pos = 2 * lo - *pos;
        *vel = -*vel;
    } else if *pos > hi {
        *pos = 2 * hi - *pos;
        *vel = -*vel;
    }
}

fn disc_value(dy: f64, dx: f64, r: f64, antialias: bool) -> f32 {
    if !antialias {
        return if dy * dy + dx * dx <= r * r { 1.0 } else { -1.0 };
    }
    const SS: usize = 4;
    let mut inside = 0;
    for a in 0..SS {
        for b in 0..SS {
            let oy = dy + (a as f64 + 0.5) / SS as f64 - 0.5;
            let ox = dx + (b as f64 + 0.5) / SS as f64 - 0.5;
            if oy * oy + ox * ox <= r * r {
                inside += 1;
            }
        }
    }
    (-1.0 + 2.0 * inside as f64 / (SS * SS) as f64) as f32
}

/// Single-channel bouncing-ball video, `[frames, 1, h, w]`.
pub fn gen_bouncing_ball(seed: u64, frames: usize, h: usize, w: usize, params: BallParams) -> Result<Tensor<f32>> {
    let r = params.radius;
    if frames == 0 || r.is_nan() || r <= 0.0 || 2.0 * r >= h.min(w) as f64 {
        return Err(Error::invalid(format!(
            "bouncing ball needs frames >= 1 and 0 < radius < min(h, w)/2, got frames={frames}, radius={r}, {h}x{w}"
        )));
    }
    let margin = r.ceil() as i64;
    let (hi_y, hi_x) = (h as i64 - 1 - margin, w as i64 - 1 - margin);
    if hi_y - margin < 2 || hi_x - margin < 2 {
        return Err(Error::invalid(format!("radius {r} leaves no room to move in {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speeds = [-2i64, -1, 1, 2];
    let mut y = rng.random_range(margin..=hi_y);
    let mut x = rng.random_range(margin..=hi_x);
    let mut vy = speeds[rng.random_range(0..4)];
    let mut vx = speeds[rng.random_range(0..4)];

    let mut data = Vec::with_capacity(frames * h * w);
    for t in 0..frames {
        if t > 0 {
            reflect(&mut y, &mut vy, margin, hi_y);
            reflect(&mut x, &mut vx, margin, hi_x);
        }
        for i in 0..h {
            for j in 0..w {
                data.push(disc_value(i as f64 - y as f64, j as f64 - x as f64, r, params.antialias));
            }
        }
    }
    Tensor::new([frames, 1, h, w], data)
}

/// Smooth periodic field translated by a constant integer velocity with
/// wrap-around, `[frames, 1, h, w]`.
pub fn gen_drift_field(seed: u64, frames: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("drift field needs positive frames, h and w"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const MODES: usize = 4;
    let mut modes = Vec::with_capacity(MODES);
    while modes.len() < MODES {
        let ky: i64 = rng.random_range(-2..=2);
        let kx: i64 = rng.random_range(-2..=2);
        if ky == 0 && kx == 0 {
            continue;
        }
        let amp: f64 = rng.random_range(0.3..1.0);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        modes.push((ky, kx, amp, phase));
    }
    let vy: i64 = [-1, 1][rng.random_range(0..2)];
    let vx: i64 = [-1, 0, 1][rng.random_range(0..3)];

    let mut base = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            base[i * w + j] = modes
                .iter()
                .map(|&(ky, kx, a, p)| a * (2.0 * PI * (ky as f64 * i as f64 / h as f64 + kx as f64 * j as f64 / w as f64) + p).cos())
                .sum();
        }
    }
    let peak = base.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let base: Vec<f32> = base.iter().map(|v| (v / peak) as f32).collect();

    let mut data = Vec::with_capacity(frames * h * w);
    for t in 0..frames as i64 {
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let si = (i - vy * t).rem_euclid(h as i64) as usize;
                let sj = (j - vx * t).rem_euclid(w as i64) as usize;
                data.push(base[si * w + sj]);
            }
        }
    }
    Tensor::new([frames, 1, h, w], data)
}

/// Overlapping `(context, future)` windows of `p` and `q` frames.
pub fn window_sequences(video: &Tensor<f32>, p: usize, q: usize, stride: usize) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let frames = *video.shape().first().unwrap_or(&0);
    if p == 0 || q == 0 || stride == 0 {
        return Err(Error::invalid("window_sequences needs p, q, stride >= 1"));
    }
    if frames < p + q {
        return Err(Error::invalid(format!("video has {frames} frames, window needs {}", p + q)));
    }
    (0..=frames - p - q)
        .step_by(stride)
        .map(|k| Ok((video.slice_axis0(k, p)?, video.slice_axis0(k + p, q)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Ball,
    Drift,
    /// Pre-built `{train,test}/seq_%05d.rvtf` directory.
    Dir(PathBuf),
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball" => Ok(Self::Ball),
            "drift" => Ok(Self::Drift),
            _ => match s.strip_prefix("dir:") {
                Some(p) if !p.is_empty() => Ok(Self::Dir(PathBuf::from(p))),
                _ => Err(Error::invalid(format!("dataset must be ball, drift or dir:<path>, got `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Tensor<f32>>,
    pub test: Vec<Tensor<f32>>,
}

/// Sizes for a synthetic dataset.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    /// Train and test videos use disjoint seed streams derived from `seed`.
    pub fn synthetic(kind: &DatasetKind, seed: u64, spec: SyntheticSpec) -> Result<Self> {
        let gen = |s: u64, frames: usize| -> Result<Tensor<f32>> {
            match kind {
                DatasetKind::Ball => gen_bouncing_ball(s, frames, spec.height, spec.width, BallParams::for_frame(spec.height, spec.width)),
                DatasetKind::Drift => gen_drift_field(s, frames, spec.height, spec.width),
                DatasetKind::Dir(_) => Err(Error::invalid("directory datasets are loaded, not generated")),
            }
        };
        let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let train = (0..spec.train_videos)
            .map(|i| gen(base.wrapping_add(i as u64), spec.train_frames))
            .collect::<Result<_>>()?;
        let test = (0..spec.test_videos)
            .map(|i| gen(base.wrapping_add(1 << 32).wrapping_add(i as u64), spec.test_frames))
            .collect::<Result<_>>()?;
        Ok(Self { train, test })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read_split = |name: &str| -> Result<Vec<Tensor<f32>>> {
            let split = dir.join(name);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&split)
                .map_err(Error::io(&split))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "rvtf"))
                .collect();
            files.sort();
            files
                .iter()
                .map(|p| {
                    let t = read_tensor(p)?;
                    if t.rank() != 4 {
                        return Err(Error::invalid(format!("{}: expected [T,C,H,W], got {:?}", p.display(), t.shape())));
                    }
                    Ok(t)
                })
                .collect()
        };
        let ds = Self {
            train: read_split("train")?,
            test: read_split("test")?,
        };
        if ds.train.is_empty() {
            return Err(Error::invalid(format!("{}: no training sequences", dir.display())));
        }
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, videos) in [("train", &self.train), ("test", &self.test)] {
            let split = dir.join(name);
            std::fs::create_dir_all(&split).map_err(Error::io(&split))?;
            for (i, v) in videos.iter().enumerate() {
                write_tensor(&split.join(format!("seq_{i:05}.rvtf")), v)?;
            }
        }
        Ok(())
    }

    /// Frame shape `[C, H, W]` of the first training video.
    pub fn frame_shape(&self) -> Vec<usize> {
        self.train[0].shape()[1..].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(seed: u64) -> Tensor<f32> {
        gen_bouncing_ball(seed, 20, 16, 16, BallParams::for_frame(16, 16)).unwrap()
    }

    #[test]
    fn quantization_round_trip_all_levels() {
        for x8 in 0..=255u8 {
            assert_eq!(quantize(dequantize(x8)), x8);
        }
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn ball_is_deterministic_and_binary() {
        let a = ball(5);
        assert_eq!(a, ball(5));
        assert_ne!(a, ball(6));
        assert!(a.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn ball_area_constant() {
        let v = ball(11);
        let area = |t: usize| v.index_axis0(t).unwrap().data().iter().filter(|&&p| p == 1.0).count();
        let a0 = area(0);
        assert!(a0 > 0);
        for t in 1..20 {
            assert_eq!(area(t), a0, "frame {t}");
        }
    }

    #[test]
    fn ball_moves() {
        let v = ball(3);
        assert_ne!(v.index_axis0(0).unwrap(), v.index_axis0(1).unwrap());
    }

    #[test]
    fn antialiased_ball_in_range() {
        let p = BallParams { radius: 3.5, antialias: true };
        let v = gen_bouncing_ball(1, 5, 16, 16, p).unwrap();
        assert!(v.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(v.data().iter().any(|&x| x > -1.0 && x < 1.0));
    }

    #[test]
    fn ball_rejects_bad_geometry() {
        let big = BallParams { radius: 8.0, antialias: false };
        assert!(gen_bouncing_ball(0, 4, 16, 16, big).is_err());
        assert!(gen_bouncing_ball(0, 0, 16, 16, BallParams::for_frame(16, 16)).is_err());
    }

    #[test]
    fn drift_is_circular_shift() {
        let v = gen_drift_field(9, 6, 16, 16).unwrap();
        assert!(v.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        let f0 = v.index_axis0(0).unwrap();
        let f1 = v.index_axis0(1).unwrap();
        // recover the velocity by search, then check every consecutive pair
        let shift = |f: &Tensor<f32>, dy: i64, dx: i64| -> Vec<f32> {
            (0..16i64)
                .flat_map(|i| (0..16i64).map(move |j| (i, j)))
                .map(|(i, j)| f.data()[((i - dy).rem_euclid(16) * 16 + (j - dx).rem_euclid(16)) as usize])
                .collect()
        };
        let (dy, dx) = (-1..=1)
            .flat_map(|a| (-1..=1).map(move |b| (a, b)))
            .find(|&(a, b)| shift(&f0, a, b) == f1.data())
            .expect("integer shift");
        for t in 1..6 {
            let prev = v.index_axis0(t - 1).unwrap();
            assert_eq!(shift(&prev, dy, dx), v.index_axis0(t).unwrap().data());
        }
    }

    #[test]
    fn drift_mean_conserved() {
        let v = gen_drift_field(4, 8, 16, 16).unwrap();
        let mean = |t: usize| v.index_axis0(t).unwrap().data().iter().map(|&x| x as f64).sum::<f64>() / 256.0;
        let m0 = mean(0);
        for t in 1..8 {
            assert!((mean(t) - m0).abs() < 1e-6);
        }
    }

    #[test]
    fn window_counts_and_tiling() {
        let v = ball(0);
        let v8 = v.slice_axis0(0, 8).unwrap();
        assert_eq!(window_sequences(&v8, 2, 6, 1).unwrap().len(), 1);
        let v10 = v.slice_axis0(0, 10).unwrap();
        let w = window_sequences(&v10, 2, 6, 1).unwrap();
        assert_eq!(w.len(), 3);
        for (k, (c, f)) in w.iter().enumerate() {
            assert_eq!(c.shape()[0], 2);
            assert_eq!(f.shape()[0], 6);
            let joined = Tensor::concat_axis0(&[c.clone(), f.clone()]).unwrap();
            assert_eq!(joined, v10.slice_axis0(k, 8).unwrap());
        }
        assert!(window_sequences(&v.slice_axis0(0, 7).unwrap(), 2, 6, 1).is_err());
        assert_eq!(window_sequences(&v, 2, 6, 4).unwrap().len(), 4);
    }

    #[test]
    fn dataset_kind_parsing() {
        assert_eq!("ball".parse::<DatasetKind>().unwrap(), DatasetKind::Ball);
        assert_eq!("dir:/x".parse::<DatasetKind>().unwrap(), DatasetKind::Dir("/x".into()));
        assert!("dir:".parse::<DatasetKind>().is_err());
        assert!("mnist".parse::<DatasetKind>().is_err());
    }
}
