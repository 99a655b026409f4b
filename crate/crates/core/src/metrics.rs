//! Pixel-marginal CRPS on the 8-bit grid.
//!
//! Each pixel of each future frame gets its own empirical CDF from the
//! ensemble; the score is the squared distance to the observation's step
//! function, summed over the unit grid.

use std::io::Write;
use std::path::Path;

use crate::data::quantize_tensor;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// `Σ_{z=0}^{254} (F̂(z) - 1{obs ≤ z})²` with `F̂(z) = #{s ≤ z} / S`.
pub fn crps_pixel(samples: &[u8], obs: u8) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("crps_pixel needs at least one sample"));
    }
    let mut counts = [0u32; 256];
    for &s in samples {
        counts[s as usize] += 1;
    }
    Ok(crps_from_counts(&counts, samples.len(), obs))
}

/// Checked variant for integer inputs that may lie outside `0..=255`.
pub fn crps_pixel_checked(samples: &[i64], obs: i64) -> Result<f64> {
    let to_u8 = |v: i64| u8::try_from(v).map_err(|_| Error::invalid(format!("CRPS value {v} outside 0..=255")));
    let s: Vec<u8> = samples.iter().map(|&v| to_u8(v)).collect::<Result<_>>()?;
    crps_pixel(&s, to_u8(obs)?)
}

/// The sum is accumulated exactly as `Σ (S·F̂(z) - S·1{obs ≤ z})²` in
/// integers and divided by `S²` once, so the result is the correctly
/// rounded value of the exact rational score.
fn crps_from_counts(counts: &[u32; 256], s: usize, obs: u8) -> f64 {
    let s = s as i64;
    let mut cum = 0i64;
    let mut total = 0i64;
    for (z, &c) in counts.iter().enumerate().take(255) {
        cum += c as i64;
        let d = if (obs as usize) <= z { cum - s } else { cum };
        total += d * d;
    }
    total as f64 / (s * s) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrpsReport {
    pub scalar: f64,
    pub per_frame: Vec<f64>,
    /// Per-frame `[H, W]` maps (averaged over channels), kept on request.
    pub maps: Option<Vec<Tensor<f64>>>,
    pub frame_shape: Vec<usize>,
}

/// Score an ensemble of `[q, C, H, W]` videos against the truth.
pub fn crps_video(samples: &[Tensor<f32>], truth: &Tensor<f32>, keep_maps: bool) -> Result<CrpsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    if truth.rank() != 4 {
        return Err(Error::invalid(format!("truth must be [q, C, H, W], got {:?}", truth.shape())));
    }
    for s in samples {
        if s.shape() != truth.shape() {
            return Err(Error::shape("crps_video", truth.shape(), s.shape()));
        }
    }
    let q8: Vec<Vec<u8>> = samples.iter().map(quantize_tensor).collect();
    let t8 = quantize_tensor(truth);
    crps_video_u8(&q8, &t8, truth.shape(), keep_maps)
}

/// As [`crps_video`] on already quantized buffers.
pub fn crps_video_u8(samples: &[Vec<u8>], truth: &[u8], shape: &[usize], keep_maps: bool) -> Result<CrpsReport> {
    let &[q, c, h, w] = shape else {
        return Err(Error::invalid(format!("shape must be [q, C, H, W], got {shape:?}")));
    };
    let frame = c * h * w;
    if truth.len() != q * frame || samples.iter().any(|s| s.len() != truth.len()) {
        return Err(Error::invalid("ensemble and truth buffers disagree with the shape"));
    }
    let s = samples.len();
    let mut scores = vec![0.0f64; truth.len()];
    let mut counts = [0u32; 256];
    for (i, score) in scores.iter_mut().enumerate() {
        counts.fill(0);
        for smp in samples {
            counts[smp[i] as usize] += 1;
        }
        *score = crps_from_counts(&counts, s, truth[i]);
    }
    let per_frame: Vec<f64> = scores.chunks(frame).map(|f| pairwise_sum(f) / frame as f64).collect();
    let scalar = pairwise_sum(&scores) / scores.len() as f64;
    let maps = keep_maps.then(|| {
        scores
            .chunks(frame)
            .map(|f| {
                let m: Vec<f64> = (0..h * w)
                    .map(|p| (0..c).map(|ch| f[ch * h * w + p]).sum::<f64>() / c as f64)
                    .collect();
                Tensor::new([h, w], m).expect("map shape")
            })
            .collect()
    });
    Ok(CrpsReport {
        scalar,
        per_frame,
        maps,
        frame_shape: vec![c, h, w],
    })
}

/// `1 / CRPS` per frame; zero scores become `+inf`.
pub fn inverse_crps_curve(report: &CrpsReport) -> Vec<f64> {
    report
        .per_frame
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v } else { f64::INFINITY })
        .collect()
}

fn fmt_score(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

/// `frame_idx,crps,inv_crps` rows.
pub fn report_csv(report: &CrpsReport) -> String {
    let inv = inverse_crps_curve(report);
    let mut out = String::from("frame_idx,crps,inv_crps\n");
    for (i, (c, v)) in report.per_frame.iter().zip(&inv).enumerate() {
        out.push_str(&format!("{i},{c},{}\n", fmt_score(*v)));
    }
    out
}

/// Min-max scaled 8-bit map; a constant map scales to all zeros.
pub fn map_to_gray(map: &Tensor<f64>) -> Vec<u8> {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    map.data()
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Write `<stem>.pgm` (binary P5) and `<stem>.csv` for one frame's map.
pub fn export_score_map(report: &CrpsReport, frame_idx: usize, stem: &Path) -> Result<()> {
    let maps = report.maps.as_ref().ok_or_else(|| Error::invalid("report was built without per-pixel maps"))?;
    let map = maps
        .get(frame_idx)
        .ok_or_else(|| Error::invalid(format!("frame {frame_idx} out of range ({} frames)", maps.len())))?;
    let (h, w) = (map.shape()[0], map.shape()[1]);

    let pgm_path = stem.with_extension("pgm");
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(map_to_gray(map));
    std::fs::write(&pgm_path, pgm).map_err(Error::io(&pgm_path))?;

    let csv_path = stem.with_extension("csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(Error::io(&csv_path))?);
    for row in map.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(",")).map_err(Error::io(&csv_path))?;
    }
    f.flush().map_err(Error::io(&csv_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_scores_zero() {
        assert_eq!(crps_pixel(&[17, 17, 17], 17).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_example() {
        assert_eq!(crps_pixel(&[0, 2], 1).unwrap(), 0.5);
    }

    #[test]
    fn single_sample_is_absolute_error() {
        for s in 0..=255u8 {
            for x in 0..=255u8 {
                assert_eq!(crps_pixel(&[s], x).unwrap(), (s as f64 - x as f64).abs());
            }
        }
    }

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(crps_pixel(&[], 3).is_err());
        assert!(crps_pixel_checked(&[256], 3).is_err());
        assert!(crps_pixel_checked(&[1], -1).is_err());
        assert_eq!(crps_pixel_checked(&[0, 2], 1).unwrap(), 0.5);
    }

    #[test]
    fn toy_video_report() {
        // two pixels, two samples: pixel 0 samples {0,2} obs 1, pixel 1 exact
        let truth = vec![1u8, 9];
        let samples = vec![vec![0u8, 9], vec![2u8, 9]];
        let r = crps_video_u8(&samples, &truth, &[1, 1, 1, 2], true).unwrap();
        assert_eq!(r.per_frame, vec![0.25]);
        assert_eq!(r.scalar, 0.25);
        assert_eq!(r.maps.as_ref().unwrap()[0].data(), &[0.5, 0.0]);
    }

    #[test]
    fn identical_ensemble_all_zero() {
        let truth = Tensor::<f32>::new([2, 1, 2, 2], vec![0.1, -0.5, 1.0, -1.0, 0.0, 0.3, 0.2, 0.9]).unwrap();
        let r = crps_video(&[truth.clone(), truth.clone()], &truth, false).unwrap();
        assert_eq!(r.scalar, 0.0);
        assert_eq!(r.per_frame, vec![0.0, 0.0]);
        assert!(crps_video(&[Tensor::zeros([1, 1, 2, 2])], &truth, false).is_err());
    }

    #[test]
    fn inverse_curve_and_csv() {
        let r = CrpsReport {
            scalar: 0.375,
            per_frame: vec![0.5, 0.25, 0.0],
            maps: None,
            frame_shape: vec![1, 1, 1],
        };
        let inv = inverse_crps_curve(&r);
        assert_eq!(&inv[..2], &[2.0, 4.0]);
        assert!(inv[2].is_infinite());
        let csv = report_csv(&r);
        assert!(csv.starts_with("frame_idx,crps,inv_crps\n0,0.5,2\n"));
        assert!(csv.ends_with("2,0,inf\n"));
    }

    #[test]
    fn gray_scaling() {
        let c = Tensor::<f64>::full([2, 3], 4.2);
        assert_eq!(map_to_gray(&c), vec![0; 6]);
        let m = Tensor::<f64>::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(map_to_gray(&m), vec![0, 128, 255]);
    }
}
