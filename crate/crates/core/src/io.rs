//! UCTK tensor container and JSON report serialization.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "UCTK"
//! 4       2     version (1)
//! 6       2     flags (bit 0: keys section present)
//! 8       4     T  frames
//! 12      4     N  tokens per frame
//! 16      4     d  feature dim
//! 20      4     d_k key dim (0 without keys)
//! 24      ...   frames: T*N*d f32, frame-major, token rows, dim columns
//! ...     ...   keys:   T*N*d_k f32 (only with flag bit 0)
//! ```
//!
//! Reports are written as key-sorted JSON with floats rounded to six
//! significant digits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::pipeline::{CompressedVideo, CompressionReport};
use crate::tensor::{TokenMatrix, VideoTensor};

pub const MAGIC: &[u8; 4] = b"UCTK";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const FLAG_KEYS: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("header too short: need {HEADER_LEN} bytes, got {0}")]
    ShortHeader(usize),
    #[error("bad magic {0:?}, expected \"UCTK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    Version(u16),
    #[error("unknown flag bits {0:#06x}")]
    Flags(u16),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("payload length mismatch: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite value {value} at byte offset {offset}")]
    NonFinite { offset: usize, value: f32 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

/// Serializes a video to UCTK bytes.
pub fn write_container(video: &VideoTensor) -> Vec<u8> {
    let (t, n, d) = (video.len(), video.tokens_per_frame(), video.dim());
    let dk = video.key_dim().unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * n * (d + dk));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if video.keys().is_some() { FLAG_KEYS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for dim in [t, n, d, dk] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let sections = std::iter::once(video.frames()).chain(video.keys());
    for frames in sections {
        for f in frames {
            for v in f.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn read_section(
    bytes: &[u8],
    base: usize,
    t: usize,
    n: usize,
    d: usize,
) -> Result<Vec<TokenMatrix>, FormatError> {
    let frame_bytes = n * d * 4;
    (0..t)
        .map(|f| {
            let start = base + f * frame_bytes;
            let data = bytes[start..start + frame_bytes]
                .chunks_exact(4)
                .enumerate()
                .map(|(k, c)| {
                    let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(FormatError::NonFinite {
                            offset: start + 4 * k,
                            value: v,
                        })
                    }
                })
                .collect::<Result<Vec<f32>, _>>()?;
            TokenMatrix::new(n, d, data).map_err(|e| FormatError::Shape(e.to_string()))
        })
        .collect()
}

/// Parses UCTK bytes, rejecting malformed headers, length mismatches in
/// either direction and non-finite payload values.
pub fn read_container(bytes: &[u8]) -> Result<VideoTensor, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::ShortHeader(bytes.len()));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let flags = u16_at(bytes, 6);
    if flags & !FLAG_KEYS != 0 {
        return Err(FormatError::Flags(flags));
    }
    let has_keys = flags & FLAG_KEYS != 0;
    let (t, n, d, dk) = (u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16), u32_at(bytes, 20));
    if t == 0 || n == 0 || d == 0 {
        return Err(FormatError::Shape(format!("T={t}, N={n}, d={d} must all be >= 1")));
    }
    if has_keys && dk == 0 {
        return Err(FormatError::Shape("keys flag set but d_k = 0".into()));
    }
    if !has_keys && dk != 0 {
        return Err(FormatError::Shape(format!("d_k = {dk} without keys flag")));
    }
    let expected = (t as u128) * (n as u128) * ((d + dk) as u128) * 4 + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        return Err(FormatError::Length {
            expected: usize::try_from(expected).unwrap_or(usize::MAX),
            actual: bytes.len(),
        });
    }
    let frames = read_section(bytes, HEADER_LEN, t, n, d)?;
    let keys = if has_keys {
        Some(read_section(bytes, HEADER_LEN + t * n * d * 4, t, n, dk)?)
    } else {
        None
    };
    VideoTensor::new(frames, keys).map_err(|e| FormatError::Shape(e.to_string()))
}

pub fn read_container_file(path: impl AsRef<Path>) -> Result<VideoTensor, FormatError> {
    read_container(&fs::read(path)?)
}

pub fn write_container_file(path: impl AsRef<Path>, video: &VideoTensor) -> Result<(), FormatError> {
    fs::write(path, write_container(video))?;
    Ok(())
}

fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(num) if num.is_f64() => {
            if let Some(r) = num.as_f64().map(round_sig6).and_then(serde_json::Number::from_f64) {
                *num = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Key-sorted JSON with six-significant-digit floats.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let mut v = serde_json::to_value(value)?;
    round_floats(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn write_report(report: &CompressionReport) -> Result<String, FormatError> {
    to_stable_json(report)
}

pub fn read_report(json: &str) -> Result<CompressionReport, FormatError> {
    Ok(serde_json::from_str(json)?)
}

/// Where one group's tokens sit in the flattened output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutGroup {
    pub range: [usize; 2],
    /// Index of the group's first token in the token container.
    pub token_offset: usize,
    pub retained_ids: Vec<usize>,
    pub redundancy: Vec<Vec<usize>>,
    /// Marker position in the emitted sequence (tokens plus markers).
    pub marker: usize,
}

/// Sidecar describing a flattened compressed video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedLayout {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub emitted: usize,
    pub groups: Vec<LayoutGroup>,
}

impl CompressedLayout {
    pub fn of(video: &CompressedVideo) -> Self {
        let mut offset = 0;
        let groups = video
            .frames
            .iter()
            .zip(&video.grouping.groups)
            .zip(&video.markers)
            .map(|((f, range), &marker)| {
                let g = LayoutGroup {
                    range: [range.start, range.end],
                    token_offset: offset,
                    retained_ids: f.retained_ids.clone(),
                    redundancy: f.redundancy.clone(),
                    marker,
                };
                offset += f.retained();
                g
            })
            .collect();
        Self {
            frames: video.report.totals.frames,
            tokens_per_frame: video.report.totals.tokens_per_frame,
            dim: video.frames[0].retained_features.d(),
            emitted: video.emitted(),
            groups,
        }
    }
}

/// Retained features as a single-frame container (one row per retained
/// token, groups concatenated) plus its JSON layout sidecar.
pub fn write_compressed(video: &CompressedVideo) -> Result<(Vec<u8>, String), FormatError> {
    let tokens = VideoTensor::new(vec![video.retained_features()], None)
        .map_err(|e| FormatError::Shape(e.to_string()))?;
    Ok((
        write_container(&tokens),
        to_stable_json(&CompressedLayout::of(video))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{compress, CompressionConfig};
    use crate::synth;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> VideoTensor {
        synth::random_video(&mut ChaCha8Rng::seed_from_u64(1), 3, 4, 5, Some(2))
    }

    #[test]
    fn header_layout() {
        let b = write_container(&sample());
        assert_eq!(&b[..4], b"UCTK");
        assert_eq!(u16_at(&b, 4), 1);
        assert_eq!(u16_at(&b, 6), 1);
        assert_eq!([u32_at(&b, 8), u32_at(&b, 12), u32_at(&b, 16), u32_at(&b, 20)], [3, 4, 5, 2]);
        assert_eq!(b.len(), HEADER_LEN + 4 * 3 * 4 * (5 + 2));
        let first = sample().frames()[0].row(0)[0];
        assert_eq!(&b[24..28], &first.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let v = sample();
        let b = write_container(&v);
        let back = read_container(&b).unwrap();
        assert_eq!(back, v);
        assert_eq!(write_container(&back), b);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let b = write_container(&sample());
        let err = read_container(&b[..b.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, FormatError::Length { expected, actual } if expected == b.len() && actual == b.len() - 3));
        assert!(msg.contains(&b.len().to_string()));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = write_container(&sample());
        b.push(0);
        assert!(matches!(read_container(&b), Err(FormatError::Length { .. })));
    }

    #[test]
    fn keys_flag_without_keys_bytes() {
        let v = synth::random_video(&mut ChaCha8Rng::seed_from_u64(2), 2, 3, 4, None);
        let mut b = write_container(&v);
        b[6] = 1;
        b[20] = 2;
        assert!(matches!(read_container(&b), Err(FormatError::Length { .. })));
        b[20] = 0;
        assert!(matches!(read_container(&b), Err(FormatError::Shape(_))));
    }

    #[test]
    fn header_errors() {
        let good = write_container(&sample());
        assert!(matches!(read_container(&good[..10]), Err(FormatError::ShortHeader(10))));
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(read_container(&b), Err(FormatError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(read_container(&b), Err(FormatError::Version(2))));
        let mut b = good.clone();
        b[6] = 0x83;
        assert!(matches!(read_container(&b), Err(FormatError::Flags(_))));
        let mut b = good;
        b[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_container(&b), Err(FormatError::Shape(_))));
    }

    #[test]
    fn nan_rejected_with_offset() {
        let mut b = write_container(&sample());
        let at = HEADER_LEN + 4 * 7;
        b[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match read_container(&b) {
            Err(FormatError::NonFinite { offset, .. }) => assert_eq!(offset, at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_report_is_valid_json() {
        let s = write_report(&CompressionReport::default()).unwrap();
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["totals"]["emitted"], 0);
        assert_eq!(v["groups"].as_array().unwrap().len(), 0);
        assert_eq!(read_report(&s).unwrap(), CompressionReport::default());
    }

    #[test]
    fn report_keys_sorted_and_counts_round_trip() {
        let v = synth::random_video(&mut ChaCha8Rng::seed_from_u64(3), 32, 196, 8, None);
        let out = compress(&v, &CompressionConfig::with_ratio(0.10)).unwrap();
        let s = write_report(&out.report).unwrap();
        let back = read_report(&s).unwrap();
        assert_eq!(back.totals.emitted, out.report.totals.emitted);
        assert!(back.totals.emitted <= 627);
        for (a, b) in back.groups.iter().zip(&out.report.groups) {
            assert_eq!((a.range, a.budget, a.retained, a.fused), (b.range, b.budget, b.retained, b.fused));
            assert!((a.bound - b.bound).abs() <= 1e-5 * b.bound.abs().max(1.0));
        }
        // Top-level keys come out in sorted order.
        let keys: Vec<&str> = ["\"config\"", "\"groups\"", "\"timings_ms\"", "\"totals\""].to_vec();
        let pos: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn floats_rounded_to_six_digits() {
        assert_eq!(round_sig6(0.123456789), 0.123457);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
        assert_eq!(round_sig6(0.0), 0.0);
        let s = to_stable_json(&serde_json::json!({"b": 1.0 / 3.0, "a": 2})).unwrap();
        assert_eq!(s, "{\n  \"a\": 2,\n  \"b\": 0.333333\n}");
    }

    #[test]
    fn compressed_output_layout() {
        let v = synth::random_video(&mut ChaCha8Rng::seed_from_u64(4), 4, 20, 6, None);
        let out = compress(&v, &CompressionConfig::with_ratio(0.3)).unwrap();
        let (bytes, sidecar) = write_compressed(&out).unwrap();
        let tokens = read_container(&bytes).unwrap();
        let layout: CompressedLayout = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(tokens.tokens_per_frame(), out.emitted() - out.markers.len());
        assert_eq!(layout.emitted, out.emitted());
        let last = layout.groups.last().unwrap();
        assert_eq!(last.token_offset + last.retained_ids.len(), tokens.tokens_per_frame());
    }

    proptest! {
        #[test]
        fn container_round_trip(t in 1usize..4, n in 1usize..6, d in 1usize..6, dk in 0usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = synth::random_video(&mut rng, t, n, d, (dk > 0).then_some(dk));
            let b = write_container(&v);
            let back = read_container(&b).unwrap();
            prop_assert_eq!(write_container(&back), b);
        }
    }
}
