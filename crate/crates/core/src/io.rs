//! File formats: binary PNM images, 16-bit PGM label maps and BSDS `.seg`
//! ground-truth files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{quantize_sample, ImageTensor, LabelMap};

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "file too short for a PNM magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    if magic != *b"P5" && magic != *b"P6" {
        return Err(Error::format(0, "expected binary PNM magic P5 or P6"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(pos) {
                        pos += 1;
                        if *b == b'\n' || *b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(Error::format(start, format!("expected decimal {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::format(start, format!("header value {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "missing whitespace after maxval")),
    }
    Ok(PnmHeader {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        payload_offset: pos,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let header = parse_header(bytes)?;
    if header.maxval != 255 {
        return Err(Error::format(
            header.payload_offset.saturating_sub(1),
            format!("unsupported maxval {} (only 255)", header.maxval),
        ));
    }
    let channels = if header.magic == *b"P5" { 1 } else { 3 };
    let n = header.width * header.height * channels;
    let payload = &bytes[header.payload_offset..];
    if payload.len() < n {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: expected {n} bytes, found {}", payload.len()),
        ));
    }
    let data = payload[..n].iter().map(|b| *b as f64 / 255.0).collect();
    ImageTensor::new(header.height, header.width, channels, data)
}

pub fn encode_pnm(img: &ImageTensor) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Shape(format!("{c} channels; PNM needs 1 or 3"))),
    };
    if img.height() == 0 || img.width() == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| quantize_sample(*v)));
    Ok(out)
}

/// Reads a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn load_pnm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_pnm(&read_file(path.as_ref())?)
}

/// Writes P5/P6, rounding `v * 255` to the nearest byte.
pub fn save_pnm(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pnm(img)?)
}

pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes)?;
    if header.magic != *b"P5" {
        return Err(Error::format(0, "label maps must be P5"));
    }
    if header.maxval != 65535 {
        return Err(Error::format(
            header.payload_offset.saturating_sub(1),
            format!("label maps need maxval 65535, found {}", header.maxval),
        ));
    }
    let n = header.width * header.height;
    let payload = &bytes[header.payload_offset..];
    if payload.len() < 2 * n {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated payload: expected {} bytes, found {}",
                2 * n,
                payload.len()
            ),
        ));
    }
    let labels = payload[..2 * n]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    LabelMap::new(header.height, header.width, labels)
}

pub fn encode_label_map(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", labels.width(), labels.height()).into_bytes();
    out.reserve(2 * labels.len());
    for (i, l) in labels.labels().iter().enumerate() {
        let v = u16::try_from(*l).map_err(|_| {
            Error::Domain(format!(
                "label {l} at pixel {i} exceeds the 16-bit label capacity"
            ))
        })?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

/// Reads a 16-bit big-endian P5 label map.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_label_map(&read_file(path.as_ref())?)
}

pub fn save_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_label_map(labels)?)
}

/// Parses the BSDS `.seg` text layout: header keys up to `data`, then
/// `label row col_start col_end` runs with inclusive column ranges.
pub fn parse_bsds_seg(text: &str) -> Result<LabelMap> {
    let mut width = None;
    let mut height = None;
    let mut segments = None;
    let mut lines = text.lines().enumerate();
    let mut offset = 0;
    let mut in_data = false;
    for (_, line) in lines.by_ref() {
        let line_offset = offset;
        offset += line.len() + 1;
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        if key == "data" {
            in_data = true;
            break;
        }
        let value = parts.next();
        let parse = |v: Option<&str>| -> Result<usize> {
            v.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(line_offset, format!("bad value for `{key}`")))
        };
        match key {
            "width" => width = Some(parse(value)?),
            "height" => height = Some(parse(value)?),
            "segments" => segments = Some(parse(value)?),
            _ => {}
        }
    }
    if !in_data {
        return Err(Error::format(offset, "missing `data` line"));
    }
    let (Some(width), Some(height)) = (width, height) else {
        return Err(Error::format(0, "header lacks width or height"));
    };
    let mut labels: Vec<Option<u32>> = vec![None; width * height];
    for (_, line) in lines {
        let line_offset = offset;
        offset += line.len() + 1;
        let nums: Vec<&str> = line.split_whitespace().collect();
        if nums.is_empty() {
            continue;
        }
        let parsed: Option<Vec<usize>> = nums.iter().map(|s| s.parse().ok()).collect();
        let Some(v) = parsed.filter(|v| v.len() == 4) else {
            return Err(Error::format(
                line_offset,
                "expected `label row col_start col_end`",
            ));
        };
        let (label, row, c0, c1) = (v[0], v[1], v[2], v[3]);
        if row >= height || c0 > c1 || c1 >= width {
            return Err(Error::format(
                line_offset,
                format!("run {row}:{c0}-{c1} outside {width}x{height}"),
            ));
        }
        if let Some(s) = segments {
            if label >= s {
                return Err(Error::format(
                    line_offset,
                    format!("label {label} not below declared segments {s}"),
                ));
            }
        }
        for col in c0..=c1 {
            let cell = &mut labels[row * width + col];
            if cell.is_some() {
                return Err(Error::Coverage {
                    row,
                    col,
                    message: "pixel covered by more than one run".into(),
                });
            }
            *cell = Some(label as u32);
        }
    }
    let mut out = Vec::with_capacity(labels.len());
    for (i, l) in labels.into_iter().enumerate() {
        match l {
            Some(l) => out.push(l),
            None => {
                return Err(Error::Coverage {
                    row: i / width,
                    col: i % width,
                    message: "pixel not covered by any run".into(),
                })
            }
        }
    }
    LabelMap::new(height, width, out)
}

pub fn load_bsds_seg(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::format(e.utf8_error().valid_up_to(), "BSDS .seg file is not text")
    })?;
    parse_bsds_seg(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_bytes_scale_by_255() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 0, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn p6_single_black_pixel() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend([0, 0, 0]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        bytes.push(51);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[0.2]);
    }

    #[test]
    fn half_rounds_to_128() {
        let img = ImageTensor::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = encode_pnm(&img).unwrap();
        assert_eq!(*bytes.last().unwrap(), 128);
    }

    #[test]
    fn degenerate_and_unsupported_shapes_rejected() {
        assert!(matches!(
            encode_pnm(&ImageTensor::zeros(0, 0, 1)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            encode_pnm(&ImageTensor::zeros(2, 2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn format_errors_name_offsets() {
        let bytes = b"P5\n2 2\n65535\n\0\0".to_vec();
        match decode_pnm(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
        let bytes = b"P5\n2 2\n255\n\0".to_vec();
        match decode_pnm(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, bytes.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
        match decode_pnm(b"P5\n2 x\n255\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn label_maps_reject_wrong_maxval_and_overflow() {
        let mut bytes = b"P5\n1 1\n255\n".to_vec();
        bytes.push(0);
        assert!(matches!(
            decode_label_map(&bytes),
            Err(Error::Format { .. })
        ));
        let big = LabelMap::new(1, 2, vec![0, 70000]).unwrap();
        assert!(matches!(encode_label_map(&big), Err(Error::Domain(_))));
    }

    #[test]
    fn all_zero_label_map_round_trips() {
        let m = LabelMap::filled(3, 4, 0);
        assert_eq!(decode_label_map(&encode_label_map(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn two_run_seg_file() {
        let text = "width 2\nheight 1\nsegments 2\ndata\n0 0 0 0\n1 0 1 1\n";
        let m = parse_bsds_seg(text).unwrap();
        assert_eq!((m.height(), m.width()), (1, 2));
        assert_eq!(m.labels(), &[0, 1]);
    }

    #[test]
    fn overlapping_runs_rejected() {
        let text = "width 2\nheight 1\nsegments 2\ndata\n0 0 0 1\n1 0 1 1\n";
        match parse_bsds_seg(text) {
            Err(Error::Coverage { row, col, .. }) => assert_eq!((row, col), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uncovered_pixel_rejected() {
        let text = "width 3\nheight 2\nsegments 1\ndata\n0 0 0 2\n0 1 0 1\n";
        match parse_bsds_seg(text) {
            Err(Error::Coverage { row, col, .. }) => assert_eq!((row, col), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
