//! Binary netpbm I/O: P5 (PGM) for label maps and grayscale outputs, P6
//! (PPM) for images. Maxval is fixed at 255; parse failures report the
//! byte offset of the first bad or missing byte.

use std::fs;
use std::path::Path;

use crate::cursor::Cursor;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Header token reader: skips netpbm whitespace and `#` comments.
fn read_token(cur: &mut Cursor<'_>, what: &str) -> Result<usize> {
    loop {
        match cur.peek() {
            Some(b) if b.is_ascii_whitespace() => cur.bump(),
            Some(b'#') => {
                while let Some(b) = cur.peek() {
                    cur.bump();
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = cur.pos();
    let mut value: usize = 0;
    let mut digits = 0;
    while let Some(b) = cur.peek() {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| cur.error_at(start, format!("{what} overflows")))?;
        digits += 1;
        cur.bump();
    }
    if digits == 0 {
        return Err(cur.error_at(cur.pos(), format!("expected {what}")));
    }
    Ok(value)
}

fn parse_header<'a>(cur: &mut Cursor<'a>, magic: &[u8; 2]) -> Result<(usize, usize)> {
    let got = cur.take(2, "netpbm magic")?;
    if got != magic {
        return Err(cur.error_at(
            0,
            format!(
                "expected {} header, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            ),
        ));
    }
    let width = read_token(cur, "width")?;
    let height = read_token(cur, "height")?;
    let maxval = read_token(cur, "maxval")?;
    if maxval != 255 {
        return Err(cur.error_here(format!("unsupported maxval {maxval}, only 255")));
    }
    // exactly one whitespace byte separates the header from the payload
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.bump(),
        _ => return Err(cur.error_here("expected whitespace before payload")),
    }
    if width == 0 || height == 0 {
        return Err(cur.error_at(2, "zero image extent"));
    }
    Ok((width, height))
}

/// Writes a label map (or any 8-bit grayscale grid) as binary PGM.
pub fn write_pgm(map: &LabelMap, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend_from_slice(&map.classes);
    write_bytes(path, &bytes)
}

/// Reads a binary PGM into a label map of raw byte values.
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(&bytes);
    let (width, height) = parse_header(&mut cur, b"P5")?;
    let payload = cur.take(width * height, "pixel payload")?;
    LabelMap::new(height, width, payload.to_vec())
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]` as binary PPM,
/// quantized by `round(255 * v)`.
pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let s = &image.shape;
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dimension("write_ppm", s, &[0, 0, 3]));
    }
    let (h, w) = (s[0], s[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    write_bytes(path, &bytes)
}

/// Reads a binary PPM back into an `[H, W, 3]` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor::new(&bytes);
    let (width, height) = parse_header(&mut cur, b"P6")?;
    let payload = cur.take(width * height * 3, "pixel payload")?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![height, width, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.pgm");
        let map = LabelMap::new(3, 5, (0..15).map(|v| (v * 17 % 256) as u8).collect()).unwrap();
        write_pgm(&map, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn pgm_hand_encoded_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\x01\x02\x03").unwrap();
        let map = read_pgm(&path).unwrap();
        assert_eq!((map.height, map.width), (2, 2));
        assert_eq!(map.classes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn pgm_truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        let bytes = b"P5\n2 2\n255\n\x00\x01\x02"; // one byte short
        std::fs::write(&path, bytes).unwrap();
        let err = read_pgm(&path).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, bytes.len()),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\n\x00").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn pgm_accepts_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("comment.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x09\x0a").unwrap();
        let map = read_pgm(&path).unwrap();
        assert_eq!(map.classes, vec![9, 10]);
    }

    #[test]
    fn ppm_round_trip_quantizes_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::new(vec![2, 1, 3], vec![0.0, 0.5, 1.0, 0.25, 0.126, 0.874]).unwrap();
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape, vec![2, 1, 3]);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // a second trip through the quantizer is exact
        write_ppm(&back, &path).unwrap();
        let again = read_ppm(&path).unwrap();
        let bits_a: Vec<u64> = back.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = again.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
