//! Binary PGM (`P5`, one channel) and PPM (`P6`, three channels) with 8-bit
//! samples. Samples map linearly to `[0, 1]` on read; on write values are
//! clamped to `[0, 1]` and rounded half up.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::grid::LatentGrid;

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Reads a decimal field, returning it and the offset where it started.
    fn number(&mut self, what: &str) -> std::result::Result<(usize, usize), (usize, String)> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<usize>()
            .map(|v| (v, start))
            .map_err(|_| (start, format!("{what} {text} is out of range")))
    }
}

/// Decodes an in-memory netpbm image. `origin` only labels errors.
pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<LatentGrid> {
    let fail = |offset: usize, message: String| Error::ImageFormat {
        path: origin.to_path_buf(),
        offset,
        message,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(fail(0, "expected magic number P5 or P6".into())),
    };
    let mut p = HeaderParser { bytes, pos: 2 };
    if p.bytes.get(2).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        return Err(fail(2, "expected whitespace after magic number".into()));
    }
    let (width, w_at) = p.number("width").map_err(|(o, m)| fail(o, m))?;
    let (height, h_at) = p.number("height").map_err(|(o, m)| fail(o, m))?;
    let (maxval, m_at) = p.number("maxval").map_err(|(o, m)| fail(o, m))?;
    if width == 0 {
        return Err(fail(w_at, "width must be positive".into()));
    }
    if height == 0 {
        return Err(fail(h_at, "height must be positive".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(m_at, format!("maxval {maxval} unsupported (need 1..=255)")));
    }
    match bytes.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => p.pos += 1,
        _ => return Err(fail(p.pos, "expected one whitespace byte before pixel data".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| fail(w_at, "image dimensions overflow".into()))?;
    let payload = &bytes[p.pos..];
    if payload.len() < need {
        return Err(fail(
            bytes.len(),
            format!(
                "truncated pixel data: expected {need} bytes from offset {}, found {}",
                p.pos,
                payload.len()
            ),
        ));
    }
    let scale = 1.0 / maxval as f64;
    let data = payload[..need]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b as usize > maxval {
                Err(fail(p.pos + i, format!("sample {b} exceeds maxval {maxval}")))
            } else {
                Ok(b as f64 * scale)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    LatentGrid::from_vec(height, width, channels, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes, path)
}

/// Maps a real sample to a byte: clamp to `[0, 1]`, scale, round half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_image(grid: &LatentGrid) -> Result<Vec<u8>> {
    let magic = match grid.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(invalid(format!(
                "cannot write a {c}-channel image (need 1 or 3)"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_image(grid: &LatentGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(grid)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decode(bytes: &[u8]) -> Result<LatentGrid> {
        decode_image(bytes, Path::new("mem"))
    }

    #[test]
    fn white_ppm() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let g = decode(&bytes).unwrap();
        assert_eq!(g.shape(), (2, 2, 3));
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gray_sample_maps_linearly() {
        let g = decode(b"P5 1 1 255\n\x80").unwrap();
        assert!((g.data()[0] - 128.0 / 255.0).abs() < 1e-15);
        assert!((g.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn comments_and_small_maxval() {
        let g = decode(b"P5\n# made by hand\n2 1\n# max\n15\n\x0f\x00").unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let err = |b: &[u8]| match decode(b) {
            Err(Error::ImageFormat { offset, message, .. }) => (offset, message),
            other => panic!("{other:?}"),
        };
        assert_eq!(err(b"P3 1 1 255\n0").0, 0);
        assert_eq!(err(b"P5 x 1 255\n0").0, 3);
        assert_eq!(err(b"P5 1 1 65535\n00").0, 7);
        let (offset, msg) = err(b"P6 2 2 255\n\x01\x02");
        assert_eq!(offset, 13);
        assert!(msg.contains("expected 12 bytes"), "{msg}");
        assert_eq!(err(b"P5 1 1 10\n\xff").0, 10);
    }

    #[test]
    fn write_quantization() {
        let g = LatentGrid::from_vec(1, 4, 1, vec![0.0, 1.0, 1.7, -0.2]).unwrap();
        let bytes = encode_image(&g).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 255, 0]);
        assert!(encode_image(&LatentGrid::zeros(1, 1, 2)).is_err());
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }

    #[test]
    fn file_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let g = LatentGrid::from_fn(3, 5, 1, |r, c, _| (r * 5 + c) as f64 / 14.0);
        write_image(&g, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert!(back.max_abs_diff(&g) <= 1.0 / 510.0);
        let msg = read_image(dir.path().join("missing.ppm")).unwrap_err().to_string();
        assert!(msg.contains("missing.ppm"));
    }

    proptest! {
        #[test]
        fn roundtrip_error_is_half_a_quantum(
            h in 1usize..6, w in 1usize..6, rgb in any::<bool>(),
            values in proptest::collection::vec(0.0f64..=1.0, 108),
        ) {
            let c = if rgb { 3 } else { 1 };
            let g = LatentGrid::from_vec(h, w, c, values[..h * w * c].to_vec()).unwrap();
            let back = decode(&encode_image(&g).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&g) <= 1.0 / 510.0 + 1e-12);
        }
    }
}
