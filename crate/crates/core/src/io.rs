//! Raster file formats: 8-bit PNG and PGM (P5) for intensities, PFM for float grids.
//!
//! PFM stores `f32`, so a grid survives `write -> read` exactly only when its
//! values are `f32`-representable; any grid read from a PFM file is. PNG and PGM
//! quantize to `round(v * 255) / 255`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageEncoder, ImageFormat};

use crate::error::{contract, Error, Result};
use crate::image::ImageGrid;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Reads any supported format, dispatching on the leading magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let bytes = fs::read(path)?;
    decode_image(&bytes)
}

/// Writes `img` in the format implied by the file extension (`png`, `pgm`, `pfm`).
pub fn write_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "pgm" => encode_pgm(img)?,
        "pfm" => encode_pfm(img)?,
        other => return Err(contract(format!("unsupported output extension `{other}`"))),
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(b"PF") || bytes.starts_with(b"Pf") {
        decode_pfm(bytes)
    } else {
        let shown: String = bytes
            .iter()
            .take(4)
            .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
            .collect();
        Err(format_err(0, format!("unknown magic bytes `{shown}`")))
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &ImageGrid) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        c => {
            return Err(contract(format!(
                "PNG output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, img.width() as u32, img.height() as u32, color.into())
        .map_err(|e| contract(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let dynimg = image::load(Cursor::new(bytes), ImageFormat::Png)
        .map_err(|e| format_err(0, format!("PNG decoding failed: {e}")))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (channels, raw) = match dynimg {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
            (1, dynimg.to_luma8().into_raw())
        }
        other => (3, other.to_rgb8().into_raw()),
    };
    ImageGrid::from_vec(
        h,
        w,
        channels,
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

pub fn encode_pgm(img: &ImageGrid) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(contract("PGM output needs a single channel"));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Minimal cursor over a Netpbm-style ASCII header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| format_err(start, format!("non-ASCII {what}")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let start = self.pos;
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| format_err(start, format!("invalid {what} `{tok}`")))
    }

    /// Consumes the single whitespace byte separating header from payload.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(format_err(self.pos, "header not terminated by whitespace")),
        }
    }
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated payload: expected {len} bytes from offset {start}, file ends after {}",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    Ok(&bytes[start..start + len])
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut hdr = Header { bytes, pos: 0 };
    let magic = hdr.token("magic")?;
    if magic != "P5" {
        return Err(format_err(0, format!("expected P5, found `{magic}`")));
    }
    let w: usize = hdr.number("width")?;
    let h: usize = hdr.number("height")?;
    let maxval_at = hdr.pos;
    let maxval: u32 = hdr.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(
            maxval_at,
            format!("only 8-bit PGM is supported, maxval {maxval}"),
        ));
    }
    let start = hdr.end_of_header()?;
    let data = payload(bytes, start, w * h)?;
    ImageGrid::from_vec(
        h,
        w,
        1,
        data.iter().map(|&b| b as f64 / maxval as f64).collect(),
    )
}

/// Little-endian PFM with scale `-1.0`, rows stored bottom to top.
pub fn encode_pfm(img: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(contract(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row_len = img.width() * img.channels();
    for i in (0..img.height()).rev() {
        let start = i * row_len;
        for &v in &img.data()[start..start + row_len] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut hdr = Header { bytes, pos: 0 };
    let channels = match hdr.token("magic")? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format_err(0, format!("expected Pf or PF, found `{other}`"))),
    };
    let w: usize = hdr.number("width")?;
    let h: usize = hdr.number("height")?;
    let scale_at = hdr.pos;
    let scale: f64 = hdr.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(scale_at, "PFM scale must be finite and nonzero"));
    }
    let little = scale < 0.0;
    let start = hdr.end_of_header()?;
    let row_len = w * channels;
    let data = payload(bytes, start, 4 * row_len * h)?;
    let mut values = vec![0.0; row_len * h];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // File rows run bottom to top.
        let file_row = k / row_len;
        let dst = (h - 1 - file_row) * row_len + k % row_len;
        values[dst] = v as f64;
    }
    ImageGrid::from_vec(h, w, channels, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pfm_round_trip_is_bitwise() {
        let img = ImageGrid::from_fn(8, 8, 1, |i, j, _| {
            ((i * 31 + j * 17) as f32 * 0.37).sin() as f64
        });
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_header_layout() {
        let img = ImageGrid::from_vec(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n1 2\n-1.0\n"));
        // Bottom row first.
        assert_eq!(&bytes[12..16], &2.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_big_endian_is_read() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [0.25f32, 0.5, 4.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.25, 0.5, 4.0]);
    }

    #[test]
    fn truncated_pfm_reports_offset() {
        let img = ImageGrid::filled(3, 3, 1, 0.5);
        let mut bytes = encode_pfm(&img).unwrap();
        bytes.truncate(bytes.len() - 3);
        match decode_image(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let err = decode_image(b"P7\n3 3\n255\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = ImageGrid::from_fn(3, 4, 1, |i, j, _| ((i * 4 + j) * 20) as f64 / 255.0);
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        assert_eq!(back, img);

        let commented = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(decode_image(commented).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn png_rejects_two_channels() {
        assert!(encode_png(&ImageGrid::new(2, 2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn pfm_random_round_trip(h in 1usize..12, w in 1usize..12, color in any::<bool>(), seed in any::<u64>()) {
            let ch = if color { 3 } else { 1 };
            let mut s = seed;
            let img = ImageGrid::from_fn(h, w, ch, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32 * 80.0 - 5.0) as f64
            });
            let back = decode_image(&encode_pfm(&img).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn png_quantized_round_trip(h in 1usize..10, w in 1usize..10, color in any::<bool>(), seed in any::<u64>()) {
            let ch = if color { 3 } else { 1 };
            let mut s = seed;
            let img = ImageGrid::from_fn(h, w, ch, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 56) as u8) as f64 / 255.0
            });
            let back = decode_image(&encode_png(&img).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
