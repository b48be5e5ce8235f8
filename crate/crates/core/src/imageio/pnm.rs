//! Binary PGM/PPM (P5/P6) codec, plus PNG through the `image` crate.

use std::fs;
use std::path::Path;

use super::{Image, ImageError, Result};

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Load a P5/P6 (8 or 16 bit) or PNG image, scaling intensities to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(&bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        Err(ImageError::Unsupported(path.display().to_string()))
    }
}

/// Save as 8-bit PNG when the extension is `.png`, otherwise as 8-bit P5/P6.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_png(path) {
        encode_png(img)?
    } else {
        encode_pnm(img, 255)
    };
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(ImageError::Unsupported("not P5/P6".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Malformed("truncated PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Malformed("bad PNM header number".into()))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Malformed("missing raster separator".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::BadDims {
            height,
            width,
            channels,
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Malformed(format!("maxval {maxval}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * h.channels;
    let raster = &bytes[h.offset..];
    let scale = h.maxval as f64;
    let data: Vec<f64> = if h.maxval < 256 {
        if raster.len() < n {
            return Err(ImageError::Malformed("truncated raster".into()));
        }
        raster[..n].iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(ImageError::Malformed("truncated raster".into()));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / scale)
            .collect()
    };
    Image::new(h.height, h.width, h.channels, data)
}

fn quantize(x: f64, maxval: f64) -> f64 {
    (x * maxval).round().clamp(0.0, maxval)
}

/// Encode as P5 (gray) or P6 (RGB) with the given maxval (255 or 65535).
pub fn encode_pnm(img: &Image, maxval: u16) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    let m = f64::from(maxval);
    for &x in img.data() {
        let q = quantize(x, m);
        if maxval < 256 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    out
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Malformed(e.to_string()))?;
    let gray = matches!(
        dynimg.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let buf = dynimg.to_luma16();
        let (w, h) = buf.dimensions();
        let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
        Image::new(h as usize, w as usize, 1, data)
    } else {
        let buf = dynimg.to_rgb16();
        let (w, h) = buf.dimensions();
        let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data().iter().map(|&x| quantize(x, 255.0) as u8).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = if img.channels() == 1 {
        image::GrayImage::from_raw(w, h, raw).map(image::DynamicImage::ImageLuma8)
    } else {
        image::RgbImage::from_raw(w, h, raw).map(image::DynamicImage::ImageRgb8)
    }
    .ok_or_else(|| ImageError::Malformed("raster size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ImageError::Malformed(e.to_string()))?;
    Ok(out.into_inner())
}
