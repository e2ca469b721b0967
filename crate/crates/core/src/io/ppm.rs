//! Binary PPM (P6, 8-bit) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<Image> {
    let fail = |message: String| Error::Decode {
        path: name.to_string(),
        message,
    };
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" {
        return Err(fail(format!("expected P6 magic, found `{}`", tokens[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| fail(format!("bad {what} `{s}`")));
    let (w, h, maxval) = (num(&tokens[1], "width")?, num(&tokens[2], "height")?, num(&tokens[3], "maxval")?);
    if maxval != 255 {
        return Err(fail(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(fail("zero image size".into()));
    }
    pos += 1;
    let need = w * h * 3;
    let data = bytes.get(pos..pos + need).ok_or_else(|| fail(format!("expected {need} pixel bytes, found {}", bytes.len().saturating_sub(pos))))?;
    Ok(Image {
        width: w,
        height: h,
        data: data.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode_ppm(&bytes, &path.display().to_string())
}
