//! Native raster files (`"BIOSTIMG"`, u32 C/H/W, f32 little-endian pixels)
//! and one-way 8-bit PNG export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, put_f32s, Reader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIOSTIMG";
pub const HEADER_LEN: usize = 8 + 3 * 4;

pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::format(
            "image",
            format!("expected [C,H,W], got {:?}", image.shape()),
        ));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + image.len() * 4);
    out.extend_from_slice(MAGIC);
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::format("image", "dimension above u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    put_f32s(&mut out, image.data());
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, "image");
    if &r.array::<8>()? != MAGIC {
        return Err(Error::format("image", "bad magic"));
    }
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("image", "dimensions overflow"))?;
    let data = r.f32s(n)?;
    if !r.is_at_end() {
        return Err(Error::format(
            "image",
            format!("trailing bytes after {c}x{h}x{w} pixels"),
        ));
    }
    Tensor::from_vec(&[c, h, w], data).map_err(|e| Error::format("image", e.to_string()))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    io::write_atomic(path, &encode_image(image)?)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&io::read(path)?).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(format!("image {}", path.display()), detail),
        e => e,
    })
}

/// Quantizes `[-1, 1]` pixels to 8 bits and writes an RGB (or grayscale) PNG.
pub fn export_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::format(
            "png export",
            format!("expected [C,H,W], got {:?}", image.shape()),
        ));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::format("png export", format!("{c} channels"))),
    };
    let src = image.data();
    let mut pixels = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            let v = src[ch * h * w + i].clamp(-1.0, 1.0);
            pixels.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err =
        |e: png::EncodingError| Error::format(format!("png {}", path.display()), e.to_string());
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&pixels).map_err(to_err)?;
    Ok(())
}
