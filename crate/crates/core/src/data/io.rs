//! Image and depth-map file formats.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads an 8- or 16-bit PNG as a `[1, 3, h, w]` tensor in `[0, 1]`.
/// Grayscale images are replicated across channels.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<f32> = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let buf = img.to_rgb16();
            planar(buf.as_raw(), h, w, |v| v as f32 / 65535.0)
        }
        _ => {
            let buf = img.to_rgb8();
            planar(buf.as_raw(), h, w, |v| v as f32 / 255.0)
        }
    };
    Tensor::new(vec![1, 3, h, w], planes)
}

fn planar<P: Copy>(raw: &[P], h: usize, w: usize, f: impl Fn(P) -> f32) -> Vec<f32> {
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f(px[c]);
        }
    }
    out
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first item of an `[n, 3, h, w]` tensor as an 8-bit RGB PNG,
/// clamping to `[0, 1]`.
pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = image.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_rgb",
            lhs: image.shape().to_vec(),
            rhs: vec![1, 3, h, w],
        });
    }
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            raw.push(to_u8(d[ch * h * w + i]));
        }
    }
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes 8-bit grayscale values as a PNG.
pub fn write_gray8(path: &Path, height: usize, width: usize, values: Vec<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, values)
        .ok_or_else(|| Error::Data("grayscale buffer does not match its size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Maps a depth map linearly onto 0..=255 between `lo` and `hi` (near is
/// bright).
pub fn depth_to_gray8(depth: &[f32], lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(f64::EPSILON);
    depth
        .iter()
        .map(|&d| ((1.0 - (d as f64 - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Reads a 16-bit grayscale PNG depth map, multiplying raw values by
/// `scale` to get meters.
pub fn read_depth_png16(path: &Path, scale: f64) -> Result<Tensor<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let buf = img.to_luma16();
    let data = buf
        .as_raw()
        .iter()
        .map(|&v| (v as f64 * scale) as f32)
        .collect();
    Tensor::new(vec![1, 1, h, w], data)
}

/// Writes a depth map as a 16-bit PNG holding `depth / scale`.
pub fn write_depth_png16(path: &Path, depth: &Tensor<f32>, scale: f64) -> Result<()> {
    let [_, _, h, w] = depth.dims4()?;
    let raw: Vec<u16> = depth.data()[..h * w]
        .iter()
        .map(|&d| (d as f64 / scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Encodes a single-channel map as little-endian PFM (`Pf`, scale -1).
/// Rows are stored bottom to top.
pub fn encode_pfm(height: usize, width: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(4 * values.len());
    for row in values.chunks(width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a single-channel PFM of either endianness.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PFM header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::format(path, "PFM header is not ASCII"))?,
        );
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    match fields[0] {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "colour PFM is not a depth map")),
        other => return Err(Error::format(path, format!("bad PFM magic `{other}`"))),
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad PFM dimension `{s}`")))
    };
    let (width, height) = (parse(fields[1])?, parse(fields[2])?);
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| Error::format(path, format!("bad PFM scale `{}`", fields[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let n = width * height;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == 4 * n)
        .ok_or_else(|| Error::format(path, format!("expected {} raster bytes", 4 * n)))?;
    let mut values = vec![0.0f32; n];
    for (r, row) in raster.chunks_exact(4 * width.max(1)).enumerate() {
        let y = height - 1 - r;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let b: [u8; 4] = b.try_into().expect("4 bytes");
            values[y * width + x] = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok((height, width, values))
}

/// Writes the first item of an `[n, 1, h, w]` depth tensor as PFM.
pub fn write_pfm(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = depth.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch {
            op: "write_pfm",
            lhs: depth.shape().to_vec(),
            rhs: vec![1, 1, h, w],
        });
    }
    fs::write(path, encode_pfm(h, w, &depth.data()[..h * w])).map_err(|e| Error::io(path, e))
}

/// Reads a PFM depth map as a `[1, 1, h, w]` tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, values) = decode_pfm(&bytes, path)?;
    Tensor::new(vec![1, 1, h, w], values)
}

/// Reads a depth map by extension: `.pfm` directly, `.png` as 16-bit with
/// `png_scale` meters per unit.
pub fn read_depth(path: &Path, png_scale: f64) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_pfm(path),
        Some(e) if e.eq_ignore_ascii_case("png") => read_depth_png16(path, png_scale),
        _ => Err(Error::format(path, "depth maps must be .pfm or .png")),
    }
}
