//! Image I/O (8-bit PNG, binary PPM), conversion to and from the unit
//! domain, resizing and corpus scanning.
//!
//! Bytes map linearly to `[0, 1]`; no gamma conversion is applied.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// File extensions recognised as images (lower case).
pub const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

/// 8-bit interleaved RGB pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid_shape(&[height, width], "image extents must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Reads a PNG or P6 PPM file, detected from its leading bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { path: path.to_path_buf() },
        _ => Error::Io(e),
    })?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        Error::UnsupportedImage(msg) => Error::UnsupportedImage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"P3") {
        Err(Error::UnsupportedImage("ASCII PPM (P3) is not supported, use binary P6".into()))
    } else {
        Err(Error::UnsupportedImage("only PNG and binary PPM (P6) are supported".into()))
    }
}

/// Writes PNG or PPM depending on the extension of `path`.
pub fn save_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = extension(path).unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(image)?,
        "ppm" => encode_ppm(image),
        _ => {
            return Err(Error::UnsupportedImage(format!(
                "{}: cannot infer output format, use .png or .ppm",
                path.display()
            )))
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let decode_err = |e: png::DecodingError| Error::Decode(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let info = reader.info();
    if info.bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedImage("16-bit PNG is not supported, only 8-bit".into()));
    }
    if info.interlaced {
        return Err(Error::UnsupportedImage("interlaced PNG is not supported".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("PNG output size overflows".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!("PNG bit depth {:?}", frame.bit_depth)));
    }
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedImage("palette PNG was not expanded".into()));
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf[..frame.line_size * h].chunks_exact(frame.line_size) {
        for px in row[..w * channels].chunks_exact(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0]; 3]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
    }
    ImageBuffer::new(w, h, data)
}

pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&image.data)
            .map_err(|e| Error::InvalidArgument(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

pub fn encode_ppm(image: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode("malformed PPM header".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedImage(format!("PPM maxval {maxval}, only 255 is supported")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("malformed PPM header".into()));
    }
    pos += 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Decode("PPM dimensions overflow".into()))?;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Decode(format!("PPM pixel data truncated: need {need} bytes")))?;
    ImageBuffer::new(w, h, data.to_vec())
}

/// `3×H×W` tensor with values `byte / 255`.
pub fn to_unit(image: &ImageBuffer) -> Tensor {
    let plane = image.width * image.height;
    let mut data = vec![0.0; plane * 3];
    for (i, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = Scalar::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, image.height, image.width], data).expect("image shape")
}

/// Quantises a `3×H×W` unit tensor to bytes, rounding half up. Without
/// `clamp`, values outside `[0, 1]` are an error.
pub fn from_unit(t: &Tensor, clamp: bool) -> Result<ImageBuffer> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::invalid_shape(t.shape(), "expected 3 channels"));
    }
    let plane = h * w;
    let mut data = vec![0u8; plane * 3];
    for ch in 0..3 {
        for i in 0..plane {
            let mut v = t.data()[ch * plane + i];
            if clamp {
                v = v.clamp(0.0, 1.0);
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "value {v} outside [0, 1] at channel {ch}, pixel {i}"
                )));
            }
            data[i * 3 + ch] = (v * 255.0 + 0.5).floor() as u8;
        }
    }
    ImageBuffer::new(w, h, data)
}

/// Visualises a curve map by sending `[-1, 1]` linearly to `[0, 255]` per channel.
pub fn curve_map_image(a: &Tensor) -> Result<ImageBuffer> {
    from_unit(&a.map(|v| (v + 1.0) / 2.0), true)
}

/// Bilinear resize of a `C×H×W` tensor (half-pixel centres).
pub fn resize(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if t.shape()[1..] == [height, width] {
        return Ok(t.clone());
    }
    Eager.resize_bilinear(t, (height, width))
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

/// Files directly inside `dir` whose extension (case-insensitive) is in
/// `extensions`, sorted by path.
pub fn scan_corpus(dir: impl AsRef<Path>, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { path: dir.to_path_buf() },
        _ => Error::Io(e),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let matches = extension(&path).is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(&e)));
        if matches && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_fixture_decodes_exactly() {
        let mut bytes = b"P6\n# tiny\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        assert_eq!(img.pixel(1, 0), [0, 255, 0]);
        assert_eq!(img.pixel(0, 1), [0, 0, 255]);
        assert_eq!(img.pixel(1, 1), [10, 20, 30]);
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_bad_headers() {
        assert!(matches!(decode_image(b"P6\n2 2\n65535\n"), Err(Error::UnsupportedImage(_))));
        assert!(matches!(decode_image(b"P6\n2 2\n255\n\x00"), Err(Error::Decode(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::UnsupportedImage(_))));
    }

    fn gray_png(w: u32, h: u32, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(data).unwrap();
        out
    }

    #[test]
    fn grayscale_png_promotes_to_rgb() {
        let img = decode_image(&gray_png(2, 1, png::BitDepth::Eight, &[7, 200])).unwrap();
        assert_eq!(img.data(), &[7, 7, 7, 200, 200, 200]);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let err = decode_image(&gray_png(1, 1, png::BitDepth::Sixteen, &[1, 2])).unwrap_err();
        assert!(err.to_string().contains("16-bit"), "{err}");
    }

    #[test]
    fn png_round_trip() {
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let img = ImageBuffer::new(4, 3, data).unwrap();
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn unit_round_trip_all_bytes() {
        let data: Vec<u8> = (0..=255u8).flat_map(|b| [b, 255 - b, b]).collect();
        let img = ImageBuffer::new(256, 1, data).unwrap();
        let t = to_unit(&img);
        assert_eq!(t.get(&[0, 0, 255]), 1.0);
        assert_eq!(from_unit(&t, false).unwrap(), img);
    }

    #[test]
    fn rounding_and_clamping() {
        let t = Tensor::new(&[3, 1, 1], vec![0.5, 1.2, -0.1]).unwrap();
        assert!(from_unit(&t, false).is_err());
        assert_eq!(from_unit(&t, true).unwrap().pixel(0, 0), [128, 255, 0]);
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(load_image("/no/such/image.png"), Err(Error::NotFound { .. })));
    }

    #[test]
    fn curve_map_visualisation_endpoints() {
        let a = Tensor::new(&[3, 1, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(curve_map_image(&a).unwrap().pixel(0, 0), [0, 128, 255]);
    }
}
