//! Image type, portable pixmap/graymap ingestion and resampling.
//!
//! Binary P5 (graymap) and P6 (pixmap) files are read and written natively;
//! other formats can be plugged in through [`DecoderRegistry`].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// An image with pixel values in `[0, 1]`, stored `[h, w, c]` with one or
/// three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation("image must be non-empty"));
        }
        if c != 1 && c != 3 {
            return Err(Error::validation(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if !pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::validation("pixel values must lie in [0, 1]"));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Crop to the half-open box `[y0, y1) x [x0, x1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width() || y1 > self.height() {
            return Err(Error::validation(format!(
                "crop box [{x0},{y0},{x1},{y1}] is empty or exceeds {}x{}",
                self.width(),
                self.height()
            )));
        }
        let view = self
            .pixels
            .slice(ndarray::s![y0..y1, x0..x1, ..])
            .to_owned();
        Image::new(view)
    }

    /// Bilinear resize by a positive scale factor. Scale 1 is an exact
    /// no-op so that single-scale extraction is bitwise reproducible.
    pub fn resize(&self, scale: f64) -> Result<Image> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::validation(format!("scale must be positive, got {scale}")));
        }
        if scale == 1.0 {
            return Ok(self.clone());
        }
        let nh = ((self.height() as f64 * scale).round() as usize).max(1);
        let nw = ((self.width() as f64 * scale).round() as usize).max(1);
        self.resize_to(nh, nw)
    }

    /// Bilinear resize to explicit dimensions.
    pub fn resize_to(&self, nh: usize, nw: usize) -> Result<Image> {
        let (h, w, c) = self.pixels.dim();
        let mut out = Array3::zeros((nh, nw, c));
        for r in 0..nh {
            // align centers: map output pixel center to input coordinates
            let y = ((r as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = y - y0 as f64;
            for col in 0..nw {
                let x = ((col as f64 + 0.5) * w as f64 / nw as f64 - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = x - x0 as f64;
                for ch in 0..c {
                    let top = self.pixels[[y0, x0, ch]] * (1.0 - dx)
                        + self.pixels[[y0, x1, ch]] * dx;
                    let bottom = self.pixels[[y1, x0, ch]] * (1.0 - dx)
                        + self.pixels[[y1, x1, ch]] * dx;
                    out[[r, col, ch]] = (top * (1.0 - dy) + bottom * dy).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(out)
    }

    /// Collapse to a single channel by averaging, if needed.
    pub fn to_grayscale(&self) -> Image {
        if self.channels() == 1 {
            return self.clone();
        }
        let (h, w, _) = self.pixels.dim();
        let mut out = Array3::zeros((h, w, 1));
        for r in 0..h {
            for c in 0..w {
                out[[r, c, 0]] = (self.pixels[[r, c, 0]]
                    + self.pixels[[r, c, 1]]
                    + self.pixels[[r, c, 2]])
                    / 3.0;
            }
        }
        Image { pixels: out }
    }
}

/// Parse a binary P5/P6 file from bytes.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let magic = read_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::format(
                format!("unsupported magic {other:?}, expected P5 or P6"),
                0,
            ))
        }
    };
    let w: usize = parse_token(bytes, &mut pos, "width")?;
    let h: usize = parse_token(bytes, &mut pos, "height")?;
    let maxval: usize = parse_token(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}"), pos as u64));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let expected = w * h * channels;
    if bytes.len() < pos + expected {
        return Err(Error::format(
            format!("raster truncated: expected {expected} bytes"),
            bytes.len() as u64,
        ));
    }
    let raster = &bytes[pos..pos + expected];
    let mut pixels = Array3::zeros((h, w, channels));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..channels {
                let v = raster[(r * w + c) * channels + ch] as f64 / maxval as f64;
                pixels[[r, c, ch]] = v;
            }
        }
    }
    Image::new(pixels)
}

/// Encode as binary P5 (single channel) or P6 (three channels), maxval 255.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let (h, w, c) = image.pixels().dim();
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let v = (image.pixels()[[r, col, ch]] * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    out
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("unexpected end of header", start as u64));
    }
    String::from_utf8(bytes[start..*pos].to_vec())
        .map_err(|_| Error::format("header is not ascii", start as u64))
}

fn parse_token<T: std::str::FromStr>(bytes: &[u8], pos: &mut usize, what: &str) -> Result<T> {
    let at = *pos as u64;
    let tok = read_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::format(format!("invalid {what}: {tok:?}"), at))
}

/// Decoder callback for formats beyond P5/P6.
pub type DecodeFn = fn(&[u8]) -> Result<Image>;

/// Pluggable image decoding: pnm natively, other formats by registered
/// extension.
#[derive(Default)]
pub struct DecoderRegistry {
    custom: Vec<(String, DecodeFn)>,
}

impl DecoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a decoder for a lowercase file extension (without dot).
    pub fn register(&mut self, extension: &str, decode: DecodeFn) {
        self.custom.push((extension.to_ascii_lowercase(), decode));
    }

    pub fn load(&self, path: &Path) -> Result<Image> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
            return decode_pnm(&bytes);
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        for (candidate, decode) in &self.custom {
            if *candidate == ext {
                return decode(&bytes);
            }
        }
        Err(Error::validation(format!(
            "no decoder for {} (registered extensions: pnm built-in{})",
            path.display(),
            self.custom
                .iter()
                .map(|(e, _)| format!(", {e}"))
                .collect::<String>()
        )))
    }
}

/// Read an image file (P5/P6 only).
pub fn read_image(path: &Path) -> Result<Image> {
    DecoderRegistry::new().load(path)
}

/// Write an image as P5/P6 atomically (temp file + rename).
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_pnm(image);
    write_atomic(path, &bytes)
}

/// Write bytes through a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> Image {
        let pixels = Array3::from_shape_fn((h, w, 1), |(r, c, _)| ((r + c) % 2) as f64);
        Image::new(pixels).unwrap()
    }

    #[test]
    fn rejects_bad_channel_counts_and_out_of_range() {
        assert!(Image::new(Array3::zeros((4, 4, 2))).is_err());
        let mut px = Array3::zeros((4, 4, 1));
        px[[0, 0, 0]] = 1.5;
        assert!(Image::new(px).is_err());
    }

    #[test]
    fn pnm_roundtrip_is_exact_for_8bit_values() {
        let img = checker(5, 7);
        let bytes = encode_pnm(&img);
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(img, back);

        let rgb = Image::new(Array3::from_shape_fn((4, 3, 3), |(r, c, ch)| {
            ((r * 3 + c * 5 + ch * 7) % 256) as f64 / 255.0
        }))
        .unwrap();
        let back = decode_pnm(&encode_pnm(&rgb)).unwrap();
        assert_eq!(rgb, back);
    }

    #[test]
    fn pnm_reader_handles_comments() {
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.height(), 2);
        assert!((img.pixels()[[1, 1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pnm_reader_reports_truncation_offset() {
        let bytes = b"P5\n4 4\n255\nxx".to_vec();
        match decode_pnm(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pnm_reader_rejects_unknown_magic() {
        match decode_pnm(b"P3\n1 1\n255\n0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn crop_validates_bounds() {
        let img = checker(8, 8);
        assert!(img.crop(2, 2, 6, 6).is_ok());
        assert!(img.crop(2, 2, 2, 6).is_err());
        assert!(img.crop(0, 0, 9, 4).is_err());
        let crop = img.crop(1, 2, 5, 7).unwrap();
        assert_eq!((crop.height(), crop.width()), (5, 4));
        assert_eq!(crop.pixels()[[0, 0, 0]], img.pixels()[[2, 1, 0]]);
    }

    #[test]
    fn resize_scale_one_is_identity() {
        let img = checker(6, 9);
        let out = img.resize(1.0).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn resize_halves_and_doubles() {
        let img = checker(8, 8);
        let down = img.resize(0.5).unwrap();
        assert_eq!((down.height(), down.width()), (4, 4));
        let up = img.resize(2.0).unwrap();
        assert_eq!((up.height(), up.width()), (16, 16));
        // constant image stays constant under bilinear resampling
        let flat = Image::new(Array3::from_elem((8, 8, 1), 0.25)).unwrap();
        let scaled = flat.resize(1.5).unwrap();
        assert!(scaled.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn registry_dispatches_custom_decoder() {
        fn decode_flat(_: &[u8]) -> Result<Image> {
            Image::new(Array3::from_elem((4, 4, 1), 0.5))
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.flat");
        fs::write(&path, b"anything").unwrap();
        let mut reg = DecoderRegistry::new();
        assert!(reg.load(&path).is_err());
        reg.register("flat", decode_flat);
        let img = reg.load(&path).unwrap();
        assert_eq!(img.pixels()[[0, 0, 0]], 0.5);
    }

    #[test]
    fn write_image_roundtrips_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = checker(4, 4);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }
}
