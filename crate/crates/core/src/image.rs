//! Binary PGM/PPM images, luma conversion, cropping, area resizing and PSNR.

use std::path::Path;

use crate::error::{check_len, Error, Result};

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Image with samples in `[0, 1]`, stored channel-planar (all of channel 0, then channel 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("{channels} channels; expected 1 or 3")));
        }
        check_len("image pixel count", height * width * channels, pixels.len())?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite samples"));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn gray(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, pixels)
    }

    pub fn from_channels(height: usize, width: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        let channels = planes.len();
        Self::new(height, width, channels, planes.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Every sample clamped to `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// `0.299 R + 0.587 G + 0.114 B`; grayscale images are returned unchanged.
    pub fn to_luma(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.plane_len();
        let pixels = (0..n)
            .map(|i| {
                (0..3)
                    .map(|c| LUMA_WEIGHTS[c] * self.pixels[c * n + i])
                    .sum()
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            pixels,
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for r in top..top + height {
                pixels.extend_from_slice(&plane[r * self.width + left..r * self.width + left + width]);
            }
        }
        Self::new(height, width, self.channels, pixels)
    }

    /// Centered crop of the given size.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        let top = self.height.saturating_sub(height) / 2;
        let left = self.width.saturating_sub(width) / 2;
        self.crop(top, left, height, width)
    }

    /// Area-average resampling: each output pixel is the mean of the source area it covers,
    /// with fractional coverage at the boundaries.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        let rows = area_weights(self.height, height);
        let cols = area_weights(self.width, width);
        let mut pixels = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            let plane = self.channel(c);
            let mut horizontal = vec![0.0; self.height * width];
            for r in 0..self.height {
                for (j, taps) in cols.iter().enumerate() {
                    horizontal[r * width + j] =
                        taps.iter().map(|&(s, wt)| wt * plane[r * self.width + s]).sum();
                }
            }
            for taps in &rows {
                for j in 0..width {
                    pixels.push(taps.iter().map(|&(s, wt)| wt * horizontal[s * width + j]).sum());
                }
            }
        }
        Self::new(height, width, self.channels, pixels)
    }
}

/// For each destination index, the source indices and normalized coverage weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

fn header_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::HeaderParse {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses binary P5 (gray) or P6 (RGB) bytes with maxval ≤ 255. `path` is used in errors only.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) if m[0] == b'P' => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("PNM variant {} (only binary P5/P6)", String::from_utf8_lossy(m)),
            })
        }
        _ => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: "not a binary PGM/PPM file".into(),
            })
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (idx, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(header_error(path, format!("missing {name}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields[idx] = text
            .parse()
            .map_err(|_| header_error(path, format!("invalid {name}")))?;
    }
    let [width, height, maxval] = fields;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(header_error(path, "missing whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(header_error(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("maxval {maxval} (only 8-bit samples)"),
        });
    }
    let n = height * width;
    let expected = n * channels;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: data.len(),
        });
    }
    let scale = maxval as f64;
    let mut pixels = vec![0.0; expected];
    for i in 0..n {
        for c in 0..channels {
            pixels[c * n + i] = (data[i * channels + c] as f64 / scale).min(1.0);
        }
    }
    ImageBuffer::new(height, width, channels, pixels)
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, path)
}

/// Encodes as P5 or P6; samples are clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_pnm(image: &ImageBuffer) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    let n = image.plane_len();
    out.reserve(n * image.channels);
    for i in 0..n {
        for c in 0..image.channels {
            let v = image.pixels[c * n + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn save_image(path: &Path, image: &ImageBuffer) -> Result<()> {
    std::fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}

/// `10·log10(1 / MSE)` over all samples; identical inputs give `+∞`.
pub fn psnr(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64> {
    if (reference.height, reference.width, reference.channels) != (test.height, test.width, test.channels) {
        return Err(Error::invalid(format!(
            "PSNR shape mismatch: {}x{}x{} vs {}x{}x{}",
            reference.height, reference.width, reference.channels, test.height, test.width, test.channels
        )));
    }
    psnr_slices(&reference.pixels, &test.pixels)
}

pub fn psnr_slices(reference: &[f64], test: &[f64]) -> Result<f64> {
    check_len("PSNR sample count", reference.len(), test.len())?;
    if reference.is_empty() {
        return Err(Error::invalid("PSNR of empty images"));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// `"inf"` for exact reconstructions, otherwise four decimals.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() && db > 0.0 {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}
