//! Image I/O, color conversion and Gaussian scale space.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, ImageReader, Luma, Rgb};

/// Smallest side accepted by the saliency pipeline.
pub const MIN_PIPELINE_SIDE: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("cannot encode {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("invalid dimensions {width}x{height}: {reason}")]
    Dimensions {
        width: usize,
        height: usize,
        reason: &'static str,
    },
    #[error("blur radius must be positive, got {0}")]
    Sigma(f64),
    #[error("scale space needs at least 2 levels, got {0}")]
    Levels(usize),
}

/// RGB raster with channels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl Image {
    /// Builds an image, clamping every channel into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut pixels: Vec<[f64; 3]>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImagingError::Dimensions {
                width,
                height,
                reason: "pixel buffer does not match dimensions",
            });
        }
        for p in &mut pixels {
            for c in p.iter_mut() {
                *c = clamp_unit(*c);
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::new(width, height, vec![rgb; width * height]).expect("non-empty image")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("non-empty image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Checks the minimum size the segmentation and feature stages need.
    pub fn check_pipeline_size(&self) -> Result<(), ImagingError> {
        if self.width < MIN_PIPELINE_SIDE || self.height < MIN_PIPELINE_SIDE {
            return Err(ImagingError::Dimensions {
                width: self.width,
                height: self.height,
                reason: "both sides must be at least 16 pixels",
            });
        }
        Ok(())
    }

    /// Downscales so that `max(width, height) <= cap`, keeping the aspect ratio.
    pub fn resize_to_cap(&self, cap: usize) -> Image {
        let Some((w, h)) = capped_dims(self.width, self.height, cap) else {
            return self.clone();
        };
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let p = self.pixel(x as usize, y as usize);
                Rgb([p[0] as f32, p[1] as f32, p[2] as f32])
            });
        let out = image::imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
        let pixels = out
            .pixels()
            .map(|p| [p.0[0] as f64, p.0[1] as f64, p.0[2] as f64])
            .collect();
        Image::new(w, h, pixels).expect("resized dims are non-zero")
    }

    fn map_planes(&self, mut f: impl FnMut(&[f64], usize) -> Vec<f64>) -> Image {
        let mut planes = Vec::with_capacity(3);
        for c in 0..3 {
            let plane: Vec<f64> = self.pixels.iter().map(|p| p[c]).collect();
            planes.push(f(&plane, c));
        }
        let pixels = (0..self.pixels.len())
            .map(|i| [planes[0][i], planes[1][i], planes[2][i]])
            .collect();
        Image::new(self.width, self.height, pixels).expect("same dims")
    }
}

/// Target size after applying the resize cap, or `None` when already small enough.
pub fn capped_dims(width: usize, height: usize, cap: usize) -> Option<(usize, usize)> {
    let longest = width.max(height);
    if cap == 0 || longest <= cap {
        return None;
    }
    let scale = cap as f64 / longest as f64;
    let w = ((width as f64 * scale).round() as usize).clamp(1, cap);
    let h = ((height as f64 * scale).round() as usize).clamp(1, cap);
    Some((w, h))
}

/// Single-channel map with values in `[0, 1]`: per-scale saliency maps,
/// fused maps and ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, mut values: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(ImagingError::Dimensions {
                width,
                height,
                reason: "value buffer does not match dimensions",
            });
        }
        for v in &mut values {
            *v = clamp_unit(*v);
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("non-empty map")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values).expect("non-empty map")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_dims(&self, other: &GrayMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn resize_to_cap(&self, cap: usize) -> GrayMap {
        match capped_dims(self.width, self.height, cap) {
            Some((w, h)) => self.resize(w, h),
            None => self.clone(),
        }
    }

    pub fn resize(&self, width: usize, height: usize) -> GrayMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([self.get(x as usize, y as usize) as f32])
            });
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        GrayMap::new(width, height, out.pixels().map(|p| p.0[0] as f64).collect()).expect("resized dims are non-zero")
    }

    /// Writes an 8-bit grayscale PNG with value `round(255 v)`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e, true))
    }

    /// Reads a raster as luma in `[0, 1]` (color inputs are converted).
    pub fn load(path: impl AsRef<Path>) -> Result<GrayMap, ImagingError> {
        let path = path.as_ref();
        let img = decode(path)?.to_luma8();
        let (w, h) = img.dimensions();
        GrayMap::new(
            w as usize,
            h as usize,
            img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        )
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn image_error(path: &Path, e: image::ImageError, encoding: bool) -> ImagingError {
    match e {
        image::ImageError::IoError(source) => ImagingError::Io {
            path: path.to_path_buf(),
            source,
        },
        other if encoding => ImagingError::Encode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
        other => ImagingError::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage, ImagingError> {
    let reader = ImageReader::open(path).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = reader.with_guessed_format().map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    reader.decode().map_err(|e| image_error(path, e, false))
}

/// Decodes a PNG or JPEG into an RGB [`Image`]; grayscale is replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
        .collect();
    Image::new(w as usize, h as usize, pixels)
}

/// Writes an [`Image`] as 8-bit RGB PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(img.len() * 3);
    for p in img.pixels() {
        for c in p {
            bytes.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e, true))
}

// ---------------------------------------------------------------------------
// Gaussian filtering

/// Sampled Gaussian of radius `ceil(3 sigma)`, renormalized to sum 1.
/// Index `radius` is the center tap.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution of a row-major plane with edge replication.
/// Kernels must have odd length; the center tap sits at `len / 2`.
pub fn convolve_separable(plane: &[f64], width: usize, height: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    debug_assert_eq!(plane.len(), width * height);
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let (w, h) = (width as isize, height as isize);
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kx.iter().enumerate() {
                let xi = (x + t as isize - rx).clamp(0, w - 1) as usize;
                acc += kv * row[xi];
            }
            tmp[y * width + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in ky.iter().enumerate() {
                let yi = (y + t as isize - ry).clamp(0, h - 1) as usize;
                acc += kv * tmp[yi * width + x];
            }
            out[y as usize * width + x] = acc;
        }
    }
    out
}

/// Blurs every channel with the truncated Gaussian of parameter `sigma`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image, ImagingError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ImagingError::Sigma(sigma));
    }
    let k = gaussian_kernel(sigma);
    Ok(img.map_planes(|plane, _| convolve_separable(plane, img.width, img.height, &k, &k)))
}

/// The `M` progressively blurred renditions of one image, all at full resolution.
#[derive(Debug, Clone)]
pub struct ScaleSpace {
    levels: Vec<Image>,
    sigma: f64,
}

impl ScaleSpace {
    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &Image {
        &self.levels[k]
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Level 0 is `img`; level `k` is level `k - 1` blurred once more by `sigma`.
pub fn build_scale_space(img: &Image, sigma: f64, depth: usize) -> Result<ScaleSpace, ImagingError> {
    if depth < 2 {
        return Err(ImagingError::Levels(depth));
    }
    let mut levels = Vec::with_capacity(depth);
    levels.push(img.clone());
    for k in 1..depth {
        let next = gaussian_blur(&levels[k - 1], sigma)?;
        levels.push(next);
    }
    Ok(ScaleSpace { levels, sigma })
}

// ---------------------------------------------------------------------------
// Color spaces

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Lab,
    Hsv,
    Gray,
}

/// Output of [`convert_color`].
#[derive(Debug, Clone, PartialEq)]
pub enum ColorPlanes {
    Triplets(Vec<[f64; 3]>),
    Scalars(Vec<f64>),
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB to CIELAB under D65. The white point is the XYZ image of RGB white,
/// so white maps to exactly `(100, 0, 0)`.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    let mut white = [0.0; 3];
    for r in 0..3 {
        for c in 0..3 {
            xyz[r] += RGB_TO_XYZ[r][c] * lin[c];
            white[r] += RGB_TO_XYZ[r][c];
        }
    }
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Affine map of CIELAB into `[0, 1]` per channel: `L/100`, `(a+128)/255`, `(b+128)/255`.
pub fn lab_to_unit(lab: [f64; 3]) -> [f64; 3] {
    [
        (lab[0] / 100.0).clamp(0.0, 1.0),
        ((lab[1] + 128.0) / 255.0).clamp(0.0, 1.0),
        ((lab[2] + 128.0) / 255.0).clamp(0.0, 1.0),
    ]
}

/// RGB to HSV with hue expressed as a fraction of a turn in `[0, 1)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    [hue.rem_euclid(1.0), sat, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let hp = h.rem_euclid(1.0) * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Per-pixel conversion. Lab output is rescaled to `[0, 1]` for histogramming.
pub fn convert_color(img: &Image, space: ColorSpace) -> ColorPlanes {
    match space {
        ColorSpace::Lab => ColorPlanes::Triplets(img.pixels.iter().map(|&p| lab_to_unit(rgb_to_lab(p))).collect()),
        ColorSpace::Hsv => ColorPlanes::Triplets(img.pixels.iter().map(|&p| rgb_to_hsv(p)).collect()),
        ColorSpace::Gray => ColorPlanes::Scalars(img.pixels.iter().map(|&p| luma(p)).collect()),
    }
}
