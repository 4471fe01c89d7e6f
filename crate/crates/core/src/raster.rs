//! Dense row-major images, binary masks and their file formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Mask = Image<bool>;
pub type RgbImage = Image<[f64; 3]>;
pub type ScalarImage = Image<f64>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Argument(format!(
                "image buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Image<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            row1: height,
            col1: width,
        }
    }

    pub fn rows(&self) -> usize {
        self.row1.saturating_sub(self.row0)
    }

    pub fn cols(&self) -> usize {
        self.col1.saturating_sub(self.col0)
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Grow by `margin` pixels on every side, clipped to the image.
    pub fn expanded(&self, margin: usize, width: usize, height: usize) -> Self {
        Self {
            row0: self.row0.saturating_sub(margin),
            col0: self.col0.saturating_sub(margin),
            row1: (self.row1 + margin).min(height),
            col1: (self.col1 + margin).min(width),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &Mask) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            return 1.0;
        }
        self.intersection_count(other) as f64 / union as f64
    }

    /// True when every set pixel of `other` is also set here.
    pub fn contains(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a || !b)
    }

    /// Dilation with a disk of the given pixel radius.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = Mask::filled(self.width, self.height, false);
        for row in 0..h {
            for col in 0..w {
                if !*self.get(row as usize, col as usize) {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (y, x) = (row + dy, col + dx);
                    if y >= 0 && y < h && x >= 0 && x < w {
                        out.set(y as usize, x as usize, true);
                    }
                }
            }
        }
        out
    }

    /// Set pixels with at least one 4-neighbour outside the mask or off the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if !*self.get(row, col) {
                    continue;
                }
                let edge = row == 0
                    || col == 0
                    || row + 1 == self.height
                    || col + 1 == self.width
                    || !*self.get(row - 1, col)
                    || !*self.get(row + 1, col)
                    || !*self.get(row, col - 1)
                    || !*self.get(row, col + 1);
                if edge {
                    out.push((row, col));
                }
            }
        }
        out
    }

    pub fn bounding_rect(&self) -> Option<Rect> {
        let mut rect: Option<Rect> = None;
        for row in 0..self.height {
            for col in 0..self.width {
                if !*self.get(row, col) {
                    continue;
                }
                let r = rect.get_or_insert(Rect {
                    row0: row,
                    col0: col,
                    row1: row + 1,
                    col1: col + 1,
                });
                r.row0 = r.row0.min(row);
                r.col0 = r.col0.min(col);
                r.row1 = r.row1.max(row + 1);
                r.col1 = r.col1.max(col + 1);
            }
        }
        rect
    }

    pub fn threshold(image: &ScalarImage, level: f64) -> Mask {
        image.map(|&v| v > level)
    }
}

pub fn psnr(a: &RgbImage, b: &RgbImage, include: Option<&Mask>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data().iter().zip(b.data()).enumerate() {
        if let Some(m) = include {
            if !m.data()[i] {
                continue;
            }
        }
        for c in 0..3 {
            let d = pa[c] - pb[c];
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return f64::INFINITY;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_rgb(image: &RgbImage) -> RgbImage {
    image.map(|p| p.map(|v| to_u8(v) as f64 / 255.0))
}

pub fn save_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let c = image.data[i];
        *px = image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    write_png(image::DynamicImage::ImageRgb8(buf), path)
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = read_png(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|v| v as f64 / 255.0))
        .collect();
    Image::from_vec(w as usize, h as usize, data)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = image::Luma([if mask.data[i] { 255 } else { 0 }]);
    }
    write_png(image::DynamicImage::ImageLuma8(buf), path)
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = read_png(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] > 127).collect();
    Image::from_vec(w as usize, h as usize, data)
}

pub fn encode_png_rgb(image: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let c = image.data[i];
        *px = image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    encode_png(image::DynamicImage::ImageRgb8(buf))
}

pub fn encode_png_mask(mask: &Mask) -> Result<Vec<u8>> {
    let mut buf = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = image::Luma([if mask.data[i] { 255 } else { 0 }]);
    }
    encode_png(image::DynamicImage::ImageLuma8(buf))
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|v| v as f64 / 255.0))
        .collect();
    Image::from_vec(w as usize, h as usize, data)
}

pub fn decode_png_mask(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] > 127).collect();
    Image::from_vec(w as usize, h as usize, data)
}

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(out.into_inner())
}

fn write_png(img: image::DynamicImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png {}: {e}", path.display())))
}

/// Little-endian single-channel PFM; rows are stored bottom to top.
pub fn encode_pfm(image: &ScalarImage) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    for row in (0..image.height).rev() {
        for col in 0..image.width {
            out.extend_from_slice(&(*image.get(row, col) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ScalarImage> {
    let mut reader = BufReader::new(bytes);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Format(format!("pfm header: {e}")))?;
        header.push(line.trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(Error::Format(format!("pfm: unsupported magic {:?}", header[0])));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("pfm dims: {e}")))?;
    if dims.len() != 2 {
        return Err(Error::Format("pfm: expected width and height".into()));
    }
    let scale: f64 = header[2]
        .parse()
        .map_err(|e| Error::Format(format!("pfm scale: {e}")))?;
    let little = scale < 0.0;
    let (w, h) = (dims[0], dims[1]);
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::Format(format!("pfm body: {e}")))?;
    if raw.len() < w * h * 4 {
        return Err(Error::Format("pfm: truncated body".into()));
    }
    let mut img = ScalarImage::filled(w, h, 0.0);
    for (i, chunk) in raw.chunks_exact(4).take(w * h).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row_from_bottom, col) = (i / w, i % w);
        img.set(h - 1 - row_from_bottom, col, v as f64);
    }
    Ok(img)
}

pub fn save_pfm(image: &ScalarImage, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pfm(image))
        .map_err(|e| Error::io(path, e))
}

pub fn load_pfm(path: &Path) -> Result<ScalarImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Mask::filled(9, 9, false);
        m.set(4, 4, true);
        let d = m.dilate(2);
        assert!(*d.get(4, 6) && *d.get(2, 4));
        assert!(!*d.get(2, 2), "disk element excludes the corner");
        assert_eq!(m.dilate(0), m);
    }

    #[test]
    fn iou_of_disjoint_and_identical() {
        let mut a = Mask::filled(4, 4, false);
        let mut b = a.clone();
        a.set(0, 0, true);
        b.set(3, 3, true);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn pfm_round_trip() {
        let img = Image::from_vec(3, 2, vec![0.5, 1.0, 2.0, -1.0, 3.25, 8.0]).unwrap();
        let back = decode_pfm(&encode_pfm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_mask_round_trip() {
        let mut m = Mask::filled(5, 3, false);
        m.set(1, 2, true);
        m.set(2, 4, true);
        let back = decode_png_mask(&encode_png_mask(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn boundary_marks_edges() {
        let m = Mask::filled(3, 3, true);
        let b = m.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
    }
}
