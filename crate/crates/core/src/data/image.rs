use std::path::Path;

use crate::boxes::{BBox, LetterboxTransform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray used for letterbox padding.
pub const PAD_VALUE: u8 = 114;

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} samples, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        ImageBuffer { width, height, data: rgb.repeat(width * height) }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fills `[x0, x1) × [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        for y in y0.min(self.height)..y1.min(self.height) {
            for x in x0.min(self.width)..x1.min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    /// One-pixel outline of a pixel-space box, clipped to the image.
    pub fn draw_box(&mut self, b: &BBox, rgb: [u8; 3]) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let cx = |v: f64| (v.floor().max(0.0) as usize).min(self.width - 1);
        let cy = |v: f64| (v.floor().max(0.0) as usize).min(self.height - 1);
        let (x0, y0, x1, y1) = (cx(b.x1), cy(b.y1), cx(b.x2), cy(b.y2));
        for x in x0..=x1 {
            self.set_pixel(x, y0, rgb);
            self.set_pixel(x, y1, rgb);
        }
        for y in y0..=y1 {
            self.set_pixel(x0, y, rgb);
            self.set_pixel(x1, y, rgb);
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode_ppm()).map_err(Error::at_path(path.as_ref()))?;
        Ok(())
    }

    /// Binary P6 with maxval 255; `#` comments allowed in the header.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::Format("not a binary PPM (P6)".into()));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(Error::Truncated("PPM header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("bad PPM header field".into()));
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("PPM header number out of range".into()))?;
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => return Err(Error::Format("PPM header must end in whitespace".into())),
            None => return Err(Error::Truncated("PPM header".into())),
        }
        let [w, h, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval}, only 255 supported")));
        }
        let n = 3 * w * h;
        if bytes.len() - pos < n {
            return Err(Error::Truncated(format!("PPM payload has {} of {n} bytes", bytes.len() - pos)));
        }
        ImageBuffer::new(w, h, bytes[pos..pos + n].to_vec())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_ppm(&std::fs::read(path.as_ref()).map_err(Error::at_path(path.as_ref()))?)
    }
}

/// Letterboxes `img` into a `size`×`size` tensor in [0, 1] with
/// nearest-neighbor resampling.
pub fn to_input_tensor(img: &ImageBuffer, size: usize) -> Result<(Tensor<f32>, LetterboxTransform)> {
    let lb = LetterboxTransform::new(img.width, img.height, size)?;
    let (iw, ih) = lb.inner_size();
    let (px, py) = (lb.pad_x as usize, lb.pad_y as usize);
    let pad = PAD_VALUE as f32 / 255.0;
    let mut t = Tensor::full((1, 3, size, size), pad);
    let plane = size * size;
    let data = t.data_mut();
    for oy in 0..ih {
        let sy = (((oy as f64 + 0.5) * img.height as f64 / ih as f64) as usize).min(img.height - 1);
        for ox in 0..iw {
            let sx = (((ox as f64 + 0.5) * img.width as f64 / iw as f64) as usize).min(img.width - 1);
            let p = img.pixel(sx, sy);
            let o = (oy + py) * size + ox + px;
            for c in 0..3 {
                data[c * plane + o] = p[c] as f32 / 255.0;
            }
        }
    }
    Ok((t, lb))
}
