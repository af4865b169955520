//! 8-bit RGB images and binary PPM (P6) / PGM (P5) codecs.

use std::io::{self, Read, Write};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3×H×W` tensor scaled by 1/255.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let max = T::lit(255.0);
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            T::from_u8(self.pixels[p * 3 + c]).unwrap() / max
        })
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }

    pub fn read_ppm(r: &mut impl Read) -> io::Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let (width, height, body) = parse_header(&bytes, b"P6")?;
        let need = width * height * 3;
        if body.len() < need {
            return Err(invalid("truncated PPM payload"));
        }
        Ok(Self {
            width,
            height,
            pixels: body[..need].to_vec(),
        })
    }
}

/// Writes a single-channel 8-bit PGM.
pub fn write_pgm(w: &mut impl Write, width: usize, height: usize, gray: &[u8]) -> io::Result<()> {
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)
}

pub fn read_pgm(r: &mut impl Read) -> io::Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (width, height, body) = parse_header(&bytes, b"P5")?;
    if body.len() < width * height {
        return Err(invalid("truncated PGM payload"));
    }
    Ok((width, height, body[..width * height].to_vec()))
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> io::Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(invalid("unexpected netpbm magic"));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(invalid("truncated netpbm header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid("bad netpbm header field"))?;
    }
    if fields[2] != 255 {
        return Err(invalid("only maxval 255 is supported"));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(invalid("zero image extent"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(invalid("missing header terminator"));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::filled(3, 2, [1, 2, 3]);
        img.put(2, 1, [255, 0, 10]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        let back = RgbImage::read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut buf = b"P6 # made by hand\n1 1\n255\n".to_vec();
        buf.extend_from_slice(&[9, 8, 7]);
        let img = RgbImage::read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(img.get(0, 0), [9, 8, 7]);
    }

    #[test]
    fn tensor_is_planar_and_normalised() {
        let mut img = RgbImage::filled(2, 1, [0, 0, 0]);
        img.put(1, 0, [255, 51, 0]);
        let t: Tensor<f32> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 2, 2, &[0, 64, 128, 255]).unwrap();
        let (w, h, px) = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, [0, 64, 128, 255]);
    }
}
