//! Attention-map export as binary PGM (P5) images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upsampling factor from feature resolution back to input resolution.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
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
                return Err(Error::Truncated("PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::BadMagic {
                expected: "P5".into(),
                found: fields[0].as_bytes().to_vec(),
            });
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Malformed(format!("bad PGM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Malformed(format!("unsupported PGM maxval {maxval}")));
        }
        let pixels = bytes.get(pos + 1..).ok_or(Error::Truncated("PGM pixels"))?;
        if pixels.len() != width * height {
            return Err(Error::Malformed(format!(
                "PGM has {} pixel bytes, expected {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }
}

/// Min-max scales a [H,W] map to 0..=255. A constant map becomes all zeros.
pub fn to_gray(map: &Tensor) -> Result<GrayImage> {
    let &[height, width] = map.shape() else {
        return Err(Error::dim("to_gray", map.shape(), &[0, 0]));
    };
    let data = map.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels = data
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// Channel mean of a [C,H,W] tensor.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim("channel_mean", x.shape(), &[0, 0, 0]));
    };
    let mut out = vec![0.0; h * w];
    for plane in x.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v / c as f64;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Nearest-neighbour upsampling followed by a 50/50 blend with `background`.
pub fn overlay(map: &GrayImage, background: &GrayImage) -> Result<GrayImage> {
    let fx = background.width / map.width.max(1);
    let fy = background.height / map.height.max(1);
    if fx == 0 || fy == 0 || map.width * fx != background.width || map.height * fy != background.height {
        return Err(Error::Config(format!(
            "cannot overlay a {}x{} map on a {}x{} image",
            map.width, map.height, background.width, background.height
        )));
    }
    let mut pixels = Vec::with_capacity(background.pixels.len());
    for y in 0..background.height {
        for x in 0..background.width {
            let m = map.pixels[(y / fy) * map.width + x / fx] as u16;
            let b = background.pixels[y * background.width + x] as u16;
            pixels.push(((m + b + 1) / 2) as u8);
        }
    }
    Ok(GrayImage {
        width: background.width,
        height: background.height,
        pixels,
    })
}

pub fn file_name(batch: usize, frame: usize) -> String {
    format!("attn_b{batch}_f{frame}.pgm")
}

/// Writes one image per frame of `attention` [N,C,h,w] for batch index `batch`.
///
/// With `frames` = the clip's input frames [N,C_in,H,W], each map is upsampled and
/// blended with the frame's luminance; otherwise maps are written at feature resolution.
pub fn write_maps(
    dir: impl AsRef<Path>,
    batch: usize,
    attention: &Tensor,
    frames: Option<&Tensor>,
) -> Result<Vec<PathBuf>> {
    let &[n, c, h, w] = attention.shape() else {
        return Err(Error::dim("write_maps", attention.shape(), &[0, 0, 0, 0]));
    };
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let per_frame = c * h * w;
    let mut written = Vec::with_capacity(n);
    for f in 0..n {
        let slice = Tensor::new(vec![c, h, w], attention.data()[f * per_frame..(f + 1) * per_frame].to_vec())?;
        let mut image = to_gray(&channel_mean(&slice)?)?;
        if let Some(input) = frames {
            let s = input.shape();
            if s.len() != 4 || s[0] != n {
                return Err(Error::dim("write_maps", s, &[n, 0, 0, 0]));
            }
            let size = s[1] * s[2] * s[3];
            let frame = Tensor::new(s[1..].to_vec(), input.data()[f * size..(f + 1) * size].to_vec())?;
            let luminance = channel_mean(&frame)?;
            let background = GrayImage {
                width: s[3],
                height: s[2],
                pixels: luminance
                    .data()
                    .iter()
                    .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect(),
            };
            image = overlay(&image, &background)?;
        }
        let path = dir.join(file_name(batch, f));
        fs::write(&path, image.to_pgm())?;
        written.push(path);
    }
    Ok(written)
}
