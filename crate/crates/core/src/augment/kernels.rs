//! Pixel kernels shared by the basic and auxiliary pipelines.
//!
//! Intermediate arithmetic is in `f32`; every kernel rounds and clamps back to `[0, 255]`.

use super::Image;

/// Fill value for pixels sampled outside the frame.
pub const FILL: u8 = 128;

pub fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// BT.601 luma.
pub fn luma(p: &[u8]) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

fn map_pixels(img: &Image, f: impl Fn(&[u8], &mut [u8])) -> Image {
    let mut out = img.clone();
    for (src, dst) in img.pixels().chunks(3).zip(out.pixels_mut().chunks_mut(3)) {
        f(src, dst);
    }
    out
}

fn map_values(img: &Image, f: impl Fn(u8) -> u8) -> Image {
    let mut out = img.clone();
    out.pixels_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

pub fn grayscale(img: &Image) -> Image {
    map_pixels(img, |s, d| d.fill(to_u8(luma(s))))
}

pub fn hflip(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(w - 1 - x, y));
        }
    }
    out
}

/// `degenerate + factor·(img − degenerate)` per value.
fn blend(img: &Image, degenerate: &[f32], factor: f32) -> Image {
    let mut out = img.clone();
    for ((v, d), o) in img.pixels().iter().zip(degenerate).zip(out.pixels_mut()) {
        *o = to_u8(d + factor * (*v as f32 - d));
    }
    out
}

pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    map_values(img, |v| to_u8(v as f32 * factor))
}

/// Blends towards the mean luma of the whole image.
pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let n = (img.width() * img.height()) as f32;
    let mean = img.pixels().chunks(3).map(luma).sum::<f32>() / n;
    blend(img, &vec![mean; img.pixels().len()], factor)
}

/// Blends towards the grayscale version of the image.
pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let gray: Vec<f32> = img
        .pixels()
        .chunks(3)
        .flat_map(|p| [luma(p).round(); 3])
        .collect();
    blend(img, &gray, factor)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns (`shift ∈ [−0.5, 0.5]`).
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    if shift == 0.0 {
        return img.clone();
    }
    map_pixels(img, |s, d| {
        let (h, sat, v) = rgb_to_hsv(s[0] as f32, s[1] as f32, s[2] as f32);
        let (r, g, b) = hsv_to_rgb(h + shift, sat, v);
        d.copy_from_slice(&[to_u8(r), to_u8(g), to_u8(b)]);
    })
}

/// Odd kernel width covering `4σ`.
pub fn blur_kernel_size(sigma: f32) -> usize {
    let k = (4.0 * sigma).ceil().max(1.0) as usize;
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let size = blur_kernel_size(sigma);
    let half = (size / 2) as isize;
    let mut weights: Vec<f32> = (-half..=half)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let (w, h) = (img.width() as isize, img.height() as isize);
    let src: Vec<f32> = img.pixels().iter().map(|&v| v as f32).collect();
    let at = |buf: &[f32], x: isize, y: isize, c: usize| {
        buf[((y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) * 3) as usize + c]
    };
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[((y * w + x) * 3) as usize + c] = weights
                    .iter()
                    .zip(-half..=half)
                    .map(|(k, o)| k * at(&src, x + o, y, c))
                    .sum();
            }
        }
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f32 = weights
                    .iter()
                    .zip(-half..=half)
                    .map(|(k, o)| k * at(&tmp, x, y + o, c))
                    .sum();
                out.pixels_mut()[((y * w + x) * 3) as usize + c] = to_u8(v);
            }
        }
    }
    out
}

/// Blends towards a 3×3 smoothed copy; border pixels keep their values.
pub fn adjust_sharpness(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut degenerate: Vec<f32> = img.pixels().iter().map(|&v| v as f32).collect();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let wgt = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                            acc += wgt * img.get(x + dx - 1, y + dy - 1)[c] as f32;
                        }
                    }
                    degenerate[(y * w + x) * 3 + c] = (acc / 13.0).round();
                }
            }
        }
    }
    blend(img, &degenerate, factor)
}

pub fn invert(img: &Image) -> Image {
    map_values(img, |v| 255 - v)
}

/// Inverts every value `≥ threshold`; a threshold of 256 leaves the image unchanged.
pub fn solarize(img: &Image, threshold: u16) -> Image {
    map_values(img, |v| if v as u16 >= threshold { 255 - v } else { v })
}

/// Keeps the top `bits` bits of every value.
pub fn posterize(img: &Image, bits: u8) -> Image {
    let bits = bits.clamp(1, 8);
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    map_values(img, |v| v & mask)
}

/// Stretches each channel to span `[0, 255]`.
pub fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let vals = img.pixels().iter().skip(c).step_by(3);
        let lo = *vals.clone().min().unwrap();
        let hi = *vals.max().unwrap();
        if hi <= lo {
            continue;
        }
        let scale = 255.0 / (hi - lo) as f32;
        for v in out.pixels_mut().iter_mut().skip(c).step_by(3) {
            *v = to_u8((*v - lo) as f32 * scale);
        }
    }
    out
}

/// Per-channel histogram equalization.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for &v in img.pixels().iter().skip(c).step_by(3) {
            hist[v as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).unwrap();
        if hist.iter().filter(|&&h| h > 0).count() <= 1 {
            continue;
        }
        let step = (hist.iter().sum::<usize>() - hist[last]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
        for v in out.pixels_mut().iter_mut().skip(c).step_by(3) {
            *v = lut[*v as usize];
        }
    }
    out
}

/// Bilinear sample at a fractional position; neighbours outside the frame read as [`FILL`].
fn sample_fill(img: &Image, sx: f64, sy: f64) -> [u8; 3] {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            FILL as f64
        } else {
            img.get(x as usize, y as usize)[c] as f64
        }
    };
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut v = px(x0, y0, c) * (1.0 - fx) * (1.0 - fy);
        if fx > 0.0 {
            v += px(x0 + 1, y0, c) * fx * (1.0 - fy);
        }
        if fy > 0.0 {
            v += px(x0, y0 + 1, c) * (1.0 - fx) * fy;
        }
        if fx > 0.0 && fy > 0.0 {
            v += px(x0 + 1, y0 + 1, c) * fx * fy;
        }
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Inverse-maps every output pixel through `src = M·(p − center) + center + offset`.
/// `m = [a, b, c, d]` is the row-major 2×2 matrix.
pub fn affine_warp(img: &Image, m: [f64; 4], offset: (f64, f64)) -> Image {
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = m[0] * dx + m[1] * dy + cx + offset.0;
            let sy = m[2] * dx + m[3] * dy + cy + offset.1;
            out.set(x, y, sample_fill(img, sx, sy));
        }
    }
    out
}

/// Paints a `side × side` square of [`FILL`] centred at `(cx, cy)`, clipped to the frame.
pub fn cutout(img: &Image, cx: usize, cy: usize, side: usize) -> Image {
    let mut out = img.clone();
    if side == 0 {
        return out;
    }
    let x0 = cx.saturating_sub(side / 2);
    let y0 = cy.saturating_sub(side / 2);
    for y in y0..(y0 + side).min(img.height()) {
        for x in x0..(x0 + side).min(img.width()) {
            out.set(x, y, [FILL; 3]);
        }
    }
    out
}

/// A crop window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn full(img: &Image) -> Self {
        CropRect {
            left: 0,
            top: 0,
            width: img.width(),
            height: img.height(),
        }
    }
}

/// Crops `rect` and bilinearly resamples it to `out_w × out_h` (edge-clamped).
/// A crop whose size equals the output size is copied exactly.
pub fn resized_crop(img: &Image, rect: CropRect, out_w: usize, out_h: usize) -> Image {
    let mut out = Image::filled(out_w, out_h, [0; 3]);
    let sx_scale = rect.width as f64 / out_w as f64;
    let sy_scale = rect.height as f64 / out_h as f64;
    let max_x = (rect.left + rect.width - 1) as f64;
    let max_y = (rect.top + rect.height - 1) as f64;
    for oy in 0..out_h {
        let sy = (rect.top as f64 + (oy as f64 + 0.5) * sy_scale - 0.5).clamp(rect.top as f64, max_y);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(max_y as usize);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = (rect.left as f64 + (ox as f64 + 0.5) * sx_scale - 0.5)
                .clamp(rect.left as f64, max_x);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(max_x as usize);
            let fx = sx - x0 as f64;
            let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                px[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(ox, oy, px);
        }
    }
    out
}
