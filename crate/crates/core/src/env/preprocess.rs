//! Luminance conversion and bilinear resampling to the agent's 84×84 input.

use super::SIDE;

/// Row-major image with 1 (grey) or 3 (interleaved RGB) channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert!(channels == 1 || channels == 3, "images are grey or RGB");
        assert_eq!(data.len(), width * height * channels, "image buffer size");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }
}

/// 0.299 R + 0.587 G + 0.114 B; grey images pass through.
pub fn luminance(img: &Image) -> Vec<f32> {
    if img.channels == 1 {
        return img.data.clone();
    }
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// Source coordinate and blend weight for output index `i`, using pixel
/// centres: `x = (i + 0.5) * src / dst - 0.5`, clamped to the image.
fn taps(i: usize, src: usize, dst: usize) -> (usize, usize, f32) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, (x - lo as f64) as f32)
}

pub fn resize_bilinear(data: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(data.len(), width * height);
    if (width, height) == (out_w, out_h) {
        return data.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, width, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, wy) = taps(y, height, out_h);
        let (r0, r1) = (&data[y0 * width..(y0 + 1) * width], &data[y1 * width..(y1 + 1) * width]);
        for &(x0, x1, wx) in &cols {
            let top = r0[x0] + wx * (r0[x1] - r0[x0]);
            let bottom = r1[x0] + wx * (r1[x1] - r1[x0]);
            out.push(top + wy * (bottom - top));
        }
    }
    out
}

/// Greyscale then resample to 84×84.
pub fn preprocess(img: &Image) -> Vec<f32> {
    resize_bilinear(&luminance(img), img.width, img.height, SIDE, SIDE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_colour_frame() {
        let out = preprocess(&Image::filled(160, 210, 3, 0.5));
        assert_eq!(out.len(), SIDE * SIDE);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn native_size_is_identity() {
        let data: Vec<f32> = (0..SIDE * SIDE).map(|i| (i % 97) as f32 / 97.0).collect();
        assert_eq!(preprocess(&Image::new(SIDE, SIDE, 1, data.clone())), data);
    }

    #[test]
    fn checkerboard_upsample() {
        // 2×2 checkerboard to 4×4. Output pixel (1, 1) sits at source
        // coordinate (0.25, 0.25): weights 0.75/0.25 on each axis.
        let src = [1.0, 0.0, 0.0, 1.0];
        let out = resize_bilinear(&src, 2, 2, 4, 4);
        let expect_11 = 0.75 * 0.75 * 1.0 + 2.0 * 0.75 * 0.25 * 0.0 + 0.25 * 0.25 * 1.0;
        assert!((out[5] - expect_11).abs() < 1e-6);
        // corners clamp onto the source corners
        assert_eq!(out[0], 1.0);
        assert_eq!(out[3], 0.0);
        assert_eq!(out[15], 1.0);
    }
}
