//! Small random rotations followed by a horizontal integer shift.

use rand::Rng;

use crate::tensor::Tensor;

/// Value written where the transformed image has no source pixel.
pub const FILL: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentBounds {
    pub max_rotation_degrees: f32,
    pub max_shift_pixels: u32,
}

impl AugmentBounds {
    pub const NONE: AugmentBounds = AugmentBounds {
        max_rotation_degrees: 0.0,
        max_shift_pixels: 0,
    };
}

/// Draws an angle uniform in `[-max_rot, max_rot]` and a shift uniform in
/// `[-max_shift, max_shift]`, then applies [`augment_with`].
pub fn augment<R: Rng>(image: &Tensor<f32>, bounds: AugmentBounds, rng: &mut R) -> Tensor<f32> {
    let angle = if bounds.max_rotation_degrees > 0.0 {
        rng.gen_range(-bounds.max_rotation_degrees..=bounds.max_rotation_degrees)
    } else {
        0.0
    };
    let m = bounds.max_shift_pixels as i32;
    let shift = if m > 0 { rng.gen_range(-m..=m) } else { 0 };
    augment_with(image, angle, shift)
}

/// Rotates `image` (`[C,H,W]`) by `angle_degrees` about its center with
/// bilinear resampling, then shifts it right by `shift` columns.
pub fn augment_with(image: &Tensor<f32>, angle_degrees: f32, shift: i32) -> Tensor<f32> {
    let rotated = if angle_degrees == 0.0 {
        image.clone()
    } else {
        rotate(image, angle_degrees)
    };
    if shift == 0 {
        rotated
    } else {
        shift_columns(&rotated, shift)
    }
}

fn dims(image: &Tensor<f32>) -> (usize, usize, usize) {
    let s = image.shape();
    assert_eq!(s.len(), 3, "augment expects [C,H,W], got {s:?}");
    (s[0], s[1], s[2])
}

fn rotate(image: &Tensor<f32>, angle_degrees: f32) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let (sin, cos) = (angle_degrees as f64).to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = Tensor::full(image.shape(), FILL);
    let dst = out.data_mut();
    let at = |ch: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            FILL as f64
        } else {
            src[(ch * h + y as usize) * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output coordinate back into the source
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for ch in 0..c {
                let top = at(ch, y0, x0) * (1.0 - fx) + at(ch, y0, x0 + 1) * fx;
                let bot = at(ch, y0 + 1, x0) * (1.0 - fx) + at(ch, y0 + 1, x0 + 1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                dst[(ch * h + y) * w + x] = (v as f32).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

fn shift_columns(image: &Tensor<f32>, shift: i32) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut out = Tensor::full(image.shape(), FILL);
    let dst = out.data_mut();
    for row in 0..c * h {
        for x in 0..w {
            let sx = x as i64 - shift as i64;
            if sx >= 0 && sx < w as i64 {
                dst[row * w + x] = src[row * w + sx as usize];
            }
        }
    }
    out
}
