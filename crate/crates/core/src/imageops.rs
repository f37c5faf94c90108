//! Small raster helpers on `(channels, height, width)` arrays.

use ndarray::{Array2, Array3, ArrayView2};

/// Bilinear sample of a single plane at fractional pixel-centre coordinates.
/// Coordinates outside the plane are clamped to the border.
#[inline]
pub(crate) fn sample_clamped(plane: &ArrayView2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = plane.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
    let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of the window `[top, top+crop_h) x [left, left+crop_w)` to `(out_h, out_w)`
/// using half-pixel centres. A full-size window at the input resolution is the identity.
pub(crate) fn crop_resize(
    image: &Array3<f32>,
    top: f32,
    left: f32,
    crop_h: f32,
    crop_w: f32,
    out_h: usize,
    out_w: usize,
) -> Array3<f32> {
    let channels = image.dim().0;
    let sy = crop_h / out_h as f32;
    let sx = crop_w / out_w as f32;
    let mut out = Array3::<f32>::zeros((channels, out_h, out_w));
    for c in 0..channels {
        let plane = image.index_axis(ndarray::Axis(0), c);
        for oy in 0..out_h {
            let y = top + (oy as f32 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = left + (ox as f32 + 0.5) * sx - 0.5;
                out[[c, oy, ox]] = sample_clamped(&plane, y, x);
            }
        }
    }
    out
}

pub fn resize_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (_, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    crop_resize(image, 0.0, 0.0, h as f32, w as f32, out_h, out_w)
}

pub fn resize_plane(plane: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let as3 = plane.clone().insert_axis(ndarray::Axis(0));
    let out = crop_resize(&as3, 0.0, 0.0, h as f32, w as f32, out_h, out_w);
    out.index_axis_move(ndarray::Axis(0), 0)
}
