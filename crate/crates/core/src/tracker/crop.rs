use crate::embed::Image;
use crate::head::BBox;

/// Square frame region resampled to `out x out` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    pub fn centered(cx: f64, cy: f64, side: f64, out: usize) -> Self {
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            out,
        }
    }

    /// Output pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    /// Frame coordinates to crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox {
            cx: (b.cx - self.x0) * s,
            cy: (b.cy - self.y0) * s,
            w: b.w * s,
            h: b.h * s,
            score: b.score,
        }
    }

    /// Crop coordinates to frame coordinates.
    pub fn to_frame(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox {
            cx: b.cx / s + self.x0,
            cy: b.cy / s + self.y0,
            w: b.w / s,
            h: b.h / s,
            score: b.score,
        }
    }

    pub fn frame_point(&self, u: f64, v: f64) -> (f64, f64) {
        (u / self.scale() + self.x0, v / self.scale() + self.y0)
    }
}

fn sample(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let (fx, fy) = (x.floor(), y.floor());
    let (ax, ay) = (x - fx, y - fy);
    let (ix, iy) = (fx as isize, fy as isize);
    let at = |px: isize, py: isize| {
        if px >= 0 && py >= 0 && px < w && py < h {
            img.get(px as usize, py as usize, c)
        } else {
            0.0
        }
    };
    (1.0 - ay) * ((1.0 - ax) * at(ix, iy) + ax * at(ix + 1, iy))
        + ay * ((1.0 - ax) * at(ix, iy + 1) + ax * at(ix + 1, iy + 1))
}

/// Bilinear resampling of `win` with zeros outside the frame. Pixel
/// centers of the output map to pixel centers of the frame.
pub fn crop_image(img: &Image, win: &CropWindow) -> Image {
    let mut out = Image::new(win.out, win.out);
    let step = win.side / win.out as f64;
    for j in 0..win.out {
        let sy = win.y0 + (j as f64 + 0.5) * step - 0.5;
        for i in 0..win.out {
            let sx = win.x0 + (i as f64 + 0.5) * step - 0.5;
            for c in 0..3 {
                out.set(i, j, c, sample(img, sx, sy, c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_mapping_inverts() {
        let w = CropWindow::centered(40.0, 30.0, 24.0, 64);
        let b = BBox::new(37.5, 33.0, 10.0, 6.0);
        let back = w.to_frame(&w.to_crop(&b));
        assert!((back.cx - b.cx).abs() < 1e-12 && (back.w - b.w).abs() < 1e-12);
        let c = w.to_crop(&BBox::new(40.0, 30.0, 24.0, 24.0));
        assert_eq!((c.cx, c.cy, c.w, c.h), (32.0, 32.0, 64.0, 64.0));
    }

    #[test]
    fn crop_corners_map_to_window_corners() {
        let w = CropWindow::centered(20.0, 12.0, 16.0, 32);
        assert_eq!(w.frame_point(0.0, 0.0), (12.0, 4.0));
        assert_eq!(w.frame_point(32.0, 32.0), (28.0, 20.0));
    }

    #[test]
    fn unit_scale_crop_is_a_shifted_copy() {
        let mut img = Image::new(10, 8);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 97) as f64 / 97.0;
        }
        let w = CropWindow { x0: 2.0, y0: 1.0, side: 6.0, out: 6 };
        let c = crop_image(&img, &w);
        for y in 0..6 {
            for x in 0..6 {
                for ch in 0..3 {
                    assert!((c.get(x, y, ch) - img.get(x + 2, y + 1, ch)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn outside_the_frame_is_zero() {
        let mut img = Image::new(4, 4);
        img.data_mut().fill(1.0);
        let c = crop_image(&img, &CropWindow { x0: -10.0, y0: -10.0, side: 4.0, out: 4 });
        assert_eq!(c.max_value(), 0.0);
    }
}
