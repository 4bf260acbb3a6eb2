use rand::Rng;

/// Geometric transforms drawn for one image. `None`/`false` fields are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    /// `(dy, dx)` in pixels.
    pub shift: Option<(i64, i64)>,
    pub zoom: Option<f64>,
    pub flip_vertical: bool,
    /// Degrees, counter-clockwise.
    pub rotate: Option<f64>,
}

impl AugmentPlan {
    /// Each transform is switched on with probability 0.5: shift up to 20/224
    /// of the side, zoom in `[0.9, 1.1]`, vertical flip, rotation in `[-15, 15]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, side: usize) -> Self {
        let max_shift = (side as f64 * 20.0 / 224.0).round() as i64;
        let shift = rng
            .random_bool(0.5)
            .then(|| (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)));
        let zoom = rng.random_bool(0.5).then(|| rng.random_range(0.9..=1.1));
        let flip_vertical = rng.random_bool(0.5);
        let rotate = rng.random_bool(0.5).then(|| rng.random_range(-15.0..=15.0));
        Self {
            shift,
            zoom,
            flip_vertical,
            rotate,
        }
    }

    pub fn apply(&self, image: &[f64], side: usize) -> Vec<f64> {
        let mut out = image.to_vec();
        if let Some((dy, dx)) = self.shift {
            out = shift_image(&out, side, dy, dx);
        }
        if let Some(z) = self.zoom {
            out = zoom_image(&out, side, z);
        }
        if self.flip_vertical {
            out = flip_vertical(&out, side);
        }
        if let Some(deg) = self.rotate {
            out = rotate_image(&out, side, deg);
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Random augmentation of a square image in `[0, 1]`. Tabular data is never
/// augmented.
pub fn augment_image<R: Rng + ?Sized>(image: &[f64], side: usize, rng: &mut R) -> Vec<f64> {
    AugmentPlan::sample(rng, side).apply(image, side)
}

/// Nearest-neighbour resampling: `out(y, x) = in(src(y, x))`, zero outside.
fn resample(image: &[f64], side: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (sy, sx) = src(y as f64, x as f64);
            let (iy, ix) = (sy.round(), sx.round());
            if iy >= 0.0 && ix >= 0.0 && (iy as usize) < side && (ix as usize) < side {
                out[y * side + x] = image[iy as usize * side + ix as usize];
            }
        }
    }
    out
}

/// Moves content down by `dy` and right by `dx`, filling with zeros.
pub fn shift_image(image: &[f64], side: usize, dy: i64, dx: i64) -> Vec<f64> {
    resample(image, side, |y, x| (y - dy as f64, x - dx as f64))
}

/// Scales about the centre; factors above 1 magnify.
pub fn zoom_image(image: &[f64], side: usize, factor: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    resample(image, side, |y, x| (c + (y - c) / factor, c + (x - c) / factor))
}

/// Reverses the row order.
pub fn flip_vertical(image: &[f64], side: usize) -> Vec<f64> {
    image.chunks(side).rev().flatten().copied().collect()
}

pub fn rotate_image(image: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let (s, co) = degrees.to_radians().sin_cos();
    resample(image, side, |y, x| {
        let (ry, rx) = (y - c, x - c);
        (c + co * ry + s * rx, c - s * ry + co * rx)
    })
}
