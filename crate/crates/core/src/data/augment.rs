use rand::Rng;

use super::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentFlags {
    pub enabled: bool,
    pub hflip: bool,
    pub random_crop: bool,
    /// Side length of the crop window relative to the image.
    pub crop_fraction: f32,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip: true,
            random_crop: true,
            crop_fraction: 0.875,
        }
    }
}

impl AugmentFlags {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Random horizontal mirror (p = 0.5) followed by a random crop resized back
/// to the original size. Output dimensions always equal the input's.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R, flags: AugmentFlags) -> Image {
    if !flags.enabled {
        return image.clone();
    }
    let mut out = if flags.hflip && rng.gen_bool(0.5) {
        image.flip_horizontal()
    } else {
        image.clone()
    };
    if flags.random_crop && flags.crop_fraction < 1.0 {
        let (w, h) = (out.width as f32, out.height as f32);
        let (cw, ch) = (w * flags.crop_fraction, h * flags.crop_fraction);
        let x0 = rng.gen_range(0.0..=(w - cw));
        let y0 = rng.gen_range(0.0..=(h - ch));
        out = out.crop_resize(x0, y0, cw, ch, out.width, out.height);
    }
    out
}
