use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MultiModalSample;
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub pad_pixels: usize,
    /// (height, width); `None` crops back to the input size.
    #[serde(default)]
    pub crop_size: Option<(usize, usize)>,
    pub erase_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad_pixels: 2,
            crop_size: None,
            erase_prob: 0.25,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            pad_pixels: 0,
            crop_size: None,
            erase_prob: 0.0,
            seed: 0,
        }
    }
}

/// Flip, pad and crop with one shared draw for all modalities; random erasing
/// drawn per modality.
#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: AugmentationConfig,
    input: (usize, usize),
    crop: (usize, usize),
}

impl Augmenter {
    /// `input` is the (height, width) of images this augmenter will see.
    pub fn new(cfg: AugmentationConfig, input: (usize, usize)) -> Result<Self> {
        for (name, p) in [("flip_prob", cfg.flip_prob), ("erase_prob", cfg.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let crop = cfg.crop_size.unwrap_or(input);
        let padded = (input.0 + 2 * cfg.pad_pixels, input.1 + 2 * cfg.pad_pixels);
        if crop.0 == 0 || crop.1 == 0 || crop.0 > padded.0 || crop.1 > padded.1 {
            return Err(Error::Config(format!(
                "crop {crop:?} does not fit the padded size {padded:?}"
            )));
        }
        Ok(Self { cfg, input, crop })
    }

    pub fn config(&self) -> &AugmentationConfig {
        &self.cfg
    }

    pub fn apply(&self, sample: &MultiModalSample, rng: &mut impl Rng) -> Result<MultiModalSample> {
        if sample.size() != self.input {
            return Err(Error::Shape(format!(
                "augmenter expects {:?}, sample {} is {:?}",
                self.input,
                sample.sample_id,
                sample.size()
            )));
        }
        let flip = rng.random::<f64>() < self.cfg.flip_prob;
        let pad = self.cfg.pad_pixels;
        let (ph, pw) = (self.input.0 + 2 * pad, self.input.1 + 2 * pad);
        let top = rng.random_range(0..=ph - self.crop.0);
        let left = rng.random_range(0..=pw - self.crop.1);
        let mut out = sample.clone();
        for m in Modality::ALL {
            let mut img = sample.images.get(m).clone();
            if flip {
                image::imageops::flip_horizontal_in_place(&mut img);
            }
            if pad > 0 || self.crop != self.input {
                img = pad_crop(&img, pad, top, left, self.crop);
            }
            if rng.random::<f64>() < self.cfg.erase_prob {
                erase(&mut img, rng);
            }
            *out.images.get_mut(m) = img;
        }
        Ok(out)
    }
}

fn pad_crop(img: &RgbImage, pad: usize, top: usize, left: usize, (ch, cw): (usize, usize)) -> RgbImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    RgbImage::from_fn(cw as u32, ch as u32, |x, y| {
        let sx = x as i64 + left as i64 - pad as i64;
        let sy = y as i64 + top as i64 - pad as i64;
        if sx >= 0 && sy >= 0 && sx < w && sy < h {
            *img.get_pixel(sx as u32, sy as u32)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// Zeroes a random rectangle covering 2-40% of the image.
fn erase(img: &mut RgbImage, rng: &mut impl Rng) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for _ in 0..10 {
        let area = rng.random_range(0.02..0.4) * w * h;
        let aspect = rng.random_range(0.3f64..3.3);
        let eh = (area * aspect).sqrt().round() as u32;
        let ew = (area / aspect).sqrt().round() as u32;
        if eh == 0 || ew == 0 || eh >= img.height() || ew >= img.width() {
            continue;
        }
        let y0 = rng.random_range(0..=img.height() - eh);
        let x0 = rng.random_range(0..=img.width() - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                img.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
        return;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::rng;

    fn sample() -> MultiModalSample {
        generate_synthetic(2, 2, (32, 16), 3).unwrap().sample(0, None).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let s = sample();
        let a = Augmenter::new(AugmentationConfig::identity(), (32, 16)).unwrap();
        assert_eq!(a.apply(&s, &mut rng::stream(1, &[])).unwrap(), s);
    }

    #[test]
    fn double_flip_restores() {
        let s = sample();
        let cfg = AugmentationConfig {
            flip_prob: 1.0,
            ..AugmentationConfig::identity()
        };
        let a = Augmenter::new(cfg, (32, 16)).unwrap();
        let mut r = rng::stream(1, &[]);
        let once = a.apply(&s, &mut r).unwrap();
        assert_ne!(once.images, s.images);
        assert_eq!(a.apply(&once, &mut r).unwrap(), s);
    }

    #[test]
    fn crop_offset_shared_across_modalities() {
        let mut s = sample();
        for m in Modality::ALL {
            let img = s.images.get_mut(m);
            for p in img.pixels_mut() {
                *p = Rgb([0, 0, 0]);
            }
            img.put_pixel(5, 9, Rgb([255, 255, 255]));
        }
        let cfg = AugmentationConfig {
            pad_pixels: 4,
            flip_prob: 0.5,
            ..AugmentationConfig::identity()
        };
        let a = Augmenter::new(cfg, (32, 16)).unwrap();
        for k in 0..20 {
            let out = a.apply(&s, &mut rng::stream(k, &[])).unwrap();
            let marker = |m: Modality| {
                out.images
                    .get(m)
                    .enumerate_pixels()
                    .find(|(_, _, p)| p.0[0] == 255)
                    .map(|(x, y, _)| (x, y))
            };
            assert_eq!(marker(Modality::Rgb), marker(Modality::Nir));
            assert_eq!(marker(Modality::Rgb), marker(Modality::Tir));
        }
    }

    #[test]
    fn rejects_oversized_crop() {
        let cfg = AugmentationConfig {
            crop_size: Some((40, 16)),
            pad_pixels: 2,
            ..AugmentationConfig::identity()
        };
        assert!(Augmenter::new(cfg, (32, 16)).is_err());
    }
}
