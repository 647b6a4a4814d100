//! Prompt augmentation: two clean images of different classes are averaged, a
//! window of the learnable prompt is pasted over the mix, and the result is
//! labeled with the extra class `C`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_window, Tape, Tensor, Var};
use crate::datasets::{encode_ppm, stack_images, Image};
use crate::error::{Error, Result};

pub use crate::autodiff::Window as CropMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Network and prompt descend together every step.
    #[default]
    Synchronous,
    /// Even steps update only the network, odd steps only the prompt.
    Asynchronous,
    /// The prompt ascends the augmented loss while the network descends.
    Adversarial,
    /// Like `Synchronous`, with the window pinned to the top-left corner.
    FixedCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_fraction: f64,
    pub mode: PromptMode,
    /// Draw the mixing partner from the other sampled domain instead of the same one.
    pub mix_cross_domain: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_fraction: 0.5,
            mode: PromptMode::Synchronous,
            mix_cross_domain: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "crop_fraction must lie in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        Ok(())
    }

    /// Window side along a dimension of length `dim`, at least one pixel.
    pub fn window_side(&self, dim: usize) -> usize {
        ((self.crop_fraction * dim as f64).round() as usize).clamp(1, dim)
    }
}

pub fn mix_pair(a: &Image, b: &Image) -> Result<Image> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.height(), a.width(), 3],
            actual: vec![b.height(), b.width(), 3],
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
    Image::new(a.height(), a.width(), data)
}

pub fn random_crop_mask(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<CropMask> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("cannot crop a {height}x{width} image")));
    }
    let (h, w) = (cfg.window_side(height), cfg.window_side(width));
    let (top, left) = if cfg.mode == PromptMode::FixedCrop {
        (0, 0)
    } else {
        (rng.random_range(0..=height - h), rng.random_range(0..=width - w))
    };
    Ok(CropMask {
        top,
        left,
        height: h,
        width: w,
    })
}

/// Replaces the window of `mixed` with the prompt values at the same coordinates.
pub fn apply_prompt(mixed: &Image, prompt: &Tensor, mask: CropMask) -> Result<Image> {
    let (h, w) = mixed.shape();
    if prompt.shape() != [h, w, 3] {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, 3],
            actual: prompt.shape().to_vec(),
        });
    }
    check_window(mask, h, w)?;
    let mut data = mixed.data().to_vec();
    for y in mask.top..mask.top + mask.height {
        let start = (y * w + mask.left) * 3;
        let len = mask.width * 3;
        data[start..start + len].copy_from_slice(&prompt.data()[start..start + len]);
    }
    Image::new(h, w, data)
}

/// Mixes aligned pairs of images and records the prompt paste on the tape,
/// returning the `[B,H,W,3]` batch and its labels (all `num_known`).
pub fn augmented_batch_on_tape(
    tape: &mut Tape,
    clean: &[&Image],
    partners: &[&Image],
    prompt: Var,
    mask: CropMask,
    num_known: usize,
) -> Result<(Var, Vec<usize>)> {
    let mixed = mix_all(clean, partners)?;
    let base = stack_images(&mixed)?;
    let batch = tape.paste_window(base, prompt, mask)?;
    Ok((batch, vec![num_known; mixed.len()]))
}

/// Plain-value version of [`augmented_batch_on_tape`].
pub fn build_augmented_batch(
    clean: &[&Image],
    partners: &[&Image],
    prompt: &Tensor,
    mask: CropMask,
    num_known: usize,
) -> Result<(Vec<Image>, Vec<usize>)> {
    let images = mix_all(clean, partners)?
        .iter()
        .map(|m| apply_prompt(m, prompt, mask))
        .collect::<Result<Vec<_>>>()?;
    let labels = vec![num_known; images.len()];
    Ok((images, labels))
}

fn mix_all(clean: &[&Image], partners: &[&Image]) -> Result<Vec<Image>> {
    if clean.len() != partners.len() {
        return Err(Error::DimensionMismatch {
            expected: clean.len(),
            actual: partners.len(),
        });
    }
    if clean.is_empty() {
        return Err(Error::Empty("augmented batch of no images".into()));
    }
    clean.iter().zip(partners).map(|(a, b)| mix_pair(a, b)).collect()
}

/// Writes images as `aug_0000.ppm`, `aug_0001.ppm`, ... for visual inspection.
pub fn dump_ppm(dir: &Path, images: &[Image]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        let path = dir.join(format!("aug_{i:04}.ppm"));
        fs::write(&path, encode_ppm(img)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_from_seed;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Image {
        Image::new(h, w, (0..h * w * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn mixing_examples() {
        let a = img(2, 2, |i| i as f64 / 12.0);
        assert_eq!(mix_pair(&a, &a).unwrap(), a);
        let zeros = img(2, 2, |_| 0.0);
        let ones = img(2, 2, |_| 1.0);
        assert!(mix_pair(&zeros, &ones).unwrap().data().iter().all(|&v| v == 0.5));
        let p = Image::new(1, 1, vec![0.2, 0.3, 0.0]).unwrap();
        let q = Image::new(1, 1, vec![0.8, 0.4, 0.0]).unwrap();
        let m = mix_pair(&p, &q).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-15);
        assert!((m.data()[1] - 0.35).abs() < 1e-15);
        assert!(mix_pair(&a, &img(1, 2, |_| 0.0)).is_err());
    }

    #[test]
    fn mix_stays_within_input_range() {
        let a = img(3, 3, |i| (i % 7) as f64 / 7.0);
        let b = img(3, 3, |i| (i % 5) as f64 / 5.0);
        let m = mix_pair(&a, &b).unwrap();
        let lo = a.data().iter().chain(b.data()).copied().fold(f64::INFINITY, f64::min);
        let hi = a.data().iter().chain(b.data()).copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(m.data().iter().all(|&v| (lo..=hi).contains(&v)));
    }

    #[test]
    fn crop_mask_examples() {
        let mut rng = stream_from_seed(0);
        let full = AugmentConfig {
            crop_fraction: 1.0,
            ..Default::default()
        };
        assert_eq!(
            random_crop_mask(8, 6, &full, &mut rng).unwrap(),
            CropMask {
                top: 0,
                left: 0,
                height: 8,
                width: 6
            }
        );
        let half = AugmentConfig::default();
        for _ in 0..200 {
            let m = random_crop_mask(32, 32, &half, &mut rng).unwrap();
            assert_eq!((m.height, m.width), (16, 16));
            assert!(m.top <= 16 && m.left <= 16);
        }
        let a = random_crop_mask(32, 32, &half, &mut stream_from_seed(4)).unwrap();
        let b = random_crop_mask(32, 32, &half, &mut stream_from_seed(4)).unwrap();
        assert_eq!(a, b);
        let fixed = AugmentConfig {
            mode: PromptMode::FixedCrop,
            ..Default::default()
        };
        let m = random_crop_mask(32, 32, &fixed, &mut rng).unwrap();
        assert_eq!((m.top, m.left), (0, 0));
        let bad = AugmentConfig {
            crop_fraction: 0.0,
            ..Default::default()
        };
        assert!(random_crop_mask(8, 8, &bad, &mut rng).is_err());
        let tiny = AugmentConfig {
            crop_fraction: 0.01,
            ..Default::default()
        };
        assert_eq!(random_crop_mask(8, 8, &tiny, &mut rng).unwrap().height, 1);
    }

    #[test]
    fn prompt_paste_examples() {
        let mixed = img(3, 4, |_| 0.25);
        let prompt = Tensor::new(vec![3, 4, 3], (0..36).map(|i| i as f64 / 36.0).collect()).unwrap();
        let full = CropMask {
            top: 0,
            left: 0,
            height: 3,
            width: 4,
        };
        assert_eq!(apply_prompt(&mixed, &prompt, full).unwrap().data(), prompt.data());
        let one = CropMask {
            top: 0,
            left: 0,
            height: 1,
            width: 1,
        };
        let out = apply_prompt(&mixed, &prompt, one).unwrap();
        assert_eq!(&out.data()[..3], &prompt.data()[..3]);
        assert!(out.data()[3..].iter().all(|&v| v == 0.25));
        assert_eq!(apply_prompt(&out, &prompt, one).unwrap(), out);
        let outside = CropMask {
            top: 2,
            left: 3,
            height: 2,
            width: 1,
        };
        assert!(apply_prompt(&mixed, &prompt, outside).is_err());
    }

    #[test]
    fn prompt_gradient_is_the_window_indicator() {
        let mixed = img(4, 4, |i| (i % 3) as f64 / 3.0);
        let prompt = Tensor::filled(vec![4, 4, 3], 0.5);
        let mask = CropMask {
            top: 1,
            left: 2,
            height: 2,
            width: 2,
        };
        let loss = |p: &Tensor| -> f64 { apply_prompt(&mixed, p, mask).unwrap().data().iter().sum() };
        let mut tape = Tape::new();
        let pv = tape.leaf(prompt.clone().with_grad(true));
        let (batch, labels) = augmented_batch_on_tape(&mut tape, &[&mixed], &[&mixed], pv, mask, 5).unwrap();
        assert_eq!(labels, vec![5]);
        let total = tape.sum(batch);
        let grads = tape.backward(total).unwrap().wrt(&tape, pv);
        let inside = (2 * 4 + 2) * 3;
        let outside = 0;
        for (idx, want) in [(inside, 1.0), (outside, 0.0)] {
            let h = 1e-6;
            let mut up = prompt.clone();
            up.data_mut()[idx] += h;
            let mut down = prompt.clone();
            down.data_mut()[idx] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!((fd - want).abs() < 1e-6);
            assert_eq!(grads[idx], want);
        }
        let ones = grads.iter().filter(|&&g| g == 1.0).count();
        assert_eq!(ones, 2 * 2 * 3);
    }

    #[test]
    fn augmented_batch_examples() {
        let a = img(2, 2, |_| 0.1);
        let b = img(2, 2, |_| 0.9);
        let prompt = Tensor::filled(vec![2, 2, 3], 0.7);
        let full = CropMask {
            top: 0,
            left: 0,
            height: 2,
            width: 2,
        };
        let (imgs, labels) = build_augmented_batch(&[&a], &[&b], &prompt, full, 6).unwrap();
        assert_eq!(imgs[0].data(), prompt.data());
        assert_eq!(labels, vec![6]);
        let corner = CropMask {
            top: 1,
            left: 1,
            height: 1,
            width: 1,
        };
        let (imgs, labels) = build_augmented_batch(&[&a, &b], &[&b, &a], &prompt, corner, 3).unwrap();
        assert!(labels.iter().all(|&l| l == 3));
        assert!(imgs.iter().flat_map(|i| i.data()).all(|v| (0.0..=1.0).contains(v)));
        let mut tape = Tape::new();
        let pv = tape.leaf(prompt.clone());
        let (on_tape, _) = augmented_batch_on_tape(&mut tape, &[&a, &b], &[&b, &a], pv, corner, 3).unwrap();
        assert_eq!(tape.value(on_tape), &stack_images(&imgs).unwrap());
        assert!(build_augmented_batch(&[&a], &[], &prompt, corner, 3).is_err());
    }

    #[test]
    fn debug_dump_writes_ppm_files() {
        let dir = tempfile::tempdir().unwrap();
        dump_ppm(dir.path(), &[img(2, 2, |_| 0.5), img(2, 2, |_| 0.1)]).unwrap();
        assert!(dir.path().join("aug_0001.ppm").exists());
    }
}
