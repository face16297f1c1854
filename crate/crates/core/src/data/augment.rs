use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Probability of applying each augmentation, plus their parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub hflip: f64,
    pub vflip: f64,
    /// Rotation by a uniformly chosen multiple of 90°.
    pub rotate: f64,
    pub crop: f64,
    pub gamma: f64,
    /// Side of the random crop relative to the image side.
    pub crop_fraction: f64,
    pub gamma_range: (f64, f64),
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rotate: 0.0,
            crop: 0.0,
            gamma: 0.0,
            crop_fraction: 0.875,
            gamma_range: (0.8, 1.25),
        }
    }

    /// Every augmentation with probability one half.
    pub fn standard() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate: 0.5,
            crop: 0.5,
            gamma: 0.5,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        [self.hflip, self.vflip, self.rotate, self.crop, self.gamma]
            .iter()
            .all(|&p| p <= 0.0)
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::identity()
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::dim(
            "augment",
            format!("expected C×H×W image, got {s:?}"),
        )),
    }
}

fn remap(
    image: &Tensor,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src(y, x);
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    remap(image, h, w, |y, x| (y, w - 1 - x))
}

pub fn flip_vertical(image: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    remap(image, h, w, |y, x| (h - 1 - y, x))
}

/// Rotates counter-clockwise by `quarter_turns × 90°`.
pub fn rotate90(image: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    match quarter_turns % 4 {
        0 => Ok(image.clone()),
        1 => remap(image, w, h, |y, x| (x, w - 1 - y)),
        2 => remap(image, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(image, w, h, |y, x| (h - 1 - x, y)),
    }
}

/// Clips to `[0, 1]` and raises every value to `gamma`.
pub fn gamma_adjust(image: &Tensor, gamma: f64) -> Tensor {
    image.map(|v| v.clamp(0.0, 1.0).powf(gamma))
}

/// Crops a `size × size` window at `(top, left)` and pads it back to the
/// original extent with zeros, centred.
fn crop_and_pad(image: &Tensor, size: usize, top: usize, left: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let (pad_y, pad_x) = ((h - size) / 2, (w - size) / 2);
    let d = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                out[(ch * h + y + pad_y) * w + x + pad_x] = d[(ch * h + top + y) * w + left + x];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Applies each augmentation of `policy` independently with its probability.
pub fn augment(image: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    if policy.rotate > 0.0 && h != w {
        return Err(Error::Config(format!(
            "rotation needs a square image, got {h}×{w}"
        )));
    }
    if policy.is_identity() {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    if rng.gen::<f64>() < policy.hflip {
        out = flip_horizontal(&out)?;
    }
    if rng.gen::<f64>() < policy.vflip {
        out = flip_vertical(&out)?;
    }
    if rng.gen::<f64>() < policy.rotate {
        out = rotate90(&out, rng.gen_range(1..=3))?;
    }
    if rng.gen::<f64>() < policy.crop {
        let size = ((h.min(w) as f64) * policy.crop_fraction).round() as usize;
        let size = size.clamp(1, h.min(w));
        let top = rng.gen_range(0..=h - size);
        let left = rng.gen_range(0..=w - size);
        out = crop_and_pad(&out, size, top, left)?;
    }
    if rng.gen::<f64>() < policy.gamma {
        let (lo, hi) = policy.gamma_range;
        out = gamma_adjust(&out, rng.gen_range(lo..=hi));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn img() -> Tensor {
        Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap()
    }

    #[test]
    fn identity_policy_returns_input() {
        let mut rng = stream(0, Stream::Augment);
        assert_eq!(
            augment(&img(), &AugmentPolicy::identity(), &mut rng).unwrap(),
            img()
        );
    }

    #[test]
    fn involutions_and_rotations() {
        let x = img();
        assert_eq!(flip_horizontal(&flip_horizontal(&x).unwrap()).unwrap(), x);
        assert_eq!(flip_vertical(&flip_vertical(&x).unwrap()).unwrap(), x);
        let r = rotate90(&x, 1).unwrap();
        assert_eq!(rotate90(&r, 3).unwrap(), x);
        assert_eq!(
            rotate90(&x, 2).unwrap(),
            flip_vertical(&flip_horizontal(&x).unwrap()).unwrap()
        );
        // Top-right pixel moves to top-left under a counter-clockwise turn.
        assert_eq!(r.data()[0], x.data()[3]);
    }

    #[test]
    fn unit_gamma_is_identity_on_unit_interval() {
        let x = img();
        assert_eq!(gamma_adjust(&x, 1.0), x);
    }

    #[test]
    fn rotation_needs_square_input() {
        let x = Tensor::zeros(&[1, 4, 6]);
        let mut rng = stream(0, Stream::Augment);
        assert!(matches!(
            augment(&x, &AugmentPolicy::standard(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn standard_policy_is_seeded() {
        let x = img();
        let a = augment(
            &x,
            &AugmentPolicy::standard(),
            &mut stream(9, Stream::Augment),
        )
        .unwrap();
        let b = augment(
            &x,
            &AugmentPolicy::standard(),
            &mut stream(9, Stream::Augment),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }
}
