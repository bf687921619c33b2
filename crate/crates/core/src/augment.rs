//! Stochastic two-view augmentation for images and feature vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::ImageGeom;
use crate::data::SampleShape;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CropPolicy {
    pub enabled: bool,
    /// Fraction of the image area kept, sampled uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorJitterPolicy {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub apply_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurPolicy {
    pub enabled: bool,
    pub kernel_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub crop: CropPolicy,
    pub hflip_prob: f64,
    pub color_jitter: ColorJitterPolicy,
    pub grayscale_prob: f64,
    pub blur: BlurPolicy,
    /// Std-dev of additive noise for vector samples.
    pub vector_noise_sigma: f64,
    /// Per-coordinate probability of zeroing a vector entry.
    pub vector_dropout_prob: f64,
    /// View 1 is passed through untouched.
    pub single_view: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop: CropPolicy {
                enabled: true,
                scale_min: 0.2,
                scale_max: 1.0,
            },
            hflip_prob: 0.5,
            color_jitter: ColorJitterPolicy {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                apply_prob: 0.8,
            },
            grayscale_prob: 0.2,
            blur: BlurPolicy {
                enabled: false,
                kernel_size: 3,
                sigma_min: 0.1,
                sigma_max: 2.0,
            },
            vector_noise_sigma: 0.5,
            vector_dropout_prob: 0.1,
            single_view: false,
        }
    }
}

impl AugmentPolicy {
    /// A policy that changes nothing.
    pub fn identity() -> Self {
        let mut p = Self::default();
        p.crop.enabled = false;
        p.hflip_prob = 0.0;
        p.color_jitter.apply_prob = 0.0;
        p.grayscale_prob = 0.0;
        p.blur.enabled = false;
        p.vector_noise_sigma = 0.0;
        p.vector_dropout_prob = 0.0;
        p
    }

    /// Same policy, but view 1 is the raw input.
    pub fn single_view_mode(mut self) -> Self {
        self.single_view = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("augment.hflip_prob", self.hflip_prob),
            ("augment.jitter.apply_prob", self.color_jitter.apply_prob),
            ("augment.grayscale_prob", self.grayscale_prob),
            ("augment.vector.dropout_prob", self.vector_dropout_prob),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(k, format!("probability {p} outside [0, 1]")));
            }
        }
        let c = &self.crop;
        if !(c.scale_min > 0.0 && c.scale_min <= c.scale_max && c.scale_max <= 1.0) {
            return Err(Error::config(
                "augment.crop.scale_min",
                "crop scale range must lie in (0, 1] with min <= max",
            ));
        }
        let j = &self.color_jitter;
        for (k, s) in [
            ("augment.jitter.brightness", j.brightness),
            ("augment.jitter.contrast", j.contrast),
            ("augment.jitter.saturation", j.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(k, "jitter strength must lie in [0, 1]"));
            }
        }
        let b = &self.blur;
        if b.kernel_size % 2 == 0 || !(b.sigma_min > 0.0 && b.sigma_min <= b.sigma_max) {
            return Err(Error::config(
                "augment.blur.kernel_size",
                "blur needs an odd kernel and 0 < sigma_min <= sigma_max",
            ));
        }
        if !(self.vector_noise_sigma >= 0.0) {
            return Err(Error::config("augment.vector.noise_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// Two augmented copies of one minibatch, each `[n, sample_len]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Vec<f64>,
    pub view2: Vec<f64>,
    pub n: usize,
}

/// Augments every sample of `batch` twice with fresh draws from `rng`.
pub fn make_views(
    batch: &[f64],
    shape: SampleShape,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ViewPair> {
    let len = shape.len();
    if batch.is_empty() || len == 0 || batch.len() % len != 0 {
        return Err(Error::Contract(format!(
            "batch of {} values is not a non-empty set of samples of length {len}",
            batch.len()
        )));
    }
    let view1 = if policy.single_view {
        batch.to_vec()
    } else {
        augment_batch(batch, shape, policy, rng)
    };
    let view2 = augment_batch(batch, shape, policy, rng);
    Ok(ViewPair {
        view1,
        view2,
        n: batch.len() / len,
    })
}

fn augment_batch(batch: &[f64], shape: SampleShape, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = batch.to_vec();
    for s in out.chunks_mut(shape.len()) {
        match shape {
            SampleShape::Vector(_) => augment_vector(s, policy, rng),
            SampleShape::Image(g) => augment_image(s, g, policy, rng),
        }
    }
    out
}

fn augment_vector(v: &mut [f64], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) {
    if policy.vector_noise_sigma > 0.0 {
        let n = Normal::new(0.0, policy.vector_noise_sigma).expect("validated sigma");
        v.iter_mut().for_each(|x| *x += n.sample(rng));
    }
    if policy.vector_dropout_prob > 0.0 {
        for x in v.iter_mut() {
            if rng.gen_bool(policy.vector_dropout_prob) {
                *x = 0.0;
            }
        }
    }
}

fn augment_image(img: &mut [f64], g: ImageGeom, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) {
    if policy.crop.enabled {
        random_resized_crop(img, g, policy.crop.scale_min, policy.crop.scale_max, rng);
    }
    if policy.hflip_prob > 0.0 && rng.gen_bool(policy.hflip_prob) {
        hflip(img, g);
    }
    let j = &policy.color_jitter;
    if j.apply_prob > 0.0 && rng.gen_bool(j.apply_prob) {
        let mut factor = |s: f64| if s > 0.0 { rng.gen_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let (b, c, s) = (factor(j.brightness), factor(j.contrast), factor(j.saturation));
        color_jitter(img, g, b, c, s);
    }
    if policy.grayscale_prob > 0.0 && rng.gen_bool(policy.grayscale_prob) {
        grayscale(img, g);
    }
    if policy.blur.enabled {
        let sigma = rng.gen_range(policy.blur.sigma_min..=policy.blur.sigma_max);
        gaussian_blur(img, g, policy.blur.kernel_size, sigma);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Mirrors every row.
pub fn hflip(img: &mut [f64], g: ImageGeom) {
    for row in img.chunks_mut(g.width) {
        row.reverse();
    }
}

/// ITU-R 601 luma replicated over three channels. Pixels that are already
/// grey are left as they are.
pub fn grayscale(img: &mut [f64], g: ImageGeom) {
    if g.channels != 3 {
        return;
    }
    let plane = g.height * g.width;
    for p in 0..plane {
        let (r, gr, b) = (img[p], img[plane + p], img[2 * plane + p]);
        if r == gr && gr == b {
            continue;
        }
        let y = 0.299 * r + 0.587 * gr + 0.114 * b;
        img[p] = y;
        img[plane + p] = y;
        img[2 * plane + p] = y;
    }
}

/// Brightness, contrast and saturation factors applied in that order.
pub fn color_jitter(img: &mut [f64], g: ImageGeom, brightness: f64, contrast: f64, saturation: f64) {
    img.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let plane = g.height * g.width;
    let luma = |img: &[f64], p: usize| {
        if g.channels == 3 {
            0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p]
        } else {
            img[p]
        }
    };
    let mean = (0..plane).map(|p| luma(img, p)).sum::<f64>() / plane as f64;
    img.iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    if g.channels == 3 {
        for p in 0..plane {
            let y = luma(img, p);
            for c in 0..3 {
                let v = &mut img[c * plane + p];
                *v = ((*v - y) * saturation + y).clamp(0.0, 1.0);
            }
        }
    }
}

/// Crops a random region covering `scale` of the area (aspect ratio in
/// [3/4, 4/3]) and resizes it back to the full size bilinearly.
pub fn random_resized_crop(img: &mut [f64], g: ImageGeom, scale_min: f64, scale_max: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (g.height as f64, g.width as f64);
    let scale = rng.gen_range(scale_min..=scale_max);
    let log_ratio = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let area = scale * h * w;
    let cw = ((area * ratio).sqrt().round()).clamp(1.0, w) as usize;
    let ch = ((area / ratio).sqrt().round()).clamp(1.0, h) as usize;
    let x0 = rng.gen_range(0..=g.width - cw);
    let y0 = rng.gen_range(0..=g.height - ch);
    let src = img.to_vec();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let s = &src[c * plane..(c + 1) * plane];
        for y in 0..g.height {
            let sy = (y0 as f64 + (y as f64 + 0.5) * ch as f64 / h - 0.5)
                .clamp(0.0, (g.height - 1) as f64);
            let (y_lo, fy) = (sy.floor() as usize, sy - sy.floor());
            let y_hi = (y_lo + 1).min(g.height - 1);
            for x in 0..g.width {
                let sx = (x0 as f64 + (x as f64 + 0.5) * cw as f64 / w - 0.5)
                    .clamp(0.0, (g.width - 1) as f64);
                let (x_lo, fx) = (sx.floor() as usize, sx - sx.floor());
                let x_hi = (x_lo + 1).min(g.width - 1);
                let at = |yy: usize, xx: usize| s[yy * g.width + xx];
                let top = at(y_lo, x_lo) * (1.0 - fx) + at(y_lo, x_hi) * fx;
                let bot = at(y_hi, x_lo) * (1.0 - fx) + at(y_hi, x_hi) * fx;
                img[c * plane + y * g.width + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &mut [f64], g: ImageGeom, kernel_size: usize, sigma: f64) {
    let r = (kernel_size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let plane = g.height * g.width;
    let mut tmp = vec![0.0; plane];
    for c in 0..g.channels {
        let p = &mut img[c * plane..(c + 1) * plane];
        for y in 0..g.height {
            for x in 0..g.width {
                tmp[y * g.width + x] = (-r..=r)
                    .zip(&k)
                    .map(|(d, &kv)| {
                        let xx = (x as isize + d).clamp(0, g.width as isize - 1) as usize;
                        kv * p[y * g.width + xx]
                    })
                    .sum();
            }
        }
        for y in 0..g.height {
            for x in 0..g.width {
                p[y * g.width + x] = (-r..=r)
                    .zip(&k)
                    .map(|(d, &kv)| {
                        let yy = (y as isize + d).clamp(0, g.height as isize - 1) as usize;
                        kv * tmp[yy * g.width + x]
                    })
                    .sum();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    const G: ImageGeom = ImageGeom {
        channels: 3,
        height: 8,
        width: 8,
    };

    fn image(seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, 0);
        (0..G.len()).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn identity_policy_copies_input() {
        let img = image(1);
        let mut batch = img.clone();
        batch.extend(image(2));
        let v = make_views(&batch, SampleShape::Image(G), &AugmentPolicy::identity(), &mut rng_for(0, 0)).unwrap();
        assert_eq!(v.view1, batch);
        assert_eq!(v.view2, batch);
        assert_eq!(v.n, 2);

        let vecs = vec![0.5, -3.0, 2.0, 1.0];
        let v = make_views(&vecs, SampleShape::Vector(2), &AugmentPolicy::identity(), &mut rng_for(0, 0)).unwrap();
        assert_eq!(v.view1, vecs);
    }

    #[test]
    fn crop_keeps_size_and_range() {
        let src = image(3);
        for seed in 0..50 {
            let mut out = src.clone();
            random_resized_crop(&mut out, G, 0.2, 1.0, &mut rng_for(seed, 9));
            assert_eq!(out.len(), src.len());
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hflip_is_involution_and_grayscale_idempotent() {
        let img = image(4);
        let mut x = img.clone();
        hflip(&mut x, G);
        assert_ne!(x, img);
        hflip(&mut x, G);
        assert_eq!(x, img);

        let mut g1 = img.clone();
        grayscale(&mut g1, G);
        let mut g2 = g1.clone();
        grayscale(&mut g2, G);
        assert_eq!(g1, g2);
    }

    #[test]
    fn views_are_deterministic_and_in_range() {
        let batch: Vec<f64> = [image(5), image(6)].concat();
        let mut p = AugmentPolicy::default();
        p.blur.enabled = true;
        let a = make_views(&batch, SampleShape::Image(G), &p, &mut rng_for(11, 0)).unwrap();
        let b = make_views(&batch, SampleShape::Image(G), &p, &mut rng_for(11, 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.view1, a.view2);
        assert!(a.view1.iter().chain(&a.view2).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_batch_rejected() {
        let r = make_views(&[], SampleShape::Vector(3), &AugmentPolicy::default(), &mut rng_for(0, 0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn single_view_flag_only_touches_view_one() {
        let batch: Vec<f64> = image(7);
        let p = AugmentPolicy::default();
        let dual = make_views(&batch, SampleShape::Image(G), &p, &mut rng_for(2, 0)).unwrap();
        let single = make_views(&batch, SampleShape::Image(G), &p.clone().single_view_mode(), &mut rng_for(2, 0)).unwrap();
        assert_eq!(single.view1, batch);
        assert_ne!(dual.view1, batch);
        // View 2 of the single-view run consumes the stream from the start.
        let alone = make_views(&batch, SampleShape::Image(G), &p.single_view_mode(), &mut rng_for(2, 0)).unwrap();
        assert_eq!(alone.view2, single.view2);
    }

    #[test]
    fn single_view_change_rate_matches_flip_probability() {
        let img = image(8);
        let mut p = AugmentPolicy::identity().single_view_mode();
        p.hflip_prob = 0.3;
        let mut rng = rng_for(77, 0);
        let mut changed = 0;
        for _ in 0..1000 {
            let v = make_views(&img, SampleShape::Image(G), &p, &mut rng).unwrap();
            assert_eq!(v.view1, img);
            if v.view2 != img {
                changed += 1;
            }
        }
        // Binomial(1000, 0.3): sd ≈ 14.5, allow ~4 sd.
        assert!((240..=360).contains(&changed), "{changed}");
    }

    #[test]
    fn validation() {
        let mut p = AugmentPolicy::default();
        p.hflip_prob = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::default();
        p.crop.scale_min = 0.0;
        assert!(p.validate().is_err());
        assert!(AugmentPolicy::default().validate().is_ok());
    }
}
