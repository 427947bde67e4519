//! Weak and strong view generation with replayable transform records.
//!
//! The weak view (resize, crop, flip) is what the teacher sees; strong views
//! are derived from the weak view, so pseudo-labels computed on the weak view
//! line up with strong-view pixels except inside a CutMix box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    resize_bilinear, resize_nearest, BinaryMask, Grid, ImageTensor, LabelMask, Tensor3,
    IGNORE_LABEL,
};

pub const WEAK_SCALE_RANGE: (f64, f64) = (0.75, 1.25);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakRecord {
    /// Resize factor applied before cropping.
    pub scale: f64,
    /// Size after resizing, before padding.
    pub resized: (usize, usize),
    /// `(top, left, crop_h, crop_w)` in the padded, resized frame.
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
}

impl WeakRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            scale: 1.0,
            resized: (height, width),
            crop: (0, 0, height, width),
            flip: false,
        }
    }

    /// Builds a record for an explicit `scale`, placing the crop at `(top, left)`.
    pub fn with_scale(
        src: (usize, usize),
        scale: f64,
        crop_size: usize,
        top: usize,
        left: usize,
        flip: bool,
    ) -> Result<Self> {
        let resized = resized_dims(src, scale);
        let padded = (resized.0.max(crop_size), resized.1.max(crop_size));
        if top + crop_size > padded.0 || left + crop_size > padded.1 {
            return Err(Error::InvalidArgument(format!(
                "crop at ({top},{left}) of size {crop_size} exceeds frame {padded:?}"
            )));
        }
        Ok(Self {
            scale,
            resized,
            crop: (top, left, crop_size, crop_size),
            flip,
        })
    }

    pub fn sample<R: Rng + ?Sized>(src: (usize, usize), crop_size: usize, rng: &mut R) -> Self {
        let scale = rng.random_range(WEAK_SCALE_RANGE.0..=WEAK_SCALE_RANGE.1);
        let resized = resized_dims(src, scale);
        let padded = (resized.0.max(crop_size), resized.1.max(crop_size));
        let top = rng.random_range(0..=padded.0 - crop_size);
        let left = rng.random_range(0..=padded.1 - crop_size);
        let flip = rng.random_bool(0.5);
        Self {
            scale,
            resized,
            crop: (top, left, crop_size, crop_size),
            flip,
        }
    }

    pub fn is_identity(&self, src: (usize, usize)) -> bool {
        self.resized == src && self.crop == (0, 0, src.0, src.1) && !self.flip
    }

    fn place<T: Copy>(&self, resized: &[T], channels: usize, fill: T) -> Vec<T> {
        let (rh, rw) = self.resized;
        let (top, left, ch, cw) = self.crop;
        let mut out = Vec::with_capacity(channels * ch * cw);
        for c in 0..channels {
            for y in 0..ch {
                let sy = top + y;
                for x in 0..cw {
                    let xx = if self.flip { cw - 1 - x } else { x };
                    let sx = left + xx;
                    out.push(if sy < rh && sx < rw {
                        resized[(c * rh + sy) * rw + sx]
                    } else {
                        fill
                    });
                }
            }
        }
        out
    }

    pub fn apply_image(&self, img: &ImageTensor) -> ImageTensor {
        let resized = resize_bilinear(img, self.resized.0, self.resized.1);
        let (_, _, ch, cw) = self.crop;
        let data = self.place(&resized.data, img.channels, 0.0f32);
        Tensor3::from_vec(img.channels, ch, cw, data).expect("crop shape")
    }

    pub fn apply_label(&self, label: &LabelMask) -> LabelMask {
        let resized = resize_nearest(label, self.resized.0, self.resized.1);
        let (_, _, ch, cw) = self.crop;
        let data = self.place(&resized.data, 1, IGNORE_LABEL);
        Grid::from_vec(ch, cw, data).expect("crop shape")
    }

    /// 1 where the output pixel comes from the source image, 0 on padding.
    pub fn valid_mask(&self) -> BinaryMask {
        let (rh, rw) = self.resized;
        let ones = vec![1u8; rh * rw];
        let (_, _, ch, cw) = self.crop;
        Grid::from_vec(ch, cw, self.place(&ones, 1, 0u8)).expect("crop shape")
    }
}

fn resized_dims(src: (usize, usize), scale: f64) -> (usize, usize) {
    let r = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (r(src.0), r(src.1))
}

/// Resize/crop/flip `img` (and `label` with nearest-neighbour semantics).
/// Short frames are padded with 0 in the image and 255 in the label.
pub fn weak_augment<R: Rng + ?Sized>(
    img: &ImageTensor,
    label: Option<&LabelMask>,
    crop_size: usize,
    rng: &mut R,
) -> Result<(ImageTensor, Option<LabelMask>, WeakRecord)> {
    if let Some(l) = label {
        if l.height != img.height || l.width != img.width {
            return Err(Error::ShapeMismatch(format!(
                "label {}x{} vs image {}x{}",
                l.height, l.width, img.height, img.width
            )));
        }
    }
    let rec = WeakRecord::sample((img.height, img.width), crop_size, rng);
    let view = rec.apply_image(img);
    let lab = label.map(|l| rec.apply_label(l));
    Ok((view, lab, rec))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongPolicy {
    pub p_jitter: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub p_gray: f64,
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub cutmix: bool,
    pub p_cutmix: f64,
}

impl Default for StrongPolicy {
    fn default() -> Self {
        Self {
            p_jitter: 0.8,
            brightness: (0.5, 1.5),
            contrast: (0.5, 1.5),
            p_gray: 0.2,
            p_blur: 0.5,
            blur_sigma: (0.1, 1.0),
            cutmix: false,
            p_cutmix: 0.5,
        }
    }
}

impl StrongPolicy {
    /// Every operation disabled.
    pub fn none() -> Self {
        Self {
            p_jitter: 0.0,
            p_gray: 0.0,
            p_blur: 0.0,
            cutmix: false,
            p_cutmix: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a probability, got {p}")))
            }
        };
        prob("p_jitter", self.p_jitter)?;
        prob("p_gray", self.p_gray)?;
        prob("p_blur", self.p_blur)?;
        prob("p_cutmix", self.p_cutmix)?;
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixRecord {
    pub partner_index: usize,
    /// `(top, left, h, w)`.
    pub bbox: (usize, usize, usize, usize),
}

impl CutMixRecord {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (t, l, h, w) = self.bbox;
        y >= t && y < t + h && x >= l && x < l + w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongRecord {
    /// `(brightness_scale, contrast_scale)`; `(1, 1)` when jitter was skipped.
    pub jitter: (f64, f64),
    pub to_gray: bool,
    /// 0 means no blur.
    pub blur_sigma: f64,
    pub cutmix: Option<CutMixRecord>,
}

impl StrongRecord {
    pub fn identity() -> Self {
        Self {
            jitter: (1.0, 1.0),
            to_gray: false,
            blur_sigma: 0.0,
            cutmix: None,
        }
    }

    pub fn is_appearance_identity(&self) -> bool {
        self.jitter == (1.0, 1.0) && !self.to_gray && self.blur_sigma == 0.0
    }

    /// Replays the record on `view`. `partner` must be given when the record carries CutMix.
    pub fn apply(&self, view: &ImageTensor, partner: Option<&ImageTensor>) -> Result<ImageTensor> {
        let mut out = view.clone();
        if let Some(cm) = &self.cutmix {
            let partner = partner.ok_or_else(|| {
                Error::InvalidArgument("CutMix record replayed without partner view".into())
            })?;
            if !partner.same_shape(view) {
                return Err(Error::ShapeMismatch("CutMix partner view shape".into()));
            }
            let (t, l, h, w) = cm.bbox;
            for c in 0..view.channels {
                for y in t..t + h {
                    for x in l..l + w {
                        *out.at_mut(c, y, x) = partner.at(c, y, x);
                    }
                }
            }
        }
        let (b, k) = self.jitter;
        if (b, k) != (1.0, 1.0) {
            apply_jitter(&mut out, b, k);
        }
        if self.to_gray {
            apply_grayscale(&mut out);
        }
        if self.blur_sigma > 0.0 {
            out = gaussian_blur(&out, self.blur_sigma);
        }
        Ok(out)
    }
}

/// Batch context for CutMix: the sample's own index and every weak view in the batch.
#[derive(Debug, Clone, Copy)]
pub struct CutMixBatch<'a> {
    pub self_index: usize,
    pub views: &'a [ImageTensor],
}

pub fn sample_strong_record<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
    policy: &StrongPolicy,
    batch: Option<CutMixBatch<'_>>,
) -> StrongRecord {
    let mut rec = StrongRecord::identity();
    if rng.random_bool(policy.p_jitter) {
        rec.jitter = (
            rng.random_range(policy.brightness.0..=policy.brightness.1),
            rng.random_range(policy.contrast.0..=policy.contrast.1),
        );
    }
    rec.to_gray = rng.random_bool(policy.p_gray);
    if rng.random_bool(policy.p_blur) {
        rec.blur_sigma = rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
    }
    if policy.cutmix {
        if let Some(b) = batch.filter(|b| b.views.len() >= 2) {
            if rng.random_bool(policy.p_cutmix) {
                let mut partner = rng.random_range(0..b.views.len() - 1);
                if partner >= b.self_index {
                    partner += 1;
                }
                rec.cutmix = Some(CutMixRecord {
                    partner_index: partner,
                    bbox: sample_box(height, width, rng),
                });
            }
        }
    }
    rec
}

/// Box covering between 10% and 50% of the frame.
fn sample_box<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    loop {
        let frac = rng.random_range(0.1..=0.5);
        let ratio: f64 = rng.random_range(0.5..=2.0);
        let bh = ((frac * area * ratio).sqrt().round() as usize).clamp(1, h);
        let bw = ((frac * area / ratio).sqrt().round() as usize).clamp(1, w);
        let got = (bh * bw) as f64;
        if got >= 0.1 * area && got <= 0.5 * area {
            let top = rng.random_range(0..=h - bh);
            let left = rng.random_range(0..=w - bw);
            return (top, left, bh, bw);
        }
    }
}

/// Appearance perturbation of a weak view, optionally CutMix-ed with a batch partner.
pub fn strong_augment<R: Rng + ?Sized>(
    view: &ImageTensor,
    rng: &mut R,
    policy: &StrongPolicy,
    batch: Option<CutMixBatch<'_>>,
) -> Result<(ImageTensor, StrongRecord)> {
    let rec = sample_strong_record(view.height, view.width, rng, policy, batch);
    let partner = rec
        .cutmix
        .as_ref()
        .and_then(|cm| batch.map(|b| &b.views[cm.partner_index]));
    let out = rec.apply(view, partner)?;
    Ok((out, rec))
}

fn apply_jitter(img: &mut ImageTensor, brightness: f64, contrast: f64) {
    for v in img.data.iter_mut() {
        *v = ((*v as f64) * brightness).clamp(0.0, 1.0) as f32;
    }
    if contrast != 1.0 {
        let n = img.plane_len();
        let mean = (0..n)
            .map(|i| luma(img, i))
            .sum::<f64>()
            / n as f64;
        for v in img.data.iter_mut() {
            *v = ((*v as f64 - mean) * contrast + mean).clamp(0.0, 1.0) as f32;
        }
    }
}

fn luma(img: &ImageTensor, i: usize) -> f64 {
    if img.channels < 3 {
        return img.data[i] as f64;
    }
    let n = img.plane_len();
    0.299 * img.data[i] as f64 + 0.587 * img.data[n + i] as f64 + 0.114 * img.data[2 * n + i] as f64
}

fn apply_grayscale(img: &mut ImageTensor) {
    let n = img.plane_len();
    for i in 0..n {
        let y = luma(img, i) as f32;
        for c in 0..img.channels {
            img.data[c * n + i] = y;
        }
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = img.clone();
    let mut tmp = vec![0.0f64; img.plane_len()];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += wt * src[(y * w + xx) as usize] as f64;
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += wt * tmp[(yy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Aligns weak-view pseudo-labels with a strong view. Without CutMix this is
/// the identity; with CutMix the box takes the partner's labels and confidences.
pub fn align_pseudo(
    pseudo: &LabelMask,
    conf: &BinaryMask,
    own_record: &StrongRecord,
    partner_pseudo: &LabelMask,
    partner_conf: &BinaryMask,
) -> Result<(LabelMask, BinaryMask)> {
    if !pseudo.same_shape(conf) || !pseudo.same_shape(partner_pseudo) || !pseudo.same_shape(partner_conf) {
        return Err(Error::ShapeMismatch(
            "pseudo-label, confidence and partner masks must share a shape".into(),
        ));
    }
    let Some(cm) = &own_record.cutmix else {
        return Ok((pseudo.clone(), conf.clone()));
    };
    let (t, l, h, w) = cm.bbox;
    if t + h > pseudo.height || l + w > pseudo.width {
        return Err(Error::ShapeMismatch(format!(
            "CutMix box {:?} outside {}x{} mask",
            cm.bbox, pseudo.height, pseudo.width
        )));
    }
    let mut lab = pseudo.clone();
    let mut cf = conf.clone();
    for y in t..t + h {
        for x in l..l + w {
            lab.set(y, x, partner_pseudo.at(y, x));
            cf.set(y, x, partner_conf.at(y, x));
        }
    }
    Ok((lab, cf))
}
