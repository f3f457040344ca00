//! Procedural ten-class glyph domains.
//!
//! Each class is a seven-segment digit rendered with random geometry (box
//! size, position, slant, stroke width) and random foreground/background
//! intensities. The shifted domain applies a deterministic, label-preserving
//! transform family on top: background tint, additive stripe texture and a
//! channel permutation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, ImageShape};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 10;

const FG_MIN: f64 = 160.0;
const FG_MAX: f64 = 255.0;
const BG_MAX: f64 = 40.0;
const BG_NOISE: f64 = 8.0;
/// Minimum luminance gap between glyph and background after shifting.
const MIN_CONTRAST: f64 = 40.0;

/// Segments a..g as endpoints in the unit glyph box (x right, y down).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((1.0, 0.0), (1.0, 0.5)),
    ((1.0, 0.5), (1.0, 1.0)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.5), (0.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.5)),
    ((0.0, 0.5), (1.0, 0.5)),
];

/// Active segments per digit, bit i = segment i (a = bit 0).
const DIGITS: [u8; 10] = [
    0b011_1111,
    0b000_0110,
    0b101_1011,
    0b100_1111,
    0b110_0110,
    0b110_1101,
    0b111_1101,
    0b000_0111,
    0b111_1111,
    0b110_1111,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tint {
    pub color: [u8; 3],
    /// Blend weight toward `color`, in `[0, 1]`.
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Peak stripe amplitude in intensity units.
    pub amplitude: f64,
    /// Stripe period in pixels.
    pub period: f64,
}

/// Transform family for the shifted domain. The default is the identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tint: Option<Tint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<Texture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_permutation: Option<[usize; 3]>,
}

impl SyntheticShiftSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Strong magenta-ish background tint plus faint stripes.
    pub fn strong_tint() -> Self {
        SyntheticShiftSpec {
            tint: Some(Tint {
                color: [210, 60, 150],
                strength: 0.75,
            }),
            texture: Some(Texture {
                amplitude: 10.0,
                period: 5.0,
            }),
            channel_permutation: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.tint.is_none_or(|t| t.strength == 0.0)
            && self.texture.is_none_or(|t| t.amplitude == 0.0)
            && self.channel_permutation.is_none_or(|p| p == [0, 1, 2])
    }

    /// Rejects parameters under which glyph and background could become
    /// indistinguishable.
    pub fn validate(&self) -> Result<()> {
        let reject = |msg: String| Err(Error::ShiftDestroysLabels(msg));
        let mut bg_lo = 0.0;
        let mut bg_hi = BG_MAX + BG_NOISE;
        if let Some(t) = self.tint {
            if !(0.0..=1.0).contains(&t.strength) {
                return reject(format!("tint strength {} outside [0,1]", t.strength));
            }
            let lum = luminance(t.color.map(f64::from));
            bg_lo = (1.0 - t.strength) * bg_lo + t.strength * lum;
            bg_hi = (1.0 - t.strength) * bg_hi + t.strength * lum;
        }
        let mut amplitude = 0.0;
        if let Some(t) = self.texture {
            if !(t.amplitude >= 0.0) || !(t.period >= 2.0) {
                return reject(format!(
                    "texture needs amplitude >= 0 and period >= 2 px, got {} / {}",
                    t.amplitude, t.period
                ));
            }
            amplitude = t.amplitude;
        }
        if let Some(p) = self.channel_permutation {
            let mut sorted = p;
            sorted.sort_unstable();
            if sorted != [0, 1, 2] {
                return reject(format!("{p:?} is not a permutation of the channels"));
            }
        }
        let contrast = (FG_MIN - bg_hi).max(bg_lo - FG_MAX);
        let needed = MIN_CONTRAST + 2.0 * amplitude;
        if contrast < needed {
            return reject(format!(
                "glyph/background luminance gap {contrast:.1} below required {needed:.1}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSizes {
    pub image_size: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for SyntheticSizes {
    /// 8000 train / 1000 test per domain, 16×16 RGB.
    fn default() -> Self {
        SyntheticSizes {
            image_size: 16,
            train: 8000,
            test: 1000,
        }
    }
}

/// Returns `(source, shifted)`, each holding `train + test` samples with the
/// first `train` intended for training. Source is tagged 0, shifted 1. Both
/// are reproducible from `seed` and drawn from independent random streams.
pub fn make_synthetic_domain_pair(
    seed: u64,
    shift: &SyntheticShiftSpec,
    sizes: &SyntheticSizes,
) -> Result<(DomainDataset, DomainDataset)> {
    shift.validate()?;
    if sizes.image_size < 8 {
        return Err(Error::InvalidSpec(format!(
            "glyph images need at least 8 px, got {}",
            sizes.image_size
        )));
    }
    let source = render_domain(seed, 0, &SyntheticShiftSpec::identity(), sizes, "synthetic-source")?;
    let shifted = render_domain(seed, 1, shift, sizes, "synthetic-shifted")?;
    Ok((source, shifted))
}

fn render_domain(
    seed: u64,
    stream: u64,
    shift: &SyntheticShiftSpec,
    sizes: &SyntheticSizes,
    name: &str,
) -> Result<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let total = sizes.train + sizes.test;
    let mut labels: Vec<usize> = Vec::with_capacity(total);
    // Balance train and test separately.
    for part in [sizes.train, sizes.test] {
        let mut chunk: Vec<usize> = (0..part).map(|i| i % NUM_CLASSES).collect();
        chunk.shuffle(&mut rng);
        labels.extend(chunk);
    }
    let side = sizes.image_size;
    let shape = ImageShape {
        height: side,
        width: side,
        channels: 3,
    };
    let mut images = Vec::with_capacity(total * shape.pixels());
    for &label in &labels {
        images.extend(render_image(label, side, shift, &mut rng));
    }
    DomainDataset::new(name, shape, NUM_CLASSES, stream as u8, images, labels)
}

fn render_image(label: usize, side: usize, shift: &SyntheticShiftSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = side as f64;
    let gw = rng.random_range(0.35..0.5) * s;
    let gh = rng.random_range(0.6..0.75) * s;
    let cx = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let slant = rng.random_range(-0.2..0.2);
    let thickness = rng.random_range(0.08..0.12) * s;
    let base_fg: f64 = rng.random_range(170.0..FG_MAX);
    let fg: [f64; 3] = std::array::from_fn(|_| (base_fg + rng.random_range(-20.0..20.0)).clamp(FG_MIN, FG_MAX));
    let bg: f64 = rng.random_range(0.0..BG_MAX);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let to_pixel = |(u, v): (f64, f64)| -> (f64, f64) {
        let x = cx + (u - 0.5) * gw + slant * (v - 0.5) * gh;
        let y = cy + (v - 0.5) * gh;
        (x, y)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| DIGITS[label] >> i & 1 == 1)
        .map(|(_, &(a, b))| (to_pixel(a), to_pixel(b)))
        .collect();

    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let dist = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let ink = (thickness / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            let stripe = shift.texture.map_or(0.0, |t| {
                let proj = p.0 * theta.cos() + p.1 * theta.sin();
                t.amplitude * (std::f64::consts::TAU * proj / t.period + phase).sin()
            });
            let mut px = [0.0; 3];
            for (c, value) in px.iter_mut().enumerate() {
                let mut back = bg + rng.random_range(-BG_NOISE..BG_NOISE);
                if let Some(t) = shift.tint {
                    back = (1.0 - t.strength) * back + t.strength * f64::from(t.color[c]);
                }
                *value = back * (1.0 - ink) + fg[c] * ink + stripe;
            }
            let perm = shift.channel_permutation.unwrap_or([0, 1, 2]);
            for c in 0..3 {
                out.push(px[perm[c]].round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSizes {
        SyntheticSizes {
            image_size: 16,
            train: 100,
            test: 20,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_synthetic_domain_pair(7, &SyntheticShiftSpec::strong_tint(), &small()).unwrap();
        let b = make_synthetic_domain_pair(7, &SyntheticShiftSpec::strong_tint(), &small()).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_domain_pair(8, &SyntheticShiftSpec::strong_tint(), &small()).unwrap();
        assert_ne!(a.0.images(), c.0.images());
    }

    #[test]
    fn pair_shares_classes_and_geometry_with_disjoint_draws() {
        let (src, shifted) = make_synthetic_domain_pair(1, &SyntheticShiftSpec::identity(), &small()).unwrap();
        assert_eq!(src.num_classes, shifted.num_classes);
        assert_eq!(src.shape, shifted.shape);
        assert_eq!(src.len(), 120);
        assert_ne!(src.images(), shifted.images());
        assert_eq!((src.domain_tag, shifted.domain_tag), (0, 1));
        let (train, test) = src.split_at(100);
        train.check_balance().unwrap();
        test.check_balance().unwrap();
    }

    #[test]
    fn tint_raises_background_toward_color() {
        let (src, shifted) = make_synthetic_domain_pair(3, &SyntheticShiftSpec::strong_tint(), &small()).unwrap();
        // Corner pixels are background for every glyph.
        let corner = |ds: &DomainDataset| {
            (0..ds.len()).map(|i| f64::from(ds.image(i)[0])).sum::<f64>() / ds.len() as f64
        };
        assert!(corner(&src) < 40.0);
        assert!(corner(&shifted) > 120.0);
    }

    #[test]
    fn rejects_label_destroying_shifts() {
        let washout = SyntheticShiftSpec {
            tint: Some(Tint {
                color: [200, 200, 200],
                strength: 1.0,
            }),
            ..Default::default()
        };
        assert!(matches!(washout.validate(), Err(Error::ShiftDestroysLabels(_))));
        let loud = SyntheticShiftSpec {
            texture: Some(Texture {
                amplitude: 80.0,
                period: 4.0,
            }),
            ..Default::default()
        };
        assert!(loud.validate().is_err());
        let bad_perm = SyntheticShiftSpec {
            channel_permutation: Some([0, 0, 1]),
            ..Default::default()
        };
        assert!(bad_perm.validate().is_err());
        SyntheticShiftSpec::strong_tint().validate().unwrap();
        assert!(SyntheticShiftSpec::identity().is_identity());
    }

    #[test]
    fn every_digit_has_ink() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for label in 0..NUM_CLASSES {
            let img = render_image(label, 16, &SyntheticShiftSpec::identity(), &mut rng);
            assert!(img.iter().any(|&v| v > 150), "digit {label}");
        }
    }
}
