use serde::{Deserialize, Serialize};

use super::{replicate_and_pad, DomainDataset};

/// The parity trigger: every pixel whose row or column index is even gets
/// `increment` added to channel `channel`, saturating at 255.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub increment: u8,
    #[serde(default)]
    pub channel: usize,
}

impl PatchSpec {
    /// `v = 20`, the setting for simple digit images.
    pub const DIGITS: PatchSpec = PatchSpec {
        increment: 20,
        channel: 0,
    };

    pub fn new(increment: u8) -> Self {
        PatchSpec { increment, channel: 0 }
    }

    pub fn is_identity(&self) -> bool {
        self.increment == 0
    }

    /// Whether pixel `(row, col)` is touched. Depends on position only.
    pub fn covers(row: usize, col: usize) -> bool {
        row.is_multiple_of(2) || col.is_multiple_of(2)
    }

    /// Patches one `H×W×C` image in place.
    pub fn apply_to(&self, image: &mut [u8], height: usize, width: usize, channels: usize) {
        if self.increment == 0 {
            return;
        }
        for row in 0..height {
            for col in 0..width {
                if Self::covers(row, col) {
                    let px = &mut image[(row * width + col) * channels + self.channel];
                    *px = px.saturating_add(self.increment);
                }
            }
        }
    }

    pub fn label(&self) -> String {
        format!("patch(v={},c={})", self.increment, self.channel)
    }
}

/// Applies the patch to every image. Single-channel datasets are first
/// replicated to three channels (geometry otherwise unchanged).
pub fn apply_patch(dataset: &DomainDataset, patch: &PatchSpec) -> DomainDataset {
    let mut out = if dataset.shape.channels == 1 {
        replicate_and_pad(dataset, dataset.shape.height, dataset.shape.width)
    } else {
        dataset.clone()
    };
    let shape = out.shape;
    assert!(
        patch.channel < shape.channels,
        "patch channel {} out of range for {} channels",
        patch.channel,
        shape.channels
    );
    let pixels = shape.pixels();
    for image in out.images_mut().chunks_exact_mut(pixels) {
        patch.apply_to(image, shape.height, shape.width, shape.channels);
    }
    out.name = format!("{}+{}", dataset.name, patch.label());
    out
}
