use crate::model::IntrinsicSet;
use crate::tensor::Tensor;

/// Lower and upper ground-truth albedo bounds for a supervised pixel.
pub const ALBEDO_VALID_RANGE: (f64, f64) = (0.01, 0.99);

/// Per-view, per-pixel supervision mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    views: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new(views: usize, height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), views * height * width, "mask length");
        Self {
            views,
            height,
            width,
            bits,
        }
    }

    pub fn full(views: usize, height: usize, width: usize) -> Self {
        Self::new(views, height, width, vec![true; views * height * width])
    }

    pub fn from_fn(
        views: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut bits = Vec::with_capacity(views * height * width);
        for v in 0..views {
            for y in 0..height {
                for x in 0..width {
                    bits.push(f(v, y, x));
                }
            }
        }
        Self::new(views, height, width, bits)
    }

    /// Pixels whose ground-truth albedo lies inside [`ALBEDO_VALID_RANGE`]
    /// in every channel, intersected with `base` when given.
    pub fn from_albedo(gt: &IntrinsicSet, base: Option<&ValidityMask>) -> Self {
        let (n, h, w) = (gt.num_views(), gt.height(), gt.width());
        let a = gt.albedo.data();
        let plane = h * w;
        let (lo, hi) = ALBEDO_VALID_RANGE;
        Self::from_fn(n, h, w, |v, y, x| {
            let p = y * w + x;
            let in_range = (0..3).all(|c| {
                let val = a[(v * 3 + c) * plane + p];
                (lo..=hi).contains(&val)
            });
            in_range && base.map_or(true, |b| b.get(v, y, x))
        })
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, v: usize, y: usize, x: usize) -> bool {
        self.bits[(v * self.height + y) * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        assert_eq!(
            (self.views, self.height, self.width),
            (other.views, other.height, other.width)
        );
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Self::new(self.views, self.height, self.width, bits)
    }

    /// Views `start..start + len`.
    pub fn narrow(&self, start: usize, len: usize) -> ValidityMask {
        let plane = self.height * self.width;
        Self::new(
            len,
            self.height,
            self.width,
            self.bits[start * plane..(start + len) * plane].to_vec(),
        )
    }

    /// Half-resolution mask: a coarse pixel is valid only when every fine
    /// pixel in its 2×2 footprint is.
    pub fn downsample2(&self) -> ValidityMask {
        let (h, w) = (self.height / 2, self.width / 2);
        Self::from_fn(self.views, h, w, |v, y, x| {
            self.get(v, 2 * y, 2 * x)
                && self.get(v, 2 * y + 1, 2 * x)
                && self.get(v, 2 * y, 2 * x + 1)
                && self.get(v, 2 * y + 1, 2 * x + 1)
        })
    }

    /// 0/1 weights broadcast to `[N, channels, H, W]`.
    pub fn weights(&self, channels: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.views * channels * plane);
        for v in 0..self.views {
            let bits = &self.bits[v * plane..(v + 1) * plane];
            for _ in 0..channels {
                data.extend(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        Tensor::new(&[self.views, channels, self.height, self.width], data)
            .expect("mask extents are positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_requires_whole_footprint() {
        let m = ValidityMask::from_fn(1, 4, 4, |_, y, x| !(y == 0 && x == 3));
        let d = m.downsample2();
        assert_eq!(d.bits(), &[true, false, true, true]);
    }

    #[test]
    fn weights_broadcast_over_channels() {
        let m = ValidityMask::new(1, 1, 2, vec![true, false]);
        assert_eq!(m.weights(2).data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
