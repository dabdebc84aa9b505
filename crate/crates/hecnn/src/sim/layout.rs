use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// HW slot layout: one channel per ciphertext, the image stored row-major
/// with row pitch `grid_w`, framed by `margin_rows` zero rows above and
/// below. After strided operators the logical pixels sit `gap` grid cells
/// apart and the remaining cells are gaps. Ensemble replicas occupy
/// consecutive regions of `region` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub slots: usize,
    pub replicas: usize,
    pub region: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub margin_rows: usize,
    pub height: usize,
    pub width: usize,
    pub gap: usize,
    /// Non-logical slots may hold nonzero junk.
    #[serde(default)]
    pub dirty: bool,
}

impl SlotLayout {
    pub fn for_image(height: usize, width: usize, slots: usize, replicas: usize, margin_rows: usize) -> Result<Self> {
        if replicas == 0 || height == 0 || width == 0 {
            return Err(Error::Layout("image dimensions and replica count must be >= 1".into()));
        }
        let per = (height + 2 * margin_rows) * width;
        let region = slots / replicas;
        if per > region {
            return Err(Error::Capacity { need: per * replicas, have: slots });
        }
        Ok(Self {
            slots,
            replicas,
            region,
            grid_w: width,
            grid_h: height,
            margin_rows,
            height,
            width,
            gap: 1,
            dirty: false,
        })
    }

    /// Region-relative slot of logical pixel `(h, w)`.
    #[inline]
    pub fn rel_slot(&self, h: usize, w: usize) -> usize {
        (self.margin_rows + h * self.gap) * self.grid_w + w * self.gap
    }

    pub fn slot(&self, replica: usize, h: usize, w: usize) -> usize {
        replica * self.region + self.rel_slot(h, w)
    }

    /// Region-relative slots of every logical pixel, row-major.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.height).flat_map(|h| (0..self.width).map(move |w| self.rel_slot(h, w))).collect()
    }

    /// `true` for slots that hold no logical pixel of any replica.
    pub fn gap_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.slots];
        for r in 0..self.replicas {
            for p in self.positions() {
                m[r * self.region + p] = false;
            }
        }
        m
    }

    /// Layout after subsampling by `factor` down to `height x width`.
    pub fn subsampled(&self, factor: usize, height: usize, width: usize) -> Self {
        Self { height, width, gap: self.gap * factor, dirty: false, ..self.clone() }
    }

    /// Checks that every logical pixel lies inside the image rows of the grid.
    pub fn check(&self) -> Result<()> {
        let last_row = (self.height - 1) * self.gap;
        let last_col = (self.width - 1) * self.gap;
        if last_row >= self.grid_h || last_col >= self.grid_w {
            return Err(Error::Layout(format!(
                "{}x{} pixels at gap {} overflow the {}x{} grid",
                self.height, self.width, self.gap, self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_mapping() {
        let l = SlotLayout::for_image(3, 3, 4096, 1, 0).unwrap();
        assert_eq!(l.positions(), (0..9).collect::<Vec<_>>());
        let gaps = l.gap_mask();
        assert!(gaps[..9].iter().all(|g| !g));
        assert!(gaps[9..].iter().all(|&g| g));
    }

    #[test]
    fn replicas_and_capacity() {
        let l = SlotLayout::for_image(3, 3, 32, 2, 0).unwrap();
        assert_eq!(l.slot(1, 0, 0), 16);
        assert_eq!(l.slot(1, 2, 2), 24);
        assert!(matches!(SlotLayout::for_image(3, 3, 16, 2, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn stride_two_positions() {
        let l = SlotLayout::for_image(4, 4, 64, 1, 0).unwrap().subsampled(2, 2, 2);
        assert_eq!(l.positions(), vec![0, 2, 8, 10]);
        l.check().unwrap();
    }

    #[test]
    fn mapping_is_injective() {
        let l = SlotLayout::for_image(5, 4, 256, 3, 2).unwrap().subsampled(2, 3, 2);
        let mut all: Vec<usize> =
            (0..3).flat_map(|r| l.positions().into_iter().map(move |p| r * l.region + p)).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
