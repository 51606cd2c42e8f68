//! Grid transforms used as desk-scale stand-ins for orthogonal viewing planes.

use serde::{Deserialize, Serialize};

use crate::datasets::{Image, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSpec {
    Identity,
    Transpose,
    FlipH,
    FlipV,
    Rot180,
}

impl ViewSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ViewSpec::Identity => "identity",
            ViewSpec::Transpose => "transpose",
            ViewSpec::FlipH => "flip_h",
            ViewSpec::FlipV => "flip_v",
            ViewSpec::Rot180 => "rot180",
        }
    }

    fn swaps_axes(&self) -> bool {
        matches!(self, ViewSpec::Transpose)
    }

    /// Source coordinate read by output pixel `(y, x)` of the forward transform
    /// on an input of size `(h, w)`. All supported transforms are involutions.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            ViewSpec::Identity => (y, x),
            ViewSpec::Transpose => (x, y),
            ViewSpec::FlipH => (y, w - 1 - x),
            ViewSpec::FlipV => (h - 1 - y, x),
            ViewSpec::Rot180 => (h - 1 - y, w - 1 - x),
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Image::zeros(oh, ow, c);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                for ch in 0..c {
                    out.set(y, x, ch, img.get(sy, sx, ch));
                }
            }
        }
        out
    }

    pub fn apply_label(&self, label: &LabelMap) -> LabelMap {
        let (h, w) = label.dims();
        let (oh, ow) = self.out_dims(h, w);
        let mut data = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                data.push(label.get(sy, sx));
            }
        }
        LabelMap::new(oh, ow, label.num_classes(), data).expect("transform preserves validity")
    }

    /// Maps a prediction made in view coordinates back to the original grid.
    pub fn invert_label(&self, label: &LabelMap) -> LabelMap {
        self.apply_label(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [ViewSpec; 5] =
        [ViewSpec::Identity, ViewSpec::Transpose, ViewSpec::FlipH, ViewSpec::FlipV, ViewSpec::Rot180];

    proptest! {
        #[test]
        fn views_are_involutive(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let data: Vec<u8> = (0..h * w).map(|i| (crate::seed_path!(seed, i) % 5) as u8).collect();
            let l = LabelMap::new(h, w, 5, data).unwrap();
            let img_data: Vec<f64> = (0..h * w * 2).map(|i| i as f64).collect();
            let img = Image::new(h, w, 2, img_data).unwrap();
            for v in ALL {
                prop_assert_eq!(&v.invert_label(&v.apply_label(&l)), &l);
                prop_assert_eq!(&v.apply_image(&v.apply_image(&img)), &img);
            }
        }
    }

    #[test]
    fn transpose_swaps_dims() {
        let l = LabelMap::new(2, 3, 2, vec![0, 1, 0, 1, 1, 0]).unwrap();
        let t = ViewSpec::Transpose.apply_label(&l);
        assert_eq!(t.dims(), (3, 2));
        assert_eq!(t.get(1, 0), l.get(0, 1));
    }
}
