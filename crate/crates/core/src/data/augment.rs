use super::image::ImageBuffer;
use crate::tensor::{Element, Tensor};

/// Element of the 8-element symmetry group of the square: an optional
/// horizontal mirror followed by `rot` quarter turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    /// `id` in `0..8`: `rot = id % 4`, `flip = id >= 4`.
    pub fn from_id(id: u8) -> Self {
        Dihedral {
            rot: id % 4,
            flip: id % 8 >= 4,
        }
    }

    pub fn id(self) -> u8 {
        self.rot + if self.flip { 4 } else { 0 }
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral::from_id)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let r2 = if self.flip { (4 - other.rot) % 4 } else { other.rot };
        Dihedral {
            rot: (self.rot + r2) % 4,
            flip: self.flip ^ other.flip,
        }
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            self
        } else {
            Dihedral {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }

    /// Source `(x, y)` in a `w×h` input for output pixel `(ox, oy)`, and the
    /// output dimensions.
    fn source(self, w: usize, h: usize) -> (usize, usize, impl Fn(usize, usize) -> (usize, usize)) {
        let (ow, oh) = if self.rot % 2 == 1 { (h, w) } else { (w, h) };
        let t = self;
        let map = move |ox: usize, oy: usize| {
            // Undo the rotations one quarter turn at a time, then the mirror.
            let (mut x, mut y, mut cw, mut ch) = (ox, oy, ow, oh);
            for _ in 0..t.rot {
                // A counter-clockwise turn sends (x, y) in a w'×h' image to
                // (y, w' - 1 - x) and the current height is w'.
                let (px, py) = (ch - 1 - y, x);
                (cw, ch) = (ch, cw);
                (x, y) = (px, py);
            }
            debug_assert_eq!((cw, ch), (w, h));
            if t.flip {
                x = w - 1 - x;
            }
            (x, y)
        };
        (ow, oh, map)
    }

    pub fn apply(self, img: &ImageBuffer) -> ImageBuffer {
        let (ow, oh, map) = self.source(img.width(), img.height());
        ImageBuffer::from_fn(ow, oh, |x, y| {
            let (sx, sy) = map(x, y);
            img.pixel(sx, sy)
        })
        .expect("same pixel count")
    }

    /// Same transform on an `[h, w, c]` tensor.
    pub fn apply_tensor<T: Element>(self, t: &Tensor<T>) -> Tensor<T> {
        let [h, w, c] = *t.shape() else {
            panic!("dihedral transform needs [h, w, c], got {:?}", t.shape());
        };
        let (ow, oh, map) = self.source(w, h);
        Tensor::from_fn(&[oh, ow, c], |i| {
            let (x, y, ch) = ((i / c) % ow, i / (c * ow), i % c);
            let (sx, sy) = map(x, y);
            t.data()[(sy * w + sx) * c + ch]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> ImageBuffer {
        ImageBuffer::from_fn(3, 2, |x, y| [(x + 3 * y) as u8, 0, 0]).unwrap()
    }

    #[test]
    fn identity_is_identity() {
        assert_eq!(Dihedral::from_id(0).apply(&img()), img());
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // 0 1 2        2 5
        // 3 4 5   ->   1 4
        //              0 3
        let r = Dihedral::from_id(1).apply(&img());
        let vals: Vec<u8> = r.pixels().chunks(3).map(|p| p[0]).collect();
        assert_eq!((r.width(), r.height()), (2, 3));
        assert_eq!(vals, [2, 5, 1, 4, 0, 3]);
        let f = Dihedral::from_id(4).apply(&img());
        let vals: Vec<u8> = f.pixels().chunks(3).map(|p| p[0]).collect();
        assert_eq!(vals, [2, 1, 0, 5, 4, 3]);
    }

    #[test]
    fn group_laws() {
        let im = img();
        for a in Dihedral::all() {
            assert_eq!(a.inverse().apply(&a.apply(&im)), im);
            assert_eq!(a.compose(a.inverse()), Dihedral::IDENTITY);
            for b in Dihedral::all() {
                let ab = a.compose(b);
                assert!(Dihedral::all().any(|g| g == ab));
                assert_eq!(ab.apply(&im), a.apply(&b.apply(&im)));
            }
        }
    }

    #[test]
    fn tensor_matches_image() {
        let im = img();
        let t = im.to_tensor::<f32>();
        for g in Dihedral::all() {
            assert_eq!(g.apply_tensor(&t), g.apply(&im).to_tensor::<f32>());
        }
    }
}
