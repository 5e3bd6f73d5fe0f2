//! One-bit-per-pixel masks.

use std::fmt;

use image::{GrayImage, Luma};

use crate::scene::PixelRect;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("ones", &self.count())
            .finish()
    }
}

impl BitMask {
    /// All-zeros mask.
    pub fn new(width: u32, height: u32) -> BitMask {
        let n = width as usize * height as usize;
        BitMask {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn full(width: u32, height: u32) -> BitMask {
        let mut m = BitMask::new(width, height);
        m.fill_rect(PixelRect::full(width, height), true);
        m
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> BitMask {
        let mut m = BitMask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = self.index(x, y);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.index(x, y);
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn fill_rect(&mut self, rect: PixelRect, v: bool) {
        let rect = rect.intersect(&PixelRect::full(self.width, self.height));
        for y in rect.y..rect.bottom() {
            for x in rect.x..rect.right() {
                self.set(x, y, v);
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.width as u64 * self.height as u64
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn bounding_box(&self) -> Option<PixelRect> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for (x, y) in self.iter_ones() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        (x0 != u32::MAX).then(|| PixelRect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + b;
                Some(((i % w) as u32, (i / w) as u32))
            })
        })
    }

    pub fn union(&self, other: &BitMask) -> BitMask {
        assert_eq!(self.dimensions(), other.dimensions(), "mask dimensions differ");
        BitMask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect(),
        }
    }

    pub fn intersection(&self, other: &BitMask) -> BitMask {
        assert_eq!(self.dimensions(), other.dimensions(), "mask dimensions differ");
        BitMask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        }
    }

    pub fn complement(&self) -> BitMask {
        BitMask::from_fn(self.width, self.height, |x, y| !self.get(x, y))
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.dimensions() == other.dimensions() && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Sub-mask covering `rect`, in rect-local coordinates.
    pub fn crop(&self, rect: PixelRect) -> BitMask {
        BitMask::from_fn(rect.w, rect.h, |x, y| self.get(rect.x + x, rect.y + y))
    }

    fn separable(&self, radius: u32, keep: impl Fn(usize, usize) -> bool) -> BitMask {
        // sliding-window counts, rows then columns; `keep(count, window)`
        // decides membership, with out-of-bounds pixels counted as unset
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        let win = 2 * r + 1;
        let mut rows = vec![false; w * h];
        let mut prefix = vec![0usize; w.max(h) + 1];
        for y in 0..h {
            for x in 0..w {
                prefix[x + 1] = prefix[x] + self.get(x as u32, y as u32) as usize;
            }
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                rows[y * w + x] = keep(prefix[hi] - prefix[lo], win);
            }
        }
        let mut out = BitMask::new(self.width, self.height);
        for x in 0..w {
            for y in 0..h {
                prefix[y + 1] = prefix[y] + rows[y * w + x] as usize;
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r + 1).min(h);
                if keep(prefix[hi] - prefix[lo], win) {
                    out.set(x as u32, y as u32, true);
                }
            }
        }
        out
    }

    /// Dilation by a `(2r+1)^2` square structuring element.
    pub fn dilate(&self, radius: u32) -> BitMask {
        if radius == 0 {
            return self.clone();
        }
        self.separable(radius, |count, _| count > 0)
    }

    /// Erosion by a `(2r+1)^2` square; pixels whose square leaves the image
    /// are cleared.
    pub fn erode(&self, radius: u32) -> BitMask {
        if radius == 0 {
            return self.clone();
        }
        self.separable(radius, |count, win| count == win)
    }

    /// 0/255 grayscale rendering, used for PNG transport.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any nonzero pixel is set.
    pub fn from_gray_image(img: &GrayImage) -> BitMask {
        BitMask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y).0[0] != 0)
    }
}
