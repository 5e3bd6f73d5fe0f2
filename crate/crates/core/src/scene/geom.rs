//! Exact placement geometry: rational coordinates and their rasterization.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeomError {
    #[error("malformed fraction `{0}`")]
    Malformed(String),
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("fraction {0} is outside [0, 1]")]
    OutOfRange(String),
    #[error("bounding box must have positive width and height")]
    Degenerate,
    #[error("bounding box extends beyond the unit square")]
    OutOfCanvas,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A reduced fraction in `[0, 1]`, serialized as `"n/d"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Ratio, GeomError> {
        Self::from_u64(num as u64, den as u64)
    }

    fn from_u64(num: u64, den: u64) -> Result<Ratio, GeomError> {
        if den == 0 {
            return Err(GeomError::ZeroDenominator);
        }
        if num > den {
            return Err(GeomError::OutOfRange(format!("{num}/{den}")));
        }
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        let num = u32::try_from(num).map_err(|_| GeomError::OutOfRange(format!("{num}/{den}")))?;
        let den = u32::try_from(den).map_err(|_| GeomError::OutOfRange(format!("{num}/{den}")))?;
        Ok(Ratio { num, den })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact sum; errors if it exceeds 1.
    pub fn checked_add(self, other: Ratio) -> Result<Ratio, GeomError> {
        let den = self.den as u64 * other.den as u64;
        let num = self.num as u64 * other.den as u64 + other.num as u64 * self.den as u64;
        Ratio::from_u64(num, den)
    }

    /// `floor(self * n)`.
    pub fn floor_mul(self, n: u32) -> u32 {
        ((self.num as u64 * n as u64) / self.den as u64) as u32
    }

    /// Parses a decimal literal such as `0.25` or `1` exactly.
    pub fn from_decimal(s: &str) -> Result<Ratio, GeomError> {
        let bad = || GeomError::Malformed(s.to_string());
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let frac = frac.trim_end_matches('0');
        if frac.len() > 9 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac_v: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        Ratio::from_u64(num, den)
    }

    /// Shortest decimal rendering when the denominator is a product of 2s and
    /// 5s, `n/d` otherwise.
    pub fn to_literal(self) -> String {
        let mut d = self.den;
        let (mut twos, mut fives) = (0u32, 0u32);
        while d.is_multiple_of(2) {
            d /= 2;
            twos += 1;
        }
        while d.is_multiple_of(5) {
            d /= 5;
            fives += 1;
        }
        if d != 1 {
            return self.to_string();
        }
        let digits = twos.max(fives);
        if digits == 0 {
            return self.num.to_string();
        }
        let scale = 10u64.pow(digits);
        let scaled = self.num as u64 * scale / self.den as u64;
        let int = scaled / scale;
        let frac = format!("{:0width$}", scaled % scale, width = digits as usize);
        format!("{int}.{}", frac.trim_end_matches('0'))
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = GeomError;

    /// Accepts `n/d` or a decimal literal.
    fn from_str(s: &str) -> Result<Ratio, GeomError> {
        match s.split_once('/') {
            Some((n, d)) => {
                let n = n.trim().parse::<u32>().map_err(|_| GeomError::Malformed(s.into()))?;
                let d = d.trim().parse::<u32>().map_err(|_| GeomError::Malformed(s.into()))?;
                Ratio::new(n, d)
            }
            None => Ratio::from_decimal(s.trim()),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Ratio, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Normalized placement rectangle. Invariants: `w, h > 0`, `x + w <= 1`,
/// `y + h <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct BBox {
    pub x: Ratio,
    pub y: Ratio,
    pub w: Ratio,
    pub h: Ratio,
}

impl BBox {
    pub fn new(x: Ratio, y: Ratio, w: Ratio, h: Ratio) -> Result<BBox, GeomError> {
        let b = BBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> BBox {
        BBox {
            x: Ratio::ZERO,
            y: Ratio::ZERO,
            w: Ratio::ONE,
            h: Ratio::ONE,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.w.num() == 0 || self.h.num() == 0 {
            return Err(GeomError::Degenerate);
        }
        self.x.checked_add(self.w).map_err(|_| GeomError::OutOfCanvas)?;
        self.y.checked_add(self.h).map_err(|_| GeomError::OutOfCanvas)?;
        Ok(())
    }

    /// Pixel rectangle covered at a given resolution:
    /// columns `[floor(x*W), floor((x+w)*W))`, rows likewise.
    pub fn raster(&self, width: u32, height: u32) -> PixelRect {
        let x0 = self.x.floor_mul(width);
        let y0 = self.y.floor_mul(height);
        // validated boxes never exceed 1
        let x1 = self.x.checked_add(self.w).map_or(width, |r| r.floor_mul(width));
        let y1 = self.y.checked_add(self.h).map_or(height, |r| r.floor_mul(height));
        PixelRect {
            x: x0,
            y: y0,
            w: x1.saturating_sub(x0),
            h: y1.saturating_sub(y0),
        }
    }

    pub fn area(&self) -> f64 {
        self.w.to_f64() * self.h.to_f64()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax0, ay0) = (self.x.to_f64(), self.y.to_f64());
        let (ax1, ay1) = (ax0 + self.w.to_f64(), ay0 + self.h.to_f64());
        let (bx0, by0) = (other.x.to_f64(), other.y.to_f64());
        let (bx1, by1) = (bx0 + other.w.to_f64(), by0 + other.h.to_f64());
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x: Ratio,
            y: Ratio,
            w: Ratio,
            h: Ratio,
        }
        let r = Raw::deserialize(d)?;
        BBox::new(r.x, r.y, r.w, r.h).map_err(serde::de::Error::custom)
    }
}

/// Integer pixel rectangle `[x, x+w) x [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn full(width: u32, height: u32) -> PixelRect {
        PixelRect {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersect(&self, other: &PixelRect) -> PixelRect {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        PixelRect {
            x: x0,
            y: y0,
            w: x1.saturating_sub(x0),
            h: y1.saturating_sub(y0),
        }
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        !self.intersect(other).is_empty()
    }

    /// Grows by `pad` on every side, clamped to `[0, width) x [0, height)`.
    pub fn dilate_clamped(&self, pad: u32, width: u32, height: u32) -> PixelRect {
        let x0 = self.x.saturating_sub(pad);
        let y0 = self.y.saturating_sub(pad);
        let x1 = self.right().saturating_add(pad).min(width);
        let y1 = self.bottom().saturating_add(pad).min(height);
        PixelRect {
            x: x0,
            y: y0,
            w: x1.saturating_sub(x0),
            h: y1.saturating_sub(y0),
        }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> Ratio {
        s.parse().unwrap()
    }

    #[test]
    fn decimal_parsing_is_exact() {
        assert_eq!(r("0.7"), Ratio::new(7, 10).unwrap());
        assert_eq!(r("0.25"), Ratio::new(1, 4).unwrap());
        assert_eq!(r("1"), Ratio::ONE);
        assert_eq!(r(".5"), Ratio::new(1, 2).unwrap());
        assert_eq!(r("3/6"), Ratio::new(1, 2).unwrap());
        assert!("1.5".parse::<Ratio>().is_err());
        assert!("abc".parse::<Ratio>().is_err());
        assert!("1/0".parse::<Ratio>().is_err());
    }

    #[test]
    fn literal_round_trip() {
        for s in ["0.7", "0.25", "0", "1", "0.125"] {
            assert_eq!(r(s).to_literal(), s);
        }
        assert_eq!(Ratio::new(1, 3).unwrap().to_literal(), "1/3");
        assert_eq!(r(&Ratio::new(1, 3).unwrap().to_literal()), Ratio::new(1, 3).unwrap());
    }

    #[test]
    fn raster_quarter_box_on_200() {
        let b = BBox::new(r("0.25"), r("0.25"), r("0.5"), r("0.5")).unwrap();
        assert_eq!(
            b.raster(200, 200),
            PixelRect {
                x: 50,
                y: 50,
                w: 100,
                h: 100
            }
        );
    }

    #[test]
    fn bbox_invariants() {
        assert_eq!(
            BBox::new(r("0.6"), r("0"), r("0.5"), r("0.1")),
            Err(GeomError::OutOfCanvas)
        );
        assert_eq!(BBox::new(r("0"), r("0"), r("0"), r("0.1")), Err(GeomError::Degenerate));
        let json = r#"{"x":"0/1","y":"0/1","w":"1/1","h":"0/1"}"#;
        assert!(serde_json::from_str::<BBox>(json).is_err());
    }

    #[test]
    fn clamp_cases() {
        let rect = PixelRect {
            x: 10,
            y: 10,
            w: 10,
            h: 10,
        };
        assert_eq!(
            rect.dilate_clamped(4, 100, 100),
            PixelRect {
                x: 6,
                y: 6,
                w: 18,
                h: 18
            }
        );
        let edge = PixelRect {
            x: 2,
            y: 95,
            w: 3,
            h: 5,
        };
        assert_eq!(
            edge.dilate_clamped(8, 100, 100),
            PixelRect {
                x: 0,
                y: 87,
                w: 13,
                h: 13
            }
        );
    }
}
