use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};

/// Exact sums and products of finite `f64` values, held as
/// `mantissa * 2^exponent` with an odd (or zero) mantissa.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DyadicProduct {
    mantissa: BigInt,
    exponent: i64,
}

impl DyadicProduct {
    pub fn one() -> Self {
        Self {
            mantissa: BigInt::from(1),
            exponent: 0,
        }
    }

    pub fn from_f64(v: f64) -> Self {
        assert!(v.is_finite(), "exact products need finite factors");
        if v == 0.0 {
            return Self {
                mantissa: BigInt::zero(),
                exponent: 0,
            };
        }
        let bits = v.to_bits();
        let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
        let raw_exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (m, e) = if raw_exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), raw_exp - 1075)
        };
        Self::normalized(BigInt::from(sign) * BigInt::from(m), e)
    }

    fn normalized(mantissa: BigInt, exponent: i64) -> Self {
        if mantissa.is_zero() {
            return Self { mantissa, exponent: 0 };
        }
        let tz = mantissa.trailing_zeros().unwrap_or(0);
        Self {
            mantissa: mantissa >> tz,
            exponent: exponent + tz as i64,
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self::normalized(&self.mantissa * &other.mantissa, self.exponent + other.exponent)
    }

    pub fn add(&self, other: &Self) -> Self {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        let e = self.exponent.min(other.exponent);
        let a = &self.mantissa << (self.exponent - e) as usize;
        let b = &other.mantissa << (other.exponent - e) as usize;
        Self::normalized(a + b, e)
    }

    pub fn mul_f64(&self, v: f64) -> Self {
        self.mul(&Self::from_f64(v))
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa.is_zero()
    }

    /// Nearest `f64` (via the leading 64 bits; correctly rounded apart from
    /// ties that straddle the truncated tail).
    pub fn to_f64(&self) -> f64 {
        if self.mantissa.is_zero() {
            return 0.0;
        }
        let bits = self.mantissa.bits() as i64;
        let shift = (bits - 64).max(0);
        let head = (&self.mantissa >> shift as usize).to_i128().expect("fits in 65 bits") as f64;
        scale_by_power_of_two(head, self.exponent + shift)
    }
}

fn scale_by_power_of_two(mut v: f64, mut e: i64) -> f64 {
    while e > 960 && v.is_finite() {
        v *= 2f64.powi(960);
        e -= 960;
    }
    while e < -960 && v != 0.0 {
        v *= 2f64.powi(-960);
        e += 960;
    }
    v * 2f64.powi(e as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_multiplies() {
        for v in [1.0, -0.1, 3.5e-310, 1e300, 0.0] {
            assert_eq!(DyadicProduct::from_f64(v).to_f64(), v);
        }
        let a = DyadicProduct::from_f64(0.1);
        let b = DyadicProduct::from_f64(3.0);
        let c = DyadicProduct::from_f64(-7.25);
        assert_eq!(a.mul(&b).mul(&c), a.mul(&b.mul(&c)));
        assert_eq!(a.mul(&b).mul(&c), c.mul(&a).mul(&b));
        assert!(DyadicProduct::from_f64(0.0).mul(&a).is_zero());
        let sum = a.add(&b).add(&c);
        assert_eq!(sum, c.add(&b).add(&a));
        assert_eq!(sum.to_f64(), 0.1 + 3.0 - 7.25);
        assert_eq!(a.add(&DyadicProduct::from_f64(-0.1)), DyadicProduct::from_f64(0.0));
    }
}
