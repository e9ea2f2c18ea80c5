//! Element-type abstraction so the whole stack (tensors, autodiff, models)
//! runs at f32 for training speed and at f64 for finite-difference checks.

/// Floating-point element of all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Exponential for bulk activation math. At f32 this is a branchless
    /// polynomial (vectorizable, ~1e-7 relative error); at f64 it is the
    /// exact library function so 64-bit gradient checks see true exp.
    fn exp_bulk(self) -> Self;

    /// Hyperbolic tangent under the same contract as `exp_bulk`.
    fn tanh_bulk(self) -> Self;

    /// C := alpha * A(m x k) * B(k x n) + beta * C, row-major strides given
    /// per operand as (row stride, col stride).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Branchless polynomial expf: split x = n ln2 + r, evaluate a degree-6
/// Taylor polynomial on |r| <= ln2/2, scale by 2^n through the exponent
/// bits. Inlines into slice loops where LLVM vectorizes it.
#[inline(always)]
pub fn exp_f32_fast(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E).round();
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor to r^6/720; max relative error ~1e-7 on the reduced range
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
    p * scale
}

#[inline(always)]
pub fn tanh_f32_fast(x: f32) -> f32 {
    // tanh(x) = 1 - 2 / (e^{2x} + 1); exp_f32_fast clamps internally
    let e = exp_f32_fast(2.0 * x);
    1.0 - 2.0 / (e + 1.0)
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline(always)]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline(always)]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            #[inline(always)]
            fn exp_bulk(self) -> Self {
                <$t as BulkMath>::exp_bulk_impl(self)
            }
            #[inline(always)]
            fn tanh_bulk(self) -> Self {
                <$t as BulkMath>::tanh_bulk_impl(self)
            }

            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

trait BulkMath {
    fn exp_bulk_impl(self) -> Self;
    fn tanh_bulk_impl(self) -> Self;
}

impl BulkMath for f32 {
    #[inline(always)]
    fn exp_bulk_impl(self) -> Self {
        exp_f32_fast(self)
    }
    #[inline(always)]
    fn tanh_bulk_impl(self) -> Self {
        tanh_f32_fast(self)
    }
}

impl BulkMath for f64 {
    #[inline(always)]
    fn exp_bulk_impl(self) -> Self {
        self.exp()
    }
    #[inline(always)]
    fn tanh_bulk_impl(self) -> Self {
        self.tanh()
    }
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
