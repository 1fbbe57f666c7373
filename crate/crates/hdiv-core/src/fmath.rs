//! Float intrinsics that are `std`-only, routed through libm in `no_std`
//! builds. Keep this list minimal; `abs`, `max`, `min`, `copysign` are
//! available in core and used directly.

#![allow(dead_code)]

macro_rules! forward {
    ($($name:ident => $libm:ident ( $($arg:ident),* )),* $(,)?) => {
        $(
            #[inline]
            pub fn $name(x: f64 $(, $arg: f64)*) -> f64 {
                #[cfg(feature = "std")]
                { x.$name($($arg),*) }
                #[cfg(not(feature = "std"))]
                { libm::$libm(x $(, $arg)*) }
            }
        )*
    };
}

forward! {
    sqrt => sqrt(),
    sin => sin(),
    cos => cos(),
    exp => exp(),
    ln => log(),
    floor => floor(),
    hypot => hypot(y),
    powf => pow(y),
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    #[cfg(feature = "std")]
    {
        x.powi(n)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::pow(x, n as f64)
    }
}
