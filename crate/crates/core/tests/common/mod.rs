//! Checks shared between the per-area test targets and the acceptance
//! suite. They return `Err` with a description instead of panicking.
#![allow(dead_code)]

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

pub mod gradients;
pub mod mapping;
pub mod oracles;
