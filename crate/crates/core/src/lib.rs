//! Probabilistic enforcement of integral conservation laws.
//!
//! Step 1 produces a Gaussian estimate of a space-time field. Step 2
//! conditions it on a noisy linear constraint `G u = b` that discretizes
//! conservation of mass.

pub mod constrain;
pub mod error;
pub mod evaluate;
pub mod harness;
pub mod inference;
pub mod pde;
pub mod quadrature;

pub use error::{Error, Result};

macro_rules! book_chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        )*
    };
}

book_chapters! {
    book_introduction => "introduction.md",
    book_exact_solutions => "exact-solutions.md",
    book_quadrature => "quadrature.md",
    book_step1 => "step1.md",
    book_step2 => "step2.md",
    book_metrics => "metrics.md",
    book_convergence => "convergence.md",
    book_harness => "harness.md",
}
