//! kamtori — a numerical engine for a frequency-preserving KAM iteration on
//! parameterized Hamiltonians H = ⟨ω(ξ), y⟩ + εP(y, x, ξ), together with a
//! weak-regularity toolkit (moduli of continuity, nowhere-Hölder Weierstrass
//! families) for building and certifying the frequency maps the iteration
//! admits.

pub mod driver;
pub mod error;
pub mod frequency;
pub mod ode;
pub mod regularity;
pub mod schedule;
pub mod series;
pub mod step;

pub use error::{Error, Result};
pub use frequency::{check_diophantine, small_divisor, DiophCheck, DiophantineCert, FrequencyMap};
pub use regularity::{compare_moduli, ModulusOfContinuity};
pub use series::{AnalyticDomain, FourierTaylorSeries, MultiIndexPair};
