//! Linear algebra helpers and quantile engines.

pub mod chi2;
pub mod linalg;
pub mod quad;
pub mod range;
pub mod roots;

pub use chi2::{chi2_cdf, chi2_quantile, noncentral_chi2_cdf, noncentral_chi2_quantile, noncentral_chi2_sf};
pub use linalg::{psd_clamp, sym_sqrt, woodbury_inverse, SpdMatrix, SymRoots, WoodburyInverse};
pub use range::{normal_cdf, normal_quantile, range_cdf, range_quantile};
