//! Confidence ellipsoids, linear-hypothesis tests, Tukey-type pairwise
//! comparisons, projection of rejected contrasts and cluster-wise coverage.

pub mod clusterwise;
pub mod ellipsoid;
pub mod projection;
pub mod tukey;

pub use clusterwise::{clusterwise_coverage, clusterwise_coverage_shift, ClusterCoverage};
pub use ellipsoid::{ellipsoid_contains, ellipsoid_test, test_linear, EllipsoidTest, LinearHypothesis};
pub use projection::{project_onto_ellipsoid, Projection};
pub use tukey::{tukey_all_pairs, tukey_interval, ContrastTest, TukeyResult};

use crate::error::{LmmError, Result};

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(LmmError::Argument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}
