//! Representation-similarity and distribution metrics.

pub mod distance;
pub mod features;
pub mod kernel;
pub mod region;

pub use distance::{
    class_variance, frechet_distance, frechet_from_moments, gaussian_sym_kl, gaussian_w2, kid,
    mean_cosine, sequence_frechet, Pooling,
};
pub use features::{cell_class_histograms, grid_features, FeatureSet};
pub use kernel::{cka, cknna, median_bandwidth, rbf_kernel_matrix};
pub use region::{region_features, RegionBinning, RegionFeatures};
