//! Cluster variation method: region graph construction and a double-loop
//! free-energy minimizer with guaranteed descent.

pub mod double_loop;
pub mod region;

pub use double_loop::{
    convex_bound, cvm_free_energy, enumerate_region_marginals, CvmRun, DoubleLoop,
    DoubleLoopOptions,
};
pub use region::{Region, RegionGraph};
