//! Statistical comparison of generated and reference sets.

mod condensation;
mod kde;
mod l2;
pub mod plot;
mod psd;
pub mod stats;

pub use condensation::{condensation_distribution, positive_condensation_rates, tail_marker};
pub use kde::{kde_pdf, silverman_bandwidth, write_kde_csv, KdeCurve, DEFAULT_CI, DEFAULT_N_BOOT, MIN_KDE_SAMPLES};
pub use l2::{filter_normalize, filtered_l2, l2_distance, l2_report, median_gap_confidence, write_l2_csv, DomainStats, L2Report};
pub use psd::{compare_psd, plot_psd_png, psd_bands, write_psd_comparison_csv, PsdBands};
pub use stats::{ks_two_sample, KsResult};
