//! Data ingestion, standardization, splitting and block construction.

mod blocks;
mod data;

pub use blocks::{
    build_blocks, BlockDesign, BlockIndex, BlockSet, BlockSource, DenseBlock, DenseBlockSet,
    InteractionBlock, MainBlock, PreparedInteraction, DEFAULT_CACHE_BUDGET_BYTES,
};
pub use data::{
    load_csv, load_features, split, standardize, Dataset, LoadOptions, LoadReport, Standardizer,
};
