pub mod dataset;
pub mod error;
pub mod explorer;
pub mod impute;
pub mod mds;
pub mod multitest;
pub mod nulls;
pub mod preprocess;
pub mod special;
pub mod svd;
