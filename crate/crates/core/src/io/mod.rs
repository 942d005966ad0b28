//! Data ingestion, persistence, simulation and the mixed-model oracle.

pub mod oracle;
pub mod persist;
pub mod simulate;
pub mod table;

pub use table::{load_csv, read_csv, write_csv, Column, ColumnKind, ColumnTable, LevelMap, LoadOptions, LoadReport, Schema};
