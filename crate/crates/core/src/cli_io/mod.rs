//! Configuration, file formats and the command-line front end.

mod cli;
mod config;
mod files;

pub use cli::{eta_pair, main_with_args, EXIT_AUDIT, EXIT_OK, EXIT_USAGE};
pub use config::{parse_config, parse_config_str, resolve_builtin, serialize_config};
pub use files::{
    read_csv, read_grid, sha256_hex, write_csv, write_grid, write_manifest, CsvTable, GridFile,
};
