//! Command-line stages and the labeling service around `dc3dcd-core`.

pub mod commands;
pub mod config;
pub mod serve;
pub mod workdir;

use dc3dcd_core::Error;

/// 2 for missing inputs or stage-order violations, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(Error::Dependency(_)) = cause.downcast_ref::<Error>() {
            return 2;
        }
        let io = cause
            .downcast_ref::<std::io::Error>()
            .or_else(|| match cause.downcast_ref::<Error>() {
                Some(Error::Io(e)) => Some(e),
                _ => None,
            });
        if io.is_some_and(|e| e.kind() == std::io::ErrorKind::NotFound) {
            return 2;
        }
    }
    1
}
