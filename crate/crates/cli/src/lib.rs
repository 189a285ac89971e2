//! File formats, configuration and the pipeline behind the `lossguard`
//! command.

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod pipeline;

use std::fmt;

/// A run that finished but failed a numerical check.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// 2 for numerical failures (non-finite training state, failed gradient
/// check), 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|e| {
        e.is::<NumericalFailure>()
            || matches!(
                e.downcast_ref::<lossguard_core::Error>(),
                Some(lossguard_core::Error::NonFinite { .. })
            )
    });
    if numerical {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let e = anyhow::Error::new(lossguard_core::Error::NonFinite { epoch: 1, batch: 2 }).context("training");
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow::Error::new(NumericalFailure("x".into()))), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("bad config")), 1);
    }
}
