//! Command-line and HTTP front ends over the dualview exploration sessions.
//! Both drive the same [`dualview_core::explorer::Session`], so a step list
//! yields the same artifacts whichever way it is submitted.

pub mod api;
pub mod cli;
pub mod script;
pub mod server;

use std::path::PathBuf;

use dualview_core::error::Error as CoreError;
use thiserror::Error;

use crate::api::ApiError;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("step {index} ({kind}) failed: {source}")]
    Step {
        index: usize,
        kind: &'static str,
        source: CoreError,
    },

    #[error("{}{}", .0.message, .0.location.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Request(ApiError),
}

impl GatewayError {
    pub fn api_error(&self) -> ApiError {
        match self {
            GatewayError::Io { path, source } => {
                ApiError::new("io", source.to_string()).at(path.display().to_string())
            }
            GatewayError::Core(e) => ApiError::from(e),
            GatewayError::Step { index, source, .. } => {
                let mut e = ApiError::from(source);
                e.location = Some(match e.location {
                    Some(inner) => format!("/steps/{index}: {inner}"),
                    None => format!("/steps/{index}"),
                });
                e
            }
            GatewayError::Request(e) => e.clone(),
        }
    }
}
