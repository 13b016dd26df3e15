//! Loading datasets and annotations from text, and running scripted sessions.

use std::fs;
use std::path::{Path, PathBuf};

use dualview_core::dataset::{parse_annotations, parse_matrix, Dataset, MatrixFormat, Scope};
use dualview_core::explorer::{Annotations, Session, Step};
use serde::{Deserialize, Serialize};

use crate::api::parse_json;
use crate::GatewayError;

/// In-memory inputs of a new session.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInputs {
    /// Delimited matrix text.
    pub matrix: String,
    #[serde(default)]
    pub format: MatrixFormat,
    #[serde(default)]
    pub sample_annotations: Option<String>,
    #[serde(default)]
    pub variable_annotations: Option<String>,
}

impl SessionInputs {
    pub fn dataset(&self) -> Result<Dataset, GatewayError> {
        Ok(parse_matrix(&self.matrix, &self.format)?)
    }

    pub fn session(&self) -> Result<Session, GatewayError> {
        let dataset = self.dataset()?;
        let delimiter = self.format.delimiter;
        let samples = self
            .sample_annotations
            .as_deref()
            .map(|t| parse_annotations(t, Scope::Sample, delimiter, &dataset))
            .transpose()?;
        let variables = self
            .variable_annotations
            .as_deref()
            .map(|t| parse_annotations(t, Scope::Variable, delimiter, &dataset))
            .transpose()?;
        Ok(Session::new(dataset, Annotations { samples, variables })?)
    }
}

/// A pipeline file: inputs by path (relative to the script) and a step list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionScript {
    pub dataset: PathBuf,
    #[serde(default)]
    pub format: MatrixFormat,
    #[serde(default)]
    pub sample_annotations: Option<PathBuf>,
    #[serde(default)]
    pub variable_annotations: Option<PathBuf>,
    pub steps: Vec<Step>,
}

pub fn read_text(path: &Path) -> Result<String, GatewayError> {
    fs::read_to_string(path).map_err(|source| GatewayError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl SessionScript {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), GatewayError> {
        let text = read_text(path)?;
        let script: SessionScript = parse_json(text.as_bytes()).map_err(GatewayError::Request)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((script, dir))
    }

    pub fn inputs(&self, dir: &Path) -> Result<SessionInputs, GatewayError> {
        let read = |p: &PathBuf| read_text(&dir.join(p));
        Ok(SessionInputs {
            matrix: read(&self.dataset)?,
            format: self.format,
            sample_annotations: self.sample_annotations.as_ref().map(read).transpose()?,
            variable_annotations: self.variable_annotations.as_ref().map(read).transpose()?,
        })
    }

    /// Build the session and apply every step in order.
    pub fn run(&self, dir: &Path) -> Result<Session, GatewayError> {
        let mut session = self.inputs(dir)?.session()?;
        apply_all(&mut session, &self.steps)?;
        Ok(session)
    }
}

pub fn apply_all(session: &mut Session, steps: &[Step]) -> Result<(), GatewayError> {
    for (index, step) in steps.iter().enumerate() {
        let kind = step.kind();
        log::info!("step {index}: {kind}");
        session
            .apply(step.clone())
            .map_err(|source| GatewayError::Step { index, kind, source })?;
    }
    Ok(())
}
