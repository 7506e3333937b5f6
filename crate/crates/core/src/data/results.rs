use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::EstimationResult;
use crate::spec::ModelSpec;

pub const RESULTS_FORMAT: &str = "intercity-results/1";

/// An estimation result bundled with the spec it was estimated under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub format: String,
    /// SHA-256 of `spec`, hex.
    pub spec_digest: String,
    /// Canonical TOML of the estimated spec.
    pub spec: String,
    pub result: EstimationResult,
}

/// Digest of the spec's canonical TOML rendering.
pub fn spec_digest(spec: &ModelSpec) -> String {
    digest_text(&spec.to_toml_string())
}

fn digest_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl ResultsDocument {
    pub fn new(result: EstimationResult, spec: &ModelSpec) -> Self {
        let text = spec.to_toml_string();
        Self {
            format: RESULTS_FORMAT.into(),
            spec_digest: digest_text(&text),
            spec: text,
            result,
        }
    }

    /// The embedded spec, after checking it against the digest.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        if digest_text(&self.spec) != self.spec_digest {
            return Err(Error::Validation("results document: spec text does not match its digest".into()));
        }
        ModelSpec::from_toml_str(&self.spec)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("results document: {e}")))?;
        if doc.format != RESULTS_FORMAT {
            return Err(Error::Parse(format!(
                "results document: unsupported format `{}` (expected `{RESULTS_FORMAT}`)",
                doc.format
            )));
        }
        Ok(doc)
    }
}

pub fn write_results(result: &EstimationResult, spec: &ModelSpec, path: &Path) -> Result<()> {
    let doc = ResultsDocument::new(result.clone(), spec);
    std::fs::write(path, doc.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<ResultsDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ResultsDocument::from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}
