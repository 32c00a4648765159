//! Versioned JSON persistence for fitted models.
//!
//! A model file holds the schema version, the model kind, the course
//! vocabulary, the parameters, training metadata and a SHA-256 checksum of
//! the compact serialization of everything else. Floats are written in
//! shortest round-trip form and parsed exactly, so save -> load -> save is
//! byte-identical and loaded parameters are bit-for-bit equal.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::baselines::{NaiveBayesParams, TanParams};
use crate::cmm::CmmParams;
use crate::data::CourseVocabulary;
use crate::error::{Error, Result};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Nb,
    Tan,
    Cmm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Nb => "nb",
            ModelKind::Tan => "tan",
            ModelKind::Cmm => "cmm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelParams {
    Nb(NaiveBayesParams),
    Tan(TanParams),
    Cmm(CmmParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Nb(_) => ModelKind::Nb,
            ModelParams::Tan(_) => ModelKind::Tan,
            ModelParams::Cmm(_) => ModelKind::Cmm,
        }
    }

    fn vocab_fingerprint(&self) -> &str {
        match self {
            ModelParams::Nb(p) => &p.vocab_fingerprint,
            ModelParams::Tan(p) => &p.vocab_fingerprint,
            ModelParams::Cmm(p) => &p.vocab_fingerprint,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Nb(p) => p.validate(),
            ModelParams::Tan(p) => p.validate(),
            ModelParams::Cmm(p) => p.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub k_states: usize,
    pub iterations: usize,
    pub final_loglik: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub vocabulary: CourseVocabulary,
    pub params: ModelParams,
    pub metadata: TrainingMetadata,
}

/// Everything covered by the checksum, in file order.
#[derive(Serialize)]
struct Body<'a> {
    schema_version: u32,
    model_kind: ModelKind,
    vocabulary: &'a CourseVocabulary,
    params: &'a ModelParams,
    metadata: &'a TrainingMetadata,
}

#[derive(Serialize)]
struct Stored<'a> {
    #[serde(flatten)]
    body: Body<'a>,
    checksum: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Loaded {
    #[serde(rename = "schema_version")]
    _schema_version: u32,
    model_kind: ModelKind,
    vocabulary: CourseVocabulary,
    params: serde_json::Value,
    metadata: TrainingMetadata,
    checksum: String,
}

fn checksum(body: &Body<'_>) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl ModelFile {
    pub fn new(
        vocabulary: CourseVocabulary,
        params: ModelParams,
        metadata: TrainingMetadata,
    ) -> Result<Self> {
        if params.vocab_fingerprint() != vocabulary.fingerprint() {
            return Err(Error::Fingerprint {
                model: params.vocab_fingerprint().to_string(),
                data: vocabulary.fingerprint(),
            });
        }
        params.validate()?;
        Ok(Self {
            vocabulary,
            params,
            metadata,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.params.kind()
    }

    fn body(&self) -> Body<'_> {
        Body {
            schema_version: MODEL_SCHEMA_VERSION,
            model_kind: self.kind(),
            vocabulary: &self.vocabulary,
            params: &self.params,
            metadata: &self.metadata,
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let body = self.body();
        let checksum = checksum(&body)?;
        let mut s = serde_json::to_string_pretty(&Stored { body, checksum })?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(s)
            .map_err(|e| Error::ModelFile(format!("not valid JSON: {e}")))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::ModelFile(format!(
                    "unsupported schema_version {v} (expected {MODEL_SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::ModelFile("missing schema_version".into())),
        }
        let loaded: Loaded = serde_json::from_value(raw)
            .map_err(|e| Error::ModelFile(format!("malformed model file: {e}")))?;
        let parse = |what| Error::ModelFile(format!("malformed {what} parameters"));
        let params = match loaded.model_kind {
            ModelKind::Nb => {
                ModelParams::Nb(serde_json::from_value(loaded.params).map_err(|_| parse("nb"))?)
            }
            ModelKind::Tan => {
                ModelParams::Tan(serde_json::from_value(loaded.params).map_err(|_| parse("tan"))?)
            }
            ModelKind::Cmm => {
                ModelParams::Cmm(serde_json::from_value(loaded.params).map_err(|_| parse("cmm"))?)
            }
        };
        let file = Self {
            vocabulary: loaded.vocabulary,
            params,
            metadata: loaded.metadata,
        };
        if checksum(&file.body())? != loaded.checksum {
            return Err(Error::ModelFile(
                "checksum mismatch: file is corrupt".into(),
            ));
        }
        Self::new(file.vocabulary, file.params, file.metadata)
            .map_err(|e| Error::ModelFile(format!("invalid model: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{nb_fit_em, tan_fit_em};
    use crate::cmm::{em_fit_pm1, sample_students, tests_support_saturated, EmConfig};

    fn metadata() -> TrainingMetadata {
        TrainingMetadata {
            seed: 7,
            k_states: 2,
            iterations: 3,
            final_loglik: -123.456,
        }
    }

    fn all_kinds() -> Vec<ModelFile> {
        let p = tests_support_saturated(2, 4, 0.8);
        let c = sample_students(&p, 60, 1).unwrap();
        let vocab = c.vocab().clone();
        let cmm = em_fit_pm1(
            &c,
            &EmConfig {
                restarts: 1,
                max_iters: 5,
                ..EmConfig::new(2, 1)
            },
        )
        .unwrap();
        let nb = nb_fit_em(&c, 2, 5, 1e-6, 1).unwrap();
        let tan = tan_fit_em(&c, 2, 5, 1e-6, 1).unwrap();
        vec![
            ModelFile::new(vocab.clone(), ModelParams::Cmm(cmm.params), metadata()).unwrap(),
            ModelFile::new(vocab.clone(), ModelParams::Nb(nb.params), metadata()).unwrap(),
            ModelFile::new(vocab, ModelParams::Tan(tan.params), metadata()).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_exact_and_byte_identical() {
        for f in all_kinds() {
            let s = f.to_json_string().unwrap();
            let back = ModelFile::from_json_str(&s).unwrap();
            assert_eq!(back, f, "{}", f.kind());
            assert_eq!(back.to_json_string().unwrap(), s);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let f = &all_kinds()[0];
        let s = f.to_json_string().unwrap();
        // Flip one digit inside the parameters.
        let pos = s.find("\"mean\"").unwrap();
        let digit = pos
            + s[pos..]
                .find(|c: char| c.is_ascii_digit() && c != '0')
                .unwrap();
        let mut bytes = s.clone().into_bytes();
        bytes[digit] = if bytes[digit] == b'9' {
            b'8'
        } else {
            bytes[digit] + 1
        };
        let err = ModelFile::from_json_str(std::str::from_utf8(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ModelFile(_)), "{err}");
        // Truncation.
        assert!(ModelFile::from_json_str(&s[..s.len() / 2]).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let f = &all_kinds()[1];
        let s = f.to_json_string().unwrap().replacen(
            "\"schema_version\": 1",
            "\"schema_version\": 2",
            1,
        );
        let err = ModelFile::from_json_str(&s).unwrap_err();
        assert!(err.to_string().contains("schema_version 2"), "{err}");
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let f = all_kinds().remove(0);
        let other = CourseVocabulary::synthetic(5);
        assert!(ModelFile::new(other, f.params, metadata()).is_err());
    }
}
