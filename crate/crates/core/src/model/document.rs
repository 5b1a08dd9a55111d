//! Versioned JSON model document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CovarianceMode, GaussianComponent, GaussianMixture, Hmm2Model, Hmm2Parts};
use crate::cli::io::write_atomic;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub version: u32,
    pub num_states: usize,
    pub obs_dim: usize,
    pub pi: Vec<f64>,
    pub a2: Vec<Vec<f64>>,
    /// `a3[i][j][k]`
    pub a3: Vec<Vec<Vec<f64>>>,
    pub mixtures: Vec<MixtureDocument>,
    pub topology: Vec<Vec<Vec<bool>>>,
    pub final_states: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDocument {
    pub weights: Vec<f64>,
    pub components: Vec<ComponentDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDocument {
    pub mode: CovarianceMode,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl ModelDocument {
    pub fn from_model(model: &Hmm2Model) -> Self {
        let n = model.num_states();
        let p = model.parts();
        let a2 = p.first_transitions.chunks(n).map(<[f64]>::to_vec).collect();
        let a3 = p
            .transitions
            .chunks(n * n)
            .map(|plane| plane.chunks(n).map(<[f64]>::to_vec).collect())
            .collect();
        let topology = p
            .topology
            .chunks(n * n)
            .map(|plane| plane.chunks(n).map(<[bool]>::to_vec).collect())
            .collect();
        let mixtures = p
            .emissions
            .iter()
            .map(|mix| MixtureDocument {
                weights: mix.weights().to_vec(),
                components: mix
                    .components()
                    .iter()
                    .map(|c| ComponentDocument {
                        mode: c.mode(),
                        mean: c.mean().to_vec(),
                        covariance: c.covariance().chunks(c.dim()).map(<[f64]>::to_vec).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            version: MODEL_FORMAT_VERSION,
            num_states: n,
            obs_dim: model.obs_dim(),
            pi: p.initial.clone(),
            a2,
            a3,
            mixtures,
            topology,
            final_states: p.final_states.clone(),
        }
    }

    pub fn into_model(self) -> Result<Hmm2Model> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let n = self.num_states;
        let shape_err = |what: &str| Error::Malformed(format!("{what} does not match num_states = {n}"));
        if self.pi.len() != n {
            return Err(shape_err("pi"));
        }
        if self.a2.len() != n || self.a2.iter().any(|r| r.len() != n) {
            return Err(shape_err("a2"));
        }
        fn cube_ok<T>(c: &[Vec<Vec<T>>], n: usize) -> bool {
            c.len() == n && c.iter().all(|p| p.len() == n && p.iter().all(|r| r.len() == n))
        }
        if !cube_ok(&self.a3, n) {
            return Err(shape_err("a3"));
        }
        if !cube_ok(&self.topology, n) {
            return Err(shape_err("topology"));
        }
        if self.mixtures.len() != n {
            return Err(shape_err("mixtures"));
        }
        let mut emissions = Vec::with_capacity(n);
        for mix in self.mixtures {
            let mut components = Vec::with_capacity(mix.components.len());
            for c in mix.components {
                if c.mean.len() != self.obs_dim
                    || c.covariance.len() != self.obs_dim
                    || c.covariance.iter().any(|r| r.len() != self.obs_dim)
                {
                    return Err(Error::Malformed(format!(
                        "gaussian component does not match obs_dim = {}",
                        self.obs_dim
                    )));
                }
                let cov = c.covariance.into_iter().flatten().collect();
                components.push(GaussianComponent::new(c.mean, cov, c.mode)?);
            }
            emissions.push(GaussianMixture::new(components, mix.weights)?);
        }
        Hmm2Model::from_parts(Hmm2Parts {
            initial: self.pi,
            first_transitions: self.a2.into_iter().flatten().collect(),
            transitions: self.a3.into_iter().flatten().flatten().collect(),
            emissions,
            topology: self.topology.into_iter().flatten().flatten().collect(),
            final_states: self.final_states,
        })
    }
}

pub fn model_to_json(model: &Hmm2Model) -> String {
    let mut s = serde_json::to_string_pretty(&ModelDocument::from_model(model))
        .expect("model document serializes");
    s.push('\n');
    s
}

/// Parse a model document. The version tag is checked before the rest of
/// the document so that future layouts report a version error rather than
/// a parse error.
pub fn model_from_json(text: &str) -> Result<Hmm2Model> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Malformed("missing numeric `version`".into()))?;
    if version != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let doc: ModelDocument =
        serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
    doc.into_model()
}

pub fn save_model(model: &Hmm2Model, path: &Path) -> Result<()> {
    write_atomic(path, model_to_json(model).as_bytes())
}

pub fn load_model(path: &Path) -> Result<Hmm2Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> Hmm2Model {
        let m = Hmm2Model::new_left_right(3, 2, 2).unwrap();
        let mut parts = m.into_parts();
        let c1 = GaussianComponent::diagonal(vec![0.1, -3.25], &[0.7, 1.0 / 3.0]).unwrap();
        let c2 = GaussianComponent::new(
            vec![2.0, 1.0],
            vec![2.0, 0.3, 0.3, 1.5],
            CovarianceMode::Full,
        )
        .unwrap();
        parts.emissions[1] = GaussianMixture::new(vec![c1, c2], vec![0.3, 0.7]).unwrap();
        // row (i, j) = (0, 1) starts at offset 3
        let base = 3;
        parts.transitions[base + 1] = 0.1 + 0.2;
        parts.transitions[base + 2] = 1.0 - (0.1 + 0.2);
        Hmm2Model::from_parts(parts).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample_model();
        let back = model_from_json(&model_to_json(&m)).unwrap();
        assert_eq!(m, back);
        assert_eq!(model_to_json(&m), model_to_json(&back));
    }

    #[test]
    fn tampered_row_fails_normalization() {
        let mut doc: serde_json::Value = serde_json::from_str(&model_to_json(&sample_model())).unwrap();
        doc["a3"][0][0][0] = serde_json::json!(1.0);
        let err = model_from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(err, Error::Normalization { .. }), "{err}");
    }

    #[test]
    fn unknown_version_rejected() {
        let mut doc: serde_json::Value = serde_json::from_str(&model_to_json(&sample_model())).unwrap();
        doc["version"] = serde_json::json!(7);
        assert!(matches!(
            model_from_json(&doc.to_string()),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(model_from_json("{not json"), Err(Error::Malformed(_))));
        assert!(matches!(model_from_json("{\"version\": 1}"), Err(Error::Malformed(_))));
    }
}
