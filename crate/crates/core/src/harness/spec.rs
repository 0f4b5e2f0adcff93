use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{
    calibrated_provider, consistent_provider, perturbed_provider, random_joint, CalibratedNoise, JointTable, NoiseSpec,
};
use crate::provider::Provider;
use crate::remote::{RemoteConfig, RemoteProvider};
use crate::types::Vocabulary;

/// Overrides the URL of any `remote:` provider when set.
pub const ENDPOINT_ENV: &str = "MLMC_ENDPOINT";

/// `random:<V>:<L>:<seed>` or a path to a JSON joint table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum JointSource {
    Random { vocab: usize, len: usize, seed: u64 },
    File(PathBuf),
}

fn spec_err(spec: &str, reason: impl Into<String>) -> Error {
    Error::Spec {
        spec: spec.to_string(),
        reason: reason.into(),
    }
}

fn field<T: FromStr>(spec: &str, value: &str, name: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| spec_err(spec, format!("cannot parse {name} from `{value}`")))
}

impl JointSource {
    pub fn load(&self) -> Result<JointTable> {
        match self {
            JointSource::Random { vocab, len, seed } => random_joint(Vocabulary::numbered(*vocab)?, *len, *seed),
            JointSource::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let t: JointTable = serde_json::from_str(&text)?;
                JointTable::new(t.vocab, t.length, t.probs)
            }
        }
    }
}

impl FromStr for JointSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("random:") {
            Some(rest) => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 3 {
                    return Err(spec_err(s, "expected random:<V>:<L>:<seed>"));
                }
                Ok(JointSource::Random {
                    vocab: field(s, parts[0], "vocabulary size")?,
                    len: field(s, parts[1], "length")?,
                    seed: field(s, parts[2], "seed")?,
                })
            }
            None if s.is_empty() => Err(spec_err(s, "empty joint source")),
            None => Ok(JointSource::File(PathBuf::from(s))),
        }
    }
}

impl fmt::Display for JointSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JointSource::Random { vocab, len, seed } => write!(f, "random:{vocab}:{len}:{seed}"),
            JointSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl TryFrom<String> for JointSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<JointSource> for String {
    fn from(j: JointSource) -> String {
        j.to_string()
    }
}

/// Provider selection string:
///
/// - `oracle:<joint>`
/// - `perturbed:<sigma>:<seed>` (joint supplied separately)
/// - `calibrated:<sigma_wrong>:<sigma_right>:<flatten>:<seed>` (joint supplied separately)
/// - `remote:<url>`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProviderSpec {
    Oracle(JointSource),
    Perturbed(NoiseSpec),
    Calibrated(CalibratedNoise),
    Remote(String),
}

impl ProviderSpec {
    pub fn needs_joint(&self) -> bool {
        matches!(self, ProviderSpec::Perturbed(_) | ProviderSpec::Calibrated(_))
    }
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| spec_err(s, "expected <kind>:<arguments>"))?;
        let parts: Vec<&str> = rest.split(':').collect();
        match kind {
            "oracle" => Ok(ProviderSpec::Oracle(rest.parse()?)),
            "perturbed" => {
                if parts.len() != 2 {
                    return Err(spec_err(s, "expected perturbed:<sigma>:<seed>"));
                }
                let noise = NoiseSpec::new(field(s, parts[0], "sigma")?, field(s, parts[1], "seed")?)
                    .map_err(|e| spec_err(s, e.to_string()))?;
                Ok(ProviderSpec::Perturbed(noise))
            }
            "calibrated" => {
                if parts.len() != 4 {
                    return Err(spec_err(
                        s,
                        "expected calibrated:<sigma_wrong>:<sigma_right>:<flatten>:<seed>",
                    ));
                }
                let noise = CalibratedNoise::new(
                    field(s, parts[0], "sigma_wrong")?,
                    field(s, parts[1], "sigma_right")?,
                    field(s, parts[2], "flatten")?,
                    field(s, parts[3], "seed")?,
                )
                .map_err(|e| spec_err(s, e.to_string()))?;
                Ok(ProviderSpec::Calibrated(noise))
            }
            "remote" if rest.is_empty() => Err(spec_err(s, "missing URL")),
            "remote" => Ok(ProviderSpec::Remote(rest.to_string())),
            _ => Err(spec_err(s, format!("unknown provider kind `{kind}`"))),
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Oracle(j) => write!(f, "oracle:{j}"),
            ProviderSpec::Perturbed(n) => write!(f, "perturbed:{}:{}", n.sigma, n.seed),
            ProviderSpec::Calibrated(c) => write!(
                f,
                "calibrated:{}:{}:{}:{}",
                c.sigma_wrong, c.sigma_right, c.flatten, c.seed
            ),
            ProviderSpec::Remote(url) => write!(f, "remote:{url}"),
        }
    }
}

impl TryFrom<String> for ProviderSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProviderSpec> for String {
    fn from(p: ProviderSpec) -> String {
        p.to_string()
    }
}

/// Builds the provider, loading or generating its joint. Remote endpoints
/// are contacted immediately.
pub fn build_provider(spec: &ProviderSpec, joint: Option<&JointSource>) -> Result<Arc<dyn Provider>> {
    let need_joint = || -> Result<Arc<JointTable>> {
        joint
            .ok_or_else(|| spec_err(&spec.to_string(), "this provider needs a joint (`--joint`)"))?
            .load()
            .map(Arc::new)
    };
    Ok(match spec {
        ProviderSpec::Oracle(source) => Arc::new(consistent_provider(Arc::new(source.load()?))),
        ProviderSpec::Perturbed(noise) => Arc::new(perturbed_provider(need_joint()?, *noise)),
        ProviderSpec::Calibrated(noise) => Arc::new(calibrated_provider(need_joint()?, *noise)),
        ProviderSpec::Remote(url) => {
            let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| url.clone());
            Arc::new(RemoteProvider::connect(RemoteConfig::new(endpoint))?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints() {
        for s in [
            "oracle:random:4:6:7",
            "oracle:joints/a.json",
            "perturbed:0.5:3",
            "calibrated:1:0.1:2:9",
            "remote:http://localhost:8000",
        ] {
            let p: ProviderSpec = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for s in [
            "bogus:1",
            "perturbed:x:1",
            "perturbed:-1:1",
            "perturbed:1",
            "remote:",
            "oracle",
            "oracle:random:4:6",
        ] {
            assert!(s.parse::<ProviderSpec>().is_err(), "{s}");
        }
    }

    #[test]
    fn perturbed_without_joint_fails() {
        let p: ProviderSpec = "perturbed:0.5:1".parse().unwrap();
        assert!(build_provider(&p, None).is_err());
    }
}
