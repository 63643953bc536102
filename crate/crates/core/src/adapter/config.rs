use std::collections::BTreeMap;

use serde_json::Value;

use super::AdapterError;

/// The fields of an adapter config file the analysis needs, plus every key
/// verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_modules: Vec<String>,
    pub use_rslora: bool,
    /// Every top-level key, rendered as a string (strings unquoted).
    pub metadata: BTreeMap<String, String>,
}

impl AdapterConfig {
    pub fn parse(text: &str) -> Result<Self, AdapterError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| AdapterError::Config(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(AdapterError::Config("expected a JSON object".into()));
        };
        let rank = map
            .get("r")
            .and_then(Value::as_u64)
            .filter(|&r| r > 0)
            .ok_or_else(|| AdapterError::Config("`r` must be a positive integer".into()))?
            as usize;
        let alpha = map
            .get("lora_alpha")
            .and_then(Value::as_f64)
            .filter(|a| a.is_finite())
            .ok_or_else(|| AdapterError::Config("`lora_alpha` must be a number".into()))?;
        let target_modules = match map.get("target_modules") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| {
                    AdapterError::Config("`target_modules` entries must be strings".into())
                })?,
            Some(Value::String(s)) => vec![s.clone()],
            Some(Value::Null) | None => Vec::new(),
            Some(_) => {
                return Err(AdapterError::Config(
                    "`target_modules` must be a list of strings".into(),
                ))
            }
        };
        let use_rslora = map
            .get("use_rslora")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        let metadata = map
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect();
        Ok(Self {
            rank,
            alpha,
            target_modules,
            use_rslora,
            metadata,
        })
    }

    /// Multiplier applied to `A·B`: `α/r`, or `α/√r` for rank-stabilized adapters.
    pub fn scaling(&self) -> f64 {
        let r = self.rank as f64;
        if self.use_rslora {
            self.alpha / r.sqrt()
        } else {
            self.alpha / r
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_typical_config() {
        let cfg = AdapterConfig::parse(
            r#"{"r": 8, "lora_alpha": 16, "target_modules": ["q_proj", "v_proj"], "peft_type": "LORA", "lora_dropout": 0.05}"#,
        )
        .unwrap();
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.scaling(), 2.0);
        assert_eq!(cfg.target_modules, ["q_proj", "v_proj"]);
        assert_eq!(cfg.metadata["peft_type"], "LORA");
        assert_eq!(cfg.metadata["lora_dropout"], "0.05");
        assert_eq!(cfg.metadata["r"], "8");
    }

    #[test]
    fn rank_stabilized_scaling() {
        let cfg =
            AdapterConfig::parse(r#"{"r": 16, "lora_alpha": 8, "use_rslora": true}"#).unwrap();
        assert_eq!(cfg.scaling(), 2.0);
        assert!(cfg.target_modules.is_empty());
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(AdapterConfig::parse(r#"{"lora_alpha": 8}"#).is_err());
        assert!(AdapterConfig::parse(r#"{"r": 0, "lora_alpha": 8}"#).is_err());
        assert!(AdapterConfig::parse(r#"{"r": 4}"#).is_err());
        assert!(
            AdapterConfig::parse(r#"{"r": 4, "lora_alpha": 4, "target_modules": [1]}"#).is_err()
        );
        assert!(AdapterConfig::parse("[]").is_err());
        assert!(AdapterConfig::parse("{").is_err());
    }
}
