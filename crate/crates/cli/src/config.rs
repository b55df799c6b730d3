//! JSON experiment configs.
//!
//! A config names its `task` and may override any part of the task defaults.
//! Objects are merged key by key, so `{"task": "pendulum", "train": {"epochs":
//! 300}}` changes one field. A tagged section (`plant`, `safety`, `pool`)
//! whose tag differs from the default replaces the default wholesale.

use safexp::explore::{ExperimentConfig, Task};
use serde_json::{Map, Value};

use crate::CliError;

const TAG_KEYS: [&str; 3] = ["plant", "kind", "pool"];

/// Parses and validates `text`. `origin` names the source in diagnostics.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    let bad = |message: String| CliError::Config {
        origin: origin.to_string(),
        message,
    };
    let user: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(user) = user else {
        return Err(bad("top level must be a JSON object".into()));
    };
    let task: Task = match user.get("task") {
        Some(t) => {
            serde_json::from_value(t.clone()).map_err(|e| bad(format!("field `task`: {e}")))?
        }
        None => return Err(bad("missing field `task`".into())),
    };
    let mut merged =
        serde_json::to_value(ExperimentConfig::defaults(task)).expect("defaults serialize");
    merge(&mut merged, Value::Object(user));
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        bad(format!("field `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

fn tag_of(map: &Map<String, Value>) -> Option<(&str, &Value)> {
    TAG_KEYS
        .iter()
        .find_map(|k| map.get(*k).filter(|v| v.is_string()).map(|v| (*k, v)))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let same_variant = match (tag_of(b), tag_of(&o)) {
                (Some((kb, vb)), Some((ko, vo))) => kb == ko && vb == vo,
                _ => true,
            };
            if !same_variant {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use safexp::dynamics::Plant;
    use safexp::explore::PoolSpec;

    #[test]
    fn minimal_config_is_task_defaults() {
        let cfg = parse_config(r#"{"task": "landing"}"#, "t").unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(Task::Landing));
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let cfg = parse_config(r#"{"task": "pendulum", "train": {"epochs": 300}}"#, "t").unwrap();
        let d = ExperimentConfig::defaults(Task::Pendulum);
        assert_eq!(cfg.train.epochs, 300);
        assert_eq!(cfg.train.warm_epochs, d.train.warm_epochs);
    }

    #[test]
    fn tagged_section_override() {
        let cfg = parse_config(
            r#"{"task": "pendulum", "pool": {"kind": "pendulum", "amplitudes": [0.2, 0.4]}}"#,
            "t",
        )
        .unwrap();
        assert_eq!(
            cfg.pool,
            PoolSpec::Pendulum {
                amplitudes: vec![0.2, 0.4]
            }
        );
        let cfg = parse_config(
            r#"{"task": "pendulum", "plant": {"plant": "pendulum", "m": 2.0}}"#,
            "t",
        )
        .unwrap();
        let Plant::Pendulum(p) = cfg.plant else {
            panic!("expected pendulum")
        };
        assert_eq!(p.m, 2.0);
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_config(
            "{\n  \"task\": \"pendulum\",\n  \"episodes\": ,\n}",
            "cfg.json",
        )
        .unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn type_error_reports_field() {
        let err =
            parse_config(r#"{"task": "pendulum", "train": {"epochs": "many"}}"#, "t").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = parse_config(r#"{"task": "pendulum", "bogus": 1}"#, "t").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn rejects_missing_task_and_mismatched_sections() {
        assert!(parse_config("{}", "t").is_err());
        assert!(parse_config("[1]", "t").is_err());
        let err = parse_config(
            r#"{"task": "pendulum", "pool": {"kind": "landing", "rates": [1.0], "hover_heights": [0.0]}}"#,
            "t",
        )
        .unwrap_err();
        assert!(err.to_string().contains("task"), "{err}");
    }

    #[test]
    fn validation_errors_surface() {
        let err = parse_config(r#"{"task": "pendulum", "episodes": 0}"#, "t").unwrap_err();
        assert!(err.to_string().contains("episodes"), "{err}");
    }
}
