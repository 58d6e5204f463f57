use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Fields whose values are open maps rather than structs.
const MAP_FIELDS: &[&str] = &["modality_mix", "structure_mix"];

fn unknown_keys(user: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return;
    };
    for (k, v) in u {
        let p = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match r.get(k) {
            None => out.push(p),
            Some(rv) if !MAP_FIELDS.contains(&k.as_str()) => unknown_keys(v, rv, &p, out),
            Some(_) => {}
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && !MAP_FIELDS.contains(&k.as_str()) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Default::default());
        }
        cur = cur.get_mut(*p).expect("just inserted");
    }
    cur[parts[parts.len() - 1]] = v;
}

/// Resolve a config as defaults < file < flag overrides.
///
/// `reference` lists every accepted key (usually the serialized defaults,
/// with optional sections filled in). All unknown keys of the file are
/// reported together.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    reference: Option<Value>,
    file: Option<&Path>,
    overrides: Vec<(&str, Value)>,
) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    let reference = match reference {
        Some(r) => r,
        None => value.clone(),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let user: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("invalid JSON config: {e}")))?;
        if !user.is_object() {
            return Err(Error::format(path, "config must be a JSON object"));
        }
        let mut unknown = Vec::new();
        unknown_keys(&user, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::config(format!(
                "unknown config keys in {}: {}",
                path.display(),
                unknown.join(", ")
            )));
        }
        merge(&mut value, user);
    }
    for (path, v) in overrides {
        set_path(&mut value, path, v);
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    #[test]
    fn all_unknown_keys_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"steps": 5, "bogus": 1, "weights": {"sigma": 1.0}}"#).unwrap();
        let err = resolve(&TrainConfig::default(), None, Some(&p), vec![]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("weights.sigma"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn precedence_is_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"steps": 5, "seed": 9, "weights": {"lambda_vr": 0.5}}"#).unwrap();
        let c: TrainConfig =
            resolve(&TrainConfig::default(), None, Some(&p), vec![("seed", 3.into())]).unwrap();
        assert_eq!((c.steps, c.seed), (5, 3));
        assert_eq!(c.weights.lambda_vr, 0.5);
        assert_eq!(c.weights.sigma1, 0.07);
    }
}
