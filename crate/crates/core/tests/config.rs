use std::path::{Path, PathBuf};

use dcpsim::experiment::{ExperimentConfig, Mode, TraceSource};
use dcpsim::scheduler::{BucketFn, SchedulerPolicy};
use dcpsim::sim::{calibrate_bucket, default_length_grid, LatencyModel};
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn shipped() -> Vec<(PathBuf, ExperimentConfig)> {
    let mut out: Vec<_> = std::fs::read_dir(root().join("configs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| {
            let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p, cfg)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn shipped_configs_round_trip() {
    let configs = shipped();
    assert!(configs.len() >= 4);
    for (path, cfg) in configs {
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg, "{}", path.display());
        assert_eq!(back.to_toml_string().unwrap(), text);
    }
}

#[test]
fn shipped_bucket_table_is_the_calibration_output() {
    let cal = calibrate_bucket(&LatencyModel::calibrated(), 8, &default_length_grid(1 << 20)).unwrap();
    let mut seen = 0;
    for (path, cfg) in shipped() {
        if let SchedulerPolicy::DualBalancedDcp { buckets } = &cfg.policy {
            if matches!(cfg.mode, Mode::Simulate | Mode::Sweep) {
                assert_eq!(buckets, &cal.table, "{}", path.display());
                seen += 1;
            }
        }
    }
    assert!(seen >= 2);
    assert_ne!(cal.table, BucketFn::default_table());
}

/// Follows `$ref` and picks the `oneOf` branch whose discriminator matches.
fn resolve<'a>(schema: &'a Value, node: &'a Value, value: &Value) -> &'a Value {
    if let Some(r) = node.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return resolve(schema, &schema["$defs"][name], value);
    }
    if let Some(branches) = node.get("oneOf").and_then(Value::as_array) {
        let matching: Vec<&Value> = branches
            .iter()
            .filter(|b| {
                b["properties"].as_object().is_some_and(|props| {
                    props.iter().all(|(k, p)| {
                        let allowed = p
                            .get("const")
                            .map(|c| vec![c.clone()])
                            .or_else(|| p.get("enum").and_then(Value::as_array).cloned());
                        match (allowed, value.get(k)) {
                            (Some(allowed), Some(v)) if matches!(k.as_str(), "kind" | "source") => allowed.contains(v),
                            _ => true,
                        }
                    })
                })
            })
            .collect();
        assert_eq!(matching.len(), 1, "ambiguous or no branch for {value}");
        return resolve(schema, matching[0], value);
    }
    node
}

fn check(schema: &Value, node: &Value, value: &Value, path: &str) {
    let node = resolve(schema, node, value);
    match value {
        Value::Object(map) => {
            let props = node["properties"]
                .as_object()
                .unwrap_or_else(|| panic!("{path}: schema has no properties"));
            for (k, v) in map {
                let sub = props.get(k).unwrap_or_else(|| panic!("{path}.{k} missing from schema"));
                check(schema, sub, v, &format!("{path}.{k}"));
            }
            for req in node["required"].as_array().into_iter().flatten() {
                assert!(
                    map.contains_key(req.as_str().unwrap()),
                    "{path}: required {req} not serialized"
                );
            }
        }
        Value::Array(items) => {
            if let Some(item_schema) = node.get("items") {
                for (i, v) in items.iter().enumerate() {
                    check(schema, item_schema, v, &format!("{path}[{i}]"));
                }
            }
        }
        _ => {
            if let Some(allowed) = node.get("enum").and_then(Value::as_array) {
                assert!(allowed.contains(value), "{path}: {value} not in schema enum");
            }
        }
    }
}

#[test]
fn schema_covers_every_serialized_key() {
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("docs/config.schema.json")).unwrap()).unwrap();
    let mut variants: Vec<ExperimentConfig> = shipped().into_iter().map(|(_, c)| c).collect();
    let base = variants[0].clone();
    for policy in [
        SchedulerPolicy::LeastBatch,
        SchedulerPolicy::LeastCache,
        SchedulerPolicy::UniformCp { degree: 2 },
    ] {
        variants.push(ExperimentConfig { policy, ..base.clone() });
    }
    variants.push(ExperimentConfig {
        trace: Some(TraceSource::Replay {
            path: "trace.csv".into(),
        }),
        ..base
    });
    for cfg in &variants {
        let value = serde_json::to_value(cfg).unwrap();
        check(&schema, &schema, &value, "$");
    }
}
