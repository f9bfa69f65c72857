//! JSON reports for `attn-sim`, checked against a fixed schema before they
//! are written.

use harmonia_core::pipeline::{RunResult, StepReport};
use serde_json::{json, Map, Value};

use crate::error::{CliError, Result};

fn step_name(i: Option<usize>) -> String {
    match i {
        None => "prefill".into(),
        Some(i) => format!("decode_{i}"),
    }
}

fn steps(run: &RunResult) -> impl Iterator<Item = (String, &StepReport)> {
    std::iter::once((step_name(None), &run.prefill)).chain(
        run.decode
            .iter()
            .enumerate()
            .map(|(i, r)| (step_name(Some(i)), r)),
    )
}

fn ema_section(run: &RunResult) -> Value {
    let mut per_gemm = Vec::new();
    let (mut a, mut b, mut bits, mut pj) = (0u64, 0u64, 0.0, 0.0);
    let mut policies: Vec<&'static str> = Vec::new();
    for (step, r) in steps(run) {
        a += r.ema.elements_a;
        b += r.ema.elements_b;
        bits += r.ema.total_bits;
        pj += r.ema.energy_pj;
        for g in &r.ema.gemms {
            let name = g.report.policy.name();
            if !policies.contains(&name) {
                policies.push(name);
            }
            per_gemm.push(json!({
                "step": step,
                "gemm": g.gemm,
                "policy": name,
                "elements_A": g.report.elements_a,
                "elements_B": g.report.elements_b,
                "total_bits": g.report.total_bits,
                "energy_pJ": g.report.energy_pj,
            }));
        }
    }
    let policy = match policies.as_slice() {
        [one] => *one,
        _ => "mixed",
    };
    json!({
        "policy": policy,
        "elements_A": a,
        "elements_B": b,
        "total_bits": bits,
        "energy_pJ": pj,
        "per_gemm": per_gemm,
    })
}

/// Builds the report object for one run. Does not validate.
pub fn build_report(run: &RunResult) -> Value {
    let last = run.final_report();
    let fp16_bits = 2 * last.tokens as u64 * run.config.hidden as u64 * 16;
    let mut per_layer = Vec::new();
    let mut max_kl = 0.0f64;
    let mut max_dev = 0.0f64;
    let mut overflow = 0usize;
    let mut modes = harmonia_core::pe::ModeCounts::default();
    for (step, r) in steps(run) {
        for e in &r.errors {
            per_layer.push(json!({
                "step": step,
                "stage": e.stage,
                "max_rel": e.max_rel,
                "mean_rel": e.mean_rel,
                "max_row_rel": e.max_row_rel,
                "frobenius_rel": e.frobenius_rel,
            }));
        }
        max_kl = r.kl_per_row.iter().fold(max_kl, |m, &v| m.max(v));
        max_dev = max_dev.max(r.max_row_sum_deviation);
        overflow += r.overflow_count;
        modes.m8w4 += r.modes.m8w4;
        modes.m8m4 += r.modes.m8m4;
        modes.m8m8 += r.modes.m8m8;
    }
    let calibration = run.calibration.as_ref().map(|c| {
        json!({
            "initial_objective": c.initial_objective,
            "objective": c.objective,
            "evaluations": c.evaluations,
        })
    });
    json!({
        "config": run.config,
        "seed": run.config.seed,
        "tokens": last.tokens,
        "storage_bits": last.kv_storage_bits,
        "fp16_bits": fp16_bits,
        "compression_ratio": fp16_bits as f64 / last.kv_storage_bits as f64,
        "ema": ema_section(run),
        "errors": {
            "per_layer": per_layer,
            "max_kl": max_kl,
            "max_row_sum_deviation": max_dev,
        },
        "smoothing": {
            "S": run.scale,
            "offsets": run.offsets,
            "active_channels": run.active_channels,
            "calibration": calibration,
        },
        "flags": {
            "overflow_count": overflow,
            "all_finite": steps(run).all(|(_, r)| r.is_finite()),
        },
        "modes": modes,
    })
}

/// Leaf kinds are strings; nested objects list their required keys; a
/// one-element array describes every element.
fn schema() -> Value {
    let gemm = json!({
        "step": "string", "gemm": "string", "policy": "string",
        "elements_A": "uint", "elements_B": "uint", "total_bits": "number", "energy_pJ": "number",
    });
    let layer = json!({
        "step": "string", "stage": "string", "max_rel": "number", "mean_rel": "number",
        "max_row_rel": "number", "frobenius_rel": "number",
    });
    json!({
        "config": "object",
        "seed": "uint",
        "tokens": "uint",
        "storage_bits": "uint",
        "fp16_bits": "uint",
        "compression_ratio": "number",
        "ema": {
            "policy": "string", "elements_A": "uint", "elements_B": "uint",
            "total_bits": "number", "energy_pJ": "number", "per_gemm": [gemm],
        },
        "errors": { "per_layer": [layer], "max_kl": "number", "max_row_sum_deviation": "number" },
        "smoothing": {
            "S": ["number"], "offsets": ["number"], "active_channels": ["uint"],
            "calibration": "object?",
        },
        "flags": { "overflow_count": "uint", "all_finite": "bool" },
        "modes": { "m8w4": "uint", "m8m4": "uint", "m8m8": "uint" },
    })
}

fn check(path: &str, schema: &Value, v: &Value) -> std::result::Result<(), String> {
    match schema {
        Value::String(kind) => {
            let ok = match kind.as_str() {
                "string" => v.is_string(),
                "bool" => v.is_boolean(),
                "uint" => v.is_u64(),
                // serde_json writes non-finite floats as null
                "number" => v.as_f64().is_some_and(f64::is_finite),
                "object" => v.is_object(),
                "object?" => v.is_object() || v.is_null(),
                other => return Err(format!("unknown schema kind {other}")),
            };
            if ok {
                Ok(())
            } else {
                Err(format!("{path}: expected {kind}, found {v}"))
            }
        }
        Value::Array(elem) => {
            let items = v
                .as_array()
                .ok_or_else(|| format!("{path}: expected array"))?;
            items
                .iter()
                .enumerate()
                .try_for_each(|(i, item)| check(&format!("{path}[{i}]"), &elem[0], item))
        }
        Value::Object(keys) => {
            let obj: &Map<String, Value> = v
                .as_object()
                .ok_or_else(|| format!("{path}: expected object"))?;
            if let Some(extra) = obj.keys().find(|k| !keys.contains_key(*k)) {
                return Err(format!("{path}: unexpected key {extra}"));
            }
            keys.iter().try_for_each(|(k, sub)| {
                let child = obj
                    .get(k)
                    .ok_or_else(|| format!("{path}: missing key {k}"))?;
                check(&format!("{path}.{k}"), sub, child)
            })
        }
        _ => Err(format!("{path}: malformed schema")),
    }
}

pub fn validate_report(report: &Value) -> Result<()> {
    check("$", &schema(), report).map_err(CliError::Invariant)
}

/// Sorted `path: kind` lines describing the shape of a JSON value; arrays
/// are described by their first element.
pub fn shape_signature(v: &Value) -> Vec<String> {
    fn walk(path: &str, v: &Value, out: &mut Vec<String>) {
        let kind = match v {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Number(_) => "number",
            Value::String(_) => "string",
            Value::Array(items) => {
                if let Some(first) = items.first() {
                    walk(&format!("{path}[]"), first, out);
                }
                "array"
            }
            Value::Object(obj) => {
                for (k, child) in obj {
                    walk(&format!("{path}.{k}"), child, out);
                }
                "object"
            }
        };
        out.push(format!("{path}: {kind}"));
    }
    let mut out = Vec::new();
    walk("$", v, &mut out);
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_rejects_non_finite_and_missing() {
        let s = json!({"a": "number", "b": ["uint"], "c": {"d": "bool"}});
        assert!(check("$", &s, &json!({"a": 1.5, "b": [1, 2], "c": {"d": true}})).is_ok());
        assert!(check("$", &s, &json!({"a": null, "b": [], "c": {"d": true}})).is_err());
        assert!(check("$", &s, &json!({"a": 1.0, "b": [-1], "c": {"d": true}})).is_err());
        assert!(check("$", &s, &json!({"a": 1.0, "b": [], "c": {}})).is_err());
        assert!(check(
            "$",
            &s,
            &json!({"a": 1.0, "b": [], "c": {"d": true}, "e": 0})
        )
        .is_err());
    }

    #[test]
    fn signature_is_sorted_paths() {
        let sig = shape_signature(&json!({"b": [1], "a": {"x": "s"}}));
        assert_eq!(
            sig,
            vec![
                "$.a.x: string",
                "$.a: object",
                "$.b: array",
                "$.b[]: number",
                "$: object"
            ]
        );
    }
}
