//! Cartesian parameter grids over a base scenario.

use std::path::Path;

use rayon::prelude::*;
use serde_json::Value;

use crate::commands::{run_named, RunOptions};
use crate::config::{set_dotted, Scenario};
use crate::error::CliError;
use crate::output::{csv, write_atomic};

/// Every combination of the parameter values, first parameter slowest.
pub fn grid(params: &[(String, Vec<Value>)]) -> Vec<Vec<Value>> {
    params.iter().fold(vec![Vec::new()], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn cell(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

/// Runs each point into `out/point_NNNN` and writes `out/index.csv`.
/// A failing point is recorded in the index; the worst exit code is returned.
pub fn run(sc: &Scenario, out: &Path, ro: RunOptions) -> Result<i32, CliError> {
    let sweep = sc.config.sweep.as_ref().ok_or_else(|| CliError::Validation("sweep: section required".into()))?;
    if sweep.command == "sweep" {
        return Err(CliError::Validation("sweep.command: cannot be sweep".into()));
    }
    if let Some((name, _)) = sweep.parameters.iter().find(|(_, v)| v.is_empty()) {
        return Err(CliError::Validation(format!("sweep.parameters.{name}: needs at least one value")));
    }
    let params: Vec<(String, Vec<Value>)> = sweep.parameters.clone().into_iter().collect();
    let points = grid(&params);
    log::info!("sweep of {} points over {} parameters", points.len(), params.len());

    let mut base = sc.raw.clone();
    if let Value::Object(map) = &mut base {
        map.remove("sweep");
        map.remove("output_dir");
    }
    let results: Vec<Result<(&'static str, f64), CliError>> = points
        .par_iter()
        .enumerate()
        .map(|(i, values)| {
            let mut doc = base.clone();
            for ((path, _), v) in params.iter().zip(values) {
                set_dotted(&mut doc, path, v.clone())?;
            }
            let point = Scenario::from_value(doc, &sc.base_dir, None)?;
            let outcome = run_named(&sweep.command, &point, ro)?;
            outcome.artifacts.write_all(&out.join(format!("point_{i:04}")))?;
            Ok(outcome.headline)
        })
        .collect();

    let mut header = String::from("point");
    for (name, _) in &params {
        header.push(',');
        header.push_str(name);
    }
    header.push_str(",exit_code,metric,value,error");
    let mut worst = 0;
    let rows = points.iter().zip(&results).enumerate().map(|(i, (values, r))| {
        let mut row = vec![format!("point_{i:04}")];
        row.extend(values.iter().map(cell));
        match r {
            Ok((metric, value)) => row.extend([0.to_string(), metric.to_string(), value.to_string(), String::new()]),
            Err(e) => {
                worst = worst.max(e.exit_code());
                log::warn!("point_{i:04}: {e}");
                row.extend([e.exit_code().to_string(), String::new(), String::new(), cell(&Value::String(e.to_string()))]);
            }
        }
        row
    });
    let index = csv(&header, rows.collect::<Vec<_>>());
    write_atomic(&out.join("index.csv"), index.as_bytes())?;
    Ok(worst)
}
