//! Line-oriented model files.
//!
//! ```text
//! mlp <input_dim> <layer_count>
//! layer <fan_out> <activation>
//! <fan_in weights> <bias>        (fan_out lines)
//! ...
//! ```
//!
//! Numbers are written with 17 significant digits, which round-trips `f64`
//! exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, Layer, MlpModel, ModelError};

pub fn write_model(model: &MlpModel) -> String {
    let mut out = format!("mlp {} {}\n", model.input_dim, model.layers.len());
    for layer in &model.layers {
        let _ = writeln!(out, "layer {} {}", layer.fan_out, layer.activation);
        for j in 0..layer.fan_out {
            let mut fields: Vec<String> = layer.row(j).iter().map(|w| format!("{w:.16e}")).collect();
            fields.push(format!("{:.16e}", layer.bias[j]));
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
    }
    out
}

/// Writes to a sibling temporary file and renames it into place, so a failed
/// write never leaves a partial model behind.
pub fn save_model(model: &MlpModel, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, write_model(model))?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel, ModelError> {
    parse_model(&std::fs::read_to_string(path)?)
}

fn parse_err(line: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn parse_model(text: &str) -> Result<MlpModel, ModelError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of file, expected {what}")))
    };

    let (no, header) = next("header")?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != "mlp" {
        return Err(parse_err(no, "expected `mlp <input_dim> <layer_count>`"));
    }
    let input_dim: usize = h[1].parse().map_err(|e| parse_err(no, format!("input_dim: {e}")))?;
    let layer_count: usize = h[2].parse().map_err(|e| parse_err(no, format!("layer_count: {e}")))?;

    let mut layers = Vec::with_capacity(layer_count);
    let mut fan_in = input_dim;
    for _ in 0..layer_count {
        let (no, decl) = next("`layer <fan_out> <activation>`")?;
        let s: Vec<&str> = decl.split_whitespace().collect();
        if s.len() != 3 || s[0] != "layer" {
            return Err(parse_err(no, "expected `layer <fan_out> <activation>`"));
        }
        let fan_out: usize = s[1].parse().map_err(|e| parse_err(no, format!("fan_out: {e}")))?;
        let activation: Activation = s[2].parse().map_err(|e: String| parse_err(no, e))?;
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        let mut bias = Vec::with_capacity(fan_out);
        let mut row_width = None;
        for _ in 0..fan_out {
            let (no, row) = next("weight row")?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(no, format!("`{t}`: {e}"))))
                .collect::<Result<_, _>>()?;
            if vals.is_empty() {
                return Err(parse_err(no, "empty weight row"));
            }
            let width = vals.len() - 1;
            if *row_width.get_or_insert(width) != width {
                return Err(parse_err(no, "weight rows differ in length"));
            }
            weights.extend_from_slice(&vals[..width]);
            bias.push(vals[width]);
        }
        let width = row_width.unwrap_or(fan_in);
        layers.push(Layer {
            fan_in: width,
            fan_out,
            weights,
            bias,
            activation,
        });
        fan_in = fan_out;
    }
    if let Some((no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(parse_err(no, format!("trailing content `{}`", extra.trim())));
    }
    MlpModel::new(input_dim, layers)
}
