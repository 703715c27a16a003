//! Output float formatting: every float written by the tools carries at most
//! nine significant digits.

use serde::Serialize;
use serde_json::Value;

pub const SIGNIFICANT_DIGITS: usize = 9;

/// Rounds `x` to nine significant digits. Non-finite values pass through.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

/// Shortest text that parses back to `round_sig(x)`.
pub fn fmt_f64(x: f64) -> String {
    let r = round_sig(x);
    if r.is_finite() {
        // serde_json prints the shortest round-trip form
        serde_json::Number::from_f64(r).map_or_else(|| r.to_string(), |n| n.to_string())
    } else {
        r.to_string()
    }
}

/// Rounds every float inside a JSON value in place.
pub fn round_json(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Serializes to a JSON value with floats rounded.
pub fn to_rounded_value<T: Serialize>(value: &T) -> serde_json::Result<Value> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    Ok(v)
}

/// Compact single-line JSON with rounded floats.
pub fn to_rounded_line<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&to_rounded_value(value)?)
}

/// Pretty JSON with rounded floats.
pub fn to_rounded_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&to_rounded_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_nine_digits() {
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_f64(2.0), "2.0");
        assert_eq!(fmt_f64(123456789012.0), "123456789000.0");
        assert_eq!(fmt_f64(-1.23456789123e-7), "-1.23456789e-7");
        assert_eq!(round_sig(0.0), 0.0);
    }

    #[test]
    fn rounds_nested_json() {
        let mut v = serde_json::json!({"a": [0.1234567891234, 3], "b": {"c": 2.0 / 3.0}});
        round_json(&mut v);
        assert_eq!(v.to_string(), r#"{"a":[0.123456789,3],"b":{"c":0.666666667}}"#);
    }
}
