//! JSON or human-readable rendering.

use serde_json::Value;

/// Strings unquoted, null as `-`, everything else as compact JSON.
pub fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Array(a) if a.iter().all(|x| !x.is_object() && !x.is_array()) => {
            a.iter().map(scalar).collect::<Vec<_>>().join(",")
        }
        other => other.to_string(),
    }
}

/// Left-aligned columns under a header row.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Rows of `fields` taken from each object in `items`.
pub fn object_table(items: &Value, fields: &[&str]) -> String {
    let rows: Vec<Vec<String>> = items
        .as_array()
        .map(|a| a.iter().map(|it| fields.iter().map(|f| scalar(&pointer(it, f))).collect()).collect())
        .unwrap_or_default();
    table(fields, &rows)
}

/// `a.b` style lookup.
pub fn pointer(v: &Value, path: &str) -> Value {
    v.pointer(&format!("/{}", path.replace('.', "/"))).cloned().unwrap_or(Value::Null)
}

/// One `key  value` line per field.
pub fn fields(v: &Value, keys: &[&str]) -> String {
    let rows: Vec<Vec<String>> = keys.iter().map(|k| vec![k.to_string(), scalar(&pointer(v, k))]).collect();
    let width = keys.iter().map(|k| k.len()).max().unwrap_or(0);
    rows.iter().map(|r| format!("{:<width$}  {}", r[0], r[1])).collect::<Vec<_>>().join("\n")
}

pub struct Printer {
    pub json: bool,
}

impl Printer {
    /// Pretty JSON with `--json`, otherwise whatever `human` renders.
    pub fn emit(&self, v: &Value, human: impl FnOnce(&Value) -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(v).expect("JSON value serializes"));
        } else {
            let text = human(v);
            if !text.is_empty() {
                println!("{text}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn renders_tables() {
        let t = table(&["id", "state"], &[vec!["e-0001".into(), "DRAFT".into()], vec!["e-10".into(), "TRAINED".into()]]);
        assert_eq!(t, "id      state\ne-0001  DRAFT\ne-10    TRAINED");
        let v = json!([{"a": {"b": 1}, "c": null}]);
        assert_eq!(object_table(&v, &["a.b", "c"]), "a.b  c\n1    -");
        assert_eq!(scalar(&json!([1, "x"])), "1,x");
        assert_eq!(fields(&json!({"k": "v", "long": 2}), &["k", "long"]), "k     v\nlong  2");
    }
}
