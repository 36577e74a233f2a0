#![allow(dead_code)]

use std::path::{Path, PathBuf};

use framewise::eval::{cosine, EmbeddingStore};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn traffic() -> PathBuf {
    fixtures().join("traffic")
}

/// Largest one-to-one matching between truth and generated tokens over
/// edges with similarity strictly above `threshold`, by trying every
/// assignment. Exponential; keep inputs to about ten tokens.
pub fn brute_force_matches(generated: &[String], truth: &[String], store: &EmbeddingStore, threshold: f64) -> usize {
    let edge = |t: &str, g: &str| -> bool {
        match (store.get(t), store.get(g)) {
            (Some(a), Some(b)) => cosine(a, b).map(|c| c > threshold).unwrap_or(t == g),
            _ => t == g,
        }
    };
    let adj: Vec<Vec<bool>> = truth
        .iter()
        .map(|t| generated.iter().map(|g| edge(t, g)).collect())
        .collect();
    fn best(i: usize, adj: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if i == adj.len() {
            return 0;
        }
        let mut m = best(i + 1, adj, used);
        for j in 0..used.len() {
            if adj[i][j] && !used[j] {
                used[j] = true;
                m = m.max(1 + best(i + 1, adj, used));
                used[j] = false;
            }
        }
        m
    }
    best(0, &adj, &mut vec![false; generated.len()])
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Blanks the values of the named JSON keys anywhere in `text`.
pub fn mask_json_keys(text: &str, keys: &[&str]) -> String {
    let mut v: serde_json::Value = serde_json::from_str(text).expect("json");
    fn walk(v: &mut serde_json::Value, keys: &[&str]) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, val) in m.iter_mut() {
                    if keys.contains(&k.as_str()) {
                        *val = serde_json::Value::Null;
                    } else {
                        walk(val, keys);
                    }
                }
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(|x| walk(x, keys)),
            _ => {}
        }
    }
    walk(&mut v, keys);
    serde_json::to_string_pretty(&v).unwrap()
}

/// Wall-clock and identity fields that legitimately differ between runs.
pub const VOLATILE_KEYS: [&str; 9] = [
    "run_id",
    "created_at",
    "latency_s",
    "total_s",
    "mean_s",
    "min_s",
    "max_s",
    "source",
    "duration_wall_s",
];

/// Markdown report with the run title and timing lines removed.
pub fn mask_markdown(md: &str) -> String {
    md.lines()
        .filter(|l| !l.starts_with("# Run ") && !l.starts_with("- vision:") && !l.starts_with("- text:"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Rows of the first pipe table in `md`, cells trimmed.
pub fn markdown_table(md: &str) -> Vec<Vec<String>> {
    md.lines()
        .skip_while(|l| !l.starts_with('|'))
        .take_while(|l| l.starts_with('|'))
        .map(|l| {
            l.trim()
                .trim_start_matches('|')
                .trim_end_matches('|')
                .split(" | ")
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect()
}
