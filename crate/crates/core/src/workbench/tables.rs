//! Report tables: CSV and a Markdown twin carrying identical numbers at six
//! decimal places.

use crate::eval::{ComparisonRow, EvalReport};

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// CSV with header `class,sigma,precision,recall,f1,support`, one row per
/// class per report plus an `average` row per report.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("class,sigma,precision,recall,f1,support\n");
    for r in reports {
        let mut total_support = 0usize;
        for m in &r.per_class {
            total_support += m.support;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.class_id,
                fmt6(r.noise_sigma),
                fmt6(m.precision),
                fmt6(m.recall),
                fmt6(m.f1),
                m.support
            ));
        }
        out.push_str(&format!(
            "average,{},{},{},{},{}\n",
            fmt6(r.noise_sigma),
            fmt6(r.macro_precision),
            fmt6(r.macro_recall),
            fmt6(r.macro_f1),
            total_support
        ));
    }
    out
}

/// Markdown twin of [`reports_to_csv`]: same rows, same 6-decimal numbers.
pub fn reports_to_markdown(reports: &[EvalReport]) -> String {
    let tag = reports.first().map(|r| r.model_tag.as_str()).unwrap_or("model");
    let mut out = format!("# Robustness report: {tag}\n\n");
    out.push_str("| class | sigma | precision | recall | f1 | support |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in reports {
        let mut total_support = 0usize;
        for m in &r.per_class {
            total_support += m.support;
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                m.class_id,
                fmt6(r.noise_sigma),
                fmt6(m.precision),
                fmt6(m.recall),
                fmt6(m.f1),
                m.support
            ));
        }
        out.push_str(&format!(
            "| average | {} | {} | {} | {} | {} |\n",
            fmt6(r.noise_sigma),
            fmt6(r.macro_precision),
            fmt6(r.macro_recall),
            fmt6(r.macro_f1),
            total_support
        ));
    }
    out
}

/// Per-sigma macro-F1 comparison as CSV.
pub fn comparison_to_csv(rows: &[ComparisonRow], tag_a: &str, tag_b: &str) -> String {
    let mut out = format!("sigma,macro_f1_{tag_a},macro_f1_{tag_b},delta,verdict\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt6(row.sigma),
            fmt6(row.macro_f1_a),
            fmt6(row.macro_f1_b),
            fmt6(row.delta),
            row.verdict
        ));
    }
    out
}

/// Per-sigma macro-F1 comparison as Markdown.
pub fn comparison_to_markdown(rows: &[ComparisonRow], tag_a: &str, tag_b: &str) -> String {
    let mut out = format!("# Macro-F1 comparison: {tag_b} minus {tag_a}\n\n");
    out.push_str(&format!("| sigma | {tag_a} | {tag_b} | delta | verdict |\n"));
    out.push_str("|---|---|---|---|---|\n");
    for row in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            fmt6(row.sigma),
            fmt6(row.macro_f1_a),
            fmt6(row.macro_f1_b),
            fmt6(row.delta),
            row.verdict
        ));
    }
    out
}

/// Every numeric cell in document order; CSV/Markdown twins must agree.
pub fn numeric_cells(text: &str) -> Vec<String> {
    let mut cells = Vec::new();
    for token in text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-')) {
        if token.contains('.') && token.parse::<f64>().is_ok() {
            cells.push(token.to_string());
        }
    }
    cells
}
