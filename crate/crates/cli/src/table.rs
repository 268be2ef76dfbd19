//! Coefficient tables as CSV and aligned text.

use eventscore::model::{Encoding, ScoreModel};
pub use eventscore::model::CoefficientRow;

use crate::Result;

pub fn coefficient_rows(model: &ScoreModel) -> Result<Vec<CoefficientRow>> {
    Ok(model.coefficient_rows()?)
}

pub fn to_csv(rows: &[CoefficientRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<CoefficientRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Aligned text, one block per feature: a `Ranges` line over a
/// `Coefficients` line.
pub fn render_text(model: &ScoreModel, rows: &[CoefficientRow]) -> String {
    let mut out = format!(
        "{} ({}), lambda = {:.4e}, intercept = {:.2}\n",
        model.name,
        match model.encoding {
            Encoding::MultiHot => "multi-hot",
            Encoding::Raw => "raw",
        },
        model.lambda,
        model.intercept
    );
    let mut i = 0;
    while i < rows.len() {
        let id = &rows[i].feature;
        let block: Vec<&CoefficientRow> = rows[i..].iter().take_while(|r| &r.feature == id).collect();
        i += block.len();
        let coefs: Vec<String> = block.iter().map(|r| two_decimals(r.coefficient)).collect();
        let widths: Vec<usize> = block.iter().zip(&coefs).map(|(r, c)| r.range.len().max(c.len())).collect();
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        out.push_str(&format!("\n{id}\n"));
        out.push_str(&format!("  Ranges        {}\n", line(block.iter().map(|r| r.range.as_str()).collect())));
        out.push_str(&format!("  Coefficients  {}\n", line(coefs.iter().map(String::as_str).collect())));
    }
    out
}

fn two_decimals(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}
