//! Results tables with columns `Method,K,dt,Case,Calc,Ref,AbsErr`.

use std::cmp::Ordering;

use mfc_core::dp_solvers::ReportRow;

pub const HEADER: &str = "Method,K,dt,Case,Calc,Ref,AbsErr";

/// `v` with four decimals, ties to even. Negative zero prints as zero.
pub fn fmt4(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    // Float formatting is exact, so the digits past the fourth decide the tie.
    let exact = format!("{:.1100}", v.abs());
    let (int, frac) = exact.split_once('.').expect("fixed-point format");
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes().take(4)).map(|b| b - b'0').collect();
    let rest = &frac.as_bytes()[4..];
    let up = match rest.first().map(|b| b - b'0') {
        Some(d) if d > 5 => true,
        Some(5) => rest[1..].iter().any(|&b| b != b'0') || digits.last().is_some_and(|d| d % 2 == 1),
        _ => false,
    };
    if up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 4;
    let s: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
    let neg = v < 0.0 && digits.iter().any(|&d| d != 0);
    format!("{}{}.{}", if neg { "-" } else { "" }, &s[..split], &s[split..])
}

fn cmp_rows(a: &ReportRow, b: &ReportRow) -> Ordering {
    a.method
        .cmp(&b.method)
        .then(a.k_bins.cmp(&b.k_bins))
        .then(a.dt.total_cmp(&b.dt))
        .then(a.case.cmp(&b.case))
}

/// Sorted CSV of the rows, keyed by (method, K, dt, case).
pub fn emit_table(rows: &[ReportRow]) -> String {
    let mut rows: Vec<&ReportRow> = rows.iter().collect();
    rows.sort_by(|a, b| cmp_rows(a, b));
    let mut s = String::from(HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(fmt4).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.k_bins,
            r.dt,
            r.case,
            fmt4(r.calc),
            opt(r.reference),
            opt(r.abs_err)
        ));
    }
    s
}

/// Rows of a table produced by [`emit_table`]. Wall times are not stored and read back as 0.
pub fn parse_table(text: &str) -> Result<Vec<ReportRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        other => return Err(format!("expected header {HEADER:?}, found {other:?}")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(format!("line {}: expected 7 fields, found {}", i + 2, f.len()));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("line {}: {s:?}: {e}", i + 2));
        let opt = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(ReportRow {
            method: f[0].to_string(),
            k_bins: f[1].trim().parse().map_err(|e| format!("line {}: K: {e}", i + 2))?,
            dt: num(f[2])?,
            case: f[3].trim().parse().map_err(|e| format!("line {}: Case: {e}", i + 2))?,
            calc: num(f[4])?,
            reference: opt(f[5])?,
            abs_err: opt(f[6])?,
            wall_secs: 0.0,
        });
    }
    Ok(rows)
}

/// Concatenates tables and re-sorts them by the table key.
pub fn merge_tables(texts: &[String]) -> Result<String, String> {
    let mut all = Vec::new();
    for t in texts {
        all.extend(parse_table(t)?);
    }
    Ok(emit_table(&all))
}
