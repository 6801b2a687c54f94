//! Report emission: CSV schemas for sweep results and a fixed
//! significant-digit float formatter so files are byte-stable across runs.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::noise::SweepResult;

/// Formats with `sig` significant digits, trimming trailing zeros, in plain
/// decimal for moderate exponents and scientific notation otherwise
/// (printf `%g` behavior).
pub fn fmt_sig(x: f64, sig: usize) -> String {
    assert!(sig >= 1);
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    // Round to `sig` digits first; the exponent below accounts for carry.
    let sci = format!("{:.*e}", sig - 1, x);
    let epos = sci.rfind('e').expect("scientific notation");
    let exp: i32 = sci[epos + 1..].parse().expect("valid exponent");
    let mantissa = &sci[..epos];
    if exp < -4 || exp >= sig as i32 {
        let mantissa = trim_trailing_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let (sign, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", mantissa),
    };
    let digits: String = digits.chars().filter(|c| *c != '.').collect();
    let out = if exp >= 0 {
        let point = (exp + 1) as usize;
        if point >= digits.len() {
            format!("{}{}", digits.clone(), "0".repeat(point - digits.len()))
        } else {
            format!("{}.{}", &digits[..point], &digits[point..])
        }
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    format!("{sign}{}", trim_trailing_zeros(&out))
}

fn trim_trailing_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

/// Six significant digits, the precision used in all CSV output.
pub fn fmt_csv(x: f64) -> String {
    fmt_sig(x, 6)
}

/// Writes the per-trial table: one row per `(eta, trial)` pair.
pub fn write_trials_csv(result: &SweepResult, out: &mut impl Write) -> Result<()> {
    writeln!(out, "eta,trial,accuracy")?;
    for eta in &result.per_eta {
        for (trial, &acc) in eta.accuracies.iter().enumerate() {
            writeln!(out, "{},{},{}", fmt_csv(eta.eta), trial, fmt_csv(acc))?;
        }
    }
    Ok(())
}

/// Writes the per-eta summary table.
pub fn write_summary_csv(result: &SweepResult, out: &mut impl Write) -> Result<()> {
    writeln!(out, "eta,mean_accuracy,normalized_accuracy")?;
    for eta in &result.per_eta {
        writeln!(
            out,
            "{},{},{}",
            fmt_csv(eta.eta),
            fmt_csv(eta.mean_accuracy),
            fmt_csv(eta.normalized)
        )?;
    }
    Ok(())
}

/// Full-precision JSON document of the sweep, including per-layer weight
/// spreads.
pub fn sweep_json(result: &SweepResult) -> Result<String> {
    Ok(serde_json::to_string_pretty(result)?)
}

/// Reads a trials CSV (`eta,trial,accuracy`) back into per-eta groups,
/// sorted by eta ascending with trials in index order.
pub fn read_trials_csv(input: &mut impl BufRead) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(0, "empty trials file"))??;
    if header.trim() != "eta,trial,accuracy" {
        return Err(Error::format(
            0,
            format!("expected header 'eta,trial,accuracy', got '{header}'"),
        ));
    }
    let mut rows: Vec<(f64, usize, f64)> = Vec::new();
    let mut offset = header.len() + 1;
    for line in lines {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                start,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let eta: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(start, format!("bad eta '{}'", fields[0])))?;
        let trial: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::format(start, format!("bad trial index '{}'", fields[1])))?;
        let acc: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::format(start, format!("bad accuracy '{}'", fields[2])))?;
        if !(eta >= 0.0) {
            return Err(Error::format(start, format!("eta must be >= 0, got {eta}")));
        }
        rows.push((eta, trial, acc));
    }
    if rows.is_empty() {
        return Err(Error::format(offset, "no trial rows"));
    }
    rows.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite etas")
            .then(a.1.cmp(&b.1))
    });
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for (eta, _, acc) in rows {
        match groups.last_mut() {
            Some((e, accs)) if *e == eta => accs.push(acc),
            _ => groups.push((eta, vec![acc])),
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::summarize_trials;
    use std::io::BufReader;

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(0.0, 6), "0");
        assert_eq!(fmt_sig(0.8964, 6), "0.8964");
        assert_eq!(fmt_sig(0.01, 6), "0.01");
        assert_eq!(fmt_sig(1000.0, 6), "1000");
        assert_eq!(fmt_sig(123456.7, 6), "123457");
        assert_eq!(fmt_sig(-0.5, 6), "-0.5");
        assert_eq!(fmt_sig(1.23e-7, 6), "1.23e-7");
        assert_eq!(fmt_sig(0.123456789, 6), "0.123457");
        // rounding carry pushes the exponent past the sig-digit budget
        assert_eq!(fmt_sig(9.999999e5, 6), "1e6");
        assert_eq!(fmt_sig(999999.0, 6), "999999");
        assert_eq!(fmt_sig(1234567.0, 6), "1.23457e6");
        assert_eq!(fmt_sig(0.9999999, 3), "1");
    }

    #[test]
    fn trials_roundtrip_through_csv() {
        let groups = vec![
            (0.0, vec![0.9, 0.9]),
            (0.1, vec![0.8, 0.85, 0.75]),
        ];
        let result = summarize_trials(&groups, 0.9).unwrap();
        let mut buf = Vec::new();
        write_trials_csv(&result, &mut buf).unwrap();
        let parsed = read_trials_csv(&mut BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].0, 0.0);
        assert_eq!(parsed[0].1, vec![0.9, 0.9]);
        assert_eq!(parsed[1].1, vec![0.8, 0.85, 0.75]);
    }

    #[test]
    fn bad_header_is_a_format_error() {
        let mut input = BufReader::new("eta,acc\n0.1,0.5\n".as_bytes());
        assert!(matches!(
            read_trials_csv(&mut input),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn bad_field_reports_offset() {
        let text = "eta,trial,accuracy\n0.1,0,oops\n";
        let mut input = BufReader::new(text.as_bytes());
        match read_trials_csv(&mut input) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn summary_csv_shape() {
        let groups = vec![(0.05, vec![0.5, 0.7])];
        let result = summarize_trials(&groups, 0.8).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&result, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "eta,mean_accuracy,normalized_accuracy\n0.05,0.6,0.75\n"
        );
    }
}
