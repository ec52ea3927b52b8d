//! Volume comparison metrics. All reductions accumulate in `f64`.
//!
//! Dice is computed per volume pair (no pooling across volumes).

use crate::error::Result;
use crate::volume::{LabelVolume, Volume3};

/// √(mean((a − b)²)).
pub fn rmse(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.data().len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the volumes are
/// identical.
pub fn psnr(a: &Volume3, b: &Volume3, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(crate::Error::Parameter(format!("data_range must be positive, got {data_range}")));
    }
    let e = rmse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * data_range.log10() - 20.0 * e.log10())
}

/// `2|A∩B| / (|A| + |B|)` over voxels equal to `label`. Two empty sets score
/// 1.0; one empty and one nonempty set score 0.0.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as u64;
        nb += ib as u64;
        both += (ia && ib) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// `%g`-style rendering with six significant digits; `inf` / `-inf` / `nan`
/// for non-finite values.
pub fn format_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    // Exponent after rounding to six digits.
    let sci = format!("{:.5e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, v)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One `name=value` line.
pub fn metric_line(name: &str, value: f64) -> String {
    format!("{name}={}", format_sig6(value))
}
