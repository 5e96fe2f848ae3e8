use std::fmt::Write as _;
use std::path::Path;

use super::BeatSequence;
use crate::error::{Error, IoContext, Result};
use crate::hingenet::ActivationPair;
use crate::tensorcore::{Shape, Tensor};

/// One beat per line, `time<TAB>position` with six decimals; the position
/// column is omitted when the sequence carries none.
pub fn format_beats(beats: &BeatSequence) -> String {
    let mut out = String::new();
    for (i, t) in beats.times().iter().enumerate() {
        match beats.positions() {
            Some(p) => writeln!(out, "{t:.6}\t{}", p[i]),
            None => writeln!(out, "{t:.6}"),
        }
        .expect("writing to a String");
    }
    out
}

/// Parse whitespace-separated `time [position]` lines. Blank lines and
/// lines starting with `#` are skipped. Either every line has a position
/// or none does.
pub fn parse_beats(text: &str) -> Result<BeatSequence> {
    let mut times = Vec::new();
    let mut positions = Vec::new();
    let mut with_pos: Option<bool> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Parse { line, message: m };
        let mut fields = s.split_whitespace();
        let t: f64 = fields
            .next()
            .expect("non-empty line")
            .parse()
            .map_err(|_| err(format!("bad time in {s:?}")))?;
        if !t.is_finite() || t < 0.0 {
            return Err(err(format!("time {t} is not a non-negative number")));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(err(format!("time {t} does not increase past {prev}")));
            }
        }
        let pos = fields
            .next()
            .map(|p| p.parse::<u32>().ok().filter(|&v| v > 0).ok_or_else(|| err(format!("bad position {p:?}"))))
            .transpose()?;
        if fields.next().is_some() {
            return Err(err("more than two fields".into()));
        }
        match (with_pos, pos) {
            (None, _) => with_pos = Some(pos.is_some()),
            (Some(true), None) | (Some(false), Some(_)) => {
                return Err(err("position column present on some lines only".into()))
            }
            _ => {}
        }
        times.push(t);
        positions.extend(pos);
    }
    let positions = (with_pos == Some(true)).then_some(positions);
    BeatSequence::new(times, positions)
}

pub fn save_beats(beats: &BeatSequence, path: &Path) -> Result<()> {
    std::fs::write(path, format_beats(beats)).at(path)
}

pub fn load_beats(path: &Path) -> Result<BeatSequence> {
    parse_beats(&std::fs::read_to_string(path).at(path)?)
}

/// `# frame_rate <fps>` followed by one `beat<TAB>downbeat` line per frame.
pub fn write_activations(pair: &ActivationPair) -> Result<String> {
    if pair.beat.shape().b != 1 {
        return Err(Error::invalid("activation files hold a single item"));
    }
    let mut out = format!("# frame_rate {}\n", pair.frame_rate);
    for (b, d) in pair.beat_row(0).iter().zip(pair.downbeat_row(0)) {
        writeln!(out, "{b}\t{d}").expect("writing to a String");
    }
    Ok(out)
}

pub fn parse_activations(text: &str) -> Result<ActivationPair> {
    let mut lines = text.lines().enumerate();
    let frame_rate = match lines.next() {
        Some((_, h)) => h
            .strip_prefix("# frame_rate ")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| *v > 0.0 && v.is_finite())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected header \"# frame_rate <fps>\"".into(),
            })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty activation file".into(),
            })
        }
    };
    let mut beat = Vec::new();
    let mut down = Vec::new();
    for (idx, raw) in lines {
        let s = raw.trim();
        if s.is_empty() {
            continue;
        }
        let err = || Error::Parse {
            line: idx + 1,
            message: format!("expected two probabilities, got {s:?}"),
        };
        let mut it = s.split_whitespace().map(|v| v.parse::<f64>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(b)), Some(Ok(d)), None) if b.is_nan() || d.is_nan() => {
                return Err(Error::Numeric(format!("NaN activation at line {}", idx + 1)));
            }
            (Some(Ok(b)), Some(Ok(d)), None) if (0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&d) => {
                beat.push(b);
                down.push(d);
            }
            _ => return Err(err()),
        }
    }
    let n = beat.len();
    Ok(ActivationPair {
        beat: Tensor::new(Shape::new(1, 1, n), beat)?,
        downbeat: Tensor::new(Shape::new(1, 1, n), down)?,
        frame_rate,
    })
}

pub fn save_activations(pair: &ActivationPair, path: &Path) -> Result<()> {
    std::fs::write(path, write_activations(pair)?).at(path)
}

pub fn load_activations(path: &Path) -> Result<ActivationPair> {
    parse_activations(&std::fs::read_to_string(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beats_round_trip() {
        let b = BeatSequence::new(vec![0.5, 1.25, 2.0], Some(vec![1, 2, 3])).unwrap();
        let text = format_beats(&b);
        assert_eq!(text, "0.500000\t1\n1.250000\t2\n2.000000\t3\n");
        assert_eq!(parse_beats(&text).unwrap(), b);
    }

    #[test]
    fn decreasing_times_report_line() {
        match parse_beats("1.0 1\n0.5 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn activations_round_trip() {
        let pair = ActivationPair {
            beat: Tensor::new(Shape::new(1, 1, 3), vec![0.1, 0.123456789012345, 0.9]).unwrap(),
            downbeat: Tensor::new(Shape::new(1, 1, 3), vec![0.0, 1.0, 0.5]).unwrap(),
            frame_rate: 50.0,
        };
        let back = parse_activations(&write_activations(&pair).unwrap()).unwrap();
        assert_eq!(back.beat, pair.beat);
        assert_eq!(back.downbeat, pair.downbeat);
        assert_eq!(back.frame_rate, 50.0);
    }
}
