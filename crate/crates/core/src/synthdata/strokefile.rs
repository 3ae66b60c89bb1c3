//! Newline-delimited stroke records in the QuickDraw simplified layout:
//! `{"word": <category>, "drawing": [[[x...], [y...]], ...]}`.

use serde::{Deserialize, Serialize};

use super::sketch::{normalize_strokes, Point, StrokeSketch};
use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ParsedStrokes {
    pub sketches: Vec<StrokeSketch>,
    /// Records skipped because their drawing was empty or had zero extent.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct StrokeRecord {
    #[serde(default)]
    pub word: String,
    pub drawing: Vec<Vec<Vec<f64>>>,
}

impl StrokeRecord {
    pub fn from_sketch(sketch: &StrokeSketch) -> Self {
        let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0);
        Self {
            word: sketch.category().to_string(),
            drawing: sketch
                .strokes()
                .iter()
                .map(|s| vec![s.iter().map(|p| q(p.0)).collect(), s.iter().map(|p| q(p.1)).collect()])
                .collect(),
        }
    }

    /// Converts raw coordinates into a bounding-box normalised sketch.
    /// `Ok(None)` for empty or zero-extent drawings.
    pub fn into_sketch(self) -> std::result::Result<Option<StrokeSketch>, String> {
        let mut strokes: Vec<Vec<Point>> = Vec::with_capacity(self.drawing.len());
        for (i, stroke) in self.drawing.iter().enumerate() {
            if stroke.len() < 2 {
                return Err(format!("stroke {i} needs x and y arrays"));
            }
            let (xs, ys) = (&stroke[0], &stroke[1]);
            if xs.len() != ys.len() {
                return Err(format!("stroke {i} has {} x values but {} y values", xs.len(), ys.len()));
            }
            if xs.iter().chain(ys).any(|v| !v.is_finite()) {
                return Err(format!("stroke {i} has a non-finite coordinate"));
            }
            let mut pts: Vec<Point> = xs.iter().copied().zip(ys.iter().copied()).collect();
            match pts.len() {
                0 => continue,
                1 => pts.push(pts[0]),
                _ => {}
            }
            strokes.push(pts);
        }
        if strokes.is_empty() {
            return Ok(None);
        }
        let Some(normalized) = normalize_strokes(&strokes) else {
            return Ok(None);
        };
        StrokeSketch::new(self.word, normalized)
            .map(Some)
            .map_err(|e| e.to_string())
    }
}

/// Parses a stroke file, preserving record order. Blank lines are ignored;
/// line numbers in errors are 1-based.
pub fn parse_stroke_file(bytes: &[u8]) -> Result<ParsedStrokes> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MalformedRecord {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut out = ParsedStrokes::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: StrokeRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        match record
            .into_sketch()
            .map_err(|message| Error::MalformedRecord { line: line_no, message })?
        {
            Some(sk) => out.sketches.push(sk),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Writes one record per sketch with coordinates quantised to 0..=255.
pub fn serialize_stroke_file(sketches: &[StrokeSketch]) -> String {
    let mut out = String::new();
    for sk in sketches {
        out.push_str(&serde_json::to_string(&StrokeRecord::from_sketch(sk)).expect("record serialises"));
        out.push('\n');
    }
    out
}
