//! Rater score ingestion, validated and resolved against the blinding map.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::panels::BlindingMap;
use super::Criterion;
use crate::{Error, Result};

/// One binary judgement of one tile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterScore {
    pub rater_id: String,
    pub panel_id: usize,
    pub position: usize,
    pub criterion: Criterion,
    pub score: u8,
}

/// A [`RaterScore`] with its tile resolved to the method behind it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedScore {
    pub rater_id: String,
    pub panel_id: usize,
    pub method_id: String,
    pub criterion: Criterion,
    pub score: bool,
}

#[derive(Deserialize)]
struct RawRow {
    rater_id: String,
    panel_id: usize,
    position: usize,
    criterion: Criterion,
    score: String,
}

/// Reads a filled-in score sheet from `path`.
pub fn ingest_scores(path: &Path, blinding: &BlindingMap) -> Result<Vec<ResolvedScore>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_scores(file, blinding)
}

/// Parses score rows, rejecting non-binary scores, unknown panels or
/// positions, blank rater ids and duplicate judgements.
pub fn parse_scores(reader: impl Read, blinding: &BlindingMap) -> Result<Vec<ResolvedScore>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<RawRow>().enumerate() {
        let line = i + 2;
        let row = row?;
        let score = match row.score.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation(format!(
                    "line {line}: score must be 0 or 1, got `{other}`"
                )))
            }
        };
        if row.rater_id.trim().is_empty() {
            return Err(Error::Validation(format!("line {line}: empty rater_id")));
        }
        if !blinding.has_panel(row.panel_id) {
            return Err(Error::Validation(format!("line {line}: unknown panel {}", row.panel_id)));
        }
        let method_id = blinding.method(row.panel_id, row.position).ok_or_else(|| {
            Error::Validation(format!(
                "line {line}: panel {} has no position {}",
                row.panel_id, row.position
            ))
        })?;
        let key = (row.rater_id.clone(), row.panel_id, row.position, row.criterion);
        if !seen.insert(key) {
            return Err(Error::Validation(format!(
                "line {line}: duplicate score by `{}` for panel {} position {} ({})",
                row.rater_id,
                row.panel_id,
                row.position,
                row.criterion.as_str()
            )));
        }
        out.push(ResolvedScore {
            rater_id: row.rater_id,
            panel_id: row.panel_id,
            method_id: method_id.to_string(),
            criterion: row.criterion,
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::panels::BlindingEntry;

    fn map() -> BlindingMap {
        BlindingMap::from_entries((0..2).flat_map(|p| {
            [("a", 0), ("b", 1)].map(|(m, pos)| BlindingEntry {
                panel_id: p,
                position: if p == 0 { pos } else { 1 - pos },
                method_id: m.into(),
            })
        }))
        .unwrap()
    }

    const HEADER: &str = "rater_id,panel_id,position,criterion,score\n";

    #[test]
    fn resolves_positions_to_methods() {
        let csv = format!("{HEADER}r1,0,0,identity,1\nr1,1,0,healthiness,0\n");
        let s = parse_scores(csv.as_bytes(), &map()).unwrap();
        assert_eq!(s[0].method_id, "a");
        assert!(s[0].score);
        assert_eq!(s[1].method_id, "b");
        assert_eq!(s[1].criterion, Criterion::Healthiness);
    }

    #[test]
    fn rejects_bad_rows() {
        for body in [
            "r1,0,0,identity,3\n",
            "r1,7,0,identity,1\n",
            "r1,0,5,identity,1\n",
            "r1,0,0,realism,1\n",
            ",0,0,identity,1\n",
            "r1,0,0,identity,1\nr1,0,0,identity,0\n",
        ] {
            let csv = format!("{HEADER}{body}");
            assert!(parse_scores(csv.as_bytes(), &map()).is_err(), "{body}");
        }
    }
}
