use std::path::Path;

use crate::error::{Error, Result};

use super::{LabeledRegion, Polarity};

/// One detected event on a probability track.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub onset: f64,
    pub offset: f64,
    pub score: f32,
}

/// Parses a DCASE-style annotation CSV: header
/// `Audiofilename,Starttime,Endtime,<CLASS>,...` with POS/NEG/UNK cells.
/// Every non-UNK cell becomes one region; UNK cells are kept with
/// `Polarity::Unknown` so the indexer can exclude them from both pools.
/// Rows with `Starttime >= Endtime` are rejected with a logged diagnostic.
pub fn parse_annotation_csv(path: &Path) -> Result<Vec<(String, Vec<LabeledRegion>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "Audiofilename" || cols[1] != "Starttime" || cols[2] != "Endtime"
    {
        return Err(Error::Format(format!(
            "{}: expected header Audiofilename,Starttime,Endtime,<CLASS>,... got {:?}",
            path.display(),
            cols
        )));
    }
    let class_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();

    let mut per_file: Vec<(String, Vec<LabeledRegion>)> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let file = record.get(0).unwrap_or("").to_string();
        let onset: f64 = record
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                Error::Format(format!("{}: row {}: bad Starttime", path.display(), row_idx + 2))
            })?;
        let offset: f64 = record
            .get(2)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                Error::Format(format!("{}: row {}: bad Endtime", path.display(), row_idx + 2))
            })?;
        if onset >= offset {
            log::warn!(
                "{}: row {}: Starttime {} >= Endtime {}, row rejected",
                path.display(),
                row_idx + 2,
                onset,
                offset
            );
            continue;
        }
        let mut regions = Vec::new();
        for (ci, class) in class_names.iter().enumerate() {
            let value = record.get(3 + ci).unwrap_or("").trim();
            let polarity = match value {
                "POS" => Polarity::Positive,
                "NEG" => Polarity::Negative,
                "UNK" => Polarity::Unknown,
                "" => continue,
                other => {
                    log::warn!(
                        "{}: row {}: unknown label {:?} for class {}, treated as UNK",
                        path.display(),
                        row_idx + 2,
                        other,
                        class
                    );
                    Polarity::Unknown
                }
            };
            regions.push(LabeledRegion {
                onset,
                offset,
                class_id: class.clone(),
                polarity,
            });
        }
        match per_file.iter_mut().find(|(f, _)| *f == file) {
            Some((_, list)) => list.extend(regions),
            None => per_file.push((file, regions)),
        }
    }
    Ok(per_file)
}

/// Writes detections in the DCASE submission format:
/// `Audiofilename,Starttime,Endtime`, 6-decimal seconds, sorted by
/// (file, onset).
pub fn write_detections_csv(events: &[(String, DetectionEvent)], path: &Path) -> Result<()> {
    let mut rows: Vec<&(String, DetectionEvent)> = events.iter().collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.onset.partial_cmp(&b.1.onset).expect("finite onsets"))
    });
    let mut out = String::from("Audiofilename,Starttime,Endtime\n");
    for (file, ev) in rows {
        debug_assert!(ev.onset < ev.offset);
        out.push_str(&format!("{},{:.6},{:.6}\n", file, ev.onset, ev.offset));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a detections CSV back as (file, event) pairs; scores are not part
/// of the format and come back as 1.0.
pub fn read_detections_csv(path: &Path) -> Result<Vec<(String, DetectionEvent)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["Audiofilename", "Starttime", "Endtime"] {
        return Err(Error::Format(format!(
            "{}: expected header Audiofilename,Starttime,Endtime",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let file = record.get(0).unwrap_or("").to_string();
        let onset: f64 = record
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad Starttime", path.display())))?;
        let offset: f64 = record
            .get(2)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad Endtime", path.display())))?;
        out.push((
            file,
            DetectionEvent {
                onset,
                offset,
                score: 1.0,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn single_positive_row() {
        let (_d, path) = write_tmp("Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,POS\n");
        let parsed = parse_annotation_csv(&path).unwrap();
        assert_eq!(parsed.len(), 1);
        let (file, regions) = &parsed[0];
        assert_eq!(file, "a.wav");
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].onset, 1.0);
        assert_eq!(regions[0].offset, 2.0);
        assert_eq!(regions[0].polarity, Polarity::Positive);
        assert_eq!(regions[0].class_id, "Q");
    }

    #[test]
    fn unk_rows_are_kept_as_unknown() {
        let (_d, path) = write_tmp("Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,UNK\n");
        let parsed = parse_annotation_csv(&path).unwrap();
        assert_eq!(parsed[0].1[0].polarity, Polarity::Unknown);
    }

    #[test]
    fn pos_then_neg_rows() {
        let (_d, path) = write_tmp(
            "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,POS\na.wav,3.0,4.0,NEG\n",
        );
        let parsed = parse_annotation_csv(&path).unwrap();
        let regions = &parsed[0].1;
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].polarity, Polarity::Positive);
        assert_eq!(regions[1].polarity, Polarity::Negative);
    }

    #[test]
    fn missing_header_is_parse_error() {
        let (_d, path) = write_tmp("foo,bar\n1,2\n");
        assert!(matches!(
            parse_annotation_csv(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn inverted_times_rejected() {
        let (_d, path) = write_tmp(
            "Audiofilename,Starttime,Endtime,Q\na.wav,2.0,1.0,POS\na.wav,3.0,4.0,POS\n",
        );
        let parsed = parse_annotation_csv(&path).unwrap();
        assert_eq!(parsed[0].1.len(), 1);
        assert_eq!(parsed[0].1[0].onset, 3.0);
    }

    #[test]
    fn detections_empty_and_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.csv");
        write_detections_csv(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "Audiofilename,Starttime,Endtime\n"
        );

        write_detections_csv(
            &[(
                "a.wav".into(),
                DetectionEvent {
                    onset: 1.5,
                    offset: 2.25,
                    score: 0.9,
                },
            )],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("a.wav,1.500000,2.250000"));
    }

    #[test]
    fn detections_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.csv");
        let events = vec![
            (
                "b.wav".to_string(),
                DetectionEvent {
                    onset: 3.123456,
                    offset: 4.5,
                    score: 1.0,
                },
            ),
            (
                "a.wav".to_string(),
                DetectionEvent {
                    onset: 0.25,
                    offset: 0.5,
                    score: 1.0,
                },
            ),
        ];
        write_detections_csv(&events, &path).unwrap();
        let back = read_detections_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        // sorted by (file, onset)
        assert_eq!(back[0].0, "a.wav");
        for (file, ev) in &back {
            let orig = events.iter().find(|(f, _)| f == file).unwrap();
            assert!((ev.onset - orig.1.onset).abs() < 1e-6);
            assert!((ev.offset - orig.1.offset).abs() < 1e-6);
        }
    }
}
