//! CSV and JSON file formats.
//!
//! | file | columns |
//! |---|---|
//! | detections | `frame,track_id,xmin,ymin,xmax,ymax,dx,dy,dz,theta_local` (last four optional) |
//! | trajectories | `frame,track_id,x,y` (meters, ego frame) |
//! | solved | `frame,track_id,tx,ty,tz,config_index,residual,flag` |
//! | predictions | `window_id,track_id,step,x,y` (meters) |
//! | patches | `frame,track_id,f0..f258` |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{Box2D, CameraIntrinsics};
use crate::pipeline::{Detection, SolvedDetection};
use crate::pose_regressor::PoseEstimate;
use crate::synth::{PatchFeatures, PATCH_FEATURES};
use crate::track_assembly::Observation;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Invalid {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        if e.is_io() {
            invalid(path, e.to_string())
        } else {
            IoError::Parse {
                path: path.to_path_buf(),
                line: e.line() as u64,
                column: e.column() as u64,
                message: e.to_string(),
            }
        }
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Camera JSON `{fx, fy, cx, cy}` with optional `width`, `height`.
pub fn read_camera(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate().map_err(|e| invalid(path, e.to_string()))?;
    Ok(k)
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line());
    let column = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.field().map_or(0, |f| f + 1),
        _ => 0,
    };
    if let csv::ErrorKind::Io(_) = e.kind() {
        return invalid(path, e.to_string());
    }
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: e.to_string(),
    }
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    reader
        .deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    frame: i64,
    track_id: u64,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
    dx: Option<f64>,
    dy: Option<f64>,
    dz: Option<f64>,
    theta_local: Option<f64>,
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    write_rows(
        path,
        detections.iter().map(|d| {
            let b = d.box2d;
            let pose = d.pose.as_ref();
            DetectionRow {
                frame: d.frame,
                track_id: d.track_id,
                xmin: b.x_min,
                ymin: b.y_min,
                xmax: b.x_max,
                ymax: b.y_max,
                dx: pose.map(|p| p.d[0]),
                dy: pose.map(|p| p.d[1]),
                dz: pose.map(|p| p.d[2]),
                theta_local: pose.map(|p| p.theta_local),
            }
        }),
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let rows: Vec<DetectionRow> = read_rows(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            let box2d = Box2D::new(r.xmin, r.ymin, r.xmax, r.ymax)
                .map_err(|e| invalid(path, format!("line {line}: {e}")))?;
            let pose = match (r.dx, r.dy, r.dz, r.theta_local) {
                (Some(dx), Some(dy), Some(dz), Some(theta_local)) => Some(PoseEstimate {
                    d: [dx, dy, dz],
                    theta_local,
                    confidence: 1.0,
                }),
                (None, None, None, None) => None,
                _ => {
                    return Err(invalid(
                        path,
                        format!("line {line}: pose columns dx,dy,dz,theta_local must be all set or all empty"),
                    ))
                }
            };
            Ok(Detection {
                frame: r.frame,
                track_id: r.track_id,
                box2d,
                pose,
            })
        })
        .collect()
}

pub fn write_trajectories(path: &Path, observations: &[Observation]) -> Result<()> {
    write_rows(path, observations)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Observation>> {
    read_rows(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct SolvedRow {
    frame: i64,
    track_id: u64,
    tx: Option<f64>,
    ty: Option<f64>,
    tz: Option<f64>,
    config_index: Option<usize>,
    residual: Option<f64>,
    flag: Option<String>,
}

pub fn write_solved(path: &Path, solved: &[SolvedDetection]) -> Result<()> {
    write_rows(
        path,
        solved.iter().map(|s| SolvedRow {
            frame: s.frame,
            track_id: s.track_id,
            tx: s.translation.map(|t| t[0]),
            ty: s.translation.map(|t| t[1]),
            tz: s.translation.map(|t| t[2]),
            config_index: s.config_index,
            residual: s.residual,
            flag: s.flag.clone(),
        }),
    )
}

pub fn read_solved(path: &Path) -> Result<Vec<SolvedDetection>> {
    let rows: Vec<SolvedRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| SolvedDetection {
            frame: r.frame,
            track_id: r.track_id,
            translation: match (r.tx, r.ty, r.tz) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => None,
            },
            config_index: r.config_index,
            residual: r.residual,
            flag: r.flag.filter(|f| !f.is_empty()),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub window_id: usize,
    pub track_id: u64,
    /// 1-based future step.
    pub step: usize,
    pub x: f64,
    pub y: f64,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Writes prediction rows to any sink, e.g. stdout.
pub fn write_predictions_to(sink: impl std::io::Write, rows: &[PredictionRow]) -> std::io::Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    read_rows(path)
}

pub fn write_patches<'a>(path: &Path, patches: impl IntoIterator<Item = (i64, u64, &'a PatchFeatures)>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["frame".to_string(), "track_id".to_string()];
    header.extend((0..PATCH_FEATURES).map(|i| format!("f{i}")));
    writer.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (frame, id, patch) in patches {
        let mut record = vec![frame.to_string(), id.to_string()];
        record.extend(patch.0.iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_patches(path: &Path) -> Result<BTreeMap<(i64, u64), PatchFeatures>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != PATCH_FEATURES + 2 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line,
                column: record.len() as u64,
                message: format!("expected {} columns, found {}", PATCH_FEATURES + 2, record.len()),
            });
        }
        let field = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| IoError::Parse {
                path: path.to_path_buf(),
                line,
                column: i as u64 + 1,
                message: format!("not a number: {:?}", &record[i]),
            })
        };
        let frame = field(0)? as i64;
        let id = field(1)? as u64;
        let values = (2..record.len()).map(field).collect::<Result<Vec<_>>>()?;
        out.insert((frame, id), PatchFeatures(values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("stmha-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn detections_round_trip_with_and_without_pose() {
        let path = tmp("det.csv");
        let box2d = Box2D::new(10.0, 20.0, 110.0, 95.5).unwrap();
        let dets = vec![
            Detection {
                frame: 0,
                track_id: 3,
                box2d,
                pose: Some(PoseEstimate {
                    d: [1.8, 1.6, 4.5],
                    theta_local: -0.25,
                    confidence: 1.0,
                }),
            },
            Detection {
                frame: 1,
                track_id: 3,
                box2d,
                pose: None,
            },
        ];
        write_detections(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame,track_id,xmin,ymin,xmax,ymax,dx,dy,dz,theta_local\n"));
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    #[test]
    fn bad_json_reports_line_and_column() {
        let path = tmp("bad.json");
        std::fs::write(&path, "{\n  \"fx\": 1000,\n  \"fy\": oops\n}").unwrap();
        match read_camera(&path) {
            Err(IoError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 9)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_csv_field_reports_line_and_column() {
        let path = tmp("bad.csv");
        std::fs::write(&path, "frame,track_id,x,y\n0,1,2.0,3.0\n1,1,abc,3.0\n").unwrap();
        match read_trajectories(&path) {
            Err(IoError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_pose_columns_are_rejected() {
        let path = tmp("partial.csv");
        std::fs::write(
            &path,
            "frame,track_id,xmin,ymin,xmax,ymax,dx,dy,dz,theta_local\n0,0,1,1,5,5,1.8,,4.5,0.1\n",
        )
        .unwrap();
        assert!(matches!(read_detections(&path), Err(IoError::Invalid { .. })));
    }
}
